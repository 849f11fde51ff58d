#pragma once

#include "dtrec/data/synthetic.hpp"
#include "dtrec/training/trainer.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtrec::cli {

/// Usage or configuration problem; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfigKey {
  const char* section;
  const char* key;
  const char* default_value;
  const char* help;
};

/// Every accepted `section.key`, in the order they are echoed.
const std::vector<ConfigKey>& config_schema();

/// Flat `section.key -> value` map over the schema, starting from defaults.
class RunConfig {
 public:
  RunConfig();

  /// INI file with `[section]` headers and `key = value` lines. Unknown
  /// sections or keys are rejected.
  void load_file(const std::filesystem::path& path);
  void set(const std::string& dotted_key, const std::string& value);
  /// Applies `section.key=value`.
  void apply_override(const std::string& assignment);

  const std::string& get(const std::string& dotted_key) const;
  int get_int(const std::string& dotted_key) const;
  std::uint64_t get_u64(const std::string& dotted_key) const;
  double get_double(const std::string& dotted_key) const;
  bool get_bool(const std::string& dotted_key) const;
  std::vector<std::string> get_list(const std::string& dotted_key) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  /// INI rendering of every value, defaults included.
  std::string resolved_text() const;

  SyntheticTaxonomy taxonomy() const;
  /// Cohorts from synthetic.cohorts (`users:shift:min_len:max_len;...`), or a
  /// single cohort from the scalar keys when that list is empty.
  std::vector<Cohort> cohorts() const;
  ModelConfig model() const;
  TrainConfig train() const;
  EvalOptions eval(const ModelConfig& model) const;

  /// Builds every typed view once so bad values fail early.
  void validate() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace dtrec::cli
