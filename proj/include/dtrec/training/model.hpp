#pragma once

#include "dtrec/arh/halting.hpp"
#include "dtrec/backbone/encoder.hpp"

#include <memory>
#include <string>
#include <vector>

namespace dtrec {

enum class Variant { kBase, kHpsConstK, kHpsNoWarmup, kHps, kHpsRee, kHpsArh };
enum class HaltMode { kNone, kRee, kArh };

Variant parse_variant(const std::string& name);
std::string to_string(Variant variant);
const std::vector<Variant>& all_variants();

struct VariantTraits {
  bool prototypes = false;
  bool constant_k = false;
  bool warmup = true;
  HaltMode halting = HaltMode::kNone;
};

VariantTraits traits(Variant variant);

struct ModelConfig {
  BackboneConfig backbone;
  Variant variant = Variant::kHpsArh;
  int halt_hidden = 16;

  void validate() const;
};

/// Inference output for one batch.
template <typename S>
struct Prediction {
  Matrix<S> log_probs;                  // [B x |I|] at each row's exit step
  std::vector<int> exit_steps;          // 0 only when the model has no reasoning steps
  std::vector<Matrix<S>> states;        // r_0 .. r_T values
  std::vector<std::vector<double>> halt_probs;  // per row, steps 1..T (empty without a halting head)
};

/// Backbone plus the optional halting head selected by the variant.
template <typename S>
class Recommender {
 public:
  Recommender(const ModelConfig& config, int num_items, std::uint64_t seed);
  Recommender(const Recommender&) = delete;
  Recommender& operator=(const Recommender&) = delete;

  const ModelConfig& config() const { return config_; }
  VariantTraits variant_traits() const { return traits(config_.variant); }
  int steps() const { return config_.backbone.reasoning_steps; }
  int num_items() const { return encoder_->num_items(); }
  ParameterStore<S>& store() { return store_; }
  const ParameterStore<S>& store() const { return store_; }
  const SequenceEncoder<S>& encoder() const { return *encoder_; }

  /// Runs all T steps; fills indicators and halting probabilities when a head exists.
  ReasoningTrace<S> forward(Tape<S>& tape, const Batch& batch, const ForwardOptions& options) const;

  /// Evaluation path. Rows without a halting head read step T.
  Prediction<S> predict(const Batch& batch, const HaltPolicy& policy) const;

 private:
  ModelConfig config_;
  ParameterStore<S> store_;
  std::unique_ptr<SequenceEncoder<S>> encoder_;
  std::unique_ptr<HaltingHead<S>> halting_;
  std::unique_ptr<ReeHead<S>> ree_;
};

}  // namespace dtrec
