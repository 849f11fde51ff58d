#include "dtrec/cli/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <sstream>

namespace dtrec::cli {

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"run", "seed", "0", "root seed for every random stream"},
      {"run", "out_dir", "runs", "parent directory for run directories"},
      {"run", "name", "", "run directory name (defaults to the command)"},

      {"data", "path", "", "interactions TSV: user, item, timestamp"},
      {"data", "labels", "", "optional item label TSV: item, leaf, category"},
      {"data", "users", "", "optional user label TSV: user, shift_prob"},
      {"data", "min_count", "5", "k-core threshold for users and items"},

      {"synthetic", "branching", "4,4,4", "taxonomy branching factor per level"},
      {"synthetic", "items_per_leaf", "10", "items owned by each leaf"},
      {"synthetic", "users", "2000", "number of users (single cohort)"},
      {"synthetic", "shift_prob", "0.2", "probability the latent leaf is resampled"},
      {"synthetic", "sibling_share", "0", "share of shifts that stay among siblings"},
      {"synthetic", "popularity_skew", "1", "Zipf exponent of item popularity inside a leaf"},
      {"synthetic", "min_length", "10", "shortest generated sequence"},
      {"synthetic", "max_length", "30", "longest generated sequence"},
      {"synthetic", "cohorts", "", "users:shift_prob:min_length:max_length;... (overrides the single cohort)"},

      {"model", "backbone", "attention", "attention or gru"},
      {"model", "variant", "hps_arh", "base, hps_kconst, hps_nowarmup, hps, hps_ree, hps_arh"},
      {"model", "d_model", "64", "embedding width"},
      {"model", "n_layers", "2", "encoder layers"},
      {"model", "n_heads", "2", "attention heads"},
      {"model", "max_len", "50", "longest history fed to the encoder"},
      {"model", "dropout", "0.2", "dropout rate"},
      {"model", "reasoning_steps", "3", "maximum reasoning steps T (0..5)"},
      {"model", "halt_hidden", "16", "hidden width of the halting head"},

      {"train", "epochs", "100", "epoch budget"},
      {"train", "batch_size", "128", "training batch size"},
      {"train", "learning_rate", "0.001", "Adam step size"},
      {"train", "beta1", "0.9", "Adam first-moment decay"},
      {"train", "beta2", "0.999", "Adam second-moment decay"},
      {"train", "epsilon", "1e-08", "Adam epsilon"},
      {"train", "grad_clip", "5", "global gradient-norm clip"},
      {"train", "patience", "10", "early-stopping patience on validation NDCG@10"},
      {"train", "examples", "sampled_prefix", "all_prefixes, last_only or sampled_prefix"},
      {"train", "eval_batch_size", "256", "batch size for validation and test ranking"},
      {"train", "checkpoint_every", "0", "also write a checkpoint every N epochs (0 = final only)"},

      {"hps", "k0", "10", "cluster count at the first step"},
      {"hps", "k_upper", "3000", "cluster count cap"},
      {"hps", "alpha", "0.5", "granularity growth rate"},
      {"hps", "lambda_p", "0.1", "prototype loss weight"},
      {"hps", "warmup_epochs", "10", "epochs to ramp the prototype loss weight"},
      {"hps", "include_step0", "true", "also supervise r_0 with the coarsest level"},
      {"hps", "kmeans_restarts", "1", "k-means++ initializations per fit"},
      {"hps", "kmeans_max_iterations", "100", "Lloyd iteration cap"},
      {"hps", "kmeans_tolerance", "0.0001", "center-shift convergence tolerance"},

      {"arh", "threshold", "0.5", "halting threshold delta"},
      {"arh", "min_steps", "1", "earliest step an exit may happen"},

      {"eval", "checkpoint", "", "checkpoint to evaluate or analyze"},
      {"eval", "split", "test", "test or valid"},
      {"eval", "threads", "0", "evaluation threads (0 = DTREC_THREADS or all cores)"},
      {"eval", "groups", "5", "length groups for the steps-by-length table"},

      {"ablate", "variants", "base,hps_kconst,hps_nowarmup,hps,hps_ree,hps_arh", "variants to sweep"},
      {"ablate", "seeds", "1,2,3", "seeds to sweep"},
  };
  return schema;
}

namespace {

const ConfigKey* find_key(const std::string& dotted) {
  for (const auto& k : config_schema())
    if (dotted == std::string(k.section) + "." + k.key) return &k;
  return nullptr;
}

bool known_section(const std::string& name) {
  for (const auto& k : config_schema())
    if (name == k.section) return true;
  return false;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": '" + text + "' is not a valid number");
  return value;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : config_schema()) values_[std::string(k.section) + "." + k.key] = k.default_value;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("key '" + section + "' is outside any [section]");
    if (!known_section(section)) throw ConfigError("unknown config section [" + section + "]");
    for (const auto& [key, value] : body) set(section + "." + key, value.data());
  }
}

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  if (find_key(dotted_key) == nullptr) throw ConfigError("unknown config key '" + dotted_key + "'");
  values_[dotted_key] = trim(value);
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like section.key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

const std::string& RunConfig::get(const std::string& dotted_key) const {
  const auto it = values_.find(dotted_key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + dotted_key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& k) const { return parse_number<int>(k, get(k)); }
std::uint64_t RunConfig::get_u64(const std::string& k) const { return parse_number<std::uint64_t>(k, get(k)); }
double RunConfig::get_double(const std::string& k) const { return parse_number<double>(k, get(k)); }

bool RunConfig::get_bool(const std::string& k) const {
  const std::string& v = get(k);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(k + ": '" + v + "' is not a boolean");
}

std::vector<std::string> RunConfig::get_list(const std::string& k) const { return split(get(k), ','); }

std::string RunConfig::resolved_text() const {
  std::ostringstream out;
  std::string section;
  for (const auto& k : config_schema()) {
    if (section != k.section) {
      if (!section.empty()) out << '\n';
      section = k.section;
      out << '[' << section << "]\n";
    }
    out << k.key << " = " << values_.at(section + "." + k.key) << '\n';
  }
  return out.str();
}

SyntheticTaxonomy RunConfig::taxonomy() const {
  SyntheticTaxonomy tax;
  tax.branching.clear();
  for (const auto& b : get_list("synthetic.branching")) tax.branching.push_back(parse_number<int>("synthetic.branching", b));
  tax.items_per_leaf = get_int("synthetic.items_per_leaf");
  tax.shift_prob = get_double("synthetic.shift_prob");
  tax.sibling_share = get_double("synthetic.sibling_share");
  tax.popularity_skew = get_double("synthetic.popularity_skew");
  try {
    tax.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return tax;
}

std::vector<Cohort> RunConfig::cohorts() const {
  std::vector<Cohort> out;
  const std::string& spec = get("synthetic.cohorts");
  if (spec.empty()) {
    out.push_back(Cohort{get_int("synthetic.users"), get_double("synthetic.shift_prob"),
                         get_int("synthetic.min_length"), get_int("synthetic.max_length")});
  } else {
    for (const auto& c : split(spec, ';')) {
      const auto parts = split(c, ':');
      if (parts.size() != 4) throw ConfigError("synthetic.cohorts: '" + c + "' needs users:shift_prob:min:max");
      out.push_back(Cohort{parse_number<int>("synthetic.cohorts", parts[0]),
                           parse_number<double>("synthetic.cohorts", parts[1]),
                           parse_number<int>("synthetic.cohorts", parts[2]),
                           parse_number<int>("synthetic.cohorts", parts[3])});
    }
  }
  for (const auto& c : out)
    if (c.users < 1 || c.min_length < 1 || c.max_length < c.min_length || c.shift_prob < 0.0 || c.shift_prob > 1.0)
      throw ConfigError("synthetic cohort parameters out of range");
  return out;
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  try {
    m.backbone.kind = parse_backbone_kind(get("model.backbone"));
    m.variant = parse_variant(get("model.variant"));
    m.backbone.d_model = get_int("model.d_model");
    m.backbone.n_layers = get_int("model.n_layers");
    m.backbone.n_heads = get_int("model.n_heads");
    m.backbone.max_len = get_int("model.max_len");
    m.backbone.dropout = get_double("model.dropout");
    m.backbone.reasoning_steps = get_int("model.reasoning_steps");
    m.halt_hidden = get_int("model.halt_hidden");
    m.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  try {
    t.epochs = get_int("train.epochs");
    t.batch_size = get_int("train.batch_size");
    t.adam.learning_rate = get_double("train.learning_rate");
    t.adam.beta1 = get_double("train.beta1");
    t.adam.beta2 = get_double("train.beta2");
    t.adam.epsilon = get_double("train.epsilon");
    t.grad_clip = get_double("train.grad_clip");
    t.patience = get_int("train.patience");
    t.examples = parse_train_examples(get("train.examples"));
    t.eval_batch_size = get_int("train.eval_batch_size");
    t.lambda_p = get_double("hps.lambda_p");
    t.schedule.k0 = get_int("hps.k0");
    t.schedule.k_upper = get_int("hps.k_upper");
    t.schedule.alpha = get_double("hps.alpha");
    t.warmup_epochs = get_int("hps.warmup_epochs");
    t.include_step0 = get_bool("hps.include_step0");
    t.kmeans.restarts = get_int("hps.kmeans_restarts");
    t.kmeans.max_iterations = get_int("hps.kmeans_max_iterations");
    t.kmeans.tolerance = get_double("hps.kmeans_tolerance");
    t.halt.threshold = get_double("arh.threshold");
    t.halt.min_steps = get_int("arh.min_steps");
    t.threads = get_int("eval.threads");
    t.seed = get_u64("run.seed");
    t.validate();
    t.schedule.steps = get_int("model.reasoning_steps");
    t.schedule.validate();
    if (t.kmeans.restarts < 1 || t.kmeans.max_iterations < 1 || !(t.kmeans.tolerance >= 0.0))
      throw ContractError("k-means options out of range");
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return t;
}

EvalOptions RunConfig::eval(const ModelConfig& model) const { return eval_options(train(), model); }

void RunConfig::validate() const {
  taxonomy();
  cohorts();
  const ModelConfig m = model();
  train();
  eval(m);
  for (const auto& v : get_list("ablate.variants")) {
    try {
      parse_variant(v);
    } catch (const ContractError& e) {
      throw ConfigError(std::string("ablate.variants: ") + e.what());
    }
  }
  for (const auto& s : get_list("ablate.seeds")) parse_number<std::uint64_t>("ablate.seeds", s);
  if (get_int("data.min_count") < 1) throw ConfigError("data.min_count must be >= 1");
  if (get_int("eval.groups") < 1) throw ConfigError("eval.groups must be >= 1");
  if (get_int("train.checkpoint_every") < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  const std::string& split_name = get("eval.split");
  if (split_name != "test" && split_name != "valid") throw ConfigError("eval.split must be test or valid");
}

}  // namespace dtrec::cli
