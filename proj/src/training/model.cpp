#include "dtrec/training/model.hpp"

namespace dtrec {

namespace {

struct VariantName {
  Variant variant;
  const char* name;
};

constexpr VariantName kVariantNames[] = {
    {Variant::kBase, "base"},       {Variant::kHpsConstK, "hps_kconst"}, {Variant::kHpsNoWarmup, "hps_nowarmup"},
    {Variant::kHps, "hps"},         {Variant::kHpsRee, "hps_ree"},       {Variant::kHpsArh, "hps_arh"},
};

}  // namespace

Variant parse_variant(const std::string& name) {
  for (const auto& v : kVariantNames)
    if (name == v.name) return v.variant;
  throw ContractError("unknown variant '" + name + "'");
}

std::string to_string(Variant variant) {
  for (const auto& v : kVariantNames)
    if (variant == v.variant) return v.name;
  return "?";
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> variants = [] {
    std::vector<Variant> out;
    for (const auto& v : kVariantNames) out.push_back(v.variant);
    return out;
  }();
  return variants;
}

VariantTraits traits(Variant variant) {
  switch (variant) {
    case Variant::kBase: return {false, false, true, HaltMode::kNone};
    case Variant::kHpsConstK: return {true, true, true, HaltMode::kNone};
    case Variant::kHpsNoWarmup: return {true, false, false, HaltMode::kNone};
    case Variant::kHps: return {true, false, true, HaltMode::kNone};
    case Variant::kHpsRee: return {true, false, true, HaltMode::kRee};
    case Variant::kHpsArh: return {true, false, true, HaltMode::kArh};
  }
  throw ContractError("unknown variant");
}

void ModelConfig::validate() const {
  backbone.validate();
  const VariantTraits t = traits(variant);
  if ((t.prototypes || t.halting != HaltMode::kNone) && backbone.reasoning_steps < 1)
    throw ContractError("variant " + to_string(variant) + " needs at least one reasoning step");
  if (halt_hidden < 1) throw ContractError("halt_hidden must be positive");
}

template <typename S>
Recommender<S>::Recommender(const ModelConfig& config, int num_items, std::uint64_t seed) : config_(config) {
  config_.validate();
  encoder_ = std::make_unique<SequenceEncoder<S>>(store_, config_.backbone, num_items, seed);
  switch (traits(config_.variant).halting) {
    case HaltMode::kArh: halting_ = std::make_unique<HaltingHead<S>>(store_, config_.halt_hidden, seed); break;
    case HaltMode::kRee: ree_ = std::make_unique<ReeHead<S>>(store_, config_.backbone.d_model, seed); break;
    case HaltMode::kNone: break;
  }
}

template <typename S>
ReasoningTrace<S> Recommender<S>::forward(Tape<S>& tape, const Batch& batch, const ForwardOptions& options) const {
  ReasoningTrace<S> trace = encoder_->run_reasoning(tape, batch, steps(), options);
  for (int t = 1; t <= trace.steps(); ++t) {
    if (halting_) {
      trace.indicators.push_back(compute_indicators(trace, t));
      trace.halt_probs.push_back(
          halting_->forward(tape, normalize_features(trace.indicators.back(), num_items(), encoder_->width())));
    } else if (ree_) {
      trace.halt_probs.push_back(ree_->forward(tape, trace.states[t].value()));
    }
  }
  return trace;
}

template <typename S>
Prediction<S> Recommender<S>::predict(const Batch& batch, const HaltPolicy& policy) const {
  Tape<S> tape(false);
  ReasoningTrace<S> trace = forward(tape, batch, ForwardOptions{});
  const int T = trace.steps();
  Prediction<S> out;
  for (const auto& s : trace.states) out.states.push_back(s.value());
  out.exit_steps.assign(batch.size, T);
  if (!trace.halt_probs.empty()) {
    HaltPolicy p = policy;
    p.max_steps = T;
    p.min_steps = std::min(p.min_steps, T);
    p.validate();
    out.halt_probs.assign(batch.size, std::vector<double>(T));
    for (int b = 0; b < batch.size; ++b) {
      for (int t = 1; t <= T; ++t) out.halt_probs[b][t - 1] = trace.halt_probs[t - 1].value()(b, 0);
      out.exit_steps[b] = exit_step(p, out.halt_probs[b]);
    }
  }
  // Later steps never influence earlier ones, so reading step e of the full
  // trace equals stopping the loop at e.
  out.log_probs.resize(batch.size, num_items());
  for (int b = 0; b < batch.size; ++b) out.log_probs.row(b) = trace.log_probs[out.exit_steps[b]].value().row(b);
  return out;
}

template class Recommender<float>;
template class Recommender<double>;

}  // namespace dtrec
