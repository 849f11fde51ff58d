#include "dtrec/arh/halting.hpp"

#include "dtrec/numerics/random.hpp"

#include <cmath>

namespace dtrec {

template <typename S>
Matrix<S> compute_indicators(const ReasoningTrace<S>& trace, int t) {
  if (t < 1 || t > trace.steps())
    throw ContractError("compute_indicators: step " + std::to_string(t) + " outside [1, " +
                        std::to_string(trace.steps()) + "]");
  using MatD = Matrix<double>;
  const MatD logq = trace.log_probs[t].value().template cast<double>();
  const MatD logp = trace.log_probs[t - 1].value().template cast<double>();
  const MatD q = logq.array().exp().matrix();
  const MatD p = logp.array().exp().matrix();
  const MatD floor_q = q.array().max(kLogFloor).log().matrix();
  const MatD floor_p = p.array().max(kLogFloor).log().matrix();
  const MatD dr = (trace.states[t].value() - trace.states[t - 1].value()).template cast<double>();

  Matrix<S> out(q.rows(), 3);
  for (Eigen::Index b = 0; b < q.rows(); ++b) {
    const double ent = -(q.row(b).array() * floor_q.row(b).array()).sum();
    const double kl = (p.row(b).array() * (floor_p.row(b).array() - floor_q.row(b).array())).sum();
    out(b, kEntropy) = static_cast<S>(std::max(ent, 0.0));
    out(b, kConsistency) = static_cast<S>(std::max(kl, 0.0));
    out(b, kVariation) = static_cast<S>(dr.row(b).norm());
  }
  return out;
}

template <typename S>
Matrix<S> normalize_features(const Matrix<S>& raw, int num_items, int width) {
  if (raw.cols() != 3) throw DimensionError("normalize_features: expected 3 indicator columns");
  Matrix<S> f(raw.rows(), 3);
  const double log_n = num_items > 1 ? std::log(static_cast<double>(num_items)) : 1.0;
  const double root_d = std::sqrt(static_cast<double>(width));
  for (Eigen::Index b = 0; b < raw.rows(); ++b) {
    f(b, kEntropy) = static_cast<S>(raw(b, kEntropy) / log_n);
    f(b, kConsistency) = static_cast<S>(std::log1p(static_cast<double>(raw(b, kConsistency))));
    f(b, kVariation) = static_cast<S>(raw(b, kVariation) / root_d);
  }
  return f;
}

template <typename S>
HaltingHead<S>::HaltingHead(ParameterStore<S>& store, int hidden, std::uint64_t seed) {
  if (hidden < 1) throw ContractError("halting head needs a positive hidden width");
  std::mt19937_64 g1(derive_seed(seed, Stream::kInit, {1000}));
  std::mt19937_64 g2(derive_seed(seed, Stream::kInit, {1001}));
  w1_ = &store.add("halt.hidden.weight", xavier_init<S>(3, hidden, g1));
  b1_ = &store.add("halt.hidden.bias", Matrix<S>::Zero(1, hidden));
  w2_ = &store.add("halt.out.weight", xavier_init<S>(hidden, 1, g2));
  b2_ = &store.add("halt.out.bias", Matrix<S>::Zero(1, 1));
}

template <typename S>
Var<S> HaltingHead<S>::forward(Tape<S>& tape, const Matrix<S>& features) const {
  if (features.cols() != 3) throw DimensionError("halting head expects 3 features");
  Var<S> x = tape.constant(features);
  Var<S> h = relu(add_row(matmul(x, tape.parameter(*w1_)), tape.parameter(*b1_)));
  return sigmoid(add_row(matmul(h, tape.parameter(*w2_)), tape.parameter(*b2_)));
}

template <typename S>
ReeHead<S>::ReeHead(ParameterStore<S>& store, int width, std::uint64_t seed) {
  std::mt19937_64 gen(derive_seed(seed, Stream::kInit, {1002}));
  w_ = &store.add("ree.weight", xavier_init<S>(width, 1, gen));
  b_ = &store.add("ree.bias", Matrix<S>::Zero(1, 1));
}

template <typename S>
Var<S> ReeHead<S>::forward(Tape<S>& tape, const Matrix<S>& state) const {
  if (state.cols() != w_->value.rows()) throw DimensionError("REE head: state width mismatch");
  return sigmoid(add_row(matmul(tape.constant(state), tape.parameter(*w_)), tape.parameter(*b_)));
}

std::vector<double> soft_halt_weights(std::span<const double> p) {
  if (p.empty()) throw ContractError("soft_halt_weights: no steps");
  std::vector<double> w(p.size());
  double remain = 1.0;
  for (std::size_t t = 0; t + 1 < p.size(); ++t) {
    if (!(p[t] >= 0.0 && p[t] <= 1.0)) throw ContractError("soft_halt_weights: probability outside [0, 1]");
    w[t] = p[t] * remain;
    remain *= 1.0 - p[t];
  }
  w.back() = remain;
  return w;
}

template <typename S>
std::vector<Var<S>> soft_halt_weights(Tape<S>& tape, const std::vector<Var<S>>& p) {
  if (p.empty()) throw ContractError("soft_halt_weights: no steps");
  std::vector<Var<S>> w;
  Var<S> remain = tape.constant(Matrix<S>::Ones(p.front().rows(), 1));
  for (std::size_t t = 0; t + 1 < p.size(); ++t) {
    w.push_back(mul(p[t], remain));
    remain = mul(remain, affine(p[t], S(-1), S(1)));
  }
  w.push_back(remain);
  return w;
}

Matrix<double> aggregate_prediction(const std::vector<Matrix<double>>& probs, std::span<const double> weights) {
  if (probs.empty() || probs.size() != weights.size())
    throw DimensionError("aggregate_prediction: one weight per step required");
  Matrix<double> out = Matrix<double>::Zero(probs.front().rows(), probs.front().cols());
  for (std::size_t t = 0; t < probs.size(); ++t) out += weights[t] * probs[t];
  return out;
}

template <typename S>
Var<S> aggregate_prediction(const std::vector<Var<S>>& probs, const std::vector<Var<S>>& weights) {
  if (probs.empty() || probs.size() != weights.size())
    throw DimensionError("aggregate_prediction: one weight per step required");
  Var<S> out = mul_col(probs[0], weights[0]);
  for (std::size_t t = 1; t < probs.size(); ++t) out = add(out, mul_col(probs[t], weights[t]));
  return out;
}

void HaltPolicy::validate() const {
  if (max_steps < 1) throw ContractError("halt policy needs max_steps >= 1");
  if (min_steps < 1 || min_steps > max_steps) throw ContractError("halt policy needs 1 <= min_steps <= max_steps");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ContractError("halt threshold must be in [0, 1]");
}

bool early_exit_decision(const HaltPolicy& policy, double p_halt, int t) {
  if (t < 1 || t > policy.max_steps) throw ContractError("early_exit_decision: step out of range");
  return (t >= policy.min_steps && p_halt > policy.threshold) || t == policy.max_steps;
}

int exit_step(const HaltPolicy& policy, std::span<const double> p) {
  if (static_cast<int>(p.size()) < policy.max_steps) throw DimensionError("exit_step: missing probabilities");
  for (int t = 1; t <= policy.max_steps; ++t)
    if (early_exit_decision(policy, p[t - 1], t)) return t;
  return policy.max_steps;
}

#define DTREC_INSTANTIATE_ARH(S)                                                                     \
  template Matrix<S> compute_indicators(const ReasoningTrace<S>&, int);                            \
  template Matrix<S> normalize_features(const Matrix<S>&, int, int);                               \
  template class HaltingHead<S>;                                                                     \
  template class ReeHead<S>;                                                                         \
  template std::vector<Var<S>> soft_halt_weights(Tape<S>&, const std::vector<Var<S>>&);            \
  template Var<S> aggregate_prediction(const std::vector<Var<S>>&, const std::vector<Var<S>>&);

DTREC_INSTANTIATE_ARH(float)
DTREC_INSTANTIATE_ARH(double)

}  // namespace dtrec
