#pragma once

#include "dtrec/backbone/encoder.hpp"
#include "dtrec/numerics/ops.hpp"
#include "dtrec/numerics/parameter_store.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dtrec {

/// Column layout of indicator matrices.
enum IndicatorColumn { kEntropy = 0, kConsistency = 1, kVariation = 2 };

/// Raw indicators for step t >= 1, one row per sequence:
/// entropy of y^(t), KL(y^(t-1) || y^(t)) and ||r_t - r_{t-1}||.
/// Computed from values only, so nothing flows back into the backbone.
template <typename S>
Matrix<S> compute_indicators(const ReasoningTrace<S>& trace, int t);

/// Ent / ln|I|, log(1 + Cons), Delta / sqrt(d).
template <typename S>
Matrix<S> normalize_features(const Matrix<S>& raw, int num_items, int width);

/// 3 -> hidden (ReLU) -> 1 (sigmoid).
template <typename S>
class HaltingHead {
 public:
  HaltingHead(ParameterStore<S>& store, int hidden, std::uint64_t seed);

  /// Halting probability per row, [B x 1]; `features` are normalized indicators.
  Var<S> forward(Tape<S>& tape, const Matrix<S>& features) const;
  int hidden() const { return static_cast<int>(w1_->value.cols()); }

 private:
  Parameter<S>*w1_, *b1_, *w2_, *b2_;
};

/// Perceptron on the (detached) reasoning state; ablation baseline.
template <typename S>
class ReeHead {
 public:
  ReeHead(ParameterStore<S>& store, int width, std::uint64_t seed);

  Var<S> forward(Tape<S>& tape, const Matrix<S>& state) const;

 private:
  Parameter<S>*w_, *b_;
};

/// Stick-breaking weights with the final probability forced to 1.
std::vector<double> soft_halt_weights(std::span<const double> p);

/// Batched version on the tape: each entry is [B x 1].
template <typename S>
std::vector<Var<S>> soft_halt_weights(Tape<S>& tape, const std::vector<Var<S>>& p);

/// sum_t w_t * y^(t).
Matrix<double> aggregate_prediction(const std::vector<Matrix<double>>& probs, std::span<const double> weights);

/// Batched: probs[t] is [B x n], weights[t] is [B x 1].
template <typename S>
Var<S> aggregate_prediction(const std::vector<Var<S>>& probs, const std::vector<Var<S>>& weights);

struct HaltPolicy {
  double threshold = 0.5;
  int min_steps = 1;
  int max_steps = 3;

  void validate() const;
};

/// Halt iff (t >= min_steps and p > threshold) or t == max_steps.
bool early_exit_decision(const HaltPolicy& policy, double p_halt, int t);

/// First step at which early_exit_decision fires; p[t-1] is the probability at step t.
int exit_step(const HaltPolicy& policy, std::span<const double> p);

}  // namespace dtrec
