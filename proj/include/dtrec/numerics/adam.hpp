#pragma once

#include "dtrec/numerics/tape.hpp"

#include <cstdint>
#include <vector>

namespace dtrec {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed, ordered list of parameters.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Parameter<Scalar>*> params, AdamOptions options);

  /// Applies one update from the parameters' current gradients.
  void step();
  void zero_grad();

  const AdamOptions& options() const { return options_; }
  std::int64_t steps_taken() const { return steps_; }
  const std::vector<Parameter<Scalar>*>& parameters() const { return params_; }

  // Moment access for checkpointing; index matches parameters().
  std::vector<Matrix<Scalar>>& first_moments() { return m_; }
  std::vector<Matrix<Scalar>>& second_moments() { return v_; }
  void set_steps_taken(std::int64_t steps) { steps_ = steps; }

 private:
  std::vector<Parameter<Scalar>*> params_;
  AdamOptions options_;
  std::vector<Matrix<Scalar>> m_;
  std::vector<Matrix<Scalar>> v_;
  std::int64_t steps_ = 0;
};

/// Global L2 norm over all parameter gradients.
template <typename Scalar>
double global_grad_norm(const std::vector<Parameter<Scalar>*>& params);

/// Rescales gradients so their global norm is at most max_norm; returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(const std::vector<Parameter<Scalar>*>& params, double max_norm);

}  // namespace dtrec
