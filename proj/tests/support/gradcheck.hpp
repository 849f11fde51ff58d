#pragma once

#include "dtrec/numerics/ops.hpp"
#include "dtrec/numerics/parameter_store.hpp"

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace dtrec::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "param[row,col]"
  int checked = 0;
};

/// Compares tape gradients of a scalar objective with central differences
/// at steps h and h/2, Richardson-combined, in double precision. Relative error uses max(|a|, |n|, floor).
GradCheckResult check_gradients(const std::vector<Parameter<double>*>& params,
                                const std::function<Var<double>(Tape<double>&)>& objective, double h = 1e-3,
                                double floor = 1e-6);

/// A differentiable op under test: inputs are parameters of the given shapes,
/// filled with N(0, 1) and then adjusted by `prepare`.
struct OpCase {
  std::string name;
  std::vector<std::pair<int, int>> shapes;
  std::function<void(std::vector<Matrix<double>>&, std::mt19937_64&)> prepare;
  std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)> build;
};

const std::vector<OpCase>& op_catalog();

/// Runs one catalog case with inputs drawn from `seed`; the op output is
/// reduced with a fixed random projection so every output entry matters.
GradCheckResult check_op(const OpCase& op, std::uint64_t seed);

}  // namespace dtrec::testing
