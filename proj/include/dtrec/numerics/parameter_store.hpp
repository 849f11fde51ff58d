#pragma once

#include "dtrec/numerics/tape.hpp"

#include <deque>
#include <random>
#include <string>
#include <vector>

namespace dtrec {

/// Ordered, name-addressable set of parameters. Element addresses are stable.
template <typename Scalar>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter<Scalar>& add(std::string name, Matrix<Scalar> init) {
    if (find(name) != nullptr) throw ContractError("duplicate parameter " + name);
    Matrix<Scalar> grad = Matrix<Scalar>::Zero(init.rows(), init.cols());
    params_.push_back(Parameter<Scalar>{std::move(name), std::move(init), std::move(grad)});
    return params_.back();
  }

  Parameter<Scalar>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  Parameter<Scalar>& get(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw ContractError("unknown parameter " + name);
  }

  std::vector<Parameter<Scalar>*> all() {
    std::vector<Parameter<Scalar>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::vector<Matrix<Scalar>> snapshot() const {
    std::vector<Matrix<Scalar>> out;
    for (const auto& p : params_) out.push_back(p.value);
    return out;
  }

  void restore(const std::vector<Matrix<Scalar>>& values) {
    if (values.size() != params_.size()) throw ContractError("restore: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) params_[i].value = values[i];
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<Scalar>> params_;
};

template <typename Scalar>
Matrix<Scalar> normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& gen) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(gen));
  return m;
}

/// Glorot-uniform init for a [fan_in x fan_out] weight.
template <typename Scalar>
Matrix<Scalar> xavier_init(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& gen) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<Scalar> m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(gen));
  return m;
}

}  // namespace dtrec
