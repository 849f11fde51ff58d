#include "dtrec/numerics/adam.hpp"

#include <cmath>

namespace dtrec {

template <typename Scalar>
Adam<Scalar>::Adam(std::vector<Parameter<Scalar>*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto* p : params_) {
    m_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
  }
}

template <typename Scalar>
void Adam<Scalar>::step() {
  ++steps_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  const Scalar b1 = static_cast<Scalar>(options_.beta1);
  const Scalar b2 = static_cast<Scalar>(options_.beta2);
  const Scalar step_size = static_cast<Scalar>(options_.learning_rate / c1);
  const Scalar inv_c2 = static_cast<Scalar>(1.0 / c2);
  const Scalar eps = static_cast<Scalar>(options_.epsilon);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Matrix<Scalar>& g = params_[i]->grad;
    m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
    v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseAbs2();
    params_[i]->value.array() -=
        step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
  }
}

template <typename Scalar>
void Adam<Scalar>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template <typename Scalar>
double global_grad_norm(const std::vector<Parameter<Scalar>*>& params) {
  double total = 0.0;
  for (const auto* p : params) total += p->grad.template cast<double>().squaredNorm();
  return std::sqrt(total);
}

template <typename Scalar>
double clip_grad_norm(const std::vector<Parameter<Scalar>*>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const Scalar factor = static_cast<Scalar>(max_norm / norm);
    for (auto* p : params) p->grad *= factor;
  }
  return norm;
}

template class Adam<float>;
template class Adam<double>;
template double global_grad_norm(const std::vector<Parameter<float>*>&);
template double global_grad_norm(const std::vector<Parameter<double>*>&);
template double clip_grad_norm(const std::vector<Parameter<float>*>&, double);
template double clip_grad_norm(const std::vector<Parameter<double>*>&, double);

}  // namespace dtrec
