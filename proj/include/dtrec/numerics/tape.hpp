#pragma once

#include "dtrec/numerics/tensor.hpp"

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>

namespace dtrec {

/// A named trainable tensor with its accumulated gradient.
template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

/// Records a computation and runs the reverse pass over it.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// topological order; `backward` walks it once. Values are immutable after
/// recording. With gradients disabled no backward closures are kept.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  /// Receives the gradient of the node's output; accumulates into parents.
  using Backward = std::function<void(Tape&, const Mat&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<Scalar> constant(Mat value) {
    check_finite(value, "constant");
    nodes_.push_back(Node{std::move(value), Mat(), false, nullptr, nullptr, "constant"});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Leaf bound to a parameter; the reverse pass adds into `param.grad`.
  Var<Scalar> parameter(Parameter<Scalar>& param) {
    const bool track = grad_enabled_;
    nodes_.push_back(Node{param.value, Mat(), track, nullptr, track ? &param : nullptr, "parameter"});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var<Scalar> record(const char* op, Mat value, std::initializer_list<Var<Scalar>> parents,
                     Backward backward) {
    return record(op, std::move(value), std::span<const Var<Scalar>>(parents.begin(), parents.size()),
                  std::move(backward));
  }

  Var<Scalar> record(const char* op, Mat value, std::span<const Var<Scalar>> parents, Backward backward) {
    check_finite(value, op);
    bool track = false;
    if (grad_enabled_) {
      for (const auto& p : parents) track = track || requires_grad(p.id());
    }
    nodes_.push_back(Node{std::move(value), Mat(), track, track ? std::move(backward) : nullptr,
                          nullptr, op});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Reverse pass from a 1x1 root; seeds d(root)/d(root) = 1.
  void backward(const Var<Scalar>& root) {
    if (root.tape() != this) throw ContractError("backward: root belongs to another tape");
    const Mat& v = value(root.id());
    if (v.rows() != 1 || v.cols() != 1)
      throw DimensionError("backward: root must be scalar, got " + shape_string(v.rows(), v.cols()));
    if (!requires_grad(root.id())) return;
    grad(root.id()).setOnes();
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) {
        if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols())
          n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const char* op_name(int id) const { return nodes_[id].op; }

  /// Gradient buffer of a node, zero-initialized on first access.
  Mat& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Adds `g` into the gradient of `target` if it participates in the reverse pass.
  template <typename Expr>
  void accumulate(const Var<Scalar>& target, const Expr& g) {
    if (!requires_grad(target.id())) return;
    grad(target.id()) += g;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad;
    Backward backward;
    Parameter<Scalar>* param;
    const char* op;
  };

  static void check_finite(const Mat& m, const char* op) {
    // x * 0 is 0 for finite x and NaN otherwise; one vectorized pass.
    if (!((m.array() * Scalar(0)).sum() == Scalar(0))) throw NumericError(std::string("non-finite value produced by ") + op);
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

}  // namespace dtrec
