#include "dtrec/numerics/ops.hpp"

#include "dtrec/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>

namespace dtrec {
namespace {

template <typename S>
std::string shape_of(const Var<S>& v) {
  return shape_string(v.rows(), v.cols());
}

template <typename S>
void same_tape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (!a.valid() || !b.valid()) throw ContractError(std::string(op) + ": invalid variable");
  if (a.tape() != b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
}

template <typename S>
void same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  same_tape(a, b, op);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
}

template <typename S>
Matrix<S> log_floored(const Matrix<S>& p) {
  return p.array().max(S(kLogFloor)).log().matrix();
}

template <typename S>
void check_distribution_rows(const Matrix<S>& p, const char* op) {
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double total = 0.0;
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      if (p(i, j) < S(0)) throw ContractError(std::string(op) + ": negative probability");
      total += static_cast<double>(p(i, j));
    }
    if (std::abs(total - 1.0) > 1e-6)
      throw ContractError(std::string(op) + ": row " + std::to_string(i) + " sums to " +
                          std::to_string(total));
  }
}

}  // namespace

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  same_tape(a, b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ " + shape_of(a) + " x " + shape_of(b));
  Matrix<S> out = a.value() * b.value();
  return a.tape()->record("matmul", std::move(out), {a, b}, [a, b](Tape<S>& t, const Matrix<S>& g) {
    if (a.requires_grad()) t.grad(a.id()).noalias() += g * b.value().transpose();
    if (b.requires_grad()) t.grad(b.id()).noalias() += a.value().transpose() * g;
  });
}

template <typename S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
  same_tape(a, b, "matmul_nt");
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_of(a) + " x " + shape_of(b) + "^T");
  Matrix<S> out = a.value() * b.value().transpose();
  return a.tape()->record("matmul_nt", std::move(out), {a, b}, [a, b](Tape<S>& t, const Matrix<S>& g) {
    if (a.requires_grad()) t.grad(a.id()).noalias() += g * b.value();
    if (b.requires_grad()) t.grad(b.id()).noalias() += g.transpose() * a.value();
  });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  same_shape(a, b, "add");
  Matrix<S> out = a.value() + b.value();
  return a.tape()->record("add", std::move(out), {a, b}, [a, b](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  same_shape(a, b, "sub");
  Matrix<S> out = a.value() - b.value();
  return a.tape()->record("sub", std::move(out), {a, b}, [a, b](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  same_shape(a, b, "mul");
  Matrix<S> out = a.value().cwiseProduct(b.value());
  return a.tape()->record("mul", std::move(out), {a, b}, [a, b](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, g.cwiseProduct(b.value()));
    t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

template <typename S>
Var<S> affine(const Var<S>& a, S scale, S shift) {
  Matrix<S> out = (a.value().array() * scale + shift).matrix();
  return a.tape()->record("affine", std::move(out), {a}, [a, scale](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, g * scale);
  });
}

template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  same_tape(a, row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols())
    throw DimensionError("add_row: " + shape_of(row) + " cannot broadcast over " + shape_of(a));
  Matrix<S> out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record("add_row", std::move(out), {a, row}, [a, row](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, g);
    t.accumulate(row, g.colwise().sum());
  });
}

template <typename S>
Var<S> mul_col(const Var<S>& a, const Var<S>& c) {
  same_tape(a, c, "mul_col");
  if (c.cols() != 1 || c.rows() != a.rows())
    throw DimensionError("mul_col: " + shape_of(c) + " cannot scale rows of " + shape_of(a));
  Matrix<S> out = (a.value().array().colwise() * c.value().col(0).array()).matrix();
  return a.tape()->record("mul_col", std::move(out), {a, c}, [a, c](Tape<S>& t, const Matrix<S>& g) {
    if (a.requires_grad())
      t.grad(a.id()) += (g.array().colwise() * c.value().col(0).array()).matrix();
    if (c.requires_grad())
      t.grad(c.id()) += g.cwiseProduct(a.value()).rowwise().sum();
  });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  Matrix<S> out = a.value().cwiseMax(S(0));
  return a.tape()->record("relu", std::move(out), {a}, [a](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, (a.value().array() > S(0)).select(g, S(0)).matrix());
  });
}

template <typename S>
Var<S> gelu(const Var<S>& a) {
  const S c = static_cast<S>(std::sqrt(2.0 / 3.14159265358979323846));
  const S k = S(0.044715);
  auto x = a.value().array();
  Matrix<S> inner_tanh = (c * (x + k * x.cube())).tanh().matrix();
  Matrix<S> out = (S(0.5) * x * (S(1) + inner_tanh.array())).matrix();
  return a.tape()->record("gelu", std::move(out), {a},
                          [a, c, k, inner_tanh](Tape<S>& t, const Matrix<S>& g) {
                            auto x = a.value().array();
                            auto th = inner_tanh.array();
                            auto d = S(0.5) * (S(1) + th) +
                                     S(0.5) * x * (S(1) - th.square()) * c * (S(1) + S(3) * k * x.square());
                            t.accumulate(a, (g.array() * d).matrix());
                          });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Matrix<S> out = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  Matrix<S> y = out;
  return a.tape()->record("sigmoid", std::move(out), {a}, [a, y](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, (g.array() * y.array() * (S(1) - y.array())).matrix());
  });
}

template <typename S>
Var<S> tanh(const Var<S>& a) {
  Matrix<S> out = a.value().array().tanh().matrix();
  Matrix<S> y = out;
  return a.tape()->record("tanh", std::move(out), {a}, [a, y](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, (g.array() * (S(1) - y.array().square())).matrix());
  });
}

template <typename S>
Var<S> exp(const Var<S>& a) {
  Matrix<S> out = a.value().array().exp().matrix();
  Matrix<S> y = out;
  return a.tape()->record("exp", std::move(out), {a}, [a, y](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, g.cwiseProduct(y));
  });
}

template <typename S>
Var<S> log_floor(const Var<S>& a) {
  Matrix<S> out = log_floored(a.value());
  return a.tape()->record("log_floor", std::move(out), {a}, [a](Tape<S>& t, const Matrix<S>& g) {
    auto x = a.value().array();
    t.accumulate(a, (x > S(kLogFloor)).select(g.array() / x, S(0)).matrix());
  });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps) {
  same_tape(x, gain, "layer_norm");
  same_tape(x, bias, "layer_norm");
  const Eigen::Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw DimensionError("layer_norm: gain/bias must be [1x" + std::to_string(d) + "]");
  const Matrix<S>& xv = x.value();
  ColumnVector<S> mu = xv.rowwise().mean();
  Matrix<S> centered = xv.colwise() - mu;
  ColumnVector<S> inv_std =
      ((centered.array().square().rowwise().sum() / S(d)) + eps).rsqrt().matrix();
  Matrix<S> xhat = (centered.array().colwise() * inv_std.array()).matrix();
  Matrix<S> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape()->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, inv_std, d](Tape<S>& t, const Matrix<S>& g) {
        t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        t.accumulate(bias, g.colwise().sum());
        if (!x.requires_grad()) return;
        Matrix<S> dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
        ColumnVector<S> mean_d = dxhat.rowwise().mean();
        ColumnVector<S> mean_dx = dxhat.cwiseProduct(xhat).rowwise().sum() / S(d);
        Matrix<S> dx = dxhat.colwise() - mean_d;
        dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
        t.grad(x.id()) += (dx.array().colwise() * inv_std.array()).matrix();
      });
}

template <typename S>
Var<S> softmax(const Var<S>& logits) {
  const Matrix<S>& z = logits.value();
  Matrix<S> y = (z.colwise() - z.rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  Matrix<S> saved = y;
  return logits.tape()->record("softmax", std::move(y), {logits},
                               [logits, saved](Tape<S>& t, const Matrix<S>& g) {
                                 ColumnVector<S> dot = g.cwiseProduct(saved).rowwise().sum();
                                 t.accumulate(logits, saved.cwiseProduct(g.colwise() - dot));
                               });
}

template <typename S>
Var<S> log_softmax(const Var<S>& logits) {
  const Matrix<S>& z = logits.value();
  ColumnVector<S> m = z.rowwise().maxCoeff();
  Matrix<S> shifted = z.colwise() - m;
  ColumnVector<S> lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix<S> out = shifted.colwise() - lse;
  Matrix<S> probs = out.array().exp().matrix();
  return logits.tape()->record("log_softmax", std::move(out), {logits},
                               [logits, probs](Tape<S>& t, const Matrix<S>& g) {
                                 ColumnVector<S> total = g.rowwise().sum();
                                 t.accumulate(logits, g - (probs.array().colwise() * total.array()).matrix());
                               });
}

template <typename S>
Var<S> embedding_lookup(const Var<S>& table, std::span<const int> ids, int padding_id) {
  const Eigen::Index n = static_cast<Eigen::Index>(ids.size());
  Matrix<S> out(n, table.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = ids[i];
    if (id < 0 || id >= table.rows())
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                       std::to_string(table.rows()) + " rows");
    if (id == padding_id)
      out.row(i).setZero();
    else
      out.row(i) = table.value().row(id);
  }
  std::vector<int> keep(ids.begin(), ids.end());
  return table.tape()->record("embedding_lookup", std::move(out), {table},
                              [table, keep, padding_id](Tape<S>& t, const Matrix<S>& g) {
                                if (!table.requires_grad()) return;
                                Matrix<S>& gt = t.grad(table.id());
                                for (std::size_t i = 0; i < keep.size(); ++i)
                                  if (keep[i] != padding_id) gt.row(keep[i]) += g.row(i);
                              });
}

template <typename S>
Var<S> gather_rows(const Var<S>& a, std::span<const int> rows) {
  Matrix<S> out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows())
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " outside " + shape_of(a));
    out.row(i) = a.value().row(rows[i]);
  }
  std::vector<int> keep(rows.begin(), rows.end());
  return a.tape()->record("gather_rows", std::move(out), {a}, [a, keep](Tape<S>& t, const Matrix<S>& g) {
    if (!a.requires_grad()) return;
    Matrix<S>& ga = t.grad(a.id());
    for (std::size_t i = 0; i < keep.size(); ++i) ga.row(keep[i]) += g.row(i);
  });
}

template <typename S>
Var<S> slice_rows(const Var<S>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw IndexError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") outside " + shape_of(a));
  Matrix<S> out = a.value().middleRows(start, count);
  return a.tape()->record("slice_rows", std::move(out), {a}, [a, start, count](Tape<S>& t, const Matrix<S>& g) {
    if (a.requires_grad()) t.grad(a.id()).middleRows(start, count) += g;
  });
}

template <typename S>
Var<S> gather_cols(const Var<S>& a, std::span<const int> cols) {
  if (static_cast<Eigen::Index>(cols.size()) != a.rows())
    throw DimensionError("gather_cols: need one column index per row of " + shape_of(a));
  Matrix<S> out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (cols[i] < 0 || cols[i] >= a.cols())
      throw IndexError("gather_cols: column " + std::to_string(cols[i]) + " outside " + shape_of(a));
    out(i, 0) = a.value()(i, cols[i]);
  }
  std::vector<int> keep(cols.begin(), cols.end());
  return a.tape()->record("gather_cols", std::move(out), {a}, [a, keep](Tape<S>& t, const Matrix<S>& g) {
    if (!a.requires_grad()) return;
    Matrix<S>& ga = t.grad(a.id());
    for (std::size_t i = 0; i < keep.size(); ++i) ga(i, keep[i]) += g(i, 0);
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    same_tape(parts.front(), p, "concat_cols");
    if (p.rows() != parts.front().rows()) throw DimensionError("concat_cols: row counts differ");
    total += p.cols();
  }
  Matrix<S> out(parts.front().rows(), total);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape()->record(
      "concat_cols", std::move(out), std::span<const Var<S>>(parts),
      [parts](Tape<S>& t, const Matrix<S>& g) {
        Eigen::Index off = 0;
        for (const auto& p : parts) {
          t.accumulate(p, g.middleCols(off, p.cols()));
          off += p.cols();
        }
      });
}

template <typename S>
Var<S> column(const Var<S>& a, Eigen::Index j) {
  if (j < 0 || j >= a.cols()) throw IndexError("column: " + std::to_string(j) + " outside " + shape_of(a));
  Matrix<S> out = a.value().col(j);
  return a.tape()->record("column", std::move(out), {a}, [a, j](Tape<S>& t, const Matrix<S>& g) {
    if (a.requires_grad()) t.grad(a.id()).col(j) += g.col(0);
  });
}

template <typename S>
Var<S> concat_sequences(const Var<S>& a, const Var<S>& b, int batch) {
  same_tape(a, b, "concat_sequences");
  if (batch <= 0 || a.rows() % batch != 0 || b.rows() % batch != 0 || a.cols() != b.cols())
    throw DimensionError("concat_sequences: " + shape_of(a) + " and " + shape_of(b) +
                         " are not batch-major blocks of " + std::to_string(batch));
  const Eigen::Index la = a.rows() / batch, lb = b.rows() / batch;
  Matrix<S> out(batch * (la + lb), a.cols());
  for (int r = 0; r < batch; ++r) {
    out.middleRows(r * (la + lb), la) = a.value().middleRows(r * la, la);
    out.middleRows(r * (la + lb) + la, lb) = b.value().middleRows(r * lb, lb);
  }
  return a.tape()->record("concat_sequences", std::move(out), {a, b},
                          [a, b, batch, la, lb](Tape<S>& t, const Matrix<S>& g) {
                            for (int r = 0; r < batch; ++r) {
                              if (a.requires_grad())
                                t.grad(a.id()).middleRows(r * la, la) += g.middleRows(r * (la + lb), la);
                              if (b.requires_grad())
                                t.grad(b.id()).middleRows(r * lb, lb) += g.middleRows(r * (la + lb) + la, lb);
                            }
                          });
}

template <typename S>
Var<S> interleave_steps(const std::vector<Var<S>>& steps) {
  if (steps.empty()) throw ContractError("interleave_steps: no inputs");
  const Eigen::Index batch = steps.front().rows(), width = steps.front().cols();
  const Eigen::Index n = static_cast<Eigen::Index>(steps.size());
  for (const auto& s : steps) {
    same_tape(steps.front(), s, "interleave_steps");
    if (s.rows() != batch || s.cols() != width) throw DimensionError("interleave_steps: step shapes differ");
  }
  Matrix<S> out(batch * n, width);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index c = 0; c < n; ++c) out.row(b * n + c) = steps[c].value().row(b);
  return steps.front().tape()->record(
      "interleave_steps", std::move(out), std::span<const Var<S>>(steps),
      [steps, batch, n](Tape<S>& t, const Matrix<S>& g) {
        for (Eigen::Index c = 0; c < n; ++c) {
          if (!steps[c].requires_grad()) continue;
          Matrix<S>& gs = t.grad(steps[c].id());
          for (Eigen::Index b = 0; b < batch; ++b) gs.row(b) += g.row(b * n + c);
        }
      });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
  Matrix<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record("sum", std::move(out), {a}, [a](Tape<S>& t, const Matrix<S>& g) {
    if (a.requires_grad()) t.grad(a.id()).array() += g(0, 0);
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  if (a.value().size() == 0) throw DimensionError("mean: empty tensor");
  return affine(sum(a), S(1) / static_cast<S>(a.value().size()), S(0));
}

template <typename S>
Var<S> row_sum(const Var<S>& a) {
  Matrix<S> out = a.value().rowwise().sum();
  return a.tape()->record("row_sum", std::move(out), {a}, [a](Tape<S>& t, const Matrix<S>& g) {
    if (a.requires_grad()) t.grad(a.id()).colwise() += g.col(0);
  });
}

template <typename S>
Var<S> row_l2_norm(const Var<S>& a) {
  Matrix<S> out = a.value().rowwise().norm();
  Matrix<S> norms = out;
  return a.tape()->record("row_l2_norm", std::move(out), {a}, [a, norms](Tape<S>& t, const Matrix<S>& g) {
    if (!a.requires_grad()) return;
    Matrix<S>& ga = t.grad(a.id());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      if (norms(i, 0) > S(0)) ga.row(i) += (g(i, 0) / norms(i, 0)) * a.value().row(i);
  });
}

template <typename S>
Var<S> dropout(const Var<S>& a, double rate, std::uint64_t key, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return a;
  // Counter-based: element i keeps iff the top 32 bits of splitmix64(key + i) clear the threshold.
  const auto threshold = static_cast<std::uint64_t>(rate * 4294967296.0);
  const S scale = static_cast<S>(1.0 / (1.0 - rate));
  Matrix<S> mask(a.rows(), a.cols());
  const std::uint64_t base = splitmix64(key);
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask.data()[i] = (splitmix64(base + static_cast<std::uint64_t>(i)) >> 32) >= threshold ? scale : S(0);
  Matrix<S> out = a.value().cwiseProduct(mask);
  return a.tape()->record("dropout", std::move(out), {a}, [a, mask](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, g.cwiseProduct(mask));
  });
}

template <typename S>
std::vector<Matrix<S>> attention_weights(const Matrix<S>& q, const Matrix<S>& k,
                                         const AttentionLayout& layout) {
  const int batch = layout.batch, heads = layout.heads;
  if (batch <= 0 || heads <= 0 || q.rows() % batch != 0 || k.rows() % batch != 0)
    throw DimensionError("attention: rows are not batch-major blocks");
  if (q.cols() != k.cols() || q.cols() % heads != 0)
    throw DimensionError("attention: model width must match and divide by heads");
  const Eigen::Index lq = q.rows() / batch, lk = k.rows() / batch, dh = q.cols() / heads;
  if (static_cast<Eigen::Index>(layout.key_valid.size()) != k.rows())
    throw DimensionError("attention: key_valid must have one flag per key row");
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<Matrix<S>> weights;
  weights.reserve(static_cast<std::size_t>(batch * heads));
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      Matrix<S> s = q.block(b * lq, h * dh, lq, dh) * k.block(b * lk, h * dh, lk, dh).transpose();
      for (Eigen::Index i = 0; i < lq; ++i) {
        const Eigen::Index last = std::min<Eigen::Index>(lk - 1, layout.query_offset + i);
        S top = -std::numeric_limits<S>::infinity();
        for (Eigen::Index j = 0; j <= last; ++j)
          if (layout.key_valid[b * lk + j]) top = std::max(top, s(i, j) * scale);
        S total = 0;
        for (Eigen::Index j = 0; j < lk; ++j) {
          const bool visible = j <= last && layout.key_valid[b * lk + j];
          s(i, j) = visible ? std::exp(s(i, j) * scale - top) : S(0);
          total += s(i, j);
        }
        if (total > S(0)) s.row(i) /= total;
      }
      weights.push_back(std::move(s));
    }
  }
  return weights;
}

template <typename S>
Var<S> causal_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                        const AttentionLayout& layout) {
  same_tape(q, k, "causal_attention");
  same_tape(q, v, "causal_attention");
  if (v.rows() != k.rows() || v.cols() != k.cols())
    throw DimensionError("causal_attention: keys " + shape_of(k) + " and values " + shape_of(v) + " differ");
  auto probs = std::make_shared<std::vector<Matrix<S>>>(attention_weights(q.value(), k.value(), layout));
  const int batch = layout.batch, heads = layout.heads;
  const Eigen::Index lq = q.rows() / batch, lk = k.rows() / batch, dh = q.cols() / heads;
  Matrix<S> out(q.rows(), q.cols());
  for (int b = 0; b < batch; ++b)
    for (int h = 0; h < heads; ++h)
      out.block(b * lq, h * dh, lq, dh).noalias() =
          (*probs)[b * heads + h] * v.value().block(b * lk, h * dh, lk, dh);
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  return q.tape()->record(
      "causal_attention", std::move(out), {q, k, v},
      [q, k, v, probs, batch, heads, lq, lk, dh, scale](Tape<S>& t, const Matrix<S>& g) {
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const Matrix<S>& p = (*probs)[b * heads + h];
            Matrix<S> go = g.block(b * lq, h * dh, lq, dh);
            if (v.requires_grad())
              t.grad(v.id()).block(b * lk, h * dh, lk, dh).noalias() += p.transpose() * go;
            if (!q.requires_grad() && !k.requires_grad()) continue;
            Matrix<S> dp = go * v.value().block(b * lk, h * dh, lk, dh).transpose();
            ColumnVector<S> dot = dp.cwiseProduct(p).rowwise().sum();
            Matrix<S> ds = (p.array() * (dp.colwise() - dot).array()).matrix() * scale;
            if (q.requires_grad())
              t.grad(q.id()).block(b * lq, h * dh, lq, dh).noalias() +=
                  ds * k.value().block(b * lk, h * dh, lk, dh);
            if (k.requires_grad())
              t.grad(k.id()).block(b * lk, h * dh, lk, dh).noalias() +=
                  ds.transpose() * q.value().block(b * lq, h * dh, lq, dh);
          }
        }
      });
}

template <typename S>
Var<S> cross_entropy(const Var<S>& log_probs, std::span<const int> targets) {
  if (static_cast<Eigen::Index>(targets.size()) != log_probs.rows())
    throw DimensionError("cross_entropy: need one target per row of " + shape_of(log_probs));
  Matrix<S> out(log_probs.rows(), 1);
  for (Eigen::Index i = 0; i < log_probs.rows(); ++i) {
    if (targets[i] < 0 || targets[i] >= log_probs.cols())
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " outside " +
                       std::to_string(log_probs.cols()) + " classes");
    out(i, 0) = -log_probs.value()(i, targets[i]);
  }
  std::vector<int> keep(targets.begin(), targets.end());
  return log_probs.tape()->record("cross_entropy", std::move(out), {log_probs},
                                  [log_probs, keep](Tape<S>& t, const Matrix<S>& g) {
                                    if (!log_probs.requires_grad()) return;
                                    Matrix<S>& gl = t.grad(log_probs.id());
                                    for (std::size_t i = 0; i < keep.size(); ++i) gl(i, keep[i]) -= g(i, 0);
                                  });
}

template <typename S>
Var<S> soft_cross_entropy(const Matrix<S>& target, const Var<S>& log_probs) {
  if (target.rows() != log_probs.rows() || target.cols() != log_probs.cols())
    throw DimensionError("soft_cross_entropy: target " + shape_string(target.rows(), target.cols()) +
                         " vs prediction " + shape_of(log_probs));
  check_distribution_rows(target, "soft_cross_entropy");
  Matrix<S> out = -(target.cwiseProduct(log_probs.value()).rowwise().sum());
  return log_probs.tape()->record("soft_cross_entropy", std::move(out), {log_probs},
                                  [log_probs, target](Tape<S>& t, const Matrix<S>& g) {
                                    if (!log_probs.requires_grad()) return;
                                    t.grad(log_probs.id()) -= (target.array().colwise() * g.col(0).array()).matrix();
                                  });
}

template <typename S>
Var<S> kl_divergence(const Var<S>& p, const Var<S>& q) {
  same_shape(p, q, "kl_divergence");
  Matrix<S> log_p = log_floored(p.value());
  Matrix<S> log_q = log_floored(q.value());
  Matrix<S> out = p.value().cwiseProduct(log_p - log_q).rowwise().sum();
  return p.tape()->record("kl_divergence", std::move(out), {p, q},
                          [p, q, log_p, log_q](Tape<S>& t, const Matrix<S>& g) {
                            const auto gc = g.col(0).array();
                            if (p.requires_grad()) {
                              Matrix<S> d = log_p - log_q;
                              d.array() += (p.value().array() > S(kLogFloor)).template cast<S>();
                              t.grad(p.id()) += (d.array().colwise() * gc).matrix();
                            }
                            if (q.requires_grad()) {
                              auto qa = q.value().array();
                              Matrix<S> d = (qa > S(kLogFloor)).select(-p.value().array() / qa, S(0)).matrix();
                              t.grad(q.id()) += (d.array().colwise() * gc).matrix();
                            }
                          });
}

template <typename S>
Var<S> entropy(const Var<S>& p) {
  Matrix<S> log_p = log_floored(p.value());
  Matrix<S> out = -(p.value().cwiseProduct(log_p).rowwise().sum());
  return p.tape()->record("entropy", std::move(out), {p}, [p, log_p](Tape<S>& t, const Matrix<S>& g) {
    if (!p.requires_grad()) return;
    Matrix<S> d = log_p;
    d.array() += (p.value().array() > S(kLogFloor)).template cast<S>();
    t.grad(p.id()) -= (d.array().colwise() * g.col(0).array()).matrix();
  });
}

#define DTREC_INSTANTIATE_OPS(S)                                                                 \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                          \
  template Var<S> matmul_nt(const Var<S>&, const Var<S>&);                                       \
  template Var<S> add(const Var<S>&, const Var<S>&);                                             \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                             \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                             \
  template Var<S> affine(const Var<S>&, S, S);                                                   \
  template Var<S> add_row(const Var<S>&, const Var<S>&);                                         \
  template Var<S> mul_col(const Var<S>&, const Var<S>&);                                         \
  template Var<S> relu(const Var<S>&);                                                           \
  template Var<S> gelu(const Var<S>&);                                                           \
  template Var<S> sigmoid(const Var<S>&);                                                        \
  template Var<S> tanh(const Var<S>&);                                                           \
  template Var<S> exp(const Var<S>&);                                                            \
  template Var<S> log_floor(const Var<S>&);                                                      \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                    \
  template Var<S> softmax(const Var<S>&);                                                        \
  template Var<S> log_softmax(const Var<S>&);                                                    \
  template Var<S> embedding_lookup(const Var<S>&, std::span<const int>, int);                    \
  template Var<S> gather_rows(const Var<S>&, std::span<const int>);                              \
  template Var<S> slice_rows(const Var<S>&, Eigen::Index, Eigen::Index);                         \
  template Var<S> gather_cols(const Var<S>&, std::span<const int>);                              \
  template Var<S> concat_cols(const std::vector<Var<S>>&);                                       \
  template Var<S> column(const Var<S>&, Eigen::Index);                                           \
  template Var<S> concat_sequences(const Var<S>&, const Var<S>&, int);                           \
  template Var<S> interleave_steps(const std::vector<Var<S>>&);                                  \
  template Var<S> sum(const Var<S>&);                                                            \
  template Var<S> mean(const Var<S>&);                                                           \
  template Var<S> row_sum(const Var<S>&);                                                        \
  template Var<S> row_l2_norm(const Var<S>&);                                                    \
  template Var<S> dropout(const Var<S>&, double, std::uint64_t, bool);                           \
  template std::vector<Matrix<S>> attention_weights(const Matrix<S>&, const Matrix<S>&,          \
                                                    const AttentionLayout&);                     \
  template Var<S> causal_attention(const Var<S>&, const Var<S>&, const Var<S>&,                  \
                                   const AttentionLayout&);                                      \
  template Var<S> cross_entropy(const Var<S>&, std::span<const int>);                            \
  template Var<S> soft_cross_entropy(const Matrix<S>&, const Var<S>&);                           \
  template Var<S> kl_divergence(const Var<S>&, const Var<S>&);                                   \
  template Var<S> entropy(const Var<S>&);

DTREC_INSTANTIATE_OPS(float)
DTREC_INSTANTIATE_OPS(double)

}  // namespace dtrec
