#pragma once

#include "dtrec/numerics/tape.hpp"

#include <cstdint>
#include <span>
#include <vector>

/// Differentiable operations over Var. Every op records its output on the
/// tape of its first argument and supplies the matching backward rule.
namespace dtrec {

// Linear algebra.
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
/// a * b^T, used for dot-product scoring against row-stored tables.
template <typename S> Var<S> matmul_nt(const Var<S>& a, const Var<S>& b);

// Elementwise arithmetic (shapes must match exactly).
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
/// scale * a + shift
template <typename S> Var<S> affine(const Var<S>& a, S scale, S shift);
/// Adds a [1 x n] row to every row of a.
template <typename S> Var<S> add_row(const Var<S>& a, const Var<S>& row);
/// Multiplies row i of a by c(i, 0); c is [m x 1].
template <typename S> Var<S> mul_col(const Var<S>& a, const Var<S>& c);

// Pointwise nonlinearities.
template <typename S> Var<S> relu(const Var<S>& a);
/// tanh approximation of GELU.
template <typename S> Var<S> gelu(const Var<S>& a);
template <typename S> Var<S> sigmoid(const Var<S>& a);
template <typename S> Var<S> tanh(const Var<S>& a);
template <typename S> Var<S> exp(const Var<S>& a);
/// log(max(a, kLogFloor)); the gradient is zero below the floor.
template <typename S> Var<S> log_floor(const Var<S>& a);

// Normalization and distributions (row-wise).
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5));
template <typename S> Var<S> softmax(const Var<S>& logits);
template <typename S> Var<S> log_softmax(const Var<S>& logits);

// Indexing and layout.
/// Rows of `table` selected by `ids`; rows with id == padding_id get no gradient.
template <typename S>
Var<S> embedding_lookup(const Var<S>& table, std::span<const int> ids, int padding_id = 0);
template <typename S> Var<S> gather_rows(const Var<S>& a, std::span<const int> rows);
template <typename S> Var<S> slice_rows(const Var<S>& a, Eigen::Index start, Eigen::Index count);
/// Element (i, cols[i]) of each row, as [m x 1].
template <typename S> Var<S> gather_cols(const Var<S>& a, std::span<const int> cols);
template <typename S> Var<S> concat_cols(const std::vector<Var<S>>& parts);
template <typename S> Var<S> column(const Var<S>& a, Eigen::Index j);
/// Interleaves two batch-major sequence blocks: [B*La x d], [B*Lb x d] -> [B*(La+Lb) x d],
/// each batch row keeping a's rows first.
template <typename S> Var<S> concat_sequences(const Var<S>& a, const Var<S>& b, int batch);

/// Stacks per-step blocks [B x d] (one per position) into batch-major [B*steps x d].
template <typename S> Var<S> interleave_steps(const std::vector<Var<S>>& steps);

// Reductions.
template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);
/// [m x n] -> [m x 1]
template <typename S> Var<S> row_sum(const Var<S>& a);
/// Euclidean norm of each row, [m x 1]; the gradient at a zero row is zero.
template <typename S> Var<S> row_l2_norm(const Var<S>& a);

/// Inverted dropout with a mask drawn from `key`; identity when !training or rate == 0.
template <typename S> Var<S> dropout(const Var<S>& a, double rate, std::uint64_t key, bool training);

/// Layout and masking for multi-head scaled dot-product attention.
///
/// Queries, keys and values are batch-major: row b*Lq + i is query i of batch
/// row b. Query i sits at absolute position query_offset + i and may attend to
/// key j iff j <= query_offset + i and key_valid[b*Lk + j] != 0. A query with no
/// visible key produces a zero output row.
struct AttentionLayout {
  int batch = 1;
  int heads = 1;
  int query_offset = 0;
  std::vector<std::uint8_t> key_valid;
};

template <typename S>
Var<S> causal_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                        const AttentionLayout& layout);

/// Attention weights [Lq x Lk] for every (batch, head) pair, ordered b*heads + h.
template <typename S>
std::vector<Matrix<S>> attention_weights(const Matrix<S>& q, const Matrix<S>& k,
                                         const AttentionLayout& layout);

// Losses and information measures; all return one value per row, [m x 1].
/// -log_probs(i, targets[i]); targets must index a column.
template <typename S> Var<S> cross_entropy(const Var<S>& log_probs, std::span<const int> targets);
/// -sum_j target(i,j) * log_probs(i,j). `target` rows must be distributions; it is
/// a constant, so gradient reaches only `log_probs`.
template <typename S> Var<S> soft_cross_entropy(const Matrix<S>& target, const Var<S>& log_probs);
/// sum_j p log(p / q) with q floored at kLogFloor.
template <typename S> Var<S> kl_divergence(const Var<S>& p, const Var<S>& q);
/// -sum_j p log p.
template <typename S> Var<S> entropy(const Var<S>& p);

// Operator sugar.
template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <typename S> Var<S> operator*(S s, const Var<S>& a) { return affine(a, s, S(0)); }

}  // namespace dtrec
