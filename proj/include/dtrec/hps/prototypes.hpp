#pragma once

#include "dtrec/backbone/encoder.hpp"
#include "dtrec/numerics/ops.hpp"

#include <cstdint>
#include <vector>

namespace dtrec {

/// Coarse-to-fine cluster counts over reasoning steps:
/// k_t = k_upper - (k_upper - k0) * exp(-alpha * (t - 1)).
struct GranularitySchedule {
  int k0 = 10;
  int k_upper = 3000;
  double alpha = 0.5;
  int steps = 3;

  void validate() const;
};

/// Integral cluster count at step t in [1, steps]: the growth curve rounded to nearest,
/// clamped to [k0, min(k_upper, num_items)].
int schedule_k(const GranularitySchedule& schedule, int t, int num_items);

struct KMeansOptions {
  int max_iterations = 100;
  /// Stop once no center moves farther than this.
  double tolerance = 1e-4;
  /// Independent k-means++ initializations; the lowest-SSE fit is kept.
  int restarts = 1;
};

template <typename S>
struct KMeansResult {
  Matrix<S> centers;            // [k x d]
  std::vector<int> assignment;  // cluster of every point
  double sse = 0.0;             // within-cluster sum of squared distances to `centers`
  std::vector<double> sse_history;  // after each assignment step of the kept run
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding; deterministic given `seed`.
/// Empty clusters are re-seeded from the point farthest from its center.
template <typename S>
KMeansResult<S> fit_prototypes(const Matrix<S>& points, int k, std::uint64_t seed, const KMeansOptions& options = {});

/// Sum of squared distances from each point to the mean of its cluster.
template <typename S>
double partition_sse(const Matrix<S>& points, const std::vector<int>& assignment, int k);

/// Cluster centers per reasoning step, fitted on a detached embedding snapshot.
template <typename S>
struct PrototypeIndex {
  GranularitySchedule schedule;
  bool constant_k = false;
  std::vector<Matrix<S>> centers;  // index t-1 holds step t
  std::uint64_t snapshot_hash = 0;
  int fit_epoch = -1;

  int steps() const { return static_cast<int>(centers.size()); }
  /// Centers supervising step t; step 0 shares the coarsest level (t = 1).
  const Matrix<S>& level(int t) const;
};

/// Index of the nearest center for each row (Euclidean; ties go to the lowest index).
template <typename S>
std::vector<int> nearest_prototype(const Matrix<S>& states, const Matrix<S>& centers);

/// softmax(prototype * items^T) per row, evaluated in double precision.
/// `items` holds real items only ([|I| x d]); the result is a constant target.
template <typename S>
Matrix<S> prototype_distribution(const Matrix<S>& prototypes, const Matrix<S>& items);

/// Sum over supervised steps of the batch-mean soft cross-entropy between each
/// step's nearest-prototype distribution and its predicted distribution.
/// Gradient reaches the trace's log-probabilities only.
template <typename S>
Var<S> prototype_loss(const ReasoningTrace<S>& trace, const PrototypeIndex<S>& index, const Matrix<S>& items,
                      bool include_step0);

/// Linear ramp of the prototype-loss weight from 0 at epoch 0 to full_weight.
struct WarmupSchedule {
  double full_weight = 0.1;
  int ramp_epochs = 10;
};

double warmup_weight(const WarmupSchedule& warmup, int epoch);

/// Fits every step's level on `items` ([|I| x d], detached). Steps with the
/// same k share one fit. With constant_k every step uses k0.
template <typename S>
PrototypeIndex<S> refresh_index(const Matrix<S>& items, const GranularitySchedule& schedule, bool constant_k,
                                int epoch, std::uint64_t seed, const KMeansOptions& options = {});

template <typename S>
PrototypeIndex<S> refresh_index(const SequenceEncoder<S>& encoder, const GranularitySchedule& schedule,
                                bool constant_k, int epoch, std::uint64_t seed, const KMeansOptions& options = {});

/// Real-item rows of the encoder's embedding table.
template <typename S>
Matrix<S> item_table(const SequenceEncoder<S>& encoder);

}  // namespace dtrec
