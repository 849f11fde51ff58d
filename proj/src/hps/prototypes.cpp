#include "dtrec/hps/prototypes.hpp"

#include "dtrec/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <random>

namespace dtrec {

void GranularitySchedule::validate() const {
  if (k0 < 1 || k_upper < k0) throw ContractError("granularity schedule needs 1 <= k0 <= k_upper");
  if (!(alpha > 0.0)) throw ContractError("granularity schedule needs alpha > 0");
  if (steps < 0) throw ContractError("granularity schedule needs steps >= 0");
}

int schedule_k(const GranularitySchedule& schedule, int t, int num_items) {
  schedule.validate();
  if (t < 1 || t > schedule.steps)
    throw ContractError("schedule_k: step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps) + "]");
  if (num_items < 1) throw ContractError("schedule_k: no items");
  const double raw = schedule.k_upper - (schedule.k_upper - schedule.k0) * std::exp(-schedule.alpha * (t - 1));
  const long hi = std::min<long>(schedule.k_upper, num_items);
  const long lo = std::min<long>(schedule.k0, hi);
  return static_cast<int>(std::clamp<long>(std::lround(raw), lo, hi));
}

namespace {

using MatD = Matrix<double>;

double squared_distance(const MatD& a, Eigen::Index i, const MatD& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

/// Nearest center per point; returns SSE and fills per-point distance.
double assign(const MatD& x, const MatD& centers, std::vector<int>& assignment, std::vector<double>& dist) {
  double sse = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
      const double d = squared_distance(x, i, centers, c);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    assignment[i] = best;
    dist[i] = best_d;
    sse += best_d;
  }
  return sse;
}

/// Moves each empty cluster onto the point farthest from its current center.
/// Returns true if anything changed.
bool reseed_empty(const MatD& x, MatD& centers, std::vector<int>& assignment, std::vector<double>& dist) {
  const Eigen::Index k = centers.rows();
  bool changed = false;
  while (true) {
    std::vector<int> counts(k, 0);
    for (int a : assignment) ++counts[a];
    const auto empty = std::find(counts.begin(), counts.end(), 0);
    if (empty == counts.end()) return changed;
    Eigen::Index far = -1;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (counts[assignment[i]] < 2) continue;
      if (far < 0 || dist[i] > dist[far]) far = i;
    }
    if (far < 0) return changed;  // k > distinct points cannot happen when k <= n
    const int c = static_cast<int>(empty - counts.begin());
    centers.row(c) = x.row(far);
    assignment[far] = c;
    dist[far] = 0.0;
    changed = true;
  }
}

MatD seed_plus_plus(const MatD& x, int k, std::mt19937_64& gen) {
  const Eigen::Index n = x.rows();
  MatD centers(k, x.cols());
  std::vector<char> chosen(n, 0);
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  Eigen::Index pick = first(gen);
  centers.row(0) = x.row(pick);
  chosen[pick] = 1;
  std::vector<double> d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = squared_distance(x, i, centers, 0);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    if (total > 0.0) {
      std::discrete_distribution<Eigen::Index> next(d2.begin(), d2.end());
      pick = next(gen);
    } else {
      pick = std::find(chosen.begin(), chosen.end(), 0) - chosen.begin();
    }
    centers.row(c) = x.row(pick);
    chosen[pick] = 1;
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(x, i, centers, c));
  }
  return centers;
}

struct Fit {
  MatD centers;
  std::vector<int> assignment;
  double sse;
  std::vector<double> history;
  int iterations;
};

Fit lloyd(const MatD& x, int k, std::mt19937_64& gen, const KMeansOptions& options) {
  const Eigen::Index n = x.rows();
  Fit fit{seed_plus_plus(x, k, gen), std::vector<int>(n), 0.0, {}, 0};
  std::vector<double> dist(n);
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    double sse = assign(x, fit.centers, fit.assignment, dist);
    if (reseed_empty(x, fit.centers, fit.assignment, dist)) {
      sse = 0.0;
      for (double d : dist) sse += d;
    }
    fit.history.push_back(sse);
    ++fit.iterations;

    MatD sums = MatD::Zero(k, x.cols());
    std::vector<int> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(fit.assignment[i]) += x.row(i);
      ++counts[fit.assignment[i]];
    }
    double shift = 0.0;
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      const Eigen::RowVectorXd mean = sums.row(c) / counts[c];
      shift = std::max(shift, (mean - fit.centers.row(c)).norm());
      fit.centers.row(c) = mean;
    }
    if (shift < options.tolerance) break;
  }
  fit.sse = assign(x, fit.centers, fit.assignment, dist);
  if (reseed_empty(x, fit.centers, fit.assignment, dist)) {
    fit.sse = 0.0;
    for (double d : dist) fit.sse += d;
  }
  return fit;
}

std::uint64_t hash_matrix(const void* data, std::size_t bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

template <typename S>
KMeansResult<S> fit_prototypes(const Matrix<S>& points, int k, std::uint64_t seed, const KMeansOptions& options) {
  if (k < 1) throw ContractError("fit_prototypes: k must be >= 1");
  if (k > points.rows())
    throw ContractError("fit_prototypes: k = " + std::to_string(k) + " exceeds " + std::to_string(points.rows()) +
                        " points");
  if (options.restarts < 1 || options.max_iterations < 1) throw ContractError("fit_prototypes: bad options");
  const MatD x = points.template cast<double>();
  Fit best;
  bool have = false;
  for (int r = 0; r < options.restarts; ++r) {
    std::mt19937_64 gen(derive_seed(seed, Stream::kKMeans, {static_cast<std::uint64_t>(r)}));
    Fit fit = lloyd(x, k, gen, options);
    if (!have || fit.sse < best.sse) {
      best = std::move(fit);
      have = true;
    }
  }
  KMeansResult<S> out;
  out.centers = best.centers.cast<S>();
  out.assignment = std::move(best.assignment);
  out.sse = best.sse;
  out.sse_history = std::move(best.history);
  out.iterations = best.iterations;
  return out;
}

template <typename S>
double partition_sse(const Matrix<S>& points, const std::vector<int>& assignment, int k) {
  if (static_cast<Eigen::Index>(assignment.size()) != points.rows())
    throw DimensionError("partition_sse: one cluster id per point required");
  const MatD x = points.template cast<double>();
  MatD sums = MatD::Zero(k, x.cols());
  std::vector<int> counts(k, 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (assignment[i] < 0 || assignment[i] >= k) throw IndexError("partition_sse: cluster id out of range");
    sums.row(assignment[i]) += x.row(i);
    ++counts[assignment[i]];
  }
  double sse = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int c = assignment[i];
    sse += (x.row(i) - sums.row(c) / counts[c]).squaredNorm();
  }
  return sse;
}

template <typename S>
const Matrix<S>& PrototypeIndex<S>::level(int t) const {
  if (centers.empty()) throw ContractError("prototype index is empty");
  const int step = std::max(t, 1);
  if (step > steps()) throw ContractError("prototype index has no level for step " + std::to_string(t));
  return centers[step - 1];
}

template <typename S>
std::vector<int> nearest_prototype(const Matrix<S>& states, const Matrix<S>& centers) {
  if (states.cols() != centers.cols()) throw DimensionError("nearest_prototype: width mismatch");
  if (centers.rows() == 0) throw ContractError("nearest_prototype: no centers");
  const MatD x = states.template cast<double>();
  const MatD c = centers.template cast<double>();
  std::vector<int> ids(static_cast<std::size_t>(states.rows()));
  std::vector<double> dist(ids.size());
  assign(x, c, ids, dist);
  return ids;
}

template <typename S>
Matrix<S> prototype_distribution(const Matrix<S>& prototypes, const Matrix<S>& items) {
  if (prototypes.cols() != items.cols()) throw DimensionError("prototype_distribution: width mismatch");
  MatD logits = prototypes.template cast<double>() * items.template cast<double>().transpose();
  logits = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  logits.array().colwise() /= logits.rowwise().sum().array();
  return logits.cast<S>();
}

template <typename S>
Var<S> prototype_loss(const ReasoningTrace<S>& trace, const PrototypeIndex<S>& index, const Matrix<S>& items,
                      bool include_step0) {
  const int first = include_step0 ? 0 : 1;
  if (trace.steps() < std::max(first, 1)) throw ContractError("prototype_loss: trace has no reasoning steps");
  Var<S> total;
  for (int t = first; t <= trace.steps(); ++t) {
    const Matrix<S>& centers = index.level(t);
    const std::vector<int> ids = nearest_prototype<S>(trace.states[t].value(), centers);
    Matrix<S> protos(static_cast<Eigen::Index>(ids.size()), centers.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) protos.row(i) = centers.row(ids[i]);
    Var<S> term = mean(soft_cross_entropy(prototype_distribution<S>(protos, items), trace.log_probs[t]));
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

double warmup_weight(const WarmupSchedule& warmup, int epoch) {
  if (epoch < 0) throw ContractError("warmup_weight: negative epoch");
  if (warmup.ramp_epochs <= 0) return warmup.full_weight;
  return warmup.full_weight * std::min(1.0, static_cast<double>(epoch) / warmup.ramp_epochs);
}

template <typename S>
PrototypeIndex<S> refresh_index(const Matrix<S>& items, const GranularitySchedule& schedule, bool constant_k,
                                int epoch, std::uint64_t seed, const KMeansOptions& options) {
  schedule.validate();
  PrototypeIndex<S> index;
  index.schedule = schedule;
  index.constant_k = constant_k;
  index.fit_epoch = epoch;
  index.snapshot_hash = hash_matrix(items.data(), static_cast<std::size_t>(items.size()) * sizeof(S));
  const int n = static_cast<int>(items.rows());
  std::map<int, Matrix<S>> fitted;
  for (int t = 1; t <= schedule.steps; ++t) {
    const int k = constant_k ? std::min(schedule.k0, n) : schedule_k(schedule, t, n);
    auto it = fitted.find(k);
    if (it == fitted.end()) {
      const std::uint64_t level_seed =
          derive_seed(seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(k)});
      it = fitted.emplace(k, fit_prototypes(items, k, level_seed, options).centers).first;
    }
    index.centers.push_back(it->second);
  }
  return index;
}

template <typename S>
Matrix<S> item_table(const SequenceEncoder<S>& encoder) {
  return encoder.item_embeddings().value.bottomRows(encoder.num_items());
}

template <typename S>
PrototypeIndex<S> refresh_index(const SequenceEncoder<S>& encoder, const GranularitySchedule& schedule,
                                bool constant_k, int epoch, std::uint64_t seed, const KMeansOptions& options) {
  return refresh_index<S>(item_table(encoder), schedule, constant_k, epoch, seed, options);
}

#define DTREC_INSTANTIATE_HPS(S)                                                                          \
  template KMeansResult<S> fit_prototypes(const Matrix<S>&, int, std::uint64_t, const KMeansOptions&);   \
  template double partition_sse(const Matrix<S>&, const std::vector<int>&, int);                         \
  template struct PrototypeIndex<S>;                                                                      \
  template std::vector<int> nearest_prototype(const Matrix<S>&, const Matrix<S>&);                       \
  template Matrix<S> prototype_distribution(const Matrix<S>&, const Matrix<S>&);                         \
  template Var<S> prototype_loss(const ReasoningTrace<S>&, const PrototypeIndex<S>&, const Matrix<S>&,   \
                                 bool);                                                                   \
  template PrototypeIndex<S> refresh_index(const Matrix<S>&, const GranularitySchedule&, bool, int,      \
                                           std::uint64_t, const KMeansOptions&);                         \
  template PrototypeIndex<S> refresh_index(const SequenceEncoder<S>&, const GranularitySchedule&, bool,  \
                                           int, std::uint64_t, const KMeansOptions&);                    \
  template Matrix<S> item_table(const SequenceEncoder<S>&);

DTREC_INSTANTIATE_HPS(float)
DTREC_INSTANTIATE_HPS(double)

}  // namespace dtrec
