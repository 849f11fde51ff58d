#pragma once

#include "dtrec/data/dataset.hpp"
#include "dtrec/hps/prototypes.hpp"
#include "dtrec/training/model.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dtrec {

double recall_at_k(int rank, int k);
double ndcg_at_k(int rank, int k);

/// 1-based rank of `target` (1..|I|) among scores of items 1..|I|
/// (scores.col(j) is item j + 1). Equal scores rank the lower item id first.
template <typename S>
int rank_target(const Eigen::Ref<const Eigen::Matrix<S, 1, Eigen::Dynamic>>& scores, int target);

/// Per-user evaluation result.
struct UserResult {
  int user = 0;
  int length = 0;  // history length before truncation
  int target = 0;
  int rank = 0;
  int exit_step = 0;
};

struct EvalOptions {
  int batch_size = 256;
  int max_len = 50;
  HaltPolicy policy;
  /// 0 reads DTREC_THREADS, falling back to the hardware concurrency.
  int threads = 0;
};

int resolve_threads(int requested);

/// Full ranking over every item for each example, in example order.
/// Batches are formed in a fixed order, so results do not depend on threads.
template <typename S>
std::vector<UserResult> rank_examples(const Recommender<S>& model, const std::vector<Example>& examples,
                                      const EvalOptions& options);

double cost_ratio(std::span<const int> exit_steps, int max_steps);

/// Mean exit step per quantile group of history length (group 0 = shortest).
/// Users are ordered by (length, user) and split into n_groups near-equal parts.
std::vector<double> steps_by_length_group(const std::vector<UserResult>& results, int n_groups);

/// Mean exit step per distinct key, keys ascending.
std::vector<std::pair<double, double>> steps_by_key(const std::vector<UserResult>& results,
                                                    std::span<const double> key_by_user);

struct MetricsReport {
  std::string variant;
  std::uint64_t seed = 0;
  int users = 0;
  int max_steps = 0;
  double recall10 = 0, ndcg10 = 0, recall20 = 0, ndcg20 = 0;
  double cost_ratio = 100.0;
  double mean_exit_step = 0.0;
  std::vector<double> group_steps;

  std::string to_json() const;
};

MetricsReport summarize(const std::vector<UserResult>& results, int max_steps, const std::string& variant,
                        std::uint64_t seed, int n_groups = 5);

void write_exits_csv(const std::filesystem::path& path, const std::vector<UserResult>& results,
                     const InteractionDataset& ds);

/// Rows `user_id,step,r_0..r_{d-1},assigned_prototype_id,target_item_id` for steps 1..T.
template <typename S>
void export_trajectories(const std::filesystem::path& path, const Recommender<S>& model,
                         const std::vector<Example>& examples, const PrototypeIndex<S>& index,
                         const InteractionDataset& ds, const EvalOptions& options);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace dtrec
