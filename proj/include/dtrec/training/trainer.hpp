#pragma once

#include "dtrec/data/dataset.hpp"
#include "dtrec/eval/metrics.hpp"
#include "dtrec/hps/prototypes.hpp"
#include "dtrec/numerics/adam.hpp"
#include "dtrec/training/model.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dtrec {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 128;
  AdamOptions adam;
  double grad_clip = 5.0;
  int patience = 10;
  /// Full prototype-loss weight.
  double lambda_p = 0.1;
  GranularitySchedule schedule;  // `steps` follows the model
  int warmup_epochs = 10;
  /// Supervise r_0 with the coarsest level as well.
  bool include_step0 = true;
  KMeansOptions kmeans;
  HaltPolicy halt;  // threshold and min_steps used for validation
  TrainExamples examples = TrainExamples::kSampledPrefix;
  int eval_batch_size = 256;
  int threads = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// L_0: sum over steps 0..T of the batch-mean cross-entropy of the target item.
template <typename S>
Var<S> process_loss(const ReasoningTrace<S>& trace, std::span<const int> targets);

/// Batch-mean cross-entropy of the stick-breaking mixture of steps 1..T.
template <typename S>
Var<S> aggregate_loss(Tape<S>& tape, const ReasoningTrace<S>& trace, std::span<const int> targets);

template <typename S>
struct LossBreakdown {
  Var<S> total;
  double process = 0.0;
  double prototype = 0.0;  // unweighted
  double prototype_weight = 0.0;
  double aggregate = 0.0;
};

/// L_0 + warmup(epoch) * L_p (+ aggregate CE when a halting head is trained).
/// `index` may be null for variants without prototypes; `items` are the
/// current real-item embeddings used to build prototype targets.
template <typename S>
LossBreakdown<S> total_loss(Tape<S>& tape, const ReasoningTrace<S>& trace, std::span<const int> targets, int epoch,
                            const VariantTraits& variant, const TrainConfig& config, const PrototypeIndex<S>* index,
                            const Matrix<S>& items);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double process = 0.0;
  double prototype = 0.0;
  double aggregate = 0.0;
  double valid_ndcg10 = 0.0;
  double valid_cost = 100.0;
  bool improved = false;
};

/// Everything that must survive a save/load for training to resume exactly.
struct TrainerState {
  int next_epoch = 0;
  double best_score = -1.0;
  int best_epoch = -1;
  int since_best = 0;
  bool stopped = false;
  std::vector<EpochRecord> history;
};

class Trainer {
 public:
  Trainer(Recommender<float>& model, const LeaveOneOutSplit& split, TrainConfig config);

  /// One epoch: prototype refresh, optimization, validation, early-stopping bookkeeping.
  EpochRecord run_epoch();
  /// Runs until the epoch budget or early stopping, then restores the best parameters.
  const std::vector<EpochRecord>& train(const std::function<void(const EpochRecord&)>& on_epoch = {});
  bool finished() const;
  void restore_best();

  const TrainConfig& config() const { return config_; }
  Recommender<float>& model() { return model_; }
  TrainerState& state() { return state_; }
  const TrainerState& state() const { return state_; }
  Adam<float>& optimizer() { return adam_; }
  std::vector<Matrix<float>>& best_parameters() { return best_; }
  const std::optional<PrototypeIndex<float>>& prototypes() const { return index_; }
  void set_prototypes(PrototypeIndex<float> index) { index_ = std::move(index); }
  const std::vector<UserResult>& last_validation() const { return last_valid_; }

 private:
  Recommender<float>& model_;
  const LeaveOneOutSplit& split_;
  TrainConfig config_;
  Adam<float> adam_;
  TrainerState state_;
  std::vector<Matrix<float>> best_;
  std::optional<PrototypeIndex<float>> index_;
  std::vector<Example> fixed_examples_;
  std::vector<UserResult> last_valid_;
};

EvalOptions eval_options(const TrainConfig& config, const ModelConfig& model);

/// Manifest (text) followed by little-endian float32 tensor data.
/// `echo` holds the resolved configuration as key/value pairs.
void save_checkpoint(const std::filesystem::path& path, Trainer& trainer,
                     const std::map<std::string, std::string>& echo);

/// Restores parameters, optimizer moments, best snapshot, trainer state and
/// the prototype index into a trainer built from the same configuration.
void load_checkpoint(const std::filesystem::path& path, Trainer& trainer);

/// Reads only the configuration echo of a checkpoint.
std::map<std::string, std::string> read_checkpoint_config(const std::filesystem::path& path);

/// Loads parameter values only (for evaluation).
void load_parameters(const std::filesystem::path& path, Recommender<float>& model);

/// Loads the stored prototype index, if any.
std::optional<PrototypeIndex<float>> load_prototypes(const std::filesystem::path& path);

}  // namespace dtrec
