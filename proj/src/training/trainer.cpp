#include "dtrec/training/trainer.hpp"

#include "dtrec/numerics/random.hpp"

#include <cmath>
#include <sstream>

namespace dtrec {

void TrainConfig::validate() const {
  if (epochs < 0) throw ContractError("epochs must be >= 0");
  if (batch_size < 1 || eval_batch_size < 1) throw ContractError("batch sizes must be positive");
  if (!(adam.learning_rate > 0.0)) throw ContractError("learning rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ContractError("Adam betas must be in [0, 1)");
  if (!(adam.epsilon > 0.0)) throw ContractError("Adam epsilon must be positive");
  if (!(grad_clip > 0.0)) throw ContractError("grad_clip must be positive");
  if (patience < 1) throw ContractError("patience must be >= 1");
  if (!(lambda_p >= 0.0)) throw ContractError("lambda_p must be >= 0");
  if (warmup_epochs < 0) throw ContractError("warmup_epochs must be >= 0");
  if (!(halt.threshold >= 0.0 && halt.threshold <= 1.0)) throw ContractError("halt threshold must be in [0, 1]");
  if (halt.min_steps < 1) throw ContractError("halt min_steps must be >= 1");
}

namespace {

std::vector<int> target_columns(std::span<const int> targets, int num_items) {
  std::vector<int> cols(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 1 || targets[i] > num_items)
      throw IndexError("target item " + std::to_string(targets[i]) + " out of range");
    cols[i] = targets[i] - 1;
  }
  return cols;
}

}  // namespace

template <typename S>
Var<S> process_loss(const ReasoningTrace<S>& trace, std::span<const int> targets) {
  if (trace.log_probs.empty()) throw ContractError("process_loss: empty trace");
  const std::vector<int> cols = target_columns(targets, static_cast<int>(trace.log_probs[0].cols()));
  Var<S> total = mean(cross_entropy(trace.log_probs[0], std::span<const int>(cols)));
  for (std::size_t t = 1; t < trace.log_probs.size(); ++t)
    total = add(total, mean(cross_entropy(trace.log_probs[t], std::span<const int>(cols))));
  return total;
}

template <typename S>
Var<S> aggregate_loss(Tape<S>& tape, const ReasoningTrace<S>& trace, std::span<const int> targets) {
  if (trace.halt_probs.empty() || static_cast<int>(trace.halt_probs.size()) != trace.steps())
    throw ContractError("aggregate_loss: trace has no halting probabilities");
  const std::vector<int> cols = target_columns(targets, static_cast<int>(trace.log_probs[0].cols()));
  std::vector<Var<S>> probs;
  for (int t = 1; t <= trace.steps(); ++t) probs.push_back(exp(trace.log_probs[t]));
  const Var<S> mixture = aggregate_prediction(probs, soft_halt_weights(tape, trace.halt_probs));
  return mean(cross_entropy(log_floor(mixture), std::span<const int>(cols)));
}

template <typename S>
LossBreakdown<S> total_loss(Tape<S>& tape, const ReasoningTrace<S>& trace, std::span<const int> targets, int epoch,
                            const VariantTraits& variant, const TrainConfig& config, const PrototypeIndex<S>* index,
                            const Matrix<S>& items) {
  LossBreakdown<S> out;
  out.total = process_loss(trace, targets);
  out.process = out.total.item();
  if (variant.prototypes) {
    if (index == nullptr) throw ContractError("total_loss: prototype variant without an index");
    WarmupSchedule warmup{config.lambda_p, variant.warmup ? config.warmup_epochs : 0};
    out.prototype_weight = warmup_weight(warmup, epoch);
    if (out.prototype_weight > 0.0) {
      Var<S> lp = prototype_loss(trace, *index, items, config.include_step0);
      out.prototype = lp.item();
      out.total = add(out.total, affine(lp, static_cast<S>(out.prototype_weight), S(0)));
    }
  }
  if (variant.halting != HaltMode::kNone) {
    Var<S> agg = aggregate_loss(tape, trace, targets);
    out.aggregate = agg.item();
    out.total = add(out.total, agg);
  }
  return out;
}

EvalOptions eval_options(const TrainConfig& config, const ModelConfig& model) {
  EvalOptions e;
  e.batch_size = config.eval_batch_size;
  e.max_len = model.backbone.max_len;
  e.policy = config.halt;
  e.policy.max_steps = std::max(1, model.backbone.reasoning_steps);
  e.policy.min_steps = std::min(e.policy.min_steps, e.policy.max_steps);
  e.threads = config.threads;
  return e;
}

Trainer::Trainer(Recommender<float>& model, const LeaveOneOutSplit& split, TrainConfig config)
    : model_(model), split_(split), config_(std::move(config)), adam_(model.store().all(), config_.adam) {
  config_.validate();
  config_.schedule.steps = model.steps();
  if (model.variant_traits().prototypes) config_.schedule.validate();
  if (config_.examples != TrainExamples::kSampledPrefix)
    fixed_examples_ = training_examples(split_, config_.examples);
  best_ = model_.store().snapshot();
}

bool Trainer::finished() const { return state_.stopped || state_.next_epoch >= config_.epochs; }

namespace {

std::string describe_batch(const Batch& batch, int epoch, std::size_t index) {
  std::ostringstream os;
  os << "epoch " << epoch << " batch " << index << " (" << batch.size << " rows, length " << batch.length << ")";
  for (int b = 0; b < batch.size; ++b) {
    os << "\n  user " << batch.users[b] << " target " << batch.targets[b] << " items";
    for (int c = 0; c < batch.length; ++c)
      if (batch.at(b, c) != 0) os << ' ' << batch.at(b, c);
  }
  return os.str();
}

}  // namespace

EpochRecord Trainer::run_epoch() {
  const int epoch = state_.next_epoch;
  const VariantTraits variant = model_.variant_traits();
  const std::uint64_t seed = config_.seed;
  if (variant.prototypes)
    index_ = refresh_index(model_.encoder(), config_.schedule, variant.constant_k, epoch,
                           derive_seed(seed, Stream::kKMeans, {static_cast<std::uint64_t>(epoch)}), config_.kmeans);

  std::vector<Example> sampled;
  if (config_.examples == TrainExamples::kSampledPrefix)
    sampled = training_examples(split_, config_.examples,
                                derive_seed(seed, Stream::kExamples, {static_cast<std::uint64_t>(epoch)}));
  const std::vector<Example>& examples = sampled.empty() ? fixed_examples_ : sampled;
  BatchStream stream(examples, config_.batch_size, model_.config().backbone.max_len,
                     derive_seed(seed, Stream::kShuffle, {static_cast<std::uint64_t>(epoch)}));

  EpochRecord rec;
  rec.epoch = epoch;
  auto params = model_.store().all();
  std::size_t index = 0;
  double weight_sum = 0.0;
  while (auto batch = stream.next()) {
    Tape<float> tape(true);
    ForwardOptions opts{true, derive_seed(seed, Stream::kDropout,
                                          {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(index)})};
    try {
      ReasoningTrace<float> trace = model_.forward(tape, *batch, opts);
      const Matrix<float> items = variant.prototypes ? item_table(model_.encoder()) : Matrix<float>();
      LossBreakdown<float> loss = total_loss(tape, trace, std::span<const int>(batch->targets), epoch, variant,
                                             config_, index_ ? &*index_ : nullptr, items);
      tape.backward(loss.total);
      const double grad_norm = clip_grad_norm(params, config_.grad_clip);
      if (!std::isfinite(grad_norm)) throw NumericError("non-finite gradient norm");
      adam_.step();
      adam_.zero_grad();
      const double w = batch->size;
      rec.loss += w * loss.total.item();
      rec.process += w * loss.process;
      rec.prototype += w * loss.prototype;
      rec.aggregate += w * loss.aggregate;
      weight_sum += w;
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " during " + describe_batch(*batch, epoch, index));
    }
    ++index;
  }
  if (weight_sum > 0) {
    rec.loss /= weight_sum;
    rec.process /= weight_sum;
    rec.prototype /= weight_sum;
    rec.aggregate /= weight_sum;
  }

  last_valid_ = rank_examples(model_, split_.valid, eval_options(config_, model_.config()));
  const MetricsReport valid = summarize(last_valid_, model_.steps(), to_string(model_.config().variant), seed);
  rec.valid_ndcg10 = valid.ndcg10;
  rec.valid_cost = valid.cost_ratio;
  if (rec.valid_ndcg10 > state_.best_score) {
    state_.best_score = rec.valid_ndcg10;
    state_.best_epoch = epoch;
    state_.since_best = 0;
    best_ = model_.store().snapshot();
    rec.improved = true;
  } else if (++state_.since_best >= config_.patience) {
    state_.stopped = true;
  }
  state_.history.push_back(rec);
  state_.next_epoch = epoch + 1;
  return rec;
}

const std::vector<EpochRecord>& Trainer::train(const std::function<void(const EpochRecord&)>& on_epoch) {
  while (!finished()) {
    const EpochRecord rec = run_epoch();
    if (on_epoch) on_epoch(rec);
  }
  restore_best();
  return state_.history;
}

void Trainer::restore_best() { model_.store().restore(best_); }

#define DTREC_INSTANTIATE_LOSS(S)                                                                           \
  template Var<S> process_loss(const ReasoningTrace<S>&, std::span<const int>);                            \
  template Var<S> aggregate_loss(Tape<S>&, const ReasoningTrace<S>&, std::span<const int>);                \
  template LossBreakdown<S> total_loss(Tape<S>&, const ReasoningTrace<S>&, std::span<const int>, int,      \
                                       const VariantTraits&, const TrainConfig&, const PrototypeIndex<S>*, \
                                       const Matrix<S>&);

DTREC_INSTANTIATE_LOSS(float)
DTREC_INSTANTIATE_LOSS(double)

}  // namespace dtrec
