#include "dtrec/training/trainer.hpp"

#include "support/fixtures.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

namespace dtrec {
namespace {

using MatD = Matrix<double>;

struct Fixture {
  InteractionDataset ds = testing::small_dataset();
  LeaveOneOutSplit split = leave_one_out_split(ds);
  Batch batch = testing::first_batch(split, 16, 16);
};

ReasoningTrace<double> constant_trace(Tape<double>& tape, const std::vector<MatD>& logits) {
  ReasoningTrace<double> trace;
  for (const auto& l : logits) {
    trace.states.push_back(tape.constant(MatD::Zero(l.rows(), 2)));
    trace.log_probs.push_back(log_softmax(tape.constant(l)));
  }
  return trace;
}

TEST(ProcessLoss, SingleStepIsCrossEntropy) {
  Tape<double> tape(false);
  MatD l(2, 3);
  l << 1, 2, 3, 0, 0, 5;
  const auto trace = constant_trace(tape, {l});
  const std::vector<int> targets{1, 3};
  const double expected = 0.5 * (-(1 - std::log(std::exp(1) + std::exp(2) + std::exp(3))) -
                                 (5 - std::log(2 + std::exp(5))));
  EXPECT_NEAR(process_loss(trace, targets).item(), expected, 1e-14);
}

TEST(ProcessLoss, IdenticalStepsScaleByStepCount) {
  Tape<double> tape(false);
  MatD l(3, 4);
  l << 0.1, 0.2, 0.3, 0.4, -1, 2, 0, 1, 3, 3, 3, 0;
  const std::vector<int> targets{4, 2, 1};
  const double one = process_loss(constant_trace(tape, {l}), targets).item();
  EXPECT_NEAR(process_loss(constant_trace(tape, {l, l, l, l}), targets).item(), 4 * one, 1e-13);
}

TEST(ProcessLoss, CertainPredictionsCostNothing) {
  Tape<double> tape(false);
  MatD l = MatD::Zero(2, 3);
  l(0, 1) = 1000;
  l(1, 2) = 1000;
  EXPECT_EQ(process_loss(constant_trace(tape, {l, l}), std::vector<int>{2, 3}).item(), 0.0);
}

TEST(TotalLoss, BaseWithoutReasoningIsSingleStepCrossEntropy) {
  Fixture f;
  Recommender<double> model(testing::tiny_model(Variant::kBase, 0), f.ds.num_items(), 3);
  Tape<double> tape(false);
  const auto trace = model.forward(tape, f.batch, {});
  ASSERT_EQ(trace.steps(), 0);
  const auto cfg = testing::quick_train();
  const auto loss = total_loss<double>(tape, trace, f.batch.targets, 5, model.variant_traits(), cfg, nullptr,
                                       item_table(model.encoder()));
  std::vector<int> zero_based(f.batch.targets);
  for (int& t : zero_based) --t;
  EXPECT_EQ(loss.total.item(), mean(cross_entropy(trace.log_probs[0], zero_based)).item());
  EXPECT_EQ(loss.prototype, 0.0);
  EXPECT_EQ(loss.aggregate, 0.0);
}

TEST(TotalLoss, WarmupZeroAtFirstEpochAndProcessTermUnchanged) {
  Fixture f;
  Recommender<double> model(testing::tiny_model(Variant::kHps, 2), f.ds.num_items(), 3);
  const MatD items = item_table(model.encoder());
  auto cfg = testing::quick_train();
  cfg.schedule.steps = 2;
  const auto index = refresh_index(items, cfg.schedule, false, 0, 1);
  Tape<double> tape(false);
  const auto trace = model.forward(tape, f.batch, {});
  const double l0 = process_loss(trace, std::span<const int>(f.batch.targets)).item();

  const auto e0 = total_loss<double>(tape, trace, f.batch.targets, 0, traits(Variant::kHps), cfg, &index, items);
  EXPECT_EQ(e0.prototype_weight, 0.0);
  EXPECT_EQ(e0.total.item(), l0);
  EXPECT_EQ(e0.process, l0);

  const auto e1 = total_loss<double>(tape, trace, f.batch.targets, 1, traits(Variant::kHps), cfg, &index, items);
  EXPECT_DOUBLE_EQ(e1.prototype_weight, cfg.lambda_p / 2);
  EXPECT_EQ(e1.process, l0);
  EXPECT_GT(e1.prototype, 0.0);
  EXPECT_NEAR(e1.total.item(), l0 + e1.prototype_weight * e1.prototype, 1e-12);

  const auto nw = total_loss<double>(tape, trace, f.batch.targets, 0, traits(Variant::kHpsNoWarmup), cfg, &index,
                                     items);
  EXPECT_DOUBLE_EQ(nw.prototype_weight, cfg.lambda_p);
}

TEST(TotalLoss, HaltingAddsAggregateTerm) {
  Fixture f;
  Recommender<double> model(testing::tiny_model(Variant::kHpsArh, 2), f.ds.num_items(), 3);
  const MatD items = item_table(model.encoder());
  auto cfg = testing::quick_train();
  cfg.schedule.steps = 2;
  const auto index = refresh_index(items, cfg.schedule, false, 0, 1);
  Tape<double> tape(false);
  const auto trace = model.forward(tape, f.batch, {});
  const auto l = total_loss<double>(tape, trace, f.batch.targets, 4, traits(Variant::kHpsArh), cfg, &index, items);
  const double agg = aggregate_loss(tape, trace, std::span<const int>(f.batch.targets)).item();
  EXPECT_EQ(l.aggregate, agg);
  EXPECT_NEAR(l.total.item(), l.process + l.prototype_weight * l.prototype + agg, 1e-12);
}

TEST(AggregateLoss, MatchesHandMixture) {
  Tape<double> tape(false);
  MatD a(1, 3), b(1, 3);
  a << 0, 1, 2;
  b << 2, 1, 0;
  auto trace = constant_trace(tape, {a, a, b});
  MatD p(1, 1);
  p << 0.25;
  trace.halt_probs = {tape.constant(p), tape.constant(p)};
  // Weights 0.25 and 0.75 over steps 1 and 2.
  const MatD ya = trace.probs(1), yb = trace.probs(2);
  const double mix = 0.25 * ya(0, 0) + 0.75 * yb(0, 0);
  EXPECT_NEAR(aggregate_loss(tape, trace, std::vector<int>{1}).item(), -std::log(mix), 1e-14);
}

TEST(Variants, NamesAndTraits) {
  const std::vector<std::string> names{"base", "hps_kconst", "hps_nowarmup", "hps", "hps_ree", "hps_arh"};
  ASSERT_EQ(all_variants().size(), names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    EXPECT_EQ(to_string(all_variants()[i]), names[i]);
    EXPECT_EQ(parse_variant(names[i]), all_variants()[i]);
  }
  EXPECT_THROW(parse_variant("hps_plus"), ContractError);
  EXPECT_FALSE(traits(Variant::kBase).prototypes);
  EXPECT_TRUE(traits(Variant::kHpsConstK).constant_k);
  EXPECT_FALSE(traits(Variant::kHpsNoWarmup).warmup);
  EXPECT_EQ(traits(Variant::kHpsRee).halting, HaltMode::kRee);
  EXPECT_EQ(traits(Variant::kHpsArh).halting, HaltMode::kArh);
  EXPECT_EQ(traits(Variant::kHps).halting, HaltMode::kNone);
  ModelConfig bad = testing::tiny_model(Variant::kHps, 0);
  EXPECT_THROW(bad.validate(), ContractError);
}

std::vector<EpochRecord> run(std::uint64_t seed, int epochs, Variant variant = Variant::kHpsArh) {
  Fixture f;
  Recommender<float> model(testing::tiny_model(variant, 2), f.ds.num_items(), seed);
  Trainer trainer(model, f.split, testing::quick_train(epochs, seed));
  return trainer.train();
}

TEST(Trainer, SeedDeterminism) {
  const auto a = run(3, 3), b = run(3, 3), c = run(4, 3);
  ASSERT_EQ(a.size(), 3u);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].loss, b[i].loss);
    EXPECT_EQ(a[i].valid_ndcg10, b[i].valid_ndcg10);
    EXPECT_EQ(a[i].valid_cost, b[i].valid_cost);
  }
  EXPECT_NE(a[2].loss, c[2].loss);
}

TEST(Trainer, LossesFiniteAndBreakdownReported) {
  for (Variant v : all_variants()) {
    const auto hist = run(2, 3, v);
    for (const auto& r : hist) {
      EXPECT_TRUE(std::isfinite(r.loss)) << to_string(v);
      EXPECT_GE(r.valid_ndcg10, 0.0);
      EXPECT_LE(r.valid_ndcg10, 1.0);
    }
    const auto t = traits(v);
    EXPECT_EQ(hist[0].prototype > 0, t.prototypes && !t.warmup) << to_string(v);
    EXPECT_EQ(hist[2].prototype > 0, t.prototypes) << to_string(v);
    EXPECT_EQ(hist[2].aggregate > 0, t.halting != HaltMode::kNone) << to_string(v);
  }
}

TEST(Trainer, EarlyStoppingAndRestoreBest) {
  Fixture f;
  Recommender<float> model(testing::tiny_model(Variant::kHps, 2), f.ds.num_items(), 1);
  auto cfg = testing::quick_train(50, 1);
  cfg.adam.learning_rate = 1e-30;  // every float update rounds away
  cfg.patience = 2;
  Trainer trainer(model, f.split, cfg);
  const auto hist = trainer.train();
  // Parameters never change, so only the first epoch counts as an improvement.
  EXPECT_EQ(hist.size(), 3u);
  EXPECT_TRUE(trainer.state().stopped);
  EXPECT_EQ(trainer.state().best_epoch, 0);

  Recommender<float> learner(testing::tiny_model(Variant::kHps, 2), f.ds.num_items(), 1);
  Trainer t2(learner, f.split, testing::quick_train(6, 1));
  t2.train();
  std::size_t i = 0;
  for (const auto& p : learner.store()) EXPECT_EQ(p.value, t2.best_parameters()[i++]) << p.name;
  double best = -1;
  for (const auto& r : t2.state().history) best = std::max(best, r.valid_ndcg10);
  EXPECT_EQ(best, t2.state().best_score);
}

TEST(Trainer, NonFiniteParametersAbortWithBatchDiagnostic) {
  Fixture f;
  Recommender<float> model(testing::tiny_model(Variant::kBase, 1), f.ds.num_items(), 1);
  model.store().all().front()->value(1, 0) = std::numeric_limits<float>::quiet_NaN();
  Trainer trainer(model, f.split, testing::quick_train(1, 1));
  try {
    trainer.run_epoch();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("epoch 0"), std::string::npos) << what;
    EXPECT_NE(what.find("batch"), std::string::npos) << what;
  }
}

TEST(Checkpoint, ExactResume) {
  Fixture f;
  testing::TempDir dir;
  const auto path = dir.path() / "model.ckpt";
  const auto cfg = testing::quick_train(4, 7);

  Recommender<float> a(testing::tiny_model(Variant::kHpsArh, 2), f.ds.num_items(), 7);
  Trainer ta(a, f.split, cfg);
  ta.run_epoch();
  ta.run_epoch();
  save_checkpoint(path, ta, {{"run.seed", "7"}, {"model.variant", "hps_arh"}});
  const EpochRecord next = ta.run_epoch();

  Recommender<float> b(testing::tiny_model(Variant::kHpsArh, 2), f.ds.num_items(), 99);
  Trainer tb(b, f.split, cfg);
  load_checkpoint(path, tb);
  EXPECT_EQ(tb.state().next_epoch, 2);
  ASSERT_EQ(tb.state().history.size(), 2u);
  const EpochRecord resumed = tb.run_epoch();
  EXPECT_EQ(resumed.loss, next.loss);
  EXPECT_EQ(resumed.valid_ndcg10, next.valid_ndcg10);
  auto pa = a.store().all(), pb = b.store().all();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;

  const auto echo = read_checkpoint_config(path);
  EXPECT_EQ(echo.at("run.seed"), "7");
  EXPECT_EQ(echo.at("model.variant"), "hps_arh");
  ASSERT_TRUE(load_prototypes(path).has_value());
  EXPECT_EQ(load_prototypes(path)->centers.size(), 2u);
}

TEST(Checkpoint, ManifestAndCorruption) {
  Fixture f;
  testing::TempDir dir;
  const auto path = dir.path() / "model.ckpt";
  Recommender<float> a(testing::tiny_model(Variant::kBase, 1), f.ds.num_items(), 1);
  Trainer ta(a, f.split, testing::quick_train(1, 1));
  save_checkpoint(path, ta, {});
  {
    std::ifstream in(path);
    std::string first, second;
    std::getline(in, first);
    std::getline(in, second);
    EXPECT_EQ(first, "dtrec-checkpoint");
    EXPECT_EQ(second, "format_version 1");
  }
  Recommender<float> b(testing::tiny_model(Variant::kBase, 1), f.ds.num_items(), 2);
  load_parameters(path, b);
  auto pa = a.store().all(), pb = b.store().all();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);

  // A model of another shape must be rejected.
  Recommender<float> wide(testing::tiny_model(Variant::kBase, 2), f.ds.num_items(), 1);
  EXPECT_ANY_THROW(load_parameters(path, wide));

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_ANY_THROW(load_parameters(path, b));
  {
    std::ofstream out(path);
    out << "not a checkpoint\n";
  }
  EXPECT_THROW(read_checkpoint_config(path), ParseError);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.patience = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ContractError);
}

}  // namespace
}  // namespace dtrec
