#include "dtrec/backbone/encoder.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace dtrec {
namespace {

constexpr int kItems = 30;

BackboneConfig small_config(BackboneKind kind, int steps = 3) {
  BackboneConfig c;
  c.kind = kind;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_len = 8;
  c.dropout = 0.2;
  c.reasoning_steps = steps;
  return c;
}

Batch rows_batch(const std::vector<std::vector<int>>& histories) {
  std::vector<Example> ex;
  for (std::size_t i = 0; i < histories.size(); ++i) ex.push_back(Example{static_cast<int>(i), histories[i], 1});
  std::vector<std::size_t> order(ex.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  return make_batch(ex, order, 8);
}

class BothKinds : public ::testing::TestWithParam<BackboneKind> {
 protected:
  ParameterStore<double> store;
  SequenceEncoder<double> encoder{store, small_config(GetParam()), kItems, 7};
};

TEST_P(BothKinds, TraceShapeAndDistributions) {
  const Batch batch = rows_batch({{1, 2, 3}, {4, 5, 6, 7, 8, 9}, {10}});
  Tape<double> tape(false);
  const auto trace = encoder.run_reasoning(tape, batch, 3, {});
  ASSERT_EQ(trace.steps(), 3);
  ASSERT_EQ(trace.log_probs.size(), 4u);
  for (int t = 0; t <= 3; ++t) {
    EXPECT_EQ(trace.states[t].rows(), 3);
    EXPECT_EQ(trace.states[t].cols(), 16);
    EXPECT_EQ(trace.log_probs[t].cols(), kItems);
    const auto p = trace.probs(t);
    for (int r = 0; r < 3; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
  }
}

TEST_P(BothKinds, DeterministicAndRowIndependent) {
  const Batch batch = rows_batch({{3, 4, 5}, {3, 4, 5}, {9, 8}});
  Tape<double> a(false), b(false);
  const auto ta = encoder.run_reasoning(a, batch, 3, {});
  const auto tb = encoder.run_reasoning(b, batch, 3, {});
  for (int t = 0; t <= 3; ++t) {
    EXPECT_EQ(ta.states[t].value(), tb.states[t].value());
    EXPECT_EQ(ta.states[t].value().row(0), ta.states[t].value().row(1));
  }
  // Same row inside a different batch.
  Tape<double> c(false);
  const auto tc = encoder.run_reasoning(c, rows_batch({{7, 7, 1, 2}, {3, 4, 5}}), 3, {});
  for (int t = 0; t <= 3; ++t)
    EXPECT_LT((tc.states[t].value().row(1) - ta.states[t].value().row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_P(BothKinds, ReasoningMovesTheState) {
  const Batch batch = rows_batch({{1, 2, 3}, {11, 12}});
  Tape<double> tape(false);
  const auto trace = encoder.run_reasoning(tape, batch, 3, {});
  for (int t = 1; t <= 3; ++t)
    for (int r = 0; r < 2; ++r)
      EXPECT_GT((trace.states[t].value().row(r) - trace.states[t - 1].value().row(r)).norm(), 1e-3);
}

TEST_P(BothKinds, StateNormsInSanityBand) {
  const Batch batch = rows_batch({{1, 2, 3, 4, 5, 6, 7, 8}, {2}, {20, 21, 22}});
  Tape<double> tape(false);
  const auto trace = encoder.run_reasoning(tape, batch, 3, {});
  const double root_d = std::sqrt(16.0);
  for (const auto& s : trace.states)
    for (int r = 0; r < s.rows(); ++r) {
      EXPECT_GE(s.value().row(r).norm(), 0.1 * root_d);
      EXPECT_LE(s.value().row(r).norm(), 10 * root_d);
    }
}

TEST_P(BothKinds, DropoutOnlyInTraining) {
  const Batch batch = rows_batch({{1, 2, 3}, {4, 5}});
  auto final_state = [&](ForwardOptions opts) {
    Tape<double> tape(false);
    return encoder.run_reasoning(tape, batch, 2, opts).states[2].value();
  };
  const auto eval = final_state({false, 1});
  EXPECT_EQ(eval, final_state({false, 2}));
  const auto train1 = final_state({true, 1});
  EXPECT_EQ(train1, final_state({true, 1}));
  EXPECT_NE(train1, final_state({true, 2}));
  EXPECT_NE(train1, eval);
}

TEST_P(BothKinds, PredictDistributionMasksPadding) {
  const Batch batch = rows_batch({{1, 2, 3}, {4, 5}});
  Tape<double> tape(false);
  const auto trace = encoder.run_reasoning(tape, batch, 1, {});
  const MatrixD dist = encoder.predict_distribution(trace.states[1].value());
  ASSERT_EQ(dist.cols(), kItems + 1);
  const MatrixD scores = trace.states[1].value() * encoder.item_embeddings().value.transpose();
  for (int r = 0; r < 2; ++r) {
    EXPECT_EQ(dist(r, 0), 0.0);
    EXPECT_NEAR(dist.row(r).sum(), 1.0, 1e-12);
    Eigen::Index best_p, best_s;
    dist.row(r).maxCoeff(&best_p);
    scores.row(r).rightCols(kItems).maxCoeff(&best_s);
    EXPECT_EQ(best_p, best_s + 1);
    for (int j = 0; j < kItems; ++j) EXPECT_NEAR(dist(r, j + 1), std::exp(trace.log_probs[1].value()(r, j)), 1e-12);
  }
}

TEST_P(BothKinds, StepsMustRunInOrder) {
  const Batch batch = rows_batch({{1, 2}});
  Tape<double> tape(false);
  auto ctx = encoder.encode(tape, batch, {});
  const auto r0 = encoder.initial_state(ctx);
  EXPECT_THROW(encoder.reason_step(ctx, r0, 2), ContractError);
  EXPECT_THROW(encoder.reason_step(ctx, r0, 0), ContractError);
  const auto r1 = encoder.reason_step(ctx, r0, 1);
  EXPECT_THROW(encoder.reason_step(ctx, r1, 4), ContractError);
}

INSTANTIATE_TEST_SUITE_P(Kinds, BothKinds, ::testing::Values(BackboneKind::kAttention, BackboneKind::kGru),
                         [](const auto& info) { return to_string(info.param); });

TEST(Attention, CausalAtEveryPosition) {
  ParameterStore<double> store;
  SequenceEncoder<double> encoder(store, small_config(BackboneKind::kAttention), kItems, 3);
  const std::vector<int> base{1, 2, 3, 4, 5, 6, 7, 8};
  for (int p = 0; p < 7; ++p) {
    std::vector<int> changed = base;
    for (int q = p + 1; q < 8; ++q) changed[q] = 20 + q;
    Tape<double> tape(false);
    auto ctx = encoder.encode(tape, rows_batch({base, changed}), {});
    const MatrixD& h = ctx.hidden.value();
    for (int q = 0; q <= p; ++q) EXPECT_EQ(h.row(q), h.row(8 + q)) << "position " << q << " cut " << p;
    EXPECT_NE(h.row(p + 1), h.row(8 + p + 1));
  }
}

TEST(Attention, ReasoningTokenAttendsToHistory) {
  ParameterStore<double> store;
  SequenceEncoder<double> encoder(store, small_config(BackboneKind::kAttention), kItems, 5);
  Tape<double> tape(false);
  const auto a = encoder.run_reasoning(tape, rows_batch({{1, 2, 3}}), 2, {});
  const auto b = encoder.run_reasoning(tape, rows_batch({{1, 2, 4}}), 2, {});
  EXPECT_NE(a.states[1].value(), b.states[1].value());
}

TEST(Attention, WeightsSumToOneOverVisibleKeys) {
  std::mt19937_64 gen(4);
  std::normal_distribution<double> n;
  const int batch = 2, len = 5, d = 4;
  MatrixD q(batch * len, d), k(batch * len, d);
  for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = n(gen), k.data()[i] = n(gen);
  AttentionLayout layout;
  layout.batch = batch;
  layout.heads = 2;
  layout.key_valid = {0, 0, 1, 1, 1, 1, 1, 1, 1, 1};
  const auto weights = attention_weights(q, k, layout);
  ASSERT_EQ(weights.size(), 4u);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < 2; ++h) {
      const MatrixD& w = weights[b * 2 + h];
      for (int i = 0; i < len; ++i) {
        double visible = 0;
        bool any = false;
        for (int j = 0; j < len; ++j) {
          const bool ok = j <= i && layout.key_valid[b * len + j];
          any = any || ok;
          if (!ok) EXPECT_EQ(w(i, j), 0.0);
          visible += w(i, j);
        }
        // Rows with no visible key (leading padding) stay all zero.
        EXPECT_NEAR(visible, any ? 1.0 : 0.0, 1e-12);
      }
    }
  }
}

TEST(Config, Validation) {
  BackboneConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ContractError);
  c = BackboneConfig{};
  c.reasoning_steps = -1;
  EXPECT_THROW(c.validate(), ContractError);
  EXPECT_EQ(parse_backbone_kind("gru"), BackboneKind::kGru);
  EXPECT_EQ(parse_backbone_kind(to_string(BackboneKind::kAttention)), BackboneKind::kAttention);
  EXPECT_THROW(parse_backbone_kind("lstm"), ContractError);
}

TEST(Embeddings, TiedTableHasPaddingRow) {
  ParameterStore<double> store;
  SequenceEncoder<double> encoder(store, small_config(BackboneKind::kAttention), kItems, 1);
  EXPECT_EQ(encoder.item_embeddings().value.rows(), kItems + 1);
  EXPECT_EQ(encoder.reasoning_embeddings().value.rows(), 3);
  // No separate output projection: every parameter wider than |I| is the item table.
  for (const auto& p : store)
    if (p.value.rows() > kItems) EXPECT_EQ(&p, &encoder.item_embeddings());
}

}  // namespace
}  // namespace dtrec
