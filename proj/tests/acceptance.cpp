// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. DTREC_ACCEPT_ONLY=1,5,10 restricts the run.

#include "dtrec/cli/commands.hpp"
#include "dtrec/data/synthetic.hpp"
#include "dtrec/eval/metrics.hpp"
#include "dtrec/numerics/random.hpp"
#include "dtrec/training/trainer.hpp"

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/kmeans_oracle.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace dtrec;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// Shared experiment settings for the training criteria.
constexpr int kSeeds = 5;
constexpr int kUsers = 2000;
constexpr std::pair<int, int> kLengths{5, 8};
constexpr double kLambda = 1.0;
constexpr int kEpochs = 80;

ModelConfig experiment_model(Variant variant) {
  ModelConfig m;
  m.variant = variant;
  m.backbone.d_model = 64;
  m.backbone.reasoning_steps = 3;
  return m;
}

TrainConfig experiment_train(std::uint64_t seed) {
  TrainConfig t;
  t.epochs = kEpochs;
  t.lambda_p = kLambda;
  t.schedule.k0 = 10;
  t.schedule.k_upper = 3000;
  t.schedule.alpha = 0.5;
  t.seed = seed;
  return t;
}

struct TrainedRun {
  std::unique_ptr<Recommender<float>> model;
  TrainConfig config;
  std::vector<UserResult> test;
  MetricsReport report;
};

TrainedRun train_and_test(const LeaveOneOutSplit& split, int num_items, Variant variant, std::uint64_t seed,
                          const TrainConfig& tc) {
  TrainedRun run;
  const ModelConfig mc = experiment_model(variant);
  run.config = tc;
  run.model = std::make_unique<Recommender<float>>(mc, num_items, seed);
  Trainer trainer(*run.model, split, tc);
  trainer.train();
  run.test = rank_examples(*run.model, split.test, eval_options(tc, mc));
  run.report = summarize(run.test, mc.backbone.reasoning_steps, to_string(variant), seed);
  return run;
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string where;
  int checked = 0;
  for (const auto& op : testing::op_catalog()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto r = testing::check_op(op, seed);
      checked += r.checked;
      if (r.max_rel_error > worst) worst = r.max_rel_error, where = op.name + " " + r.worst;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60,
          fmt("%zu ops x 10 seeds, %d entries, max rel err %.2e (%s), %.1fs", testing::op_catalog().size(), checked,
              worst, where.c_str(), secs)};
}

Outcome stick_breaking() {
  const auto worked = soft_halt_weights(std::vector<double>{0.5, 0.5, 0.9});
  bool ok = worked == std::vector<double>{0.5, 0.25, 0.25};
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<int> steps(2, 6);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0;
  bool nonneg = true;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> p(steps(gen));
    for (double& x : p) x = unit(gen);
    const auto w = soft_halt_weights(p);
    for (double x : w) nonneg = nonneg && x >= 0;
    worst = std::max(worst, std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0));
  }
  ok = ok && nonneg && worst <= 1e-6;
  return {ok, fmt("worked example %s, 1000 vectors non-negative %s, max |sum-1| %.1e",
                  worked == std::vector<double>{0.5, 0.25, 0.25} ? "exact" : "WRONG", nonneg ? "yes" : "no", worst)};
}

Outcome schedule() {
  int points = 0, violations = 0;
  for (int k0 : {1, 2, 5, 10, 50, 100})
    for (int k_upper : {100, 640, 3000, 20000})
      for (double alpha : {0.01, 0.1, 0.5, 1.0, 3.0})
        for (int items : {640, 12101})
          for (int steps : {1, 3, 6}) {
            const GranularitySchedule s{k0, k_upper, alpha, steps};
            const int cap = std::min(k_upper, items);
            int prev = 0;
            for (int t = 1; t <= steps; ++t) {
              const int k = schedule_k(s, t, items);
              ++points;
              if ((t == 1 && k != k0) || k < prev || k > cap) ++violations;
              prev = k;
            }
          }
  // Independent double-precision evaluation of the reference point.
  const GranularitySchedule ref{10, 3000, 0.5, 3};
  bool ref_ok = true;
  for (int t = 1; t <= 3; ++t) {
    const long expected = std::lround(3000.0 - 2990.0 * std::exp(-0.5 * (t - 1)));
    ref_ok = ref_ok && schedule_k(ref, t, 12101) == expected;
  }
  ref_ok = ref_ok && schedule_k(ref, 2, 12101) == 1186 && schedule_k(ref, 3, 12101) == 1900;
  return {violations == 0 && points >= 1000 && ref_ok,
          fmt("%d grid points, %d violations; reference k = 10, %d, %d", points, violations, schedule_k(ref, 2, 12101),
              schedule_k(ref, 3, 12101))};
}

Outcome kmeans_oracle() {
  std::mt19937_64 gen(77);
  int matched = 0;
  double worst = 0;
  KMeansOptions opts;
  opts.restarts = 10;
  for (int i = 0; i < 20; ++i) {
    const int n = std::uniform_int_distribution<int>(3, 8)(gen);
    const int dims = std::uniform_int_distribution<int>(1, 3)(gen);
    const int k = 1 + i % 3;
    const MatrixD points = testing::random_points(n, dims, 100 + i);
    const double best = testing::exhaustive_min_sse(points, k);
    const auto fit = fit_prototypes<double>(points, k, 500 + i, opts);
    const double gap = std::abs(fit.sse - best);
    worst = std::max(worst, gap);
    matched += gap <= 1e-12 * std::max(1.0, best);
  }
  return {matched == 20, fmt("%d/20 instances at the exhaustive optimum, max |SSE gap| %.1e", matched, worst)};
}

Outcome vanilla_reduction() {
  const InteractionDataset ds = testing::small_dataset();
  const LeaveOneOutSplit split = leave_one_out_split(ds);
  const ModelConfig mc = testing::tiny_model(Variant::kBase, 0);
  Recommender<float> model(mc, ds.num_items(), 11);
  const TrainConfig tc = testing::quick_train();

  bool loss_ok = true, rank_ok = true, logp_ok = true;
  const EvalOptions opts{16, mc.backbone.max_len, HaltPolicy{0.5, 1, 1}, 1};
  const auto results = rank_examples(model, split.test, opts);
  std::size_t row = 0;
  for (const auto& batch : make_batches(split.test, 16, mc.backbone.max_len, std::nullopt)) {
    Tape<float> tape(true);
    const auto trace = model.forward(tape, batch, {});
    const auto loss = total_loss<float>(tape, trace, batch.targets, 20, model.variant_traits(), tc, nullptr,
                                        item_table(model.encoder()));
    std::vector<int> zero_based(batch.targets);
    for (int& t : zero_based) --t;
    // Reasoning-free forward: encoder output at the last position, scored against the tied table.
    Tape<float> plain(false);
    auto ctx = model.encoder().encode(plain, batch, {});
    const auto r0 = model.encoder().initial_state(ctx);
    const auto logp = log_softmax(matmul_nt(r0, plain.constant(item_table(model.encoder()))));
    loss_ok = loss_ok && loss.total.item() == mean(cross_entropy(logp, zero_based)).item();
    logp_ok = logp_ok && logp.value() == model.predict(batch, opts.policy).log_probs;
    for (int b = 0; b < batch.size; ++b, ++row)
      rank_ok = rank_ok && results[row].rank == rank_target<float>(logp.value().row(b), batch.targets[b]) &&
                results[row].exit_step == 0;
  }
  return {loss_ok && rank_ok && logp_ok && row == results.size(),
          fmt("objective == single-step CE: %s; log-probs bit-equal: %s; %zu ranks identical: %s", loss_ok ? "yes" : "no",
              logp_ok ? "yes" : "no", results.size(), rank_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------

struct GainData {
  InteractionDataset ds;
  LeaveOneOutSplit split;
  GainData() {
    SyntheticTaxonomy tax;  // 4x4x4 leaves, 10 items each
    tax.shift_prob = 0.2;
    ds = to_dataset(generate_synthetic(tax, kUsers, kLengths, 1));
    split = leave_one_out_split(ds);
  }
};

GainData& gain_data() {
  static GainData data;
  return data;
}

std::map<std::uint64_t, TrainedRun>& hps_runs() {
  static std::map<std::uint64_t, TrainedRun> runs;
  return runs;
}

const TrainedRun& hps_run(std::uint64_t seed) {
  auto& runs = hps_runs();
  auto it = runs.find(seed);
  if (it == runs.end()) {
    GainData& d = gain_data();
    it = runs.emplace(seed, train_and_test(d.split, d.ds.num_items(), Variant::kHps, seed, experiment_train(seed)))
             .first;
  }
  return it->second;
}

Outcome hps_gain() {
  const auto t0 = Clock::now();
  GainData& d = gain_data();
  std::ostringstream per_seed;
  double sum = 0;
  std::vector<double> diffs;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const auto base = train_and_test(d.split, d.ds.num_items(), Variant::kBase, seed, experiment_train(seed));
    const double hps = hps_run(seed).report.ndcg10;
    diffs.push_back(hps - base.report.ndcg10);
    sum += diffs.back();
    per_seed << fmt(" s%llu %.4f/%.4f", static_cast<unsigned long long>(seed), hps, base.report.ndcg10);
  }
  const double mean_diff = sum / kSeeds;
  const bool no_reversal = std::all_of(diffs.begin(), diffs.end(), [&](double x) { return (x > 0) == (mean_diff > 0); });
  return {mean_diff > 0 && no_reversal,
          fmt("mean dN@10 %+.4f, hps/base:%s, %.0fs", mean_diff, per_seed.str().c_str(), seconds_since(t0))};
}

Outcome prototype_alignment() {
  const TrainedRun& run = hps_run(1);
  const GainData& d = gain_data();
  const Recommender<float>& model = *run.model;
  const Matrix<float> items = item_table(model.encoder());
  const auto index = refresh_index(model.encoder(), run.config.schedule, false, 0,
                                   derive_seed(run.config.seed, Stream::kKMeans), run.config.kmeans);
  const Matrix<float>& coarse = index.level(1);

  // Each coarse prototype stands for the majority category of the items it owns.
  const int k = static_cast<int>(coarse.rows());
  const int categories = 1 + *std::max_element(d.ds.item_category.begin() + 1, d.ds.item_category.end());
  std::vector<std::vector<int>> votes(k, std::vector<int>(categories, 0));
  const auto item_cluster = nearest_prototype(items, coarse);
  for (int j = 0; j < static_cast<int>(item_cluster.size()); ++j) ++votes[item_cluster[j]][d.ds.item_category[j + 1]];
  std::vector<int> cluster_category(k);
  for (int c = 0; c < k; ++c)
    cluster_category[c] = static_cast<int>(std::max_element(votes[c].begin(), votes[c].end()) - votes[c].begin());

  std::vector<int> predicted, truth;
  const HaltPolicy policy{0.5, 1, model.steps()};
  for (const auto& batch : make_batches(d.split.test, 256, model.config().backbone.max_len, std::nullopt)) {
    const auto pred = model.predict(batch, policy);
    for (int cluster : nearest_prototype(pred.states[1], coarse)) predicted.push_back(cluster_category[cluster]);
    for (int target : batch.targets) truth.push_back(d.ds.item_category[target]);
  }
  auto agreement = [&](const std::vector<int>& labels) {
    int hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
  };
  const double observed = agreement(truth);
  std::mt19937_64 gen(derive_seed(run.config.seed, Stream::kPermutation));
  std::vector<double> null;
  std::vector<int> shuffled = truth;
  for (int i = 0; i < 1000; ++i) {
    std::shuffle(shuffled.begin(), shuffled.end(), gen);
    null.push_back(agreement(shuffled));
  }
  std::sort(null.begin(), null.end());
  const double p99 = null[989];
  return {observed > p99, fmt("agreement %.4f vs permutation 99th pct %.4f (k0 = %d, %zu users)", observed, p99, k,
                              truth.size())};
}

// Mixed-complexity set: low-shift users with short histories, high-shift users with long ones.
struct MixedData {
  InteractionDataset ds;
  LeaveOneOutSplit split;
  MixedData() {
    SyntheticTaxonomy tax;
    const std::vector<Cohort> cohorts{{kUsers / 2, 0.05, 5, 8}, {kUsers / 2, 0.6, 5, 8}};
    ds = to_dataset(generate_synthetic(tax, cohorts, 3));
    split = leave_one_out_split(ds);
  }
};

MixedData& mixed_data() {
  static MixedData data;
  return data;
}

std::map<std::uint64_t, std::vector<UserResult>> arh_results;

Outcome arh_efficiency() {
  const auto t0 = Clock::now();
  MixedData& d = mixed_data();
  double cost = 0, arh_ndcg = 0, hps_ndcg = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const TrainConfig tc = experiment_train(seed);
    const auto fixed = train_and_test(d.split, d.ds.num_items(), Variant::kHps, seed, tc);
    const auto arh = train_and_test(d.split, d.ds.num_items(), Variant::kHpsArh, seed, tc);
    arh_results[seed] = arh.test;
    cost += arh.report.cost_ratio / kSeeds;
    arh_ndcg += arh.report.ndcg10 / kSeeds;
    hps_ndcg += fixed.report.ndcg10 / kSeeds;
    per_seed << fmt(" s%llu %.1f%%", static_cast<unsigned long long>(seed), arh.report.cost_ratio);
  }
  const double rel = std::abs(arh_ndcg - hps_ndcg) / hps_ndcg;
  return {cost < 90.0 && rel <= 0.03, fmt("cost %.1f%% (%s), N@10 arh %.4f vs fixed %.4f (rel diff %.2f%%), %.0fs",
                                          cost, per_seed.str().c_str() + 1, arh_ndcg, hps_ndcg, 100 * rel,
                                          seconds_since(t0))};
}

Outcome depth_adapts() {
  MixedData& d = mixed_data();
  if (arh_results.empty()) arh_efficiency();
  bool ok = true;
  std::ostringstream per_seed;
  for (const auto& [seed, results] : arh_results) {
    const auto by_length = steps_by_length_group(results, 5);
    std::vector<double> groups(by_length.size());
    std::iota(groups.begin(), groups.end(), 0.0);
    const double rho_len = spearman(groups, by_length);

    const auto by_shift = steps_by_key(results, d.ds.user_shift_prob);
    std::vector<double> keys, steps;
    for (const auto& [k, s] : by_shift) keys.push_back(k), steps.push_back(s);
    const double rho_shift = spearman(keys, steps);
    ok = ok && rho_len > 0 && rho_shift > 0;
    per_seed << fmt(" s%llu len %.2f pi %.2f", static_cast<unsigned long long>(seed), rho_len, rho_shift);
  }
  return {ok, "Spearman(group, mean exit step):" + per_seed.str()};
}

Outcome determinism() {
  testing::TempDir dir;
  const InteractionDataset ds = testing::small_dataset(5);
  {
    std::ofstream out(dir.path() / "data.tsv");
    std::vector<RawInteraction> rows;
    for (int u = 0; u < ds.num_users(); ++u)
      for (std::size_t i = 0; i < ds.sequences[u].size(); ++i)
        rows.push_back({ds.user_ids[u], ds.item_ids[ds.sequences[u][i]], static_cast<double>(i)});
    write_interactions_tsv(out, rows);
  }
  cli::RunConfig config;
  config.set("data.path", (dir.path() / "data.tsv").string());
  config.set("run.out_dir", (dir.path() / "runs").string());
  config.set("run.seed", "13");
  config.set("model.d_model", "8");
  config.set("model.n_layers", "1");
  config.set("model.max_len", "16");
  config.set("model.reasoning_steps", "2");
  config.set("train.epochs", "3");
  config.set("train.batch_size", "16");
  config.set("hps.k0", "2");
  config.set("hps.k_upper", "20");
  config.set("eval.threads", "1");
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  std::streambuf* saved = std::cout.rdbuf(nullptr);
  std::streambuf* saved_err = std::cerr.rdbuf(nullptr);
  const fs::path a = cli::cmd_train(config), b = cli::cmd_train(config);
  std::cout.rdbuf(saved);
  std::cerr.rdbuf(saved_err);
  const bool metrics_same = slurp(a / "metrics.json") == slurp(b / "metrics.json");

  // Resume: save after two epochs, continue in a fresh trainer.
  const LeaveOneOutSplit split = leave_one_out_split(ds);
  const TrainConfig tc = testing::quick_train(4, 21);
  Recommender<float> first(testing::tiny_model(Variant::kHpsArh, 2), ds.num_items(), 21);
  Trainer ta(first, split, tc);
  ta.run_epoch();
  ta.run_epoch();
  save_checkpoint(dir.path() / "mid.ckpt", ta, config.values());
  const double next_loss = ta.run_epoch().loss;
  Recommender<float> second(testing::tiny_model(Variant::kHpsArh, 2), ds.num_items(), 99);
  Trainer tb(second, split, tc);
  load_checkpoint(dir.path() / "mid.ckpt", tb);
  const double resumed_loss = tb.run_epoch().loss;
  bool params_same = true;
  const auto pa = first.store().all(), pb = second.store().all();
  for (std::size_t i = 0; i < pa.size(); ++i) params_same = params_same && pa[i]->value == pb[i]->value;
  return {metrics_same && next_loss == resumed_loss && params_same,
          fmt("metrics.json byte-identical: %s; resumed epoch loss %.9g vs %.9g; parameters identical: %s",
              metrics_same ? "yes" : "no", resumed_loss, next_loss, params_same ? "yes" : "no")};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient integrity", gradient_integrity},
      {"stick-breaking", stick_breaking},
      {"granularity schedule", schedule},
      {"k-means exhaustive oracle", kmeans_oracle},
      {"vanilla reduction", vanilla_reduction},
      {"hps directional gain", hps_gain},
      {"arh efficiency", arh_efficiency},
      {"depth adapts to complexity", depth_adapts},
      {"prototype alignment", prototype_alignment},
      {"determinism and resume", determinism},
  };
  std::set<int> only;
  if (const char* env = std::getenv("DTREC_ACCEPT_ONLY")) {
    std::stringstream ss(env);
    for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
  }
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "C" << id << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
