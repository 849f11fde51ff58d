#include "dtrec/eval/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

namespace dtrec {

double recall_at_k(int rank, int k) {
  if (rank < 1) throw ContractError("rank must be >= 1");
  return rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(int rank, int k) {
  if (rank < 1) throw ContractError("rank must be >= 1");
  return rank <= k ? 1.0 / std::log2(rank + 1.0) : 0.0;
}

template <typename S>
int rank_target(const Eigen::Ref<const Eigen::Matrix<S, 1, Eigen::Dynamic>>& scores, int target) {
  const int n = static_cast<int>(scores.size());
  if (target < 1 || target > n) throw IndexError("rank_target: target " + std::to_string(target) + " out of range");
  const S s = scores(target - 1);
  int rank = 1;
  for (int j = 0; j < n; ++j) {
    if (scores(j) > s || (scores(j) == s && j < target - 1)) ++rank;
  }
  return rank;
}

int resolve_threads(int requested) {
  int n = requested;
  if (n <= 0) {
    n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("DTREC_THREADS")) {
      const int cap = std::atoi(env);
      if (cap > 0) n = std::min(n, cap);
    }
  }
  return std::max(1, n);
}

template <typename S>
std::vector<UserResult> rank_examples(const Recommender<S>& model, const std::vector<Example>& examples,
                                      const EvalOptions& options) {
  std::vector<UserResult> results(examples.size());
  const std::size_t bs = static_cast<std::size_t>(std::max(1, options.batch_size));
  const std::size_t n_batches = (examples.size() + bs - 1) / bs;
  auto run = [&](std::size_t first_batch, std::size_t stride) {
    for (std::size_t bi = first_batch; bi < n_batches; bi += stride) {
      const std::size_t begin = bi * bs, end = std::min(examples.size(), begin + bs);
      std::vector<std::size_t> order(end - begin);
      std::iota(order.begin(), order.end(), begin);
      const Batch batch = make_batch(examples, order, options.max_len);
      const Prediction<S> pred = model.predict(batch, options.policy);
      for (std::size_t i = 0; i < order.size(); ++i) {
        const Example& ex = examples[order[i]];
        UserResult& r = results[order[i]];
        r.user = ex.user;
        r.length = static_cast<int>(ex.history.size());
        r.target = ex.target;
        r.rank = rank_target<S>(pred.log_probs.row(static_cast<Eigen::Index>(i)), ex.target);
        r.exit_step = pred.exit_steps[i];
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(resolve_threads(options.threads), std::max<std::size_t>(1, n_batches));
  if (threads <= 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        try {
          run(w, threads);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return results;
}

double cost_ratio(std::span<const int> exit_steps, int max_steps) {
  if (max_steps <= 0 || exit_steps.empty()) return 100.0;
  double total = 0.0;
  for (int e : exit_steps) total += e;
  return 100.0 * total / static_cast<double>(exit_steps.size()) / max_steps;
}

std::vector<double> steps_by_length_group(const std::vector<UserResult>& results, int n_groups) {
  if (n_groups < 1) throw ContractError("steps_by_length_group: n_groups must be positive");
  std::vector<std::size_t> order(results.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (results[a].length != results[b].length) return results[a].length < results[b].length;
    return results[a].user < results[b].user;
  });
  std::vector<double> means(n_groups, 0.0);
  const std::size_t n = order.size();
  for (int g = 0; g < n_groups; ++g) {
    const std::size_t lo = n * g / n_groups, hi = n * (g + 1) / n_groups;
    if (hi == lo) continue;
    double sum = 0.0;
    for (std::size_t i = lo; i < hi; ++i) sum += results[order[i]].exit_step;
    means[g] = sum / static_cast<double>(hi - lo);
  }
  return means;
}

std::vector<std::pair<double, double>> steps_by_key(const std::vector<UserResult>& results,
                                                    std::span<const double> key_by_user) {
  std::map<double, std::pair<double, int>> acc;
  for (const auto& r : results) {
    if (r.user < 0 || static_cast<std::size_t>(r.user) >= key_by_user.size())
      throw IndexError("steps_by_key: user without a key");
    auto& slot = acc[key_by_user[r.user]];
    slot.first += r.exit_step;
    ++slot.second;
  }
  std::vector<std::pair<double, double>> out;
  for (const auto& [key, v] : acc) out.emplace_back(key, v.first / v.second);
  return out;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["variant"] = variant;
  j["seed"] = seed;
  j["users"] = users;
  j["max_steps"] = max_steps;
  j["recall@10"] = recall10;
  j["ndcg@10"] = ndcg10;
  j["recall@20"] = recall20;
  j["ndcg@20"] = ndcg20;
  j["cost_ratio"] = cost_ratio;
  j["mean_exit_step"] = mean_exit_step;
  j["group_steps"] = group_steps;
  return j.dump(2);
}

MetricsReport summarize(const std::vector<UserResult>& results, int max_steps, const std::string& variant,
                        std::uint64_t seed, int n_groups) {
  MetricsReport m;
  m.variant = variant;
  m.seed = seed;
  m.users = static_cast<int>(results.size());
  m.max_steps = max_steps;
  if (results.empty()) return m;
  // Summing in user order keeps the report independent of example order.
  std::vector<const UserResult*> sorted;
  for (const auto& r : results) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->user < b->user; });
  std::vector<int> exits;
  for (const UserResult* r : sorted) {
    m.recall10 += recall_at_k(r->rank, 10);
    m.ndcg10 += ndcg_at_k(r->rank, 10);
    m.recall20 += recall_at_k(r->rank, 20);
    m.ndcg20 += ndcg_at_k(r->rank, 20);
    exits.push_back(r->exit_step);
    m.mean_exit_step += r->exit_step;
  }
  const double n = static_cast<double>(results.size());
  m.recall10 /= n;
  m.ndcg10 /= n;
  m.recall20 /= n;
  m.ndcg20 /= n;
  m.mean_exit_step /= n;
  m.cost_ratio = cost_ratio(exits, max_steps);
  m.group_steps = steps_by_length_group(results, n_groups);
  return m;
}

void write_exits_csv(const std::filesystem::path& path, const std::vector<UserResult>& results,
                     const InteractionDataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "user_id,length,exit_step\n";
  for (const auto& r : results) out << ds.user_ids.at(r.user) << ',' << r.length << ',' << r.exit_step << '\n';
}

template <typename S>
void export_trajectories(const std::filesystem::path& path, const Recommender<S>& model,
                         const std::vector<Example>& examples, const PrototypeIndex<S>& index,
                         const InteractionDataset& ds, const EvalOptions& options) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const int d = model.encoder().width();
  out << "user_id,step";
  for (int c = 0; c < d; ++c) out << ",r" << c;
  out << ",assigned_prototype_id,target_item_id\n";
  out << std::setprecision(9);
  const std::size_t bs = static_cast<std::size_t>(std::max(1, options.batch_size));
  for (std::size_t begin = 0; begin < examples.size(); begin += bs) {
    const std::size_t end = std::min(examples.size(), begin + bs);
    std::vector<std::size_t> order(end - begin);
    std::iota(order.begin(), order.end(), begin);
    const Prediction<S> pred = model.predict(make_batch(examples, order, options.max_len), options.policy);
    for (int t = 1; t < static_cast<int>(pred.states.size()); ++t) {
      const std::vector<int> ids =
          index.steps() > 0 ? nearest_prototype<S>(pred.states[t], index.level(t)) : std::vector<int>(order.size(), -1);
      for (std::size_t i = 0; i < order.size(); ++i) {
        const Example& ex = examples[order[i]];
        out << ds.user_ids.at(ex.user) << ',' << t;
        for (int c = 0; c < d; ++c) out << ',' << pred.states[t](static_cast<Eigen::Index>(i), c);
        out << ',' << ids[i] << ',' << ds.item_ids.at(ex.target) << '\n';
      }
    }
  }
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("spearman: need two equal-length samples");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

#define DTREC_INSTANTIATE_EVAL(S)                                                                           \
  template int rank_target<S>(const Eigen::Ref<const Eigen::Matrix<S, 1, Eigen::Dynamic>>&, int);         \
  template std::vector<UserResult> rank_examples(const Recommender<S>&, const std::vector<Example>&,       \
                                                 const EvalOptions&);                                      \
  template void export_trajectories(const std::filesystem::path&, const Recommender<S>&,                  \
                                    const std::vector<Example>&, const PrototypeIndex<S>&,                 \
                                    const InteractionDataset&, const EvalOptions&);

DTREC_INSTANTIATE_EVAL(float)
DTREC_INSTANTIATE_EVAL(double)

}  // namespace dtrec
