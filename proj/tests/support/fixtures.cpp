#include "fixtures.hpp"

#include <atomic>
#include <numeric>
#include <unistd.h>

namespace dtrec::testing {

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("dtrec-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

InteractionDataset small_dataset(std::uint64_t seed) {
  SyntheticTaxonomy tax;
  tax.branching = {2, 2};
  tax.items_per_leaf = 5;
  tax.shift_prob = 0.2;
  return to_dataset(generate_synthetic(tax, 60, {6, 12}, seed));
}

ModelConfig tiny_model(Variant variant, int steps, BackboneKind kind) {
  ModelConfig m;
  m.variant = variant;
  m.backbone.kind = kind;
  m.backbone.d_model = 8;
  m.backbone.n_heads = 2;
  m.backbone.n_layers = 1;
  m.backbone.max_len = 16;
  m.backbone.dropout = 0.1;
  m.backbone.reasoning_steps = steps;
  m.halt_hidden = 4;
  return m;
}

TrainConfig quick_train(int epochs, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 16;
  t.eval_batch_size = 32;
  t.schedule.k0 = 2;
  t.schedule.k_upper = 20;
  t.warmup_epochs = 2;
  t.threads = 1;
  t.seed = seed;
  return t;
}

Batch first_batch(const LeaveOneOutSplit& split, int n, int max_len) {
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  return make_batch(split.test, order, max_len);
}

}  // namespace dtrec::testing
