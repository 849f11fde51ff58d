#include "dtrec/data/batch.hpp"

#include "dtrec/numerics/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace dtrec {

Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> order, int max_len) {
  if (max_len <= 0) throw ContractError("make_batch: max_len must be positive");
  Batch b;
  b.size = static_cast<int>(order.size());
  for (std::size_t idx : order) {
    const int len = std::min<int>(max_len, static_cast<int>(examples[idx].history.size()));
    b.length = std::max(b.length, len);
  }
  b.items.assign(static_cast<std::size_t>(b.size) * b.length, 0);
  for (int r = 0; r < b.size; ++r) {
    const Example& ex = examples[order[r]];
    if (ex.target <= 0) throw ContractError("make_batch: target must be a real item id");
    if (ex.history.empty()) throw ContractError("make_batch: empty history");
    const int len = std::min<int>(max_len, static_cast<int>(ex.history.size()));
    std::copy(ex.history.end() - len, ex.history.end(),
              b.items.begin() + static_cast<std::ptrdiff_t>(r) * b.length + (b.length - len));
    b.lengths.push_back(len);
    b.targets.push_back(ex.target);
    b.users.push_back(ex.user);
  }
  return b;
}

BatchStream::BatchStream(const std::vector<Example>& examples, int batch_size, int max_len,
                         std::optional<std::uint64_t> shuffle_seed)
    : examples_(examples), batch_size_(batch_size), max_len_(max_len), order_(examples.size()) {
  if (batch_size <= 0) throw ContractError("BatchStream: batch_size must be positive");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle_seed) {
    std::mt19937_64 gen(*shuffle_seed);
    std::shuffle(order_.begin(), order_.end(), gen);
  }
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t count = std::min<std::size_t>(batch_size_, order_.size() - cursor_);
  Batch b = make_batch(examples_, std::span<const std::size_t>(order_).subspan(cursor_, count), max_len_);
  cursor_ += count;
  return b;
}

std::size_t BatchStream::num_batches() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

std::vector<Batch> make_batches(const std::vector<Example>& examples, int batch_size, int max_len,
                                std::optional<std::uint64_t> shuffle_seed) {
  BatchStream stream(examples, batch_size, max_len, shuffle_seed);
  std::vector<Batch> out;
  out.reserve(stream.num_batches());
  while (auto b = stream.next()) out.push_back(std::move(*b));
  return out;
}

}  // namespace dtrec
