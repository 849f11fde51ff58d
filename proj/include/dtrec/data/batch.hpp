#pragma once

#include "dtrec/data/dataset.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace dtrec {

/// Left-padded item matrix [size x length]; the last column always holds the
/// most recent item of every row.
struct Batch {
  int size = 0;
  int length = 0;
  std::vector<int> items;    // row-major, 0 = padding
  std::vector<int> lengths;  // true (possibly truncated) history length per row
  std::vector<int> targets;
  std::vector<int> users;

  int at(int row, int pos) const { return items[static_cast<std::size_t>(row) * length + pos]; }
};

/// Builds one batch from the selected examples, keeping the most recent
/// `max_len` items of each history.
Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> order, int max_len);

/// Yields batches over a fixed example list, optionally in a seeded shuffled order.
class BatchStream {
 public:
  BatchStream(const std::vector<Example>& examples, int batch_size, int max_len,
              std::optional<std::uint64_t> shuffle_seed);

  std::optional<Batch> next();
  std::size_t num_batches() const;

 private:
  const std::vector<Example>& examples_;
  int batch_size_;
  int max_len_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

std::vector<Batch> make_batches(const std::vector<Example>& examples, int batch_size, int max_len,
                                std::optional<std::uint64_t> shuffle_seed);

}  // namespace dtrec
