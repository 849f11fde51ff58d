#pragma once

#include "dtrec/data/synthetic.hpp"
#include "dtrec/training/trainer.hpp"

#include <filesystem>

namespace dtrec::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// 2x2 taxonomy, 5 items per leaf, 60 users with 6..12 interactions.
InteractionDataset small_dataset(std::uint64_t seed = 1);

ModelConfig tiny_model(Variant variant = Variant::kHpsArh, int steps = 2, BackboneKind kind = BackboneKind::kAttention);

TrainConfig quick_train(int epochs = 2, std::uint64_t seed = 1);

/// Batch of the first `n` test examples.
Batch first_batch(const LeaveOneOutSplit& split, int n, int max_len);

}  // namespace dtrec::testing
