#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace dtrec {

/// One row of an interaction log, before filtering and id remapping.
struct RawInteraction {
  std::string user;
  std::string item;
  double timestamp = 0.0;
};

/// Ground-truth placement of an item in a synthetic taxonomy.
struct ItemLabel {
  std::string item;
  int leaf = -1;
  int category = -1;
};

/// Intent-walk parameter a synthetic user was generated with.
struct UserLabel {
  std::string user;
  double shift_prob = 0.0;
};

/// Per-user chronological item sequences over a dense item vocabulary.
///
/// Item id 0 is padding; real items are 1..num_items(). Users are indexed
/// 0..num_users()-1 in first-appearance order of the source log.
struct InteractionDataset {
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;  // item_ids[0] is the padding slot
  std::vector<std::vector<int>> sequences;

  // Optional ground truth, indexed by dense item id / user index; empty when unknown.
  std::vector<int> item_leaf;
  std::vector<int> item_category;
  std::vector<double> user_shift_prob;

  int num_users() const { return static_cast<int>(sequences.size()); }
  int num_items() const { return static_cast<int>(item_ids.size()) - 1; }
  std::size_t num_interactions() const;
  bool has_item_labels() const { return !item_category.empty(); }
};

struct DatasetStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
  double sparsity = 0.0;  // 1 - interactions / (users * items)
};

double sparsity(std::size_t users, std::size_t items, std::size_t interactions);
DatasetStats dataset_stats(const InteractionDataset& ds);

/// Parses `user \t item \t timestamp` rows. Blank lines are skipped; any other
/// malformed row raises ParseError carrying its 1-based line number.
std::vector<RawInteraction> read_interactions_tsv(std::istream& in);
void write_interactions_tsv(std::ostream& out, const std::vector<RawInteraction>& rows);

/// Iterative k-core filter (users and items with fewer than `min_count`
/// interactions are removed until a fixpoint), dense id remap, and
/// chronological ordering with ties kept in file order.
InteractionDataset build_dataset(const std::vector<RawInteraction>& rows, int min_count = 5);
InteractionDataset load_interactions(const std::filesystem::path& path, int min_count = 5);

std::vector<ItemLabel> read_labels_tsv(std::istream& in);
void write_labels_tsv(std::ostream& out, const std::vector<ItemLabel>& labels);
std::vector<UserLabel> read_user_labels_tsv(std::istream& in);
void write_user_labels_tsv(std::ostream& out, const std::vector<UserLabel>& labels);

/// Maps labels keyed by original ids onto the dataset's dense ids.
void attach_item_labels(InteractionDataset& ds, const std::vector<ItemLabel>& labels);
void attach_user_labels(InteractionDataset& ds, const std::vector<UserLabel>& labels);

/// Stable 64-bit digest of id maps and sequences.
std::uint64_t fingerprint(const InteractionDataset& ds);

/// A history to encode and the item that follows it.
struct Example {
  int user = 0;
  std::vector<int> history;
  int target = 0;
};

/// Leave-one-out views: one entry per user in each.
struct LeaveOneOutSplit {
  std::vector<std::vector<int>> train;  // all but the last two items
  std::vector<Example> valid;           // history = train prefix, target = second-to-last
  std::vector<Example> test;            // history = all but last, target = last
};

LeaveOneOutSplit leave_one_out_split(const InteractionDataset& ds);

/// kSampledPrefix draws one random cut per user, re-drawn every epoch.
enum class TrainExamples { kAllPrefixes, kLastOnly, kSampledPrefix };

TrainExamples parse_train_examples(const std::string& name);
std::string to_string(TrainExamples mode);

/// Next-item examples drawn from the training prefixes only. `seed` only
/// matters for kSampledPrefix.
std::vector<Example> training_examples(const LeaveOneOutSplit& split, TrainExamples mode, std::uint64_t seed = 0);

}  // namespace dtrec
