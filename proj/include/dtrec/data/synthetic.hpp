#pragma once

#include "dtrec/data/dataset.hpp"

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace dtrec {

/// Balanced item taxonomy plus the intent walk users follow through it.
///
/// Leaves own disjoint blocks of `items_per_leaf` consecutive item ids. A
/// category is a top-level subtree. At every step after the first, with
/// probability `shift_prob` the user's latent leaf is resampled: uniformly from
/// the current leaf's siblings (same parent, current leaf included) with
/// probability `sibling_share`, otherwise uniformly from all leaves. The item is
/// then drawn from the leaf with Zipf(popularity_skew) weights over its items.
struct SyntheticTaxonomy {
  std::vector<int> branching{4, 4, 4};
  int items_per_leaf = 10;
  double shift_prob = 0.2;
  double sibling_share = 0.0;
  double popularity_skew = 1.0;

  int num_leaves() const;
  int num_categories() const;
  int num_items() const;
  /// Generator item ids are 1..num_items().
  int leaf_of_item(int item) const;
  int category_of_leaf(int leaf) const;
  /// Leaves sharing the parent of `leaf`, including `leaf` itself.
  std::pair<int, int> sibling_range(int leaf) const;
  void validate() const;
};

/// A group of users sharing walk parameters; overrides the taxonomy's shift_prob.
struct Cohort {
  int users = 0;
  double shift_prob = 0.2;
  int min_length = 5;
  int max_length = 20;
};

struct SyntheticData {
  std::vector<RawInteraction> interactions;
  std::vector<ItemLabel> items;
  std::vector<UserLabel> users;
  /// Latent leaf behind every interaction, aligned with `interactions`.
  std::vector<int> latent_leaves;
};

SyntheticData generate_synthetic(const SyntheticTaxonomy& tax, int users, std::pair<int, int> length_range,
                                 std::uint64_t seed);
SyntheticData generate_synthetic(const SyntheticTaxonomy& tax, std::span<const Cohort> cohorts,
                                 std::uint64_t seed);

/// k-core filtered dataset with item and user labels attached.
InteractionDataset to_dataset(const SyntheticData& data, int min_count = 5);

}  // namespace dtrec
