#include "dtrec/data/synthetic.hpp"

#include "dtrec/numerics/random.hpp"
#include "dtrec/numerics/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>

namespace dtrec {

int SyntheticTaxonomy::num_leaves() const {
  return std::accumulate(branching.begin(), branching.end(), 1, std::multiplies<int>());
}

int SyntheticTaxonomy::num_categories() const { return branching.empty() ? 1 : branching.front(); }

int SyntheticTaxonomy::num_items() const { return num_leaves() * items_per_leaf; }

int SyntheticTaxonomy::leaf_of_item(int item) const {
  if (item < 1 || item > num_items()) throw IndexError("item " + std::to_string(item) + " not in taxonomy");
  return (item - 1) / items_per_leaf;
}

int SyntheticTaxonomy::category_of_leaf(int leaf) const {
  return leaf / (num_leaves() / num_categories());
}

std::pair<int, int> SyntheticTaxonomy::sibling_range(int leaf) const {
  const int fanout = branching.back();
  const int first = (leaf / fanout) * fanout;
  return {first, first + fanout};
}

void SyntheticTaxonomy::validate() const {
  if (branching.empty()) throw ContractError("taxonomy needs at least one level");
  for (int b : branching)
    if (b < 1) throw ContractError("taxonomy branching factors must be >= 1");
  if (items_per_leaf < 1) throw ContractError("items_per_leaf must be >= 1");
  if (shift_prob < 0.0 || shift_prob > 1.0) throw ContractError("shift_prob must be in [0, 1]");
  if (sibling_share < 0.0 || sibling_share > 1.0) throw ContractError("sibling_share must be in [0, 1]");
  if (popularity_skew < 0.0) throw ContractError("popularity_skew must be >= 0");
}

SyntheticData generate_synthetic(const SyntheticTaxonomy& tax, int users, std::pair<int, int> length_range,
                                 std::uint64_t seed) {
  const Cohort cohort{users, tax.shift_prob, length_range.first, length_range.second};
  return generate_synthetic(tax, std::span<const Cohort>(&cohort, 1), seed);
}

SyntheticData generate_synthetic(const SyntheticTaxonomy& tax, std::span<const Cohort> cohorts,
                                 std::uint64_t seed) {
  tax.validate();
  const int leaves = tax.num_leaves();

  SyntheticData out;
  out.items.reserve(static_cast<std::size_t>(tax.num_items()));
  for (int item = 1; item <= tax.num_items(); ++item) {
    const int leaf = tax.leaf_of_item(item);
    out.items.push_back(ItemLabel{std::to_string(item), leaf, tax.category_of_leaf(leaf)});
  }

  std::vector<double> popularity(static_cast<std::size_t>(tax.items_per_leaf));
  for (int j = 0; j < tax.items_per_leaf; ++j) popularity[j] = 1.0 / std::pow(j + 1.0, tax.popularity_skew);

  int user = 0;
  for (const Cohort& c : cohorts) {
    if (c.users < 0 || c.min_length < 1 || c.max_length < c.min_length)
      throw ContractError("cohort needs users >= 0 and 1 <= min_length <= max_length");
    if (c.shift_prob < 0.0 || c.shift_prob > 1.0) throw ContractError("cohort shift_prob must be in [0, 1]");
    for (int k = 0; k < c.users; ++k, ++user) {
      std::mt19937_64 gen(derive_seed(seed, Stream::kSynthetic, {static_cast<std::uint64_t>(user)}));
      std::uniform_int_distribution<int> length_dist(c.min_length, c.max_length);
      std::uniform_int_distribution<int> any_leaf(0, leaves - 1);
      std::bernoulli_distribution shift(c.shift_prob);
      std::bernoulli_distribution stay_near(tax.sibling_share);
      std::discrete_distribution<int> pick_item(popularity.begin(), popularity.end());

      const std::string name = "u" + std::to_string(user);
      out.users.push_back(UserLabel{name, c.shift_prob});
      const int length = length_dist(gen);
      int leaf = any_leaf(gen);
      for (int step = 0; step < length; ++step) {
        if (step > 0 && shift(gen)) {
          if (stay_near(gen)) {
            const auto [lo, hi] = tax.sibling_range(leaf);
            leaf = std::uniform_int_distribution<int>(lo, hi - 1)(gen);
          } else {
            leaf = any_leaf(gen);
          }
        }
        const int item = leaf * tax.items_per_leaf + pick_item(gen) + 1;
        out.interactions.push_back(RawInteraction{name, std::to_string(item), static_cast<double>(step)});
        out.latent_leaves.push_back(leaf);
      }
    }
  }
  return out;
}

InteractionDataset to_dataset(const SyntheticData& data, int min_count) {
  InteractionDataset ds = build_dataset(data.interactions, min_count);
  attach_item_labels(ds, data.items);
  attach_user_labels(ds, data.users);
  return ds;
}

}  // namespace dtrec
