#include "dtrec/data/dataset.hpp"

#include "dtrec/numerics/random.hpp"
#include "dtrec/numerics/tensor.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <random>
#include <ostream>
#include <string_view>
#include <unordered_map>

namespace dtrec {
namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string_view::npos ? tab : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return fields;
}

std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r") == std::string_view::npos;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

class Fnv1a {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 1099511628211ULL;
    }
  }
  void text(const std::string& s) {
    bytes(s.data(), s.size());
    bytes("\0", 1);
  }
  template <typename T>
  void value(T v) {
    bytes(&v, sizeof(v));
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 1469598103934665603ULL;
};

}  // namespace

std::size_t InteractionDataset::num_interactions() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

double sparsity(std::size_t users, std::size_t items, std::size_t interactions) {
  if (users == 0 || items == 0) return 1.0;
  return 1.0 - static_cast<double>(interactions) / (static_cast<double>(users) * static_cast<double>(items));
}

DatasetStats dataset_stats(const InteractionDataset& ds) {
  DatasetStats st;
  st.users = static_cast<std::size_t>(ds.num_users());
  st.items = static_cast<std::size_t>(ds.num_items());
  st.interactions = ds.num_interactions();
  st.sparsity = sparsity(st.users, st.items, st.interactions);
  return st;
}

std::vector<RawInteraction> read_interactions_tsv(std::istream& in) {
  std::vector<RawInteraction> rows;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = strip_cr(line);
    if (blank(view)) continue;
    const auto fields = split_tabs(view);
    if (fields.size() != 3)
      throw ParseError("expected 3 tab-separated fields, found " + std::to_string(fields.size()), line_no);
    if (fields[0].empty() || fields[1].empty()) throw ParseError("empty user or item id", line_no);
    RawInteraction row{std::string(fields[0]), std::string(fields[1]), 0.0};
    if (!parse_number(fields[2], row.timestamp))
      throw ParseError("timestamp '" + std::string(fields[2]) + "' is not a number", line_no);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_interactions_tsv(std::ostream& out, const std::vector<RawInteraction>& rows) {
  char buf[64];
  for (const auto& r : rows) {
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), r.timestamp);
    out << r.user << '\t' << r.item << '\t' << std::string_view(buf, end - buf) << '\n';
  }
}

InteractionDataset build_dataset(const std::vector<RawInteraction>& rows, int min_count) {
  // Index raw ids in first-appearance order.
  std::unordered_map<std::string, int> user_index, item_index;
  std::vector<int> row_user(rows.size()), row_item(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    row_user[i] = user_index.try_emplace(rows[i].user, static_cast<int>(user_index.size())).first->second;
    row_item[i] = item_index.try_emplace(rows[i].item, static_cast<int>(item_index.size())).first->second;
  }

  std::vector<char> keep(rows.size(), 1);
  std::vector<int> user_count(user_index.size()), item_count(item_index.size());
  bool changed = true;
  while (changed) {
    changed = false;
    std::fill(user_count.begin(), user_count.end(), 0);
    std::fill(item_count.begin(), item_count.end(), 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!keep[i]) continue;
      ++user_count[row_user[i]];
      ++item_count[row_item[i]];
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (keep[i] && (user_count[row_user[i]] < min_count || item_count[row_item[i]] < min_count)) {
        keep[i] = 0;
        changed = true;
      }
    }
  }

  InteractionDataset ds;
  ds.item_ids.emplace_back();
  std::vector<int> user_dense(user_index.size(), -1), item_dense(item_index.size(), -1);
  struct Event {
    double ts;
    std::size_t order;
    int item;
  };
  std::vector<std::vector<Event>> events;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!keep[i]) continue;
    int& u = user_dense[row_user[i]];
    if (u < 0) {
      u = static_cast<int>(ds.user_ids.size());
      ds.user_ids.push_back(rows[i].user);
      events.emplace_back();
    }
    int& it = item_dense[row_item[i]];
    if (it < 0) {
      it = static_cast<int>(ds.item_ids.size());
      ds.item_ids.push_back(rows[i].item);
    }
    events[u].push_back(Event{rows[i].timestamp, i, it});
  }
  if (ds.user_ids.empty()) throw ContractError("dataset is empty after " + std::to_string(min_count) + "-core filtering");

  ds.sequences.resize(events.size());
  for (std::size_t u = 0; u < events.size(); ++u) {
    auto& ev = events[u];
    std::stable_sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.ts < b.ts; });
    ds.sequences[u].reserve(ev.size());
    for (const auto& e : ev) ds.sequences[u].push_back(e.item);
  }
  return ds;
}

InteractionDataset load_interactions(const std::filesystem::path& path, int min_count) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open interactions file " + path.string());
  return build_dataset(read_interactions_tsv(in), min_count);
}

std::vector<ItemLabel> read_labels_tsv(std::istream& in) {
  std::vector<ItemLabel> labels;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = strip_cr(line);
    if (blank(view)) continue;
    const auto f = split_tabs(view);
    ItemLabel l;
    if (f.size() != 3 || !parse_number(f[1], l.leaf) || !parse_number(f[2], l.category))
      throw ParseError("expected item_id <TAB> leaf_id <TAB> category_id", line_no);
    l.item = std::string(f[0]);
    labels.push_back(std::move(l));
  }
  return labels;
}

void write_labels_tsv(std::ostream& out, const std::vector<ItemLabel>& labels) {
  for (const auto& l : labels) out << l.item << '\t' << l.leaf << '\t' << l.category << '\n';
}

std::vector<UserLabel> read_user_labels_tsv(std::istream& in) {
  std::vector<UserLabel> labels;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = strip_cr(line);
    if (blank(view)) continue;
    const auto f = split_tabs(view);
    UserLabel l;
    if (f.size() != 2 || !parse_number(f[1], l.shift_prob))
      throw ParseError("expected user_id <TAB> shift_prob", line_no);
    l.user = std::string(f[0]);
    labels.push_back(std::move(l));
  }
  return labels;
}

void write_user_labels_tsv(std::ostream& out, const std::vector<UserLabel>& labels) {
  char buf[64];
  for (const auto& l : labels) {
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), l.shift_prob);
    out << l.user << '\t' << std::string_view(buf, end - buf) << '\n';
  }
}

void attach_item_labels(InteractionDataset& ds, const std::vector<ItemLabel>& labels) {
  std::unordered_map<std::string, const ItemLabel*> by_id;
  for (const auto& l : labels) by_id[l.item] = &l;
  ds.item_leaf.assign(ds.item_ids.size(), -1);
  ds.item_category.assign(ds.item_ids.size(), -1);
  for (std::size_t i = 1; i < ds.item_ids.size(); ++i) {
    auto it = by_id.find(ds.item_ids[i]);
    if (it == by_id.end()) throw ContractError("no label for item " + ds.item_ids[i]);
    ds.item_leaf[i] = it->second->leaf;
    ds.item_category[i] = it->second->category;
  }
}

void attach_user_labels(InteractionDataset& ds, const std::vector<UserLabel>& labels) {
  std::unordered_map<std::string, double> by_id;
  for (const auto& l : labels) by_id[l.user] = l.shift_prob;
  ds.user_shift_prob.assign(ds.user_ids.size(), 0.0);
  for (std::size_t u = 0; u < ds.user_ids.size(); ++u) {
    auto it = by_id.find(ds.user_ids[u]);
    if (it == by_id.end()) throw ContractError("no label for user " + ds.user_ids[u]);
    ds.user_shift_prob[u] = it->second;
  }
}

std::uint64_t fingerprint(const InteractionDataset& ds) {
  Fnv1a h;
  for (const auto& u : ds.user_ids) h.text(u);
  for (const auto& i : ds.item_ids) h.text(i);
  for (const auto& s : ds.sequences) {
    h.value(static_cast<std::uint64_t>(s.size()));
    for (int id : s) h.value(id);
  }
  return h.digest();
}

LeaveOneOutSplit leave_one_out_split(const InteractionDataset& ds) {
  LeaveOneOutSplit split;
  split.train.reserve(ds.sequences.size());
  split.valid.reserve(ds.sequences.size());
  split.test.reserve(ds.sequences.size());
  for (int u = 0; u < ds.num_users(); ++u) {
    const auto& s = ds.sequences[u];
    if (s.size() < 5)
      throw ContractError("user " + ds.user_ids[u] + " has " + std::to_string(s.size()) +
                          " interactions; leave-one-out needs at least 5");
    const std::size_t n = s.size();
    split.train.emplace_back(s.begin(), s.end() - 2);
    split.valid.push_back(Example{u, std::vector<int>(s.begin(), s.end() - 2), s[n - 2]});
    split.test.push_back(Example{u, std::vector<int>(s.begin(), s.end() - 1), s[n - 1]});
  }
  return split;
}

TrainExamples parse_train_examples(const std::string& name) {
  if (name == "all_prefixes") return TrainExamples::kAllPrefixes;
  if (name == "last_only") return TrainExamples::kLastOnly;
  if (name == "sampled_prefix") return TrainExamples::kSampledPrefix;
  throw ContractError("unknown training example mode '" + name + "'");
}

std::string to_string(TrainExamples mode) {
  switch (mode) {
    case TrainExamples::kAllPrefixes: return "all_prefixes";
    case TrainExamples::kLastOnly: return "last_only";
    case TrainExamples::kSampledPrefix: return "sampled_prefix";
  }
  return "?";
}

std::vector<Example> training_examples(const LeaveOneOutSplit& split, TrainExamples mode, std::uint64_t seed) {
  std::vector<Example> out;
  for (std::size_t u = 0; u < split.train.size(); ++u) {
    const auto& prefix = split.train[u];
    std::size_t first = mode == TrainExamples::kAllPrefixes ? 1 : prefix.size() - 1;
    std::size_t last = prefix.size();
    if (mode == TrainExamples::kSampledPrefix) {
      std::mt19937_64 gen(derive_seed(seed, {static_cast<std::uint64_t>(u)}));
      first = std::uniform_int_distribution<std::size_t>(1, prefix.size() - 1)(gen);
      last = first + 1;
    }
    for (std::size_t j = first; j < last; ++j)
      out.push_back(Example{static_cast<int>(u), std::vector<int>(prefix.begin(), prefix.begin() + j), prefix[j]});
  }
  return out;
}

}  // namespace dtrec
