#include "dtrec/training/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dtrec {

namespace {

constexpr int kFormatVersion = 1;
constexpr const char* kMagic = "dtrec-checkpoint";

struct TensorEntry {
  std::string name;
  Eigen::Index rows = 0, cols = 0;
  std::size_t offset = 0;
};

class Writer {
 public:
  void add(const std::string& name, const Matrix<float>& m) {
    entries_.push_back({name, m.rows(), m.cols(), data_.size()});
    const std::size_t n = static_cast<std::size_t>(m.size());
    data_.resize(data_.size() + n * 4);
    unsigned char* dst = data_.data() + entries_.back().offset;
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(m.data()[i]);
      for (int b = 0; b < 4; ++b) dst[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
  }

  void write(const std::filesystem::path& path, const std::string& header) const {
    std::ostringstream manifest;
    manifest << kMagic << '\n' << "format_version " << kFormatVersion << '\n' << header;
    for (const auto& e : entries_)
      manifest << "tensor " << e.name << ' ' << e.rows << ' ' << e.cols << ' ' << e.offset << '\n';
    manifest << "end\n";
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw std::runtime_error("cannot write " + tmp.string());
      const std::string text = manifest.str();
      out.write(text.data(), static_cast<std::streamsize>(text.size()));
      out.write(reinterpret_cast<const char*>(data_.data()), static_cast<std::streamsize>(data_.size()));
      if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::vector<TensorEntry> entries_;
  std::vector<unsigned char> data_;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> fields;  // non-tensor manifest lines, in order
  std::map<std::string, std::string> config;
  std::vector<TensorEntry> tensors;
  std::vector<unsigned char> data;

  const std::string* field(const std::string& key) const {
    for (const auto& [k, v] : fields)
      if (k == key) return &v;
    return nullptr;
  }

  const TensorEntry* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  Matrix<float> tensor(const std::string& name) const {
    const TensorEntry* e = find(name);
    if (e == nullptr) throw ContractError("checkpoint has no tensor " + name);
    const std::size_t n = static_cast<std::size_t>(e->rows * e->cols);
    if (e->offset + n * 4 > data.size()) throw ContractError("checkpoint tensor " + name + " is truncated");
    Matrix<float> m(e->rows, e->cols);
    const unsigned char* src = data.data() + e->offset;
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(src[i * 4 + b]) << (8 * b);
      m.data()[i] = std::bit_cast<float>(bits);
    }
    return m;
  }
};

Checkpoint read(const std::filesystem::path& path, bool with_data) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  Checkpoint ck;
  std::string line;
  int lineno = 0;
  bool ended = false, versioned = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != kMagic) throw ParseError("not a checkpoint file", 1);
      continue;
    }
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "format_version") {
      int v = 0;
      ls >> v;
      if (v != kFormatVersion)
        throw ContractError("unsupported checkpoint format version " + std::to_string(v));
      versioned = true;
    } else if (kind == "tensor") {
      TensorEntry e;
      if (!(ls >> e.name >> e.rows >> e.cols >> e.offset)) throw ParseError("malformed tensor entry", lineno);
      ck.tensors.push_back(e);
    } else if (kind == "config") {
      std::string key, value;
      ls >> key;
      std::getline(ls >> std::ws, value);
      ck.config[key] = value;
    } else {
      std::string rest;
      std::getline(ls >> std::ws, rest);
      ck.fields.emplace_back(kind, rest);
    }
  }
  if (!ended) throw ContractError("checkpoint manifest has no terminator");
  if (!versioned) throw ContractError("checkpoint manifest has no format_version");
  if (with_data) {
    ck.data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    std::size_t expected = 0;
    for (const auto& t : ck.tensors)
      expected = std::max(expected, t.offset + static_cast<std::size_t>(t.rows * t.cols) * 4);
    if (ck.data.size() != expected)
      throw ContractError("checkpoint payload has " + std::to_string(ck.data.size()) + " bytes, manifest needs " +
                          std::to_string(expected));
  }
  return ck;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void check_shape(const Matrix<float>& stored, const Matrix<float>& target, const std::string& name) {
  if (stored.rows() != target.rows() || stored.cols() != target.cols())
    throw DimensionError("checkpoint tensor " + name + " has shape " + shape_string(stored.rows(), stored.cols()) +
                         ", model expects " + shape_string(target.rows(), target.cols()));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Trainer& trainer,
                     const std::map<std::string, std::string>& echo) {
  std::ostringstream header;
  for (const auto& [k, v] : echo) header << "config " << k << ' ' << v << '\n';
  const TrainerState& s = trainer.state();
  header << "epoch " << s.next_epoch << '\n';
  header << "best_score " << fmt(s.best_score) << '\n';
  header << "best_epoch " << s.best_epoch << '\n';
  header << "since_best " << s.since_best << '\n';
  header << "stopped " << (s.stopped ? 1 : 0) << '\n';
  header << "adam_steps " << trainer.optimizer().steps_taken() << '\n';
  for (const auto& r : s.history)
    header << "history " << r.epoch << ' ' << fmt(r.loss) << ' ' << fmt(r.process) << ' ' << fmt(r.prototype) << ' '
           << fmt(r.aggregate) << ' ' << fmt(r.valid_ndcg10) << ' ' << fmt(r.valid_cost) << ' '
           << (r.improved ? 1 : 0) << '\n';

  Writer w;
  auto params = trainer.model().store().all();
  auto& m = trainer.optimizer().first_moments();
  auto& v = trainer.optimizer().second_moments();
  const auto& best = trainer.best_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params[i]->name;
    w.add("param/" + name, params[i]->value);
    if (i < m.size() && m[i].size() > 0) w.add("adam_m/" + name, m[i]);
    if (i < v.size() && v[i].size() > 0) w.add("adam_v/" + name, v[i]);
    w.add("best/" + name, best.at(i));
  }
  if (const auto& index = trainer.prototypes()) {
    const auto& sch = index->schedule;
    header << "prototypes " << index->fit_epoch << ' ' << index->snapshot_hash << ' ' << (index->constant_k ? 1 : 0)
           << ' ' << sch.k0 << ' ' << sch.k_upper << ' ' << fmt(sch.alpha) << ' ' << sch.steps << '\n';
    for (int t = 1; t <= index->steps(); ++t) w.add("prototype/" + std::to_string(t), index->level(t));
  }
  w.write(path, header.str());
}

void load_checkpoint(const std::filesystem::path& path, Trainer& trainer) {
  const Checkpoint ck = read(path, true);
  auto params = trainer.model().store().all();
  auto& m = trainer.optimizer().first_moments();
  auto& v = trainer.optimizer().second_moments();
  auto& best = trainer.best_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params[i]->name;
    Matrix<float> value = ck.tensor("param/" + name);
    check_shape(value, params[i]->value, name);
    params[i]->value = std::move(value);
    best.at(i) = ck.tensor("best/" + name);
    check_shape(best[i], params[i]->value, name);
    if (ck.find("adam_m/" + name)) m.at(i) = ck.tensor("adam_m/" + name);
    if (ck.find("adam_v/" + name)) v.at(i) = ck.tensor("adam_v/" + name);
  }

  auto integer = [&](const char* key) {
    const std::string* f = ck.field(key);
    if (f == nullptr) throw ContractError(std::string("checkpoint missing field ") + key);
    return std::stoll(*f);
  };
  TrainerState& s = trainer.state();
  s = TrainerState{};
  s.next_epoch = static_cast<int>(integer("epoch"));
  s.best_score = std::stod(*ck.field("best_score"));
  s.best_epoch = static_cast<int>(integer("best_epoch"));
  s.since_best = static_cast<int>(integer("since_best"));
  s.stopped = integer("stopped") != 0;
  trainer.optimizer().set_steps_taken(integer("adam_steps"));
  for (const auto& [k, val] : ck.fields) {
    if (k != "history") continue;
    std::istringstream ls(val);
    EpochRecord r;
    int improved = 0;
    ls >> r.epoch >> r.loss >> r.process >> r.prototype >> r.aggregate >> r.valid_ndcg10 >> r.valid_cost >> improved;
    r.improved = improved != 0;
    s.history.push_back(r);
  }
  if (auto index = load_prototypes(path)) trainer.set_prototypes(std::move(*index));
}

std::map<std::string, std::string> read_checkpoint_config(const std::filesystem::path& path) {
  return read(path, false).config;
}

void load_parameters(const std::filesystem::path& path, Recommender<float>& model) {
  const Checkpoint ck = read(path, true);
  for (auto* p : model.store().all()) {
    Matrix<float> value = ck.tensor("param/" + p->name);
    check_shape(value, p->value, p->name);
    p->value = std::move(value);
  }
}

std::optional<PrototypeIndex<float>> load_prototypes(const std::filesystem::path& path) {
  const Checkpoint ck = read(path, true);
  const std::string* f = ck.field("prototypes");
  if (f == nullptr) return std::nullopt;
  PrototypeIndex<float> index;
  std::istringstream ls(*f);
  int constant = 0;
  ls >> index.fit_epoch >> index.snapshot_hash >> constant >> index.schedule.k0 >> index.schedule.k_upper >>
      index.schedule.alpha >> index.schedule.steps;
  if (!ls) throw ContractError("malformed prototypes entry in checkpoint");
  index.constant_k = constant != 0;
  for (int t = 1; t <= index.schedule.steps; ++t) index.centers.push_back(ck.tensor("prototype/" + std::to_string(t)));
  return index;
}

}  // namespace dtrec
