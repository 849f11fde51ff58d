#include "dtrec/backbone/encoder.hpp"

#include "dtrec/numerics/random.hpp"

#include <cmath>

namespace dtrec {

BackboneKind parse_backbone_kind(const std::string& name) {
  if (name == "attention") return BackboneKind::kAttention;
  if (name == "gru") return BackboneKind::kGru;
  throw ContractError("unknown backbone kind '" + name + "' (expected attention or gru)");
}

std::string to_string(BackboneKind kind) { return kind == BackboneKind::kAttention ? "attention" : "gru"; }

void BackboneConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_len <= 0)
    throw ContractError("backbone dimensions must be positive");
  if (d_model % n_heads != 0) throw ContractError("d_model must be divisible by n_heads");
  if (dropout < 0.0 || dropout >= 1.0) throw ContractError("dropout must be in [0, 1)");
  if (reasoning_steps < 0 || reasoning_steps > 5) throw ContractError("reasoning_steps must be in [0, 5]");
}

template <typename S>
SequenceEncoder<S>::SequenceEncoder(ParameterStore<S>& store, const BackboneConfig& config, int num_items,
                                    std::uint64_t seed)
    : config_(config), num_items_(num_items) {
  config_.validate();
  if (num_items < 1) throw ContractError("encoder needs at least one item");
  const int d = config_.d_model;
  std::uint64_t slot = 0;
  auto gen_for = [&]() { return std::mt19937_64(derive_seed(seed, Stream::kInit, {slot++})); };
  auto embedding = [&](const std::string& name, int rows) {
    auto gen = gen_for();
    return &store.add(name, normal_init<S>(rows, d, 1.0 / std::sqrt(static_cast<double>(d)), gen));
  };
  auto weight = [&](const std::string& name, int in, int out) {
    auto gen = gen_for();
    return &store.add(name, xavier_init<S>(in, out, gen));
  };
  auto constant = [&](const std::string& name, int cols, S v) {
    ++slot;
    return &store.add(name, Matrix<S>::Constant(1, cols, v));
  };

  item_emb_ = embedding("item_embedding", num_items + 1);
  item_emb_->value.row(0).setZero();
  pos_emb_ = embedding("position_embedding", config_.max_len);
  if (config_.reasoning_steps > 0) reason_emb_ = embedding("reasoning_embedding", config_.reasoning_steps);

  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = (config_.kind == BackboneKind::kAttention ? "attn" : "gru") + std::to_string(l) + ".";
    if (config_.kind == BackboneKind::kAttention) {
      AttentionLayer a{};
      a.ln1_g = constant(p + "ln1.gain", d, S(1));
      a.ln1_b = constant(p + "ln1.bias", d, S(0));
      a.wq = weight(p + "query.weight", d, d);
      a.bq = constant(p + "query.bias", d, S(0));
      a.wk = weight(p + "key.weight", d, d);
      a.bk = constant(p + "key.bias", d, S(0));
      a.wv = weight(p + "value.weight", d, d);
      a.bv = constant(p + "value.bias", d, S(0));
      a.wo = weight(p + "out.weight", d, d);
      a.bo = constant(p + "out.bias", d, S(0));
      a.ln2_g = constant(p + "ln2.gain", d, S(1));
      a.ln2_b = constant(p + "ln2.bias", d, S(0));
      a.w1 = weight(p + "ffn1.weight", d, d);
      a.b1 = constant(p + "ffn1.bias", d, S(0));
      a.w2 = weight(p + "ffn2.weight", d, d);
      a.b2 = constant(p + "ffn2.bias", d, S(0));
      attention_.push_back(a);
    } else {
      GruLayer g{};
      g.wz = weight(p + "update.input", d, d);
      g.uz = weight(p + "update.hidden", d, d);
      g.bz = constant(p + "update.bias", d, S(0));
      g.wr = weight(p + "reset.input", d, d);
      g.ur = weight(p + "reset.hidden", d, d);
      g.br = constant(p + "reset.bias", d, S(0));
      g.wn = weight(p + "candidate.input", d, d);
      g.un = weight(p + "candidate.hidden", d, d);
      g.bn = constant(p + "candidate.bias", d, S(0));
      gru_.push_back(g);
    }
  }
  final_g_ = constant("final_norm.gain", d, S(1));
  final_b_ = constant("final_norm.bias", d, S(0));
}

template <typename S>
Var<S> SequenceEncoder<S>::bind(EncoderContext<S>& ctx, Parameter<S>* p) const {
  auto it = ctx.bound.find(p);
  if (it != ctx.bound.end()) return it->second;
  Var<S> v = ctx.tape->parameter(*p);
  ctx.bound.emplace(p, v);
  return v;
}

template <typename S>
Var<S> SequenceEncoder<S>::drop(EncoderContext<S>& ctx, const Var<S>& x) const {
  const std::uint64_t key = derive_seed(ctx.options.dropout_key, {ctx.dropout_sites++});
  return dropout(x, config_.dropout, key, ctx.options.training);
}

template <typename S>
Var<S> SequenceEncoder<S>::linear(EncoderContext<S>& ctx, const Var<S>& x, Parameter<S>* w,
                                  Parameter<S>* b) const {
  return add_row(matmul(x, bind(ctx, w)), bind(ctx, b));
}

template <typename S>
Var<S> SequenceEncoder<S>::final_norm(EncoderContext<S>& ctx, const Var<S>& x) const {
  return layer_norm(x, bind(ctx, final_g_), bind(ctx, final_b_));
}

template <typename S>
Var<S> SequenceEncoder<S>::attention_stack(EncoderContext<S>& ctx, Var<S> x, int query_offset) const {
  const bool first_pass = ctx.keys.empty();
  for (std::size_t l = 0; l < attention_.size(); ++l) {
    const AttentionLayer& a = attention_[l];
    Var<S> h = layer_norm(x, bind(ctx, a.ln1_g), bind(ctx, a.ln1_b));
    Var<S> q = linear(ctx, h, a.wq, a.bq);
    Var<S> k = linear(ctx, h, a.wk, a.bk);
    Var<S> v = linear(ctx, h, a.wv, a.bv);
    if (first_pass) {
      ctx.keys.push_back(k);
      ctx.values.push_back(v);
    } else {
      ctx.keys[l] = concat_sequences(ctx.keys[l], k, ctx.batch);
      ctx.values[l] = concat_sequences(ctx.values[l], v, ctx.batch);
    }
    AttentionLayout layout{ctx.batch, config_.n_heads, query_offset, ctx.key_valid};
    Var<S> attended = causal_attention(q, ctx.keys[l], ctx.values[l], layout);
    x = add(x, drop(ctx, linear(ctx, attended, a.wo, a.bo)));
    Var<S> h2 = layer_norm(x, bind(ctx, a.ln2_g), bind(ctx, a.ln2_b));
    Var<S> f = linear(ctx, gelu(linear(ctx, h2, a.w1, a.b1)), a.w2, a.b2);
    x = add(x, drop(ctx, f));
  }
  return x;
}

template <typename S>
Var<S> SequenceEncoder<S>::gru_cell(EncoderContext<S>& ctx, const GruLayer& g, const Var<S>& x,
                                    const Var<S>& h) const {
  Var<S> z = sigmoid(add(linear(ctx, x, g.wz, g.bz), matmul(h, bind(ctx, g.uz))));
  Var<S> r = sigmoid(add(linear(ctx, x, g.wr, g.br), matmul(h, bind(ctx, g.ur))));
  Var<S> n = tanh(add(linear(ctx, x, g.wn, g.bn), matmul(mul(r, h), bind(ctx, g.un))));
  return add(n, mul(z, sub(h, n)));
}

template <typename S>
EncoderContext<S> SequenceEncoder<S>::encode(Tape<S>& tape, const Batch& batch, const ForwardOptions& options) const {
  if (batch.size <= 0 || batch.length <= 0) throw ContractError("encode: empty batch");
  if (batch.length > config_.max_len)
    throw ContractError("encode: batch length " + std::to_string(batch.length) + " exceeds max_len");
  EncoderContext<S> ctx;
  ctx.tape = &tape;
  ctx.options = options;
  ctx.batch = batch.size;
  ctx.length = batch.length;
  const int B = batch.size, L = batch.length;

  Var<S> table = bind(ctx, item_emb_);
  ctx.item_table = slice_rows(table, 1, num_items_);
  std::vector<int> positions(static_cast<std::size_t>(B) * L);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < L; ++c) positions[static_cast<std::size_t>(b) * L + c] = config_.max_len - L + c;
  Var<S> x = add(embedding_lookup(table, std::span<const int>(batch.items)),
                 embedding_lookup(bind(ctx, pos_emb_), std::span<const int>(positions), -1));
  x = drop(ctx, x);

  if (config_.kind == BackboneKind::kAttention) {
    ctx.key_valid.resize(batch.items.size());
    for (std::size_t i = 0; i < batch.items.size(); ++i) ctx.key_valid[i] = batch.items[i] != 0;
    ctx.hidden = final_norm(ctx, attention_stack(ctx, x, 0));
    return ctx;
  }

  std::vector<Var<S>> masks;
  for (int c = 0; c < L; ++c) {
    Matrix<S> m(B, 1);
    for (int b = 0; b < B; ++b) m(b, 0) = batch.at(b, c) != 0 ? S(1) : S(0);
    masks.push_back(tape.constant(std::move(m)));
  }
  Var<S> layer_input = x;
  for (std::size_t l = 0; l < gru_.size(); ++l) {
    Var<S> h = tape.constant(Matrix<S>::Zero(B, config_.d_model));
    std::vector<Var<S>> outputs;
    for (int c = 0; c < L; ++c) {
      std::vector<int> rows(B);
      for (int b = 0; b < B; ++b) rows[b] = b * L + c;
      Var<S> xc = gather_rows(layer_input, std::span<const int>(rows));
      Var<S> candidate = gru_cell(ctx, gru_[l], xc, h);
      h = add(h, mul_col(sub(candidate, h), masks[c]));
      outputs.push_back(h);
    }
    ctx.recurrent.push_back(h);
    layer_input = interleave_steps(outputs);
    if (l + 1 < gru_.size()) layer_input = drop(ctx, layer_input);
  }
  ctx.hidden = final_norm(ctx, layer_input);
  return ctx;
}

template <typename S>
Var<S> SequenceEncoder<S>::initial_state(EncoderContext<S>& ctx) const {
  std::vector<int> rows(ctx.batch);
  for (int b = 0; b < ctx.batch; ++b) rows[b] = b * ctx.length + ctx.length - 1;
  return gather_rows(ctx.hidden, std::span<const int>(rows));
}

template <typename S>
Var<S> SequenceEncoder<S>::reason_step(EncoderContext<S>& ctx, const Var<S>& previous, int t) const {
  if (t < 1 || t > config_.reasoning_steps)
    throw ContractError("reason_step: step " + std::to_string(t) + " outside [1, " +
                        std::to_string(config_.reasoning_steps) + "]");
  if (t != ctx.appended + 1) throw ContractError("reason_step: steps must be taken in order");
  const std::vector<int> rows(ctx.batch, t - 1);
  Var<S> x = add(previous, embedding_lookup(bind(ctx, reason_emb_), std::span<const int>(rows), -1));
  x = drop(ctx, x);
  ctx.appended = t;

  if (config_.kind == BackboneKind::kAttention) {
    const int old_len = ctx.length + t - 1;
    std::vector<std::uint8_t> valid;
    valid.reserve(static_cast<std::size_t>(ctx.batch) * (old_len + 1));
    for (int b = 0; b < ctx.batch; ++b) {
      valid.insert(valid.end(), ctx.key_valid.begin() + static_cast<std::ptrdiff_t>(b) * old_len,
                   ctx.key_valid.begin() + static_cast<std::ptrdiff_t>(b + 1) * old_len);
      valid.push_back(1);
    }
    ctx.key_valid = std::move(valid);
    return final_norm(ctx, attention_stack(ctx, x, old_len));
  }

  for (std::size_t l = 0; l < gru_.size(); ++l) {
    ctx.recurrent[l] = gru_cell(ctx, gru_[l], x, ctx.recurrent[l]);
    x = ctx.recurrent[l];
    if (l + 1 < gru_.size()) x = drop(ctx, x);
  }
  return final_norm(ctx, x);
}

template <typename S>
Var<S> SequenceEncoder<S>::item_log_probs(EncoderContext<S>& ctx, const Var<S>& state) const {
  return log_softmax(matmul_nt(state, ctx.item_table));
}

template <typename S>
ReasoningTrace<S> SequenceEncoder<S>::run_reasoning(Tape<S>& tape, const Batch& batch, int steps,
                                                    const ForwardOptions& options) const {
  if (steps < 0 || steps > config_.reasoning_steps)
    throw ContractError("run_reasoning: " + std::to_string(steps) + " steps requested, model supports " +
                        std::to_string(config_.reasoning_steps));
  EncoderContext<S> ctx = encode(tape, batch, options);
  ReasoningTrace<S> trace;
  Var<S> r = initial_state(ctx);
  trace.states.push_back(r);
  trace.log_probs.push_back(item_log_probs(ctx, r));
  for (int t = 1; t <= steps; ++t) {
    r = reason_step(ctx, r, t);
    trace.states.push_back(r);
    trace.log_probs.push_back(item_log_probs(ctx, r));
  }
  return trace;
}

template <typename S>
Matrix<S> SequenceEncoder<S>::predict_distribution(const Matrix<S>& states) const {
  if (states.cols() != config_.d_model) throw DimensionError("predict_distribution: state width mismatch");
  Matrix<S> logits = states * item_emb_->value.bottomRows(num_items_).transpose();
  logits = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  logits.array().colwise() /= logits.rowwise().sum().array();
  Matrix<S> out = Matrix<S>::Zero(states.rows(), num_items_ + 1);
  out.rightCols(num_items_) = logits;
  return out;
}

template class SequenceEncoder<float>;
template class SequenceEncoder<double>;

}  // namespace dtrec
