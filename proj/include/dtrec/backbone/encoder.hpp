#pragma once

#include "dtrec/data/batch.hpp"
#include "dtrec/numerics/ops.hpp"
#include "dtrec/numerics/parameter_store.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace dtrec {

enum class BackboneKind { kAttention, kGru };

BackboneKind parse_backbone_kind(const std::string& name);
std::string to_string(BackboneKind kind);

struct BackboneConfig {
  BackboneKind kind = BackboneKind::kAttention;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int max_len = 50;
  double dropout = 0.2;
  /// Maximum number of reasoning steps T; 0 gives the plain sequential model.
  int reasoning_steps = 3;

  void validate() const;
};

struct ForwardOptions {
  bool training = false;
  /// Root key for dropout masks; each dropout site folds in its own counter.
  std::uint64_t dropout_key = 0;
};

/// Per-batch forward state: cached keys/values (attention) or recurrent
/// states (GRU), so each reasoning step processes only the appended token.
template <typename S>
struct EncoderContext {
  Tape<S>* tape = nullptr;
  ForwardOptions options;
  int batch = 0;
  int length = 0;    // padded history length
  int appended = 0;  // reasoning tokens appended so far
  Var<S> hidden;     // [batch*length x d], final-layer output for every history position
  std::vector<Var<S>> keys, values;
  std::vector<std::uint8_t> key_valid;
  std::vector<Var<S>> recurrent;
  std::unordered_map<const Parameter<S>*, Var<S>> bound;
  Var<S> item_table;  // embedding rows 1..|I|
  std::uint64_t dropout_sites = 0;
};

/// Per-sequence record of the latent reasoning loop for one batch.
///
/// Distributions are over real items only: column j of log_probs is item j + 1,
/// so the padding item never receives probability.
template <typename S>
struct ReasoningTrace {
  std::vector<Var<S>> states;     // r_0 .. r_T, each [B x d]
  std::vector<Var<S>> log_probs;  // log y^(0) .. log y^(T), each [B x |I|]
  std::vector<Matrix<S>> indicators;  // t = 1..T at index t-1, raw [Ent, Cons, Delta] per row
  std::vector<Var<S>> halt_probs;     // t = 1..T at index t-1, [B x 1]
  std::vector<int> exit_steps;        // per row, inference only

  int steps() const { return static_cast<int>(states.size()) - 1; }
  Matrix<S> probs(int t) const { return log_probs.at(t).value().array().exp().matrix(); }
};

/// Sequential encoder with an appended-token latent reasoning loop.
///
/// r_0 is the encoder output at the most recent history position. Step t
/// appends r_{t-1} plus a learned per-step reasoning embedding as a new token,
/// runs it through the encoder against the cached history, and reads r_t at
/// that position. Item scores are dot products with the shared item table.
template <typename S>
class SequenceEncoder {
 public:
  SequenceEncoder(ParameterStore<S>& store, const BackboneConfig& config, int num_items, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  int num_items() const { return num_items_; }
  int width() const { return config_.d_model; }

  EncoderContext<S> encode(Tape<S>& tape, const Batch& batch, const ForwardOptions& options) const;
  /// r_0: the hidden state at the last (most recent) history position.
  Var<S> initial_state(EncoderContext<S>& ctx) const;
  /// r_t from r_{t-1}; t >= 1 and steps must be taken in order.
  Var<S> reason_step(EncoderContext<S>& ctx, const Var<S>& previous, int t) const;
  /// log y = log_softmax(r E^T) over items 1..|I|.
  Var<S> item_log_probs(EncoderContext<S>& ctx, const Var<S>& state) const;

  ReasoningTrace<S> run_reasoning(Tape<S>& tape, const Batch& batch, int steps,
                                  const ForwardOptions& options) const;

  /// Full distribution [rows x (|I|+1)] for plain states; column 0 (padding) is 0.
  Matrix<S> predict_distribution(const Matrix<S>& states) const;

  Parameter<S>& item_embeddings() const { return *item_emb_; }
  Parameter<S>& reasoning_embeddings() const { return *reason_emb_; }

 private:
  struct AttentionLayer {
    Parameter<S>*ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    Parameter<S>*ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
  };
  struct GruLayer {
    Parameter<S>*wz, *uz, *bz, *wr, *ur, *br, *wn, *un, *bn;
  };

  Var<S> bind(EncoderContext<S>& ctx, Parameter<S>* p) const;
  Var<S> drop(EncoderContext<S>& ctx, const Var<S>& x) const;
  Var<S> linear(EncoderContext<S>& ctx, const Var<S>& x, Parameter<S>* w, Parameter<S>* b) const;
  /// Runs tokens at absolute positions [offset, offset + rows/B) through all layers.
  Var<S> attention_stack(EncoderContext<S>& ctx, Var<S> x, int query_offset) const;
  Var<S> gru_cell(EncoderContext<S>& ctx, const GruLayer& layer, const Var<S>& x, const Var<S>& h) const;
  Var<S> final_norm(EncoderContext<S>& ctx, const Var<S>& x) const;

  BackboneConfig config_;
  int num_items_;
  Parameter<S>* item_emb_;
  Parameter<S>* pos_emb_;
  Parameter<S>* reason_emb_ = nullptr;
  Parameter<S>*final_g_, *final_b_;
  std::vector<AttentionLayer> attention_;
  std::vector<GruLayer> gru_;
};

}  // namespace dtrec
