#pragma once

#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "anchorcir/autodiff.hpp"
#include "anchorcir/random.hpp"
#include "anchorcir/tensor.hpp"

namespace anchorcir {

// Binds parameter tensors owned elsewhere onto a tape as leaves, once per tape.
// Frozen tensors (and every tensor in no-grad mode) become constants.
class ParamBinder {
 public:
  explicit ParamBinder(Tape& tape, bool track_grads = true)
      : tape_(tape), track_grads_(track_grads) {}

  Var operator()(const Tensor& param);
  void freeze(const Tensor& param) { frozen_.insert(&param); }
  bool is_frozen(const Tensor& param) const { return frozen_.contains(&param); }
  bool tracks_grads() const noexcept { return track_grads_; }

  // Gradient accumulated for a bound parameter; zeros if it never entered the tape.
  Tensor grad(const Tensor& param) const;
  Tape& tape() noexcept { return tape_; }

 private:
  Tape& tape_;
  bool track_grads_;
  std::unordered_map<const Tensor*, Var> bound_;
  std::unordered_set<const Tensor*> frozen_;
};

struct LinearParams {
  Tensor weight;  // in × out
  Tensor bias;    // 1 × out
};

struct LayerNormParams {
  Tensor gain;  // 1 × d
  Tensor bias;  // 1 × d
};

struct AttentionParams {
  LinearParams query;  // d_model × heads*head_dim
  LinearParams key;
  LinearParams value;
  LinearParams out;  // heads*head_dim × d_model
};

struct FeedForwardParams {
  LinearParams up;    // d_model × hidden
  LinearParams down;  // hidden × d_model
};

// Pre-norm self-attention + feed-forward block (used by the reasoning module).
struct SelfAttentionBlock {
  LayerNormParams ln_attn;
  AttentionParams attn;
  LayerNormParams ln_ff;
  FeedForwardParams ff;
};

struct AttentionShape {
  std::size_t heads = 1;
  std::size_t head_dim = 32;
};

// Initializers. Weights are N(0, 1/fan_in); biases zero; layer norms identity.
LinearParams make_linear(std::size_t in, std::size_t out, Rng& rng);
LinearParams make_zero_linear(std::size_t in, std::size_t out);
LayerNormParams make_layer_norm(std::size_t d);
AttentionParams make_attention(std::size_t d_model, const AttentionShape& shape, Rng& rng);
FeedForwardParams make_feed_forward(std::size_t d_model, std::size_t hidden, Rng& rng);
SelfAttentionBlock make_self_attention_block(std::size_t d_model, const AttentionShape& shape,
                                             std::size_t ffn_hidden, Rng& rng);

std::size_t parameter_count(const LinearParams& p);
std::size_t parameter_count(const LayerNormParams& p);
std::size_t parameter_count(const AttentionParams& p);
std::size_t parameter_count(const FeedForwardParams& p);
std::size_t parameter_count(const SelfAttentionBlock& p);

// Parameter visitation: fn(name, tensor) for every tensor, in a fixed order.
template <class P, class Fn>
void visit_linear(P& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".weight", p.weight);
  fn(prefix + ".bias", p.bias);
}
template <class P, class Fn>
void visit_layer_norm(P& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".gain", p.gain);
  fn(prefix + ".bias", p.bias);
}
template <class P, class Fn>
void visit_attention(P& p, const std::string& prefix, Fn&& fn) {
  visit_linear(p.query, prefix + ".query", fn);
  visit_linear(p.key, prefix + ".key", fn);
  visit_linear(p.value, prefix + ".value", fn);
  visit_linear(p.out, prefix + ".out", fn);
}
template <class P, class Fn>
void visit_feed_forward(P& p, const std::string& prefix, Fn&& fn) {
  visit_linear(p.up, prefix + ".up", fn);
  visit_linear(p.down, prefix + ".down", fn);
}
template <class P, class Fn>
void visit_self_block(P& p, const std::string& prefix, Fn&& fn) {
  visit_layer_norm(p.ln_attn, prefix + ".ln_attn", fn);
  visit_attention(p.attn, prefix + ".attn", fn);
  visit_layer_norm(p.ln_ff, prefix + ".ln_ff", fn);
  visit_feed_forward(p.ff, prefix + ".ff", fn);
}

Var linear(ParamBinder& bind, Var x, const LinearParams& p);
Var layer_norm(ParamBinder& bind, Var x, const LayerNormParams& p);
Var feed_forward(ParamBinder& bind, Var x, const FeedForwardParams& p);

// Unmodulated scaled dot-product attention: Softmax(Q Kᵀ / √d_k) V.
Var attention(Var q, Var k, Var v, double d_k);

// Modulated attention: Softmax((Q Kᵀ + β·M) / √d_k) V. The bias is added to the raw
// logits before the 1/√d_k scaling. beta is [1x1] (every row) or [rows(q) x 1] (per row).
// If `weights` is non-null, the attention matrix is written to it.
Var modulated_attention(Var q, Var k, Var v, std::span<const double> mask, Var beta, double d_k,
                        Tensor* weights = nullptr);

struct KeyValue {
  Var keys;
  Var values;
};

KeyValue project_key_value(ParamBinder& bind, Var source, const AttentionParams& p);

// Multi-head attention from `x` to precomputed keys/values, followed by the output
// projection. With a mask, every head receives the same β·M bias. `weights`, when
// non-null, receives the head-averaged attention matrix.
Var multi_head_attention(ParamBinder& bind, Var x, const KeyValue& kv, const AttentionParams& p,
                         const AttentionShape& shape, std::span<const double> mask = {},
                         std::optional<Var> beta = std::nullopt, Tensor* weights = nullptr);

Var self_attention_block(ParamBinder& bind, Var x, const SelfAttentionBlock& p,
                         const AttentionShape& shape);

}  // namespace anchorcir
