#include "anchorcir/layers.hpp"

#include <cmath>

#include "anchorcir/errors.hpp"

namespace anchorcir {

Var ParamBinder::operator()(const Tensor& param) {
  if (auto it = bound_.find(&param); it != bound_.end()) return it->second;
  const bool rg = track_grads_ && !frozen_.contains(&param);
  Var v = tape_.leaf(param, rg);
  bound_.emplace(&param, v);
  return v;
}

Tensor ParamBinder::grad(const Tensor& param) const {
  if (auto it = bound_.find(&param); it != bound_.end()) return tape_.grad(it->second);
  return Tensor(param.rows(), param.cols());
}

LinearParams make_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {rng.gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in))), Tensor(1, out)};
}

LinearParams make_zero_linear(std::size_t in, std::size_t out) {
  return {Tensor(in, out), Tensor(1, out)};
}

LayerNormParams make_layer_norm(std::size_t d) { return {Tensor(1, d, 1.0), Tensor(1, d)}; }

AttentionParams make_attention(std::size_t d_model, const AttentionShape& shape, Rng& rng) {
  const std::size_t inner = shape.heads * shape.head_dim;
  AttentionParams p;
  p.query = make_linear(d_model, inner, rng);
  p.key = make_linear(d_model, inner, rng);
  p.value = make_linear(d_model, inner, rng);
  p.out = make_linear(inner, d_model, rng);
  return p;
}

FeedForwardParams make_feed_forward(std::size_t d_model, std::size_t hidden, Rng& rng) {
  return {make_linear(d_model, hidden, rng), make_linear(hidden, d_model, rng)};
}

SelfAttentionBlock make_self_attention_block(std::size_t d_model, const AttentionShape& shape,
                                             std::size_t ffn_hidden, Rng& rng) {
  SelfAttentionBlock b;
  b.ln_attn = make_layer_norm(d_model);
  b.attn = make_attention(d_model, shape, rng);
  b.ln_ff = make_layer_norm(d_model);
  b.ff = make_feed_forward(d_model, ffn_hidden, rng);
  return b;
}

std::size_t parameter_count(const LinearParams& p) { return p.weight.size() + p.bias.size(); }
std::size_t parameter_count(const LayerNormParams& p) { return p.gain.size() + p.bias.size(); }
std::size_t parameter_count(const AttentionParams& p) {
  return parameter_count(p.query) + parameter_count(p.key) + parameter_count(p.value) +
         parameter_count(p.out);
}
std::size_t parameter_count(const FeedForwardParams& p) {
  return parameter_count(p.up) + parameter_count(p.down);
}
std::size_t parameter_count(const SelfAttentionBlock& p) {
  return parameter_count(p.ln_attn) + parameter_count(p.attn) + parameter_count(p.ln_ff) +
         parameter_count(p.ff);
}

Var linear(ParamBinder& bind, Var x, const LinearParams& p) {
  return ad::add_row(ad::matmul(x, bind(p.weight)), bind(p.bias));
}

Var layer_norm(ParamBinder& bind, Var x, const LayerNormParams& p) {
  return ad::layer_norm_rows(x, bind(p.gain), bind(p.bias));
}

Var feed_forward(ParamBinder& bind, Var x, const FeedForwardParams& p) {
  return linear(bind, ad::gelu(linear(bind, x, p.up)), p.down);
}

Var attention(Var q, Var k, Var v, double d_k) {
  const Var logits = ad::matmul_bt(q, k);
  const Var weights = ad::softmax_rows(ad::scale(logits, 1.0 / std::sqrt(d_k)));
  return ad::matmul(weights, v);
}

Var modulated_attention(Var q, Var k, Var v, std::span<const double> mask, Var beta, double d_k,
                        Tensor* weights) {
  if (k.rows() != v.rows()) {
    throw DimensionError("modulated_attention: " + std::to_string(k.rows()) + " keys but " +
                         std::to_string(v.rows()) + " values");
  }
  const Var logits = ad::add_masked_bias(ad::matmul_bt(q, k), beta, mask);
  const Var a = ad::softmax_rows(ad::scale(logits, 1.0 / std::sqrt(d_k)));
  if (weights != nullptr) *weights = a.value();
  return ad::matmul(a, v);
}

KeyValue project_key_value(ParamBinder& bind, Var source, const AttentionParams& p) {
  return {linear(bind, source, p.key), linear(bind, source, p.value)};
}

Var multi_head_attention(ParamBinder& bind, Var x, const KeyValue& kv, const AttentionParams& p,
                         const AttentionShape& shape, std::span<const double> mask,
                         std::optional<Var> beta, Tensor* weights) {
  if (beta && mask.size() != kv.keys.rows()) {
    throw DimensionError("multi_head_attention: mask covers " + std::to_string(mask.size()) +
                         " positions but there are " + std::to_string(kv.keys.rows()) + " keys");
  }
  const Var q = linear(bind, x, p.query);
  const double d_k = static_cast<double>(shape.head_dim);
  auto head = [&](Var qh, Var kh, Var vh, Tensor* w) {
    if (beta) return modulated_attention(qh, kh, vh, mask, *beta, d_k, w);
    if (w == nullptr) return attention(qh, kh, vh, d_k);
    const Var a = ad::softmax_rows(ad::scale(ad::matmul_bt(qh, kh), 1.0 / std::sqrt(d_k)));
    *w = a.value();
    return ad::matmul(a, vh);
  };
  Var mixed;
  if (shape.heads == 1) {
    mixed = head(q, kv.keys, kv.values, weights);
  } else {
    std::vector<Var> outs;
    Tensor avg;
    for (std::size_t h = 0; h < shape.heads; ++h) {
      const std::size_t off = h * shape.head_dim;
      Tensor w;
      outs.push_back(head(ad::slice_cols(q, off, shape.head_dim),
                          ad::slice_cols(kv.keys, off, shape.head_dim),
                          ad::slice_cols(kv.values, off, shape.head_dim),
                          weights != nullptr ? &w : nullptr));
      if (weights != nullptr) {
        if (avg.empty()) avg = Tensor(w.rows(), w.cols());
        for (std::size_t i = 0; i < w.size(); ++i) avg[i] += w[i] / static_cast<double>(shape.heads);
      }
    }
    if (weights != nullptr) *weights = avg;
    mixed = ad::concat_cols(outs);
  }
  return linear(bind, mixed, p.out);
}

Var self_attention_block(ParamBinder& bind, Var x, const SelfAttentionBlock& p,
                         const AttentionShape& shape) {
  const Var h = layer_norm(bind, x, p.ln_attn);
  const Var a = multi_head_attention(bind, h, project_key_value(bind, h, p.attn), p.attn, shape);
  const Var x1 = ad::add(x, a);
  return ad::add(x1, feed_forward(bind, layer_norm(bind, x1, p.ln_ff), p.ff));
}

}  // namespace anchorcir
