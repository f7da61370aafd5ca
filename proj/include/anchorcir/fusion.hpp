#pragma once

#include <optional>
#include <string>
#include <vector>

#include "anchorcir/geometry.hpp"
#include "anchorcir/layers.hpp"

namespace anchorcir {

// Binary indicator over patch positions. Entry n is 1 iff the center of patch n lies
// inside the box. Never empty.
class RegionMask {
 public:
  RegionMask(GridShape grid, std::vector<double> values);

  const GridShape& grid() const noexcept { return grid_; }
  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t count() const noexcept;

 private:
  GridShape grid_;
  std::vector<double> values_;
};

RegionMask region_mask_from_bbox(const BBox& bbox, const GridShape& grid);
// Indices of patches whose centers lie inside the box (possibly empty).
std::vector<std::size_t> patches_inside(const BBox& bbox, const GridShape& grid);

struct FusionConfig {
  std::size_t model_dim = 32;
  std::size_t heads = 1;
  std::size_t head_dim = 32;
  std::size_t blocks = 2;
  std::size_t ffn_dim = 64;
  std::size_t n_queries = 8;
  // Apply the mask bias in every cross-attention block, or only the first.
  bool bias_all_blocks = true;
  bool queries_trainable = false;

  AttentionShape attention_shape() const { return {heads, head_dim}; }
  bool operator==(const FusionConfig&) const = default;
};

struct FusionBlock {
  LayerNormParams ln_self;
  AttentionParams self_attn;
  LayerNormParams ln_cross;
  AttentionParams cross_attn;
  LayerNormParams ln_ff;
  FeedForwardParams ff;
};

struct FusionParams {
  FusionConfig config;
  Tensor queries;  // n_queries × model_dim
  std::vector<FusionBlock> blocks;
  LayerNormParams ln_out;

  template <class Self, class Fn>
  static void visit_impl(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".queries", self.queries);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = prefix + ".block" + std::to_string(i);
      visit_layer_norm(b.ln_self, p + ".ln_self", fn);
      visit_attention(b.self_attn, p + ".self_attn", fn);
      visit_layer_norm(b.ln_cross, p + ".ln_cross", fn);
      visit_attention(b.cross_attn, p + ".cross_attn", fn);
      visit_layer_norm(b.ln_ff, p + ".ln_ff", fn);
      visit_feed_forward(b.ff, p + ".ff", fn);
    }
    visit_layer_norm(self.ln_out, prefix + ".ln_out", fn);
  }
  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) { visit_impl(*this, prefix, fn); }
  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) const { visit_impl(*this, prefix, fn); }
};

FusionParams make_fusion_params(const FusionConfig& cfg, Rng& rng);
std::size_t parameter_count(const FusionParams& p);

// Per-block keys/values of one image's patch embeddings. Computed once per image and
// shared by every pass over that image.
struct PatchKeyValues {
  std::size_t patch_count = 0;
  std::vector<KeyValue> per_block;
};

PatchKeyValues project_patches(ParamBinder& bind, const FusionParams& params, Var patches);

// Token layout: [cls?] [fusion queries?] [extra?] [text?].
struct EncodeRequest {
  const PatchKeyValues* patches = nullptr;
  std::optional<Var> cls;
  bool with_queries = true;
  std::optional<Var> extra;
  std::optional<Var> text;
  const RegionMask* mask = nullptr;
  // [1x1] shared across rows, or [n_queries x 1] (one per fusion query; the other rows
  // take the mean).
  std::optional<Var> beta;
  // When set, receives the cross-attention matrix of every block.
  std::vector<Tensor>* cross_weights = nullptr;
};

struct EncodeResult {
  std::optional<Var> cls;
  std::optional<Var> queries;
  std::optional<Var> extra;
  std::optional<Var> text;
};

// Multimodal encoder: per block, self-attention over the token set, cross-attention from
// the token set to the patches (with the β·M bias on masked patch columns), then a
// feed-forward layer; pre-norm residuals and a final layer norm.
EncodeResult multimodal_encode(ParamBinder& bind, const FusionParams& params,
                               const EncodeRequest& request);

// Target-branch encoding: fusion queries only, no text, no mask, β = 0.
Var encode_target(ParamBinder& bind, const FusionParams& params, const PatchKeyValues& patches);

}  // namespace anchorcir
