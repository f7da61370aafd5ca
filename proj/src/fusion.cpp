#include "anchorcir/fusion.hpp"

#include <algorithm>

#include "anchorcir/errors.hpp"

namespace anchorcir {

RegionMask::RegionMask(GridShape grid, std::vector<double> values)
    : grid_(grid), values_(std::move(values)) {
  if (values_.size() != grid_.count()) {
    throw DimensionError("RegionMask: " + std::to_string(values_.size()) + " entries for a " +
                         std::to_string(grid_.h) + "x" + std::to_string(grid_.w) + " grid");
  }
  for (double v : values_) {
    if (v != 0.0 && v != 1.0) throw ContractError("RegionMask: entries must be 0 or 1");
  }
  if (count() == 0) throw DegenerateInputError("RegionMask: empty mask (no patch inside the box)");
}

std::size_t RegionMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), 1.0));
}

std::vector<std::size_t> patches_inside(const BBox& bbox, const GridShape& grid) {
  std::vector<std::size_t> inside;
  for (std::size_t r = 0; r < grid.h; ++r) {
    for (std::size_t c = 0; c < grid.w; ++c) {
      const double cx = (static_cast<double>(c) + 0.5) / static_cast<double>(grid.w);
      const double cy = (static_cast<double>(r) + 0.5) / static_cast<double>(grid.h);
      if (bbox.contains(cx, cy)) inside.push_back(r * grid.w + c);
    }
  }
  return inside;
}

RegionMask region_mask_from_bbox(const BBox& bbox, const GridShape& grid) {
  if (!bbox.valid()) throw ContractError("region_mask_from_bbox: invalid box " + to_string(bbox));
  std::vector<double> values(grid.count(), 0.0);
  for (std::size_t n : patches_inside(bbox, grid)) values[n] = 1.0;
  if (std::find(values.begin(), values.end(), 1.0) == values.end()) {
    throw DegenerateInputError("region_mask_from_bbox: box " + to_string(bbox) +
                               " covers no patch center on a " + std::to_string(grid.h) + "x" +
                               std::to_string(grid.w) + " grid");
  }
  return RegionMask(grid, std::move(values));
}

FusionParams make_fusion_params(const FusionConfig& cfg, Rng& rng) {
  if (cfg.blocks == 0 || cfg.n_queries == 0 || cfg.heads == 0 || cfg.head_dim == 0) {
    throw ConfigError("fusion: blocks, n_queries, heads and head_dim must be positive");
  }
  FusionParams p;
  p.config = cfg;
  p.queries = rng.gaussian(cfg.n_queries, cfg.model_dim, 1.0);
  const AttentionShape shape = cfg.attention_shape();
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    FusionBlock b;
    b.ln_self = make_layer_norm(cfg.model_dim);
    b.self_attn = make_attention(cfg.model_dim, shape, rng);
    b.ln_cross = make_layer_norm(cfg.model_dim);
    b.cross_attn = make_attention(cfg.model_dim, shape, rng);
    b.ln_ff = make_layer_norm(cfg.model_dim);
    b.ff = make_feed_forward(cfg.model_dim, cfg.ffn_dim, rng);
    p.blocks.push_back(std::move(b));
  }
  p.ln_out = make_layer_norm(cfg.model_dim);
  return p;
}

std::size_t parameter_count(const FusionParams& p) {
  std::size_t n = 0;
  p.visit("", [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

PatchKeyValues project_patches(ParamBinder& bind, const FusionParams& params, Var patches) {
  if (patches.cols() != params.config.model_dim) {
    throw DimensionError("project_patches: patch width " + std::to_string(patches.cols()) +
                         " but model_dim is " + std::to_string(params.config.model_dim));
  }
  PatchKeyValues kv;
  kv.patch_count = patches.rows();
  for (const FusionBlock& b : params.blocks) {
    kv.per_block.push_back(project_key_value(bind, patches, b.cross_attn));
  }
  return kv;
}

namespace {

Var repeat_scalar(Var s, std::size_t n) {
  std::vector<Var> parts(n, s);
  return ad::concat_rows(parts);
}

// Expands β to one bias per token row.
Var beta_column(Var beta, const EncodeRequest& req, std::size_t n_queries) {
  if (beta.rows() == 1 && beta.cols() == 1) return beta;
  if (beta.cols() != 1 || beta.rows() != n_queries || !req.with_queries) {
    throw DimensionError("multimodal_encode: beta " + shape_string(beta.value()) +
                         " must be [1x1] or [" + std::to_string(n_queries) +
                         "x1] with fusion queries present");
  }
  const Var mean = ad::mean_rows(beta);
  std::vector<Var> parts;
  if (req.cls) parts.push_back(mean);
  parts.push_back(beta);
  if (req.extra) parts.push_back(repeat_scalar(mean, req.extra->rows()));
  if (req.text) parts.push_back(repeat_scalar(mean, req.text->rows()));
  return ad::concat_rows(parts);
}

}  // namespace

EncodeResult multimodal_encode(ParamBinder& bind, const FusionParams& params,
                               const EncodeRequest& req) {
  const FusionConfig& cfg = params.config;
  if (req.patches == nullptr || req.patches->per_block.size() != params.blocks.size()) {
    throw ContractError("multimodal_encode: patch keys/values missing or from another encoder");
  }
  if (req.beta && req.mask == nullptr) {
    throw ContractError("multimodal_encode: beta requires a region mask");
  }
  if (req.mask != nullptr && req.mask->size() != req.patches->patch_count) {
    throw DimensionError("multimodal_encode: mask grid " + std::to_string(req.mask->grid().h) +
                         "x" + std::to_string(req.mask->grid().w) + " is not aligned with " +
                         std::to_string(req.patches->patch_count) + " patches");
  }

  std::vector<Var> tokens;
  std::size_t n_cls = 0, n_queries = 0, n_extra = 0, n_text = 0;
  if (req.cls) {
    tokens.push_back(*req.cls);
    n_cls = req.cls->rows();
  }
  if (req.with_queries) {
    tokens.push_back(bind(params.queries));
    n_queries = cfg.n_queries;
  }
  if (req.extra) {
    tokens.push_back(*req.extra);
    n_extra = req.extra->rows();
  }
  if (req.text) {
    tokens.push_back(*req.text);
    n_text = req.text->rows();
  }
  if (tokens.empty()) throw ContractError("multimodal_encode: no tokens to encode");
  for (const Var& t : tokens) {
    if (t.cols() != cfg.model_dim) {
      throw DimensionError("multimodal_encode: token width " + std::to_string(t.cols()) +
                           " but model_dim is " + std::to_string(cfg.model_dim));
    }
  }

  std::optional<Var> beta;
  if (req.beta) beta = beta_column(*req.beta, req, cfg.n_queries);
  const std::span<const double> mask =
      req.mask != nullptr ? req.mask->values() : std::span<const double>{};

  const AttentionShape shape = cfg.attention_shape();
  Var x = ad::concat_rows(tokens);
  if (req.cross_weights != nullptr) req.cross_weights->clear();
  for (std::size_t bi = 0; bi < params.blocks.size(); ++bi) {
    const FusionBlock& b = params.blocks[bi];
    const Var hs = layer_norm(bind, x, b.ln_self);
    x = ad::add(x, multi_head_attention(bind, hs, project_key_value(bind, hs, b.self_attn),
                                        b.self_attn, shape));
    const bool biased = beta && (cfg.bias_all_blocks || bi == 0);
    const Var hc = layer_norm(bind, x, b.ln_cross);
    Tensor w;
    x = ad::add(x, multi_head_attention(bind, hc, req.patches->per_block[bi], b.cross_attn, shape,
                                        biased ? mask : std::span<const double>{},
                                        biased ? beta : std::nullopt,
                                        req.cross_weights != nullptr ? &w : nullptr));
    if (req.cross_weights != nullptr) req.cross_weights->push_back(std::move(w));
    x = ad::add(x, feed_forward(bind, layer_norm(bind, x, b.ln_ff), b.ff));
  }
  x = layer_norm(bind, x, params.ln_out);

  EncodeResult out;
  std::size_t off = 0;
  auto take = [&](std::size_t n) {
    const Var part = ad::slice_rows(x, off, n);
    off += n;
    return part;
  };
  if (n_cls) out.cls = take(n_cls);
  if (n_queries) out.queries = take(n_queries);
  if (n_extra) out.extra = take(n_extra);
  if (n_text) out.text = take(n_text);
  return out;
}

Var encode_target(ParamBinder& bind, const FusionParams& params, const PatchKeyValues& patches) {
  EncodeRequest req;
  req.patches = &patches;
  return *multimodal_encode(bind, params, req).queries;
}

}  // namespace anchorcir
