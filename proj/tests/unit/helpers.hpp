#pragma once

#include "anchorcir/benchgen.hpp"
#include "anchorcir/model.hpp"

namespace testing {

inline anchorcir::ModelConfig tiny_model_config(anchorcir::QueryVariant v = anchorcir::QueryVariant::adaptive) {
  anchorcir::ModelConfig m;
  m.encoder.grid = {4, 4};
  m.encoder.latent_dim = 8;
  m.encoder.model_dim = 16;
  m.encoder.text_tokens = 2;
  m.fusion.model_dim = 16;
  m.fusion.head_dim = 16;
  m.fusion.ffn_dim = 32;
  m.fusion.n_queries = 4;
  m.fusion.blocks = 1;
  m.caam.n_probes = 3;
  m.caam.crm_layers = 1;
  m.caam.crm_head_dim = 16;
  m.caam.crm_ffn_dim = 32;
  m.embed_dim = 8;
  m.variant = v;
  return m;
}

// A few hundred images on a 4×4 grid, enough for every pipeline stage.
inline anchorcir::SubsetPreset tiny_preset(std::uint64_t seed = 3) {
  anchorcir::SubsetPreset p;
  p.name = "fashion";
  p.thresholds = {4, 0.97, 0.95, 3};
  anchorcir::WorldConfig& w = p.world;
  w.subset = "fashion";
  w.n_categories = 2;
  w.instances_per_category = 5;
  w.reserve_instances_per_category = 3;
  w.images_per_instance = 6;
  w.n_contexts = 4;
  w.n_scenes = 3;
  w.grid = {4, 4};
  w.latent_dim = 8;
  w.bbox_min = 0.4;
  w.bbox_max = 0.6;
  w.pairs_per_instance = 6;
  w.train_pairs_per_instance = 6;
  w.seed = seed;
  p.gallery_distractors = 10;
  return p;
}

}  // namespace testing
