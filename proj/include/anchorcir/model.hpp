#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "anchorcir/caam.hpp"
#include "anchorcir/encoders.hpp"
#include "anchorcir/fusion.hpp"
#include "anchorcir/optim.hpp"

namespace anchorcir {

// How the query branch treats the bounding box.
//   adaptive: β predicted per query by the modulator, bias on the box region.
//   baseline: no modulator, no bias (β = 0) over the full reference image.
//   roi_crop: no modulator, no bias; the query branch sees only patches inside the box.
//   fixed:    no modulator; the constant ModelConfig::fixed_beta on the box region.
enum class QueryVariant { adaptive, baseline, roi_crop, fixed };

std::string to_string(QueryVariant v);
QueryVariant parse_query_variant(const std::string& s);

struct ModelConfig {
  EncoderConfig encoder;
  FusionConfig fusion;
  CaamConfig caam;
  std::size_t embed_dim = 32;
  double temperature = 0.07;
  QueryVariant variant = QueryVariant::adaptive;
  double fixed_beta = 0.0;  // used by the fixed variant

  bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { frozen, caam, encoder };

struct ModelParams {
  ModelConfig config;
  std::uint64_t seed = 0;
  FrozenEncoders encoders;
  FusionParams fusion;
  CaamParams caam;
  Tensor rep_cls;           // 1 × d, representation [CLS] of the query branch
  LinearParams head_query;  // d × embed_dim
  LinearParams head_image;  // d × embed_dim

  // fn(name, tensor, group) over every tensor, in checkpoint order.
  template <class Self, class Fn>
  static void visit_impl(Self& self, Fn&& fn) {
    fn(std::string("encoders.image_proj"), self.encoders.image_proj, ParamGroup::frozen);
    fn(std::string("encoders.text_proj"), self.encoders.text_proj, ParamGroup::frozen);
    const bool uses_caam = self.config.variant == QueryVariant::adaptive;
    self.fusion.visit("fusion", [&](const std::string& name, auto& t) {
      const bool frozen = &t == &self.fusion.queries && !self.config.fusion.queries_trainable;
      fn(name, t, frozen ? ParamGroup::frozen : ParamGroup::encoder);
    });
    self.caam.visit("caam", [&](const std::string& name, auto& t) {
      const bool frozen =
          !uses_caam || (&t == &self.caam.probes && !self.config.caam.probes_learnable);
      fn(name, t, frozen ? ParamGroup::frozen : ParamGroup::caam);
    });
    fn(std::string("rep_cls"), self.rep_cls, ParamGroup::encoder);
    visit_linear(self.head_query, "head_query",
                 [&](const std::string& n, auto& t) { fn(n, t, ParamGroup::encoder); });
    visit_linear(self.head_image, "head_image",
                 [&](const std::string& n, auto& t) { fn(n, t, ParamGroup::encoder); });
  }
  template <class Fn>
  void visit(Fn&& fn) { visit_impl(*this, fn); }
  template <class Fn>
  void visit(Fn&& fn) const { visit_impl(*this, fn); }
};

ModelParams make_model(const ModelConfig& cfg, std::uint64_t seed);

// Marks every frozen-group tensor of `params` as a constant on the binder's tape.
void freeze_frozen_groups(ParamBinder& bind, const ModelParams& params);

// One query: reference patches (already through the frozen image encoder), the box,
// and the text tokens.
struct QueryInput {
  const Tensor* patches = nullptr;  // N × d
  BBox bbox;
  const Tensor* text = nullptr;     // L × d
};

enum class BetaMode { model, fixed, none };

struct QueryOptions {
  // model: follow the variant (adaptive uses the modulator). fixed: bypass the modulator
  // and use `fixed_beta` with the box mask. none: no mask, β = 0.
  BetaMode beta_mode = BetaMode::model;
  double fixed_beta = 0.0;
};

struct QueryTrace {
  double beta = 0.0;  // mean of the modulation output actually applied
  std::size_t patches_seen = 0;
};

// Unit 1 × embed_dim query embedding.
Var query_representation(ParamBinder& bind, const ModelParams& params, const QueryInput& q,
                         const QueryOptions& options = {}, QueryTrace* trace = nullptr);

// Unit 1 × embed_dim target embedding (mean of the fusion-query outputs, image head).
Var target_representation(ParamBinder& bind, const ModelParams& params, const Tensor& patches);

// −(1/B) Σ_i log softmax_j(sim(f_q^i, f_t^j)/τ)_i for unit-row inputs.
Var contrastive_loss(Var fq, Var ft, double temperature);

// Tape-free conveniences returning plain tensors.
Tensor embed_query(const ModelParams& params, const QueryInput& q, const QueryOptions& options = {},
                   QueryTrace* trace = nullptr);
Tensor embed_target(const ModelParams& params, const Tensor& patches);

// A training/evaluation sample resolved against the generated world.
struct Example {
  const SyntheticImage* reference = nullptr;
  const SyntheticImage* target = nullptr;
  BBox bbox;
  std::span<const double> text_descriptor;
};

struct TrainConfig {
  std::size_t epochs = 16;
  std::size_t batch_size = 32;
  double lr_caam = 1e-2;
  double lr_encoder = 1e-3;
  double weight_decay = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_mean_beta;
  std::vector<double> step_loss;
};

// Loss and per-group gradients of one batch. Gradients are keyed by visit order.
struct BatchGradients {
  double loss = 0.0;
  double mean_beta = 0.0;
  std::vector<Tensor> grads;  // one per tensor in ModelParams::visit order
};

BatchGradients batch_loss_and_gradients(const ModelParams& params, std::span<const Example> batch);

TrainResult train(const TrainConfig& cfg, std::span<const Example> dataset, ModelParams& params);

}  // namespace anchorcir
