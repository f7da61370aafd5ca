#include "anchorcir/model.hpp"

#include <cmath>

#include "anchorcir/errors.hpp"
#include "anchorcir/random.hpp"

namespace anchorcir {

std::string to_string(QueryVariant v) {
  switch (v) {
    case QueryVariant::adaptive: return "adaptive";
    case QueryVariant::baseline: return "baseline";
    case QueryVariant::roi_crop: return "roi_crop";
    case QueryVariant::fixed: return "fixed";
  }
  return "?";
}

QueryVariant parse_query_variant(const std::string& s) {
  if (s == "adaptive") return QueryVariant::adaptive;
  if (s == "baseline") return QueryVariant::baseline;
  if (s == "roi_crop") return QueryVariant::roi_crop;
  if (s == "fixed") return QueryVariant::fixed;
  throw ConfigError("unknown query variant '" + s + "' (expected adaptive|baseline|roi_crop|fixed)");
}

ModelParams make_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.temperature <= 0.0) throw ConfigError("model: temperature must be > 0");
  if (cfg.embed_dim == 0) throw ConfigError("model: embed_dim must be > 0");
  if (cfg.fusion.model_dim != cfg.encoder.model_dim) {
    throw ConfigError("model: fusion.model_dim must equal encoder.model_dim");
  }
  ModelParams p;
  p.config = cfg;
  p.seed = seed;
  p.encoders = make_frozen_encoders(cfg.encoder, derive_seed(seed, "encoders"));
  Rng fusion_rng(seed, "model/fusion");
  p.fusion = make_fusion_params(cfg.fusion, fusion_rng);
  Rng caam_rng(seed, "model/caam");
  p.caam = make_caam_params(cfg.caam, p.fusion, caam_rng);
  Rng head_rng(seed, "model/heads");
  p.rep_cls = head_rng.gaussian(1, cfg.fusion.model_dim, 1.0);
  p.head_query = make_linear(cfg.fusion.model_dim, cfg.embed_dim, head_rng);
  p.head_image = make_linear(cfg.fusion.model_dim, cfg.embed_dim, head_rng);
  return p;
}

void freeze_frozen_groups(ParamBinder& bind, const ModelParams& params) {
  params.visit([&](const std::string&, const Tensor& t, ParamGroup g) {
    if (g == ParamGroup::frozen) bind.freeze(t);
  });
}

Var query_representation(ParamBinder& bind, const ModelParams& params, const QueryInput& q,
                         const QueryOptions& options, QueryTrace* trace) {
  if (q.patches == nullptr || q.text == nullptr) {
    throw ContractError("query_representation: patches and text are required");
  }
  Tape& tape = bind.tape();
  const ModelConfig& cfg = params.config;
  const Var text = tape.constant(*q.text);

  EncodeRequest req;
  req.cls = bind(params.rep_cls);
  req.text = text;

  Var patches;
  const bool crop = cfg.variant == QueryVariant::roi_crop && options.beta_mode == BetaMode::model;
  if (crop) {
    const auto inside = patches_inside(q.bbox, cfg.encoder.grid);
    if (inside.empty()) {
      throw DegenerateInputError("roi crop: box " + to_string(q.bbox) + " covers no patch");
    }
    Tensor sub(inside.size(), q.patches->cols());
    for (std::size_t i = 0; i < inside.size(); ++i) {
      const auto src = q.patches->row(inside[i]);
      std::copy(src.begin(), src.end(), sub.row(i).begin());
    }
    patches = tape.constant(std::move(sub));
  } else {
    patches = tape.constant(*q.patches);
  }
  const PatchKeyValues kv = project_patches(bind, params.fusion, patches);
  req.patches = &kv;

  BetaMode mode = options.beta_mode;
  double fixed_beta = options.fixed_beta;
  if (mode == BetaMode::model) {
    switch (cfg.variant) {
      case QueryVariant::adaptive: break;
      case QueryVariant::fixed:
        mode = BetaMode::fixed;
        fixed_beta = cfg.fixed_beta;
        break;
      case QueryVariant::baseline:
      case QueryVariant::roi_crop: mode = BetaMode::none; break;
    }
  }
  std::optional<RegionMask> mask;
  double beta_value = 0.0;
  if (mode != BetaMode::none) {
    mask.emplace(region_mask_from_bbox(q.bbox, cfg.encoder.grid));
    req.mask = &*mask;
    if (mode == BetaMode::fixed) {
      req.beta = tape.constant(Tensor::scalar(fixed_beta));
      beta_value = fixed_beta;
    } else {
      const Var beta = predict_beta(bind, params.fusion, params.caam, patches, kv, text);
      req.beta = beta;
      beta_value = mean_rows(beta.value())[0];
    }
  }
  if (trace != nullptr) {
    trace->beta = beta_value;
    trace->patches_seen = patches.rows();
  }
  const EncodeResult enc = multimodal_encode(bind, params.fusion, req);
  return ad::l2_normalize_rows(linear(bind, *enc.cls, params.head_query));
}

Var target_representation(ParamBinder& bind, const ModelParams& params, const Tensor& patches) {
  const Var p = bind.tape().constant(patches);
  const PatchKeyValues kv = project_patches(bind, params.fusion, p);
  const Var tokens = encode_target(bind, params.fusion, kv);
  return ad::l2_normalize_rows(linear(bind, ad::mean_rows(tokens), params.head_image));
}

Var contrastive_loss(Var fq, Var ft, double temperature) {
  if (fq.rows() != ft.rows() || fq.cols() != ft.cols()) {
    throw DimensionError("contrastive_loss: " + shape_string(fq.value()) + " vs " +
                         shape_string(ft.value()));
  }
  if (fq.rows() == 0) throw ContractError("contrastive_loss: empty batch");
  if (!(temperature > 0.0)) throw ContractError("contrastive_loss: temperature must be > 0");
  for (const Var& m : {fq, ft}) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      if (std::abs(norm(m.value().row(i)) - 1.0) > 1e-6) {
        throw ContractError("contrastive_loss: row " + std::to_string(i) + " is not unit-norm");
      }
    }
  }
  const std::size_t b = fq.rows();
  const Var logits = ad::scale(ad::matmul_bt(fq, ft), 1.0 / temperature);
  const Var log_probs = ad::log_softmax_rows(logits);
  const Var diag = ad::mul(log_probs, fq.tape->constant(Tensor::identity(b)));
  return ad::scale(ad::sum(diag), -1.0 / static_cast<double>(b));
}

Tensor embed_query(const ModelParams& params, const QueryInput& q, const QueryOptions& options,
                   QueryTrace* trace) {
  Tape tape;
  ParamBinder bind(tape, false);
  return query_representation(bind, params, q, options, trace).value();
}

Tensor embed_target(const ModelParams& params, const Tensor& patches) {
  Tape tape;
  ParamBinder bind(tape, false);
  return target_representation(bind, params, patches).value();
}

BatchGradients batch_loss_and_gradients(const ModelParams& params, std::span<const Example> batch) {
  Tape tape;
  ParamBinder bind(tape);
  freeze_frozen_groups(bind, params);
  std::vector<Var> fq;
  std::vector<Var> ft;
  double beta_sum = 0.0;
  for (const Example& ex : batch) {
    const Tensor ref = encode_image(*ex.reference, params.encoders);
    const Tensor text = embed_text(ex.text_descriptor, params.encoders);
    const Tensor tgt = encode_image(*ex.target, params.encoders);
    QueryTrace trace;
    fq.push_back(query_representation(bind, params, {&ref, ex.bbox, &text}, {}, &trace));
    ft.push_back(target_representation(bind, params, tgt));
    beta_sum += trace.beta;
  }
  const Var loss = contrastive_loss(ad::concat_rows(fq), ad::concat_rows(ft),
                                    params.config.temperature);
  tape.backward(loss);
  BatchGradients out;
  out.loss = loss.value().item();
  out.mean_beta = beta_sum / static_cast<double>(batch.size());
  params.visit([&](const std::string&, const Tensor& t, ParamGroup) { out.grads.push_back(bind.grad(t)); });
  return out;
}

TrainResult train(const TrainConfig& cfg, std::span<const Example> dataset, ModelParams& params) {
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  if (cfg.batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  if (cfg.batch_size > dataset.size()) {
    throw ConfigError("train: batch_size " + std::to_string(cfg.batch_size) +
                      " exceeds dataset size " + std::to_string(dataset.size()));
  }
  AdamState caam_state;
  AdamState encoder_state;
  for (AdamState* s : {&caam_state, &encoder_state}) {
    s->hyper.beta1 = cfg.adam_beta1;
    s->hyper.beta2 = cfg.adam_beta2;
    s->hyper.weight_decay = cfg.weight_decay;
    s->hyper.epsilon = cfg.adam_epsilon;
  }
  caam_state.hyper.lr = cfg.lr_caam;
  encoder_state.hyper.lr = cfg.lr_encoder;

  std::vector<Tensor*> caam_params;
  std::vector<Tensor*> encoder_params;
  std::vector<ParamGroup> groups;
  params.visit([&](const std::string&, Tensor& t, ParamGroup g) {
    groups.push_back(g);
    if (g == ParamGroup::caam) caam_params.push_back(&t);
    if (g == ParamGroup::encoder) encoder_params.push_back(&t);
  });

  Rng shuffle_rng(cfg.seed, "train/shuffle");
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t batches = dataset.size() / cfg.batch_size;

  TrainResult result;
  std::vector<Example> batch(cfg.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    double beta_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      for (std::size_t i = 0; i < cfg.batch_size; ++i) batch[i] = dataset[order[b * cfg.batch_size + i]];
      BatchGradients bg = batch_loss_and_gradients(params, batch);
      std::vector<Tensor> caam_grads;
      std::vector<Tensor> encoder_grads;
      for (std::size_t i = 0; i < groups.size(); ++i) {
        if (groups[i] == ParamGroup::caam) caam_grads.push_back(std::move(bg.grads[i]));
        if (groups[i] == ParamGroup::encoder) encoder_grads.push_back(std::move(bg.grads[i]));
      }
      if (!caam_params.empty()) adam_step(caam_params, caam_grads, caam_state);
      adam_step(encoder_params, encoder_grads, encoder_state);
      result.step_loss.push_back(bg.loss);
      loss_sum += bg.loss;
      beta_sum += bg.mean_beta;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    result.epoch_mean_beta.push_back(beta_sum / static_cast<double>(batches));
  }
  return result;
}

}  // namespace anchorcir
