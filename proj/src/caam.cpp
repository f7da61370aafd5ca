#include "anchorcir/caam.hpp"

#include "anchorcir/errors.hpp"

namespace anchorcir {

std::string to_string(CrmKind k) {
  switch (k) {
    case CrmKind::average: return "avg";
    case CrmKind::mlp: return "mlp";
    case CrmKind::transformer: return "transformer";
  }
  return "?";
}

std::string to_string(ModulationForm f) {
  return f == ModulationForm::scalar ? "scalar" : "vector";
}

CrmKind parse_crm_kind(const std::string& s) {
  if (s == "avg" || s == "average") return CrmKind::average;
  if (s == "mlp") return CrmKind::mlp;
  if (s == "transformer") return CrmKind::transformer;
  throw ConfigError("unknown CRM kind '" + s + "' (expected avg|mlp|transformer)");
}

ModulationForm parse_modulation_form(const std::string& s) {
  if (s == "scalar") return ModulationForm::scalar;
  if (s == "vector") return ModulationForm::vector;
  throw ConfigError("unknown modulation form '" + s + "' (expected scalar|vector)");
}

CaamParams make_caam_params(const CaamConfig& cfg, const FusionParams& fusion, Rng& rng) {
  if (cfg.n_probes == 0) throw ConfigError("caam: n_probes must be >= 1");
  if (cfg.crm == CrmKind::transformer && cfg.crm_layers == 0) {
    throw ConfigError("caam: transformer CRM needs at least one layer");
  }
  const std::size_t d = fusion.config.model_dim;
  CaamParams p;
  p.config = cfg;
  p.probes = rng.gaussian(cfg.n_probes, d, cfg.probe_init_std);
  p.cls = rng.gaussian(1, d, cfg.probe_init_std);
  const AttentionShape shape{cfg.crm_heads, cfg.crm_head_dim};
  switch (cfg.crm) {
    case CrmKind::transformer:
      for (std::size_t i = 0; i < cfg.crm_layers; ++i) {
        p.crm_blocks.push_back(make_self_attention_block(d, shape, cfg.crm_ffn_dim, rng));
      }
      p.crm_ln_out = make_layer_norm(d);
      break;
    case CrmKind::mlp:
      p.mlp_up = make_linear(d, cfg.crm_ffn_dim, rng);
      p.mlp_down = make_linear(cfg.crm_ffn_dim, d, rng);
      break;
    case CrmKind::average:
      break;
  }
  const std::size_t out = cfg.form == ModulationForm::scalar ? 1 : fusion.config.n_queries;
  p.head = make_zero_linear(d, out);
  if (!cfg.shared_encoder) p.encoder = fusion;
  return p;
}

std::size_t parameter_count(const CaamParams& p) {
  std::size_t n = 0;
  p.visit("", [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

std::size_t expected_parameter_count(const CaamConfig& cfg, const FusionConfig& fusion) {
  const std::size_t d = fusion.model_dim;
  const std::size_t inner = cfg.crm_heads * cfg.crm_head_dim;
  const std::size_t f = cfg.crm_ffn_dim;
  std::size_t n = cfg.n_probes * d + d;  // probes + contextual cls
  switch (cfg.crm) {
    case CrmKind::transformer: {
      const std::size_t attn = 3 * (d * inner + inner) + (inner * d + d);
      const std::size_t ffn = (d * f + f) + (f * d + d);
      n += cfg.crm_layers * (2 * d + attn + 2 * d + ffn) + 2 * d;
      break;
    }
    case CrmKind::mlp:
      n += (d * f + f) + (f * d + d);
      break;
    case CrmKind::average:
      break;
  }
  const std::size_t out = cfg.form == ModulationForm::scalar ? 1 : fusion.n_queries;
  n += d * out + out;
  if (!cfg.shared_encoder) {
    const std::size_t fin = fusion.heads * fusion.head_dim;
    const std::size_t attn = 3 * (d * fin + fin) + (fin * d + d);
    const std::size_t ffn = (d * fusion.ffn_dim + fusion.ffn_dim) + (fusion.ffn_dim * d + d);
    n += fusion.n_queries * d + fusion.blocks * (3 * 2 * d + 2 * attn + ffn) + 2 * d;
  }
  return n;
}

Var crm_forward(ParamBinder& bind, Var tokens, const CaamParams& caam) {
  const CaamConfig& cfg = caam.config;
  if (tokens.rows() != cfg.n_probes + 1) {
    throw DimensionError("crm_forward: expected " + std::to_string(cfg.n_probes + 1) +
                         " tokens, got " + std::to_string(tokens.rows()));
  }
  switch (cfg.crm) {
    case CrmKind::average:
      return ad::mean_rows(tokens);
    case CrmKind::mlp:
      return linear(bind, ad::gelu(linear(bind, ad::mean_rows(tokens), caam.mlp_up)),
                    caam.mlp_down);
    case CrmKind::transformer: {
      const AttentionShape shape{cfg.crm_heads, cfg.crm_head_dim};
      Var x = tokens;
      for (const SelfAttentionBlock& b : caam.crm_blocks) x = self_attention_block(bind, x, b, shape);
      return ad::slice_rows(layer_norm(bind, x, caam.crm_ln_out), 0, 1);
    }
  }
  throw ContractError("crm_forward: unknown CRM kind");
}

Var predict_beta(ParamBinder& bind, const FusionParams& fusion, const CaamParams& caam,
                 Var patches, const PatchKeyValues& shared_patches, Var text) {
  const FusionParams& encoder = caam.encoder ? *caam.encoder : fusion;
  PatchKeyValues own;
  const PatchKeyValues* kv = &shared_patches;
  if (caam.encoder) {
    own = project_patches(bind, encoder, patches);
    kv = &own;
  }
  // The probes stand in for the fusion queries: E_M(E_I(I_r), T_m, {p_k}).
  EncodeRequest req;
  req.patches = kv;
  req.with_queries = false;
  req.extra = bind(caam.probes);
  req.text = text;
  const EncodeResult enc = multimodal_encode(bind, encoder, req);

  const Var tokens_in[] = {bind(caam.cls), *enc.extra};
  const Var context = crm_forward(bind, ad::concat_rows(tokens_in), caam);
  const Var out = linear(bind, context, caam.head);  // 1 × (1 | M)
  return caam.config.form == ModulationForm::scalar ? out : ad::transpose(out);
}

}  // namespace anchorcir
