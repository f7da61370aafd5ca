#pragma once

#include <optional>
#include <string>
#include <vector>

#include "anchorcir/fusion.hpp"
#include "anchorcir/layers.hpp"

namespace anchorcir {

enum class CrmKind { average, mlp, transformer };
enum class ModulationForm { scalar, vector };

std::string to_string(CrmKind k);
std::string to_string(ModulationForm f);
CrmKind parse_crm_kind(const std::string& s);
ModulationForm parse_modulation_form(const std::string& s);

struct CaamConfig {
  std::size_t n_probes = 8;
  bool probes_learnable = true;
  CrmKind crm = CrmKind::transformer;
  std::size_t crm_layers = 2;
  std::size_t crm_heads = 1;
  std::size_t crm_head_dim = 32;
  std::size_t crm_ffn_dim = 64;
  ModulationForm form = ModulationForm::scalar;
  // Run the modulator's multimodal pass through the query branch's encoder weights.
  // When false the modulator owns a copy of those weights.
  bool shared_encoder = true;
  double probe_init_std = 0.02;

  bool operator==(const CaamConfig&) const = default;
};

// Context-aware attention modulator parameters.
struct CaamParams {
  CaamConfig config;
  Tensor probes;  // n_probes × d
  Tensor cls;     // 1 × d, contextual [CLS] consumed by the reasoning module
  std::vector<SelfAttentionBlock> crm_blocks;  // transformer variant
  LayerNormParams crm_ln_out;                  // transformer variant
  LinearParams mlp_up;                         // mlp variant
  LinearParams mlp_down;                       // mlp variant
  LinearParams head;                           // d × (1 | n_queries), zero-initialized
  std::optional<FusionParams> encoder;         // present iff !shared_encoder

  template <class Self, class Fn>
  static void visit_impl(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".probes", self.probes);
    fn(prefix + ".cls", self.cls);
    switch (self.config.crm) {
      case CrmKind::transformer:
        for (std::size_t i = 0; i < self.crm_blocks.size(); ++i) {
          visit_self_block(self.crm_blocks[i], prefix + ".crm" + std::to_string(i), fn);
        }
        visit_layer_norm(self.crm_ln_out, prefix + ".crm_ln_out", fn);
        break;
      case CrmKind::mlp:
        visit_linear(self.mlp_up, prefix + ".mlp_up", fn);
        visit_linear(self.mlp_down, prefix + ".mlp_down", fn);
        break;
      case CrmKind::average:
        break;
    }
    visit_linear(self.head, prefix + ".head", fn);
    if (self.encoder) self.encoder->visit(prefix + ".encoder", fn);
  }
  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) { visit_impl(*this, prefix, fn); }
  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) const { visit_impl(*this, prefix, fn); }
};

CaamParams make_caam_params(const CaamConfig& cfg, const FusionParams& fusion, Rng& rng);
std::size_t parameter_count(const CaamParams& p);
// Closed-form count for a configuration, independent of any instantiated tensors.
std::size_t expected_parameter_count(const CaamConfig& cfg, const FusionConfig& fusion);

// tokens: (n_probes + 1) × d with the contextual [CLS] at row 0. Returns 1 × d.
Var crm_forward(ParamBinder& bind, Var tokens, const CaamParams& caam);

// Query-specific modulation: [1x1] for the scalar form, [n_queries x 1] for the vector form.
// `shared_patches` are the patch keys/values of the query branch's encoder; they are used
// when the encoder is shared, otherwise the modulator projects `patches` itself.
Var predict_beta(ParamBinder& bind, const FusionParams& fusion, const CaamParams& caam,
                 Var patches, const PatchKeyValues& shared_patches, Var text);

}  // namespace anchorcir
