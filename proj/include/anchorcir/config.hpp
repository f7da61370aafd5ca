#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "anchorcir/benchgen.hpp"
#include "anchorcir/model.hpp"

namespace anchorcir {

struct PerturbationSpec {
  std::string mode = "scale";  // scale | scale_shift
  double iou = 1.0;

  bool operator==(const PerturbationSpec&) const = default;
};

struct EvalConfig {
  std::size_t threads = 1;
  // β grid in units of √d_k.
  std::vector<double> beta_grid = {0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
  std::vector<PerturbationSpec> perturbations = {{"scale", 1.0}, {"scale", 0.8}, {"scale_shift", 0.5}};
  // Train one model per fixed β instead of overriding β at evaluation time.
  bool beta_sweep_trained = true;
  // Modulator ablation grid; the product of these lists is trained.
  std::vector<std::string> caam_crms = {"average", "mlp", "transformer"};
  std::vector<bool> caam_learnable = {true};
  std::vector<std::size_t> caam_layers = {2};
  std::vector<std::size_t> caam_probes = {8};
  std::vector<std::string> caam_forms = {"scalar"};

  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 7;
  std::string out = "run";
  EncoderConfig encoder;
  std::vector<SubsetPreset> subsets = default_subset_presets();
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  // Subsets used for training; empty means all.
  std::vector<std::string> train_subsets;

  bool operator==(const RunConfig&) const = default;
};

// Propagates the run seed and shared dimensions into every nested config.
RunConfig resolve(RunConfig cfg);

nlohmann::ordered_json to_json(const WorldConfig& c);
nlohmann::ordered_json to_json(const FilterThresholds& t);
nlohmann::ordered_json to_json(const RunConfig& c);
nlohmann::ordered_json to_json(const ModelConfig& c);

// Strict readers: unknown keys and type mismatches raise ConfigError naming the key path.
WorldConfig world_config_from_json(const nlohmann::json& j, const std::string& path);
RunConfig run_config_from_json(const nlohmann::json& j);
// Includes the encoder block, which RunConfig keeps at top level.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path);

RunConfig load_run_config(const std::string& path);

// 16 hex digits of FNV-1a over the compact JSON dump, leaving out the output directory.
std::string config_hash(const nlohmann::ordered_json& j);
std::string config_hash(const RunConfig& c);

}  // namespace anchorcir
