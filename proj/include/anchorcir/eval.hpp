#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "anchorcir/benchgen.hpp"
#include "anchorcir/model.hpp"

namespace anchorcir {

struct GalleryLabels {
  std::vector<std::int64_t> image_ids;
  std::vector<std::int64_t> instance_ids;

  std::size_t size() const noexcept { return image_ids.size(); }
};

GalleryLabels labels_of(const GalleryManifest& g);

// Gallery indices by descending cosine similarity; ties go to the lower index.
std::vector<std::size_t> rank_gallery(std::span<const double> query, const Tensor& gallery);

struct QueryRanking {
  std::int64_t target_image_id = 0;
  std::int64_t instance_id = 0;
  std::vector<std::size_t> order;
};

struct RankingResult {
  std::vector<QueryRanking> queries;
};

double recall_at_k(const RankingResult& results, const GalleryLabels& gallery, std::size_t k);
double instance_recall_at_k(const RankingResult& results, const GalleryLabels& gallery, std::size_t k);

struct SubsetMetrics {
  std::string subset;
  double r_at_1 = 0.0;
  double r_at_5 = 0.0;
  double rid_at_1 = 0.0;
  std::size_t queries = 0;
  std::size_t skipped = 0;
  std::size_t gallery = 0;
  double mean_beta = 0.0;
  double mean_iou = 1.0;

  bool operator==(const SubsetMetrics&) const = default;
};

struct MetricsReport {
  std::vector<SubsetMetrics> subsets;
  double r_at_1 = 0.0;  // macro averages over subsets
  double r_at_5 = 0.0;
  double rid_at_1 = 0.0;
  std::string config_hash;
  std::uint64_t seed = 0;

  // Mean of the three macro metrics, in [0, 1].
  double average() const noexcept { return (r_at_1 + r_at_5 + rid_at_1) / 3.0; }
  bool operator==(const MetricsReport&) const = default;
};

nlohmann::ordered_json to_json(const MetricsReport& r);
// Empty when R@1 ≤ R@5, R@1 ≤ R_ID@1 and all values lie in [0, 1]; otherwise the violation.
std::string check_report(const MetricsReport& r);

struct EvalOptions {
  QueryOptions query;
  // Replaces every query box by a perturbed copy when set.
  std::optional<PerturbMode> perturb;
  double target_iou = 1.0;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

// Unit target embeddings of one gallery, G × embed_dim.
Tensor gallery_embeddings(const ModelParams& params, const SubsetData& subset, std::size_t threads = 1);

RankingResult rank_subset(const ModelParams& params, const SubsetData& subset, const Tensor& gallery,
                          const EvalOptions& options, SubsetMetrics* stats = nullptr);

// `galleries` may hold precomputed gallery embeddings (one per subset), or be empty.
MetricsReport evaluate(const ModelParams& params, std::span<const SubsetData> benchmark,
                       const EvalOptions& options, std::span<const Tensor> galleries = {});

// Training set drawn from the listed subsets (all when empty).
std::vector<Example> training_examples(std::span<const SubsetData> benchmark,
                                       std::span<const std::string> subsets = {});

ModelParams train_model(const ModelConfig& model, const TrainConfig& train, std::uint64_t seed,
                        std::span<const SubsetData> benchmark, std::span<const std::string> subsets = {},
                        TrainResult* log = nullptr);

struct TableRow {
  std::string label;
  double value = 0.0;        // β for sweeps, target IoU for robustness
  double achieved = 0.0;     // mean β or mean IoU actually applied
  std::size_t parameters = 0;
  MetricsReport report;
};

struct Table {
  std::string value_name;
  std::string achieved_name;
  std::vector<TableRow> rows;
};

std::string to_csv(const Table& t);

// Fixed-β rows over `multipliers`·√d_k, then the adaptive row.
Table beta_sweep(const ModelParams& params, std::span<const SubsetData> benchmark,
                 std::span<const double> multipliers, std::size_t threads = 1);

// Same table, but every fixed-β row is a model trained with that constant β (the fixed
// variant of `base`). The adaptive row uses `adaptive` when given, else trains one.
Table beta_sweep_trained(std::span<const SubsetData> benchmark, const ModelConfig& base, const TrainConfig& train,
                         std::uint64_t seed, std::span<const double> multipliers,
                         const ModelParams* adaptive = nullptr, std::size_t threads = 1);

struct CaamVariant {
  CrmKind crm = CrmKind::transformer;
  bool probes_learnable = true;
  std::size_t layers = 2;
  std::size_t n_probes = 8;
  ModulationForm form = ModulationForm::scalar;

  std::string label() const;
};

// Cartesian product of the option lists, in lexicographic order of the lists.
std::vector<CaamVariant> caam_grid(std::span<const CrmKind> crms, std::span<const bool> learnable,
                                   std::span<const std::size_t> layers, std::span<const std::size_t> probes,
                                   std::span<const ModulationForm> forms);

Table caam_ablation(std::span<const SubsetData> benchmark, const ModelConfig& base, const TrainConfig& train,
                    std::uint64_t seed, std::span<const CaamVariant> variants, std::size_t threads = 1);

struct Perturbation {
  PerturbMode mode = PerturbMode::scale;
  double iou = 1.0;
};

// One row per perturbation, then a no-box row evaluated on the β = 0 path.
Table robustness_eval(const ModelParams& params, std::span<const SubsetData> benchmark,
                      std::span<const Perturbation> perturbations, std::uint64_t seed,
                      std::size_t threads = 1);

// Trains and evaluates the cropped-reference variant of `base`.
MetricsReport roi_crop_baseline(std::span<const SubsetData> benchmark, const ModelConfig& base,
                                const TrainConfig& train, std::uint64_t seed, std::size_t threads = 1);

}  // namespace anchorcir
