#include "anchorcir/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <thread>

#include "anchorcir/errors.hpp"
#include "anchorcir/random.hpp"

namespace anchorcir {

namespace {

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

GalleryLabels labels_of(const GalleryManifest& g) {
  GalleryLabels l;
  for (const GalleryEntry& e : g.entries) {
    l.image_ids.push_back(e.image_id);
    l.instance_ids.push_back(e.instance_id);
  }
  return l;
}

std::vector<std::size_t> rank_gallery(std::span<const double> query, const Tensor& gallery) {
  if (gallery.rows() == 0) throw ContractError("rank_gallery: empty gallery");
  if (gallery.cols() != query.size()) {
    throw DimensionError("rank_gallery: query width " + std::to_string(query.size()) +
                         " vs gallery " + shape_string(gallery));
  }
  std::vector<double> sim(gallery.rows());
  for (std::size_t i = 0; i < gallery.rows(); ++i) sim[i] = dot(query, gallery.row(i));
  std::vector<std::size_t> order(gallery.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  return order;
}

namespace {

void check_k(const RankingResult& results, const GalleryLabels& gallery, std::size_t k) {
  if (k == 0 || k > gallery.size()) {
    throw ContractError("recall: k = " + std::to_string(k) + " outside [1, " +
                        std::to_string(gallery.size()) + "]");
  }
  if (results.queries.empty()) throw ContractError("recall: no queries");
}

}  // namespace

double recall_at_k(const RankingResult& results, const GalleryLabels& gallery, std::size_t k) {
  check_k(results, gallery, k);
  std::size_t hits = 0;
  for (const QueryRanking& q : results.queries) {
    for (std::size_t i = 0; i < k; ++i) {
      if (gallery.image_ids.at(q.order.at(i)) == q.target_image_id) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.queries.size());
}

double instance_recall_at_k(const RankingResult& results, const GalleryLabels& gallery, std::size_t k) {
  check_k(results, gallery, k);
  std::size_t hits = 0;
  for (const QueryRanking& q : results.queries) {
    for (std::size_t i = 0; i < k; ++i) {
      if (gallery.instance_ids.at(q.order.at(i)) == q.instance_id) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.queries.size());
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json subsets = nlohmann::ordered_json::object();
  for (const SubsetMetrics& s : r.subsets) {
    subsets[s.subset] = {{"r_at_1", s.r_at_1},   {"r_at_5", s.r_at_5},       {"rid_at_1", s.rid_at_1},
                         {"queries", s.queries}, {"skipped", s.skipped},     {"gallery", s.gallery},
                         {"mean_beta", s.mean_beta}, {"mean_iou", s.mean_iou}};
  }
  j["subsets"] = subsets;
  j["macro"] = {{"r_at_1", r.r_at_1}, {"r_at_5", r.r_at_5}, {"rid_at_1", r.rid_at_1}};
  j["config_hash"] = r.config_hash;
  j["seed"] = r.seed;
  return j;
}

std::string check_report(const MetricsReport& r) {
  auto check = [](const std::string& who, double r1, double r5, double rid1) -> std::string {
    for (double v : {r1, r5, rid1}) {
      if (!(v >= 0.0 && v <= 1.0)) return who + ": metric outside [0, 1]";
    }
    if (r1 > r5 + 1e-12) return who + ": R@1 > R@5";
    if (r1 > rid1 + 1e-12) return who + ": R@1 > R_ID@1";
    return "";
  };
  for (const SubsetMetrics& s : r.subsets) {
    if (auto e = check(s.subset, s.r_at_1, s.r_at_5, s.rid_at_1); !e.empty()) return e;
  }
  return check("macro", r.r_at_1, r.r_at_5, r.rid_at_1);
}

Tensor gallery_embeddings(const ModelParams& params, const SubsetData& subset, std::size_t threads) {
  const auto& entries = subset.gallery.entries;
  Tensor out(entries.size(), params.config.embed_dim);
  parallel_for(entries.size(), threads, [&](std::size_t i) {
    const Tensor patches = encode_image(subset.world.image(entries[i].image_id), params.encoders);
    const Tensor f = embed_target(params, patches);
    std::copy(f.data().begin(), f.data().end(), out.row(i).begin());
  });
  return out;
}

RankingResult rank_subset(const ModelParams& params, const SubsetData& subset, const Tensor& gallery,
                          const EvalOptions& options, SubsetMetrics* stats) {
  const auto& queries = subset.quadruples.test;
  std::vector<std::optional<QueryRanking>> slots(queries.size());
  std::vector<double> betas(queries.size(), 0.0);
  std::vector<double> ious(queries.size(), 1.0);
  parallel_for(queries.size(), options.threads, [&](std::size_t i) {
    const Quadruple& q = queries[i];
    const Tensor patches = encode_image(subset.world.image(q.ref_image_id), params.encoders);
    const Tensor text = embed_text(subset.world.context(q.text_context_id), params.encoders);
    BBox box = q.bbox;
    QueryTrace trace;
    Tensor f;
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (options.perturb) {
        const std::uint64_t s = derive_seed(options.seed, "perturb/" + subset.name + "/" + std::to_string(i) +
                                                              "/" + std::to_string(attempt));
        box = perturb_bbox(q.bbox, *options.perturb, options.target_iou, s);
      }
      try {
        f = embed_query(params, {&patches, box, &text}, options.query, &trace);
        break;
      } catch (const DegenerateInputError&) {
        // Perturbed boxes may miss every patch centre; redraw. Unperturbed misses are skipped.
        if (!options.perturb || attempt >= 16) return;
      }
    }
    slots[i] = QueryRanking{q.target_image_id, q.instance_id, rank_gallery(f.row(0), gallery)};
    betas[i] = trace.beta;
    ious[i] = iou(q.bbox, box);
  });

  RankingResult result;
  double beta_sum = 0.0;
  double iou_sum = 0.0;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!slots[i]) {
      ++skipped;
      continue;
    }
    result.queries.push_back(std::move(*slots[i]));
    beta_sum += betas[i];
    iou_sum += ious[i];
  }
  if (stats != nullptr) {
    const double n = std::max<double>(1.0, static_cast<double>(result.queries.size()));
    stats->subset = subset.name;
    stats->queries = result.queries.size();
    stats->skipped = skipped;
    stats->gallery = gallery.rows();
    stats->mean_beta = beta_sum / n;
    stats->mean_iou = iou_sum / n;
  }
  return result;
}

MetricsReport evaluate(const ModelParams& params, std::span<const SubsetData> benchmark,
                       const EvalOptions& options, std::span<const Tensor> galleries) {
  if (!galleries.empty() && galleries.size() != benchmark.size()) {
    throw DimensionError("evaluate: " + std::to_string(galleries.size()) + " gallery caches for " +
                         std::to_string(benchmark.size()) + " subsets");
  }
  MetricsReport report;
  report.seed = params.seed;
  for (std::size_t s = 0; s < benchmark.size(); ++s) {
    const SubsetData& subset = benchmark[s];
    const Tensor computed = galleries.empty() ? gallery_embeddings(params, subset, options.threads) : Tensor();
    const Tensor& gallery = galleries.empty() ? computed : galleries[s];
    SubsetMetrics m;
    const RankingResult ranks = rank_subset(params, subset, gallery, options, &m);
    if (ranks.queries.empty()) throw DataError("evaluate: subset " + subset.name + " has no usable queries");
    const GalleryLabels labels = labels_of(subset.gallery);
    m.r_at_1 = recall_at_k(ranks, labels, 1);
    m.r_at_5 = recall_at_k(ranks, labels, std::min<std::size_t>(5, labels.size()));
    m.rid_at_1 = instance_recall_at_k(ranks, labels, 1);
    report.subsets.push_back(m);
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, report.subsets.size()));
  for (const SubsetMetrics& m : report.subsets) {
    report.r_at_1 += m.r_at_1 / n;
    report.r_at_5 += m.r_at_5 / n;
    report.rid_at_1 += m.rid_at_1 / n;
  }
  return report;
}

std::vector<Example> training_examples(std::span<const SubsetData> benchmark, std::span<const std::string> subsets) {
  const std::set<std::string> wanted(subsets.begin(), subsets.end());
  std::vector<Example> out;
  for (const SubsetData& s : benchmark) {
    if (!wanted.empty() && !wanted.count(s.name)) continue;
    for (const Quadruple& q : s.quadruples.train) {
      out.push_back({&s.world.image(q.ref_image_id), &s.world.image(q.target_image_id), q.bbox,
                     s.world.context(q.text_context_id)});
    }
  }
  return out;
}

ModelParams train_model(const ModelConfig& model, const TrainConfig& train_cfg, std::uint64_t seed,
                        std::span<const SubsetData> benchmark, std::span<const std::string> subsets,
                        TrainResult* log) {
  ModelParams params = make_model(model, seed);
  const std::vector<Example> examples = training_examples(benchmark, subsets);
  TrainResult r = train(train_cfg, examples, params);
  if (log != nullptr) *log = std::move(r);
  return params;
}

std::string to_csv(const Table& t) {
  std::string out = "label," + t.value_name + "," + t.achieved_name + ",parameters,r_at_1,r_at_5,rid_at_1,average";
  if (!t.rows.empty()) {
    for (const SubsetMetrics& s : t.rows.front().report.subsets) {
      out += "," + s.subset + "_r_at_1," + s.subset + "_r_at_5," + s.subset + "_rid_at_1";
    }
  }
  out += "\n";
  for (const TableRow& row : t.rows) {
    const MetricsReport& r = row.report;
    out += row.label + "," + fmt(row.value) + "," + fmt(row.achieved) + "," + std::to_string(row.parameters) +
           "," + fmt(r.r_at_1) + "," + fmt(r.r_at_5) + "," + fmt(r.rid_at_1) + "," + fmt(r.average());
    for (const SubsetMetrics& s : r.subsets) {
      out += "," + fmt(s.r_at_1) + "," + fmt(s.r_at_5) + "," + fmt(s.rid_at_1);
    }
    out += "\n";
  }
  return out;
}

namespace {

double mean_of(const MetricsReport& r, double SubsetMetrics::*field) {
  double sum = 0.0;
  double n = 0.0;
  for (const SubsetMetrics& s : r.subsets) {
    sum += (s.*field) * static_cast<double>(s.queries);
    n += static_cast<double>(s.queries);
  }
  return n > 0.0 ? sum / n : 0.0;
}

std::vector<Tensor> all_galleries(const ModelParams& params, std::span<const SubsetData> benchmark,
                                  std::size_t threads) {
  std::vector<Tensor> out;
  for (const SubsetData& s : benchmark) out.push_back(gallery_embeddings(params, s, threads));
  return out;
}

}  // namespace

Table beta_sweep(const ModelParams& params, std::span<const SubsetData> benchmark,
                 std::span<const double> multipliers, std::size_t threads) {
  const std::vector<Tensor> galleries = all_galleries(params, benchmark, threads);
  const double root_dk = std::sqrt(static_cast<double>(params.config.fusion.head_dim));
  Table t{"beta", "mean_beta", {}};
  for (double m : multipliers) {
    EvalOptions opt;
    opt.threads = threads;
    opt.query = {BetaMode::fixed, m * root_dk};
    TableRow row;
    row.label = "fixed";
    row.value = m * root_dk;
    row.achieved = m * root_dk;
    row.report = evaluate(params, benchmark, opt, galleries);
    t.rows.push_back(std::move(row));
  }
  EvalOptions opt;
  opt.threads = threads;
  TableRow row;
  row.label = "adaptive";
  row.report = evaluate(params, benchmark, opt, galleries);
  row.value = mean_of(row.report, &SubsetMetrics::mean_beta);
  row.achieved = row.value;
  t.rows.push_back(std::move(row));
  return t;
}

Table beta_sweep_trained(std::span<const SubsetData> benchmark, const ModelConfig& base, const TrainConfig& train_cfg,
                         std::uint64_t seed, std::span<const double> multipliers, const ModelParams* adaptive,
                         std::size_t threads) {
  const double root_dk = std::sqrt(static_cast<double>(base.fusion.head_dim));
  Table t{"beta", "mean_beta", {}};
  EvalOptions opt;
  opt.threads = threads;
  for (double m : multipliers) {
    ModelConfig cfg = base;
    cfg.variant = QueryVariant::fixed;
    cfg.fixed_beta = m * root_dk;
    const ModelParams params = train_model(cfg, train_cfg, seed, benchmark);
    TableRow row;
    row.label = "fixed";
    row.value = cfg.fixed_beta;
    row.achieved = cfg.fixed_beta;
    row.report = evaluate(params, benchmark, opt);
    t.rows.push_back(std::move(row));
  }
  std::optional<ModelParams> trained;
  if (adaptive == nullptr) {
    ModelConfig cfg = base;
    cfg.variant = QueryVariant::adaptive;
    trained = train_model(cfg, train_cfg, seed, benchmark);
    adaptive = &*trained;
  }
  TableRow row;
  row.label = "adaptive";
  row.report = evaluate(*adaptive, benchmark, opt);
  row.value = mean_of(row.report, &SubsetMetrics::mean_beta);
  row.achieved = row.value;
  t.rows.push_back(std::move(row));
  return t;
}

std::string CaamVariant::label() const {
  return to_string(crm) + "/" + (probes_learnable ? "learnable" : "frozen") + "/L" + std::to_string(layers) +
         "/K" + std::to_string(n_probes) + "/" + to_string(form);
}

std::vector<CaamVariant> caam_grid(std::span<const CrmKind> crms, std::span<const bool> learnable,
                                   std::span<const std::size_t> layers, std::span<const std::size_t> probes,
                                   std::span<const ModulationForm> forms) {
  std::vector<CaamVariant> out;
  for (CrmKind c : crms) {
    for (bool l : learnable) {
      for (std::size_t d : layers) {
        for (std::size_t k : probes) {
          for (ModulationForm f : forms) out.push_back({c, l, d, k, f});
        }
      }
    }
  }
  return out;
}

Table caam_ablation(std::span<const SubsetData> benchmark, const ModelConfig& base, const TrainConfig& train_cfg,
                    std::uint64_t seed, std::span<const CaamVariant> variants, std::size_t threads) {
  Table t{"layers", "mean_beta", {}};
  for (const CaamVariant& v : variants) {
    ModelConfig cfg = base;
    cfg.variant = QueryVariant::adaptive;
    cfg.caam.crm = v.crm;
    cfg.caam.probes_learnable = v.probes_learnable;
    cfg.caam.crm_layers = v.layers;
    cfg.caam.n_probes = v.n_probes;
    cfg.caam.form = v.form;
    const ModelParams params = train_model(cfg, train_cfg, seed, benchmark);
    EvalOptions opt;
    opt.threads = threads;
    TableRow row;
    row.label = v.label();
    row.value = static_cast<double>(v.layers);
    row.parameters = parameter_count(params.caam);
    row.report = evaluate(params, benchmark, opt);
    row.achieved = mean_of(row.report, &SubsetMetrics::mean_beta);
    t.rows.push_back(std::move(row));
  }
  return t;
}

Table robustness_eval(const ModelParams& params, std::span<const SubsetData> benchmark,
                      std::span<const Perturbation> perturbations, std::uint64_t seed, std::size_t threads) {
  const std::vector<Tensor> galleries = all_galleries(params, benchmark, threads);
  Table t{"target_iou", "mean_iou", {}};
  for (const Perturbation& p : perturbations) {
    EvalOptions opt;
    opt.threads = threads;
    opt.seed = seed;
    if (p.iou < 1.0) {
      opt.perturb = p.mode;
      opt.target_iou = p.iou;
    }
    TableRow row;
    row.label = p.mode == PerturbMode::scale ? "scale" : "scale_shift";
    row.value = p.iou;
    row.report = evaluate(params, benchmark, opt, galleries);
    row.achieved = mean_of(row.report, &SubsetMetrics::mean_iou);
    t.rows.push_back(std::move(row));
  }
  EvalOptions opt;
  opt.threads = threads;
  opt.query.beta_mode = BetaMode::none;
  TableRow row;
  row.label = "no_bbox";
  row.value = 0.0;
  row.report = evaluate(params, benchmark, opt, galleries);
  row.achieved = 0.0;
  t.rows.push_back(std::move(row));
  return t;
}

MetricsReport roi_crop_baseline(std::span<const SubsetData> benchmark, const ModelConfig& base,
                                const TrainConfig& train_cfg, std::uint64_t seed, std::size_t threads) {
  ModelConfig cfg = base;
  cfg.variant = QueryVariant::roi_crop;
  const ModelParams params = train_model(cfg, train_cfg, seed, benchmark);
  EvalOptions opt;
  opt.threads = threads;
  return evaluate(params, benchmark, opt);
}

}  // namespace anchorcir
