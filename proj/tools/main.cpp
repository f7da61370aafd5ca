#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include "anchorcir/checkpoint.hpp"
#include "anchorcir/config.hpp"
#include "anchorcir/errors.hpp"
#include "anchorcir/eval.hpp"
#include "anchorcir/gradcheck.hpp"
#include "anchorcir/random.hpp"

namespace fs = std::filesystem;
using namespace anchorcir;
using ojson = nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kConfig = 1, kData = 2, kCheck = 3 };

class CheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string subsets;
  std::string betas;
  std::string checkpoint;
  std::optional<std::size_t> threads;
  std::string kind;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> parse_betas(const std::string& s) {
  std::vector<double> out;
  for (const std::string& item : split_list(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--betas: '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw ConfigError("--betas: empty list");
  return out;
}

struct Context {
  Options opt;
  RunConfig cfg;
  std::string hash;
  fs::path out;
};

Context make_context(const Options& opt) {
  Context ctx;
  ctx.opt = opt;
  RunConfig cfg = opt.config.empty() ? RunConfig{} : load_run_config(opt.config);
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.out.empty()) cfg.out = opt.out;
  if (opt.threads) cfg.eval.threads = *opt.threads;
  ctx.cfg = resolve(cfg);
  ctx.hash = config_hash(ctx.cfg);
  ctx.out = ctx.cfg.out;
  fs::create_directories(ctx.out);
  return ctx;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("write failed for " + path.string());
}

std::string provenance_line(const Context& ctx) {
  return "# config_hash=" + ctx.hash + " seed=" + std::to_string(ctx.cfg.seed) + "\n";
}

void write_resolved_config(const Context& ctx) {
  ojson j = to_json(ctx.cfg);
  j["config_hash"] = ctx.hash;
  write_text(ctx.out / "config.json", j.dump(2) + "\n");
}

// Subsets named by --subsets, or all configured subsets.
std::vector<SubsetPreset> selected_presets(const Context& ctx) {
  const auto names = split_list(ctx.opt.subsets);
  if (names.empty()) return ctx.cfg.subsets;
  std::vector<SubsetPreset> out;
  for (const std::string& n : names) {
    auto it = std::find_if(ctx.cfg.subsets.begin(), ctx.cfg.subsets.end(),
                           [&](const SubsetPreset& p) { return p.name == n; });
    if (it == ctx.cfg.subsets.end()) throw ConfigError("--subsets: unknown subset '" + n + "'");
    out.push_back(*it);
  }
  return out;
}

FrozenEncoders encoders_of(const RunConfig& cfg) {
  return make_frozen_encoders(cfg.encoder, derive_seed(cfg.seed, "encoders"));
}

std::ifstream open_input(const fs::path& p, bool binary = false) {
  std::ifstream f(p, binary ? std::ios::binary : std::ios::in);
  if (!f) throw DataError("missing data file " + p.string());
  return f;
}

SubsetData load_subset(const fs::path& dir, const SubsetPreset& preset) {
  const fs::path sub = dir / preset.name;
  SubsetData d;
  d.name = preset.name;
  d.thresholds = preset.thresholds;
  auto wf = open_input(sub / "world.bin", true);
  d.world = read_world(wf);
  if (!(d.world.config == preset.world)) {
    throw DataError(sub.string() + ": world was generated from a different configuration (seed or world settings differ)");
  }
  auto tr = open_input(sub / "train.jsonl");
  d.quadruples.train = read_quadruples(tr);
  auto te = open_input(sub / "test.jsonl");
  d.quadruples.test = read_quadruples(te);
  auto gf = open_input(sub / "gallery.jsonl");
  d.gallery = read_gallery(gf);
  if (const std::string err = check_gallery(d.gallery, d.quadruples.test); !err.empty()) {
    throw DataError(sub.string() + ": " + err);
  }
  return d;
}

fs::path data_dir(const Context& ctx) { return ctx.opt.data.empty() ? ctx.out : fs::path(ctx.opt.data); }

std::vector<SubsetData> load_benchmark(const Context& ctx, const std::vector<SubsetPreset>& presets) {
  std::vector<SubsetData> out;
  for (const SubsetPreset& p : presets) out.push_back(load_subset(data_dir(ctx), p));
  return out;
}

std::vector<SubsetData> load_benchmark(const Context& ctx) { return load_benchmark(ctx, selected_presets(ctx)); }

ModelParams load_or_train(const Context& ctx, std::span<const SubsetData> bench) {
  if (!ctx.opt.checkpoint.empty()) {
    if (!fs::exists(ctx.opt.checkpoint)) throw DataError("missing checkpoint " + ctx.opt.checkpoint);
    return load_checkpoint(ctx.opt.checkpoint);
  }
  return train_model(ctx.cfg.model, ctx.cfg.train, ctx.cfg.seed, bench, ctx.cfg.train_subsets);
}

int cmd_gen(const Context& ctx) {
  write_resolved_config(ctx);
  const FrozenEncoders enc = encoders_of(ctx.cfg);
  const Provenance prov{ctx.cfg.seed, ctx.hash};
  ojson stats = ojson::array();
  std::string csv = provenance_line(ctx) +
                    "subset,instances,images,train_instances,test_instances,train_quadruples,test_quadruples,"
                    "gallery,distractors,categories\n";
  for (const SubsetPreset& p : selected_presets(ctx)) {
    const SubsetData d = generate_subset(p, enc);
    if (const std::string err = check_gallery(d.gallery, d.quadruples.test); !err.empty()) {
      throw CheckFailure(p.name + " gallery: " + err);
    }
    const fs::path dir = ctx.out / p.name;
    fs::create_directories(dir);
    {
      std::ofstream f(dir / "world.bin", std::ios::binary);
      write_world(f, d.world, prov);
    }
    {
      std::ofstream f(dir / "train.jsonl", std::ios::binary);
      write_quadruples(f, d.quadruples.train, prov);
    }
    {
      std::ofstream f(dir / "test.jsonl", std::ios::binary);
      write_quadruples(f, d.quadruples.test, prov);
    }
    {
      std::ofstream f(dir / "gallery.jsonl", std::ios::binary);
      write_gallery(f, d.gallery, prov);
    }
    std::set<std::int64_t> train_inst, test_inst, cats;
    for (const Quadruple& q : d.quadruples.train) train_inst.insert(q.instance_id);
    for (const Quadruple& q : d.quadruples.test) test_inst.insert(q.instance_id), cats.insert(q.category_id);
    std::size_t distractors = 0;
    for (const GalleryEntry& e : d.gallery.entries) distractors += e.is_target ? 0 : 1;
    const ojson row = {{"subset", p.name},
                       {"thresholds", to_json(p.thresholds)},
                       {"instances", d.world.instances.size()},
                       {"images", d.world.images.size()},
                       {"train_instances", train_inst.size()},
                       {"test_instances", test_inst.size()},
                       {"train_quadruples", d.quadruples.train.size()},
                       {"test_quadruples", d.quadruples.test.size()},
                       {"gallery", d.gallery.entries.size()},
                       {"distractors", distractors},
                       {"categories", cats.size()}};
    stats.push_back(row);
    csv += p.name + "," + std::to_string(d.world.instances.size()) + "," + std::to_string(d.world.images.size()) +
           "," + std::to_string(train_inst.size()) + "," + std::to_string(test_inst.size()) + "," +
           std::to_string(d.quadruples.train.size()) + "," + std::to_string(d.quadruples.test.size()) + "," +
           std::to_string(d.gallery.entries.size()) + "," + std::to_string(distractors) + "," +
           std::to_string(cats.size()) + "\n";
    std::cout << p.name << ": " << d.quadruples.train.size() << " train / " << d.quadruples.test.size()
              << " test quadruples, gallery " << d.gallery.entries.size() << "\n";
  }
  write_text(ctx.out / "stats.json", ojson{{"config_hash", ctx.hash}, {"seed", ctx.cfg.seed}, {"subsets", stats}}.dump(2) + "\n");
  write_text(ctx.out / "stats.csv", csv);
  return kOk;
}

int cmd_train(Context ctx) {
  // --subsets selects the training subsets here (leave-one-subset-out).
  const auto names = split_list(ctx.opt.subsets);
  if (!names.empty()) {
    ctx.cfg.train_subsets = names;
    ctx.cfg = resolve(ctx.cfg);
    ctx.hash = config_hash(ctx.cfg);
  }
  write_resolved_config(ctx);
  std::vector<SubsetPreset> presets;
  for (const SubsetPreset& p : ctx.cfg.subsets) {
    if (ctx.cfg.train_subsets.empty() ||
        std::find(ctx.cfg.train_subsets.begin(), ctx.cfg.train_subsets.end(), p.name) != ctx.cfg.train_subsets.end()) {
      presets.push_back(p);
    }
  }
  const std::vector<SubsetData> bench = load_benchmark(ctx, presets);
  TrainResult log;
  const ModelParams params = train_model(ctx.cfg.model, ctx.cfg.train, ctx.cfg.seed, bench, {}, &log);
  save_checkpoint((ctx.out / "checkpoint.bin").string(), params, ctx.hash);

  std::string csv = provenance_line(ctx) + "epoch,loss,mean_beta\n";
  char buf[96];
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f\n", e + 1, log.epoch_loss[e], log.epoch_mean_beta[e]);
    csv += buf;
  }
  write_text(ctx.out / "loss_log.csv", csv);

  ojson used = ojson::object();
  std::size_t total = 0;
  for (const SubsetData& d : bench) {
    std::set<std::int64_t> inst;
    for (const Quadruple& q : d.quadruples.train) inst.insert(q.instance_id);
    used[d.name] = {{"quadruples", d.quadruples.train.size()}, {"instances", inst.size()}};
    total += d.quadruples.train.size();
  }
  write_text(ctx.out / "train_manifest.json",
             ojson{{"config_hash", ctx.hash}, {"seed", ctx.cfg.seed}, {"examples", total}, {"subsets", used}}.dump(2) + "\n");
  std::cout << "trained on " << total << " quadruples; final loss "
            << (log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back()) << "\n";
  return kOk;
}

std::string metrics_csv(const Context& ctx, const MetricsReport& r) {
  std::string out = provenance_line(ctx) + "subset,r_at_1,r_at_5,rid_at_1,queries,skipped,gallery,mean_beta\n";
  char buf[256];
  for (const SubsetMetrics& s : r.subsets) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%zu,%zu,%zu,%.6f\n", s.subset.c_str(), s.r_at_1, s.r_at_5,
                  s.rid_at_1, s.queries, s.skipped, s.gallery, s.mean_beta);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "macro,%.6f,%.6f,%.6f,,,,\n", r.r_at_1, r.r_at_5, r.rid_at_1);
  return out + buf;
}

int cmd_eval(Context ctx) {
  if (ctx.opt.checkpoint.empty()) ctx.opt.checkpoint = (ctx.out / "checkpoint.bin").string();
  write_resolved_config(ctx);
  const std::vector<SubsetData> bench = load_benchmark(ctx);
  const ModelParams params = load_or_train(ctx, bench);
  EvalOptions opt;
  opt.threads = ctx.cfg.eval.threads;
  MetricsReport r = evaluate(params, bench, opt);
  r.config_hash = ctx.hash;
  r.seed = ctx.cfg.seed;
  write_text(ctx.out / "metrics.json", to_json(r).dump(2) + "\n");
  write_text(ctx.out / "metrics.csv", metrics_csv(ctx, r));
  std::printf("R@1 %.4f  R@5 %.4f  R_ID@1 %.4f  avg %.4f\n", r.r_at_1, r.r_at_5, r.rid_at_1, r.average());
  if (const std::string err = check_report(r); !err.empty()) throw CheckFailure("metrics: " + err);
  return kOk;
}

int cmd_ablate(const Context& ctx) {
  write_resolved_config(ctx);
  const std::vector<SubsetData> bench = load_benchmark(ctx);
  const std::size_t threads = ctx.cfg.eval.threads;
  Table table;
  if (ctx.opt.kind == "beta") {
    const std::vector<double> grid = ctx.opt.betas.empty() ? ctx.cfg.eval.beta_grid : parse_betas(ctx.opt.betas);
    const ModelParams adaptive = load_or_train(ctx, bench);
    table = ctx.cfg.eval.beta_sweep_trained
                ? beta_sweep_trained(bench, ctx.cfg.model, ctx.cfg.train, ctx.cfg.seed, grid, &adaptive, threads)
                : beta_sweep(adaptive, bench, grid, threads);
  } else if (ctx.opt.kind == "caam") {
    const EvalConfig& e = ctx.cfg.eval;
    std::vector<CrmKind> crms;
    for (const auto& c : e.caam_crms) crms.push_back(parse_crm_kind(c));
    std::vector<ModulationForm> forms;
    for (const auto& f : e.caam_forms) forms.push_back(parse_modulation_form(f));
    // vector<bool> has no contiguous storage to view as a span.
    const std::size_t n = e.caam_learnable.size();
    std::unique_ptr<bool[]> learn(new bool[n]);
    for (std::size_t i = 0; i < n; ++i) learn[i] = e.caam_learnable[i];
    const auto variants = caam_grid(crms, std::span<const bool>(learn.get(), n), e.caam_layers, e.caam_probes, forms);
    table = caam_ablation(bench, ctx.cfg.model, ctx.cfg.train, ctx.cfg.seed, variants, threads);
  } else if (ctx.opt.kind == "robustness") {
    const ModelParams adaptive = load_or_train(ctx, bench);
    std::vector<Perturbation> perts;
    for (const PerturbationSpec& p : ctx.cfg.eval.perturbations) {
      perts.push_back({p.mode == "scale" ? PerturbMode::scale : PerturbMode::scale_shift, p.iou});
    }
    table = robustness_eval(adaptive, bench, perts, derive_seed(ctx.cfg.seed, "perturb"), threads);
  } else if (ctx.opt.kind == "roicrop") {
    table = Table{"variant", "mean_beta", {}};
    TableRow crop;
    crop.label = "roi_crop";
    crop.report = roi_crop_baseline(bench, ctx.cfg.model, ctx.cfg.train, ctx.cfg.seed, threads);
    table.rows.push_back(crop);
    const ModelParams adaptive = load_or_train(ctx, bench);
    EvalOptions opt;
    opt.threads = threads;
    TableRow full;
    full.label = "adaptive";
    full.value = 1.0;
    full.report = evaluate(adaptive, bench, opt);
    for (const SubsetMetrics& s : full.report.subsets) full.achieved += s.mean_beta / static_cast<double>(bench.size());
    table.rows.push_back(full);
  } else {
    throw ConfigError("ablate: unknown kind '" + ctx.opt.kind + "' (expected beta|caam|robustness|roicrop)");
  }
  for (TableRow& row : table.rows) {
    row.report.config_hash = ctx.hash;
    row.report.seed = ctx.cfg.seed;
    if (const std::string err = check_report(row.report); !err.empty()) throw CheckFailure(row.label + ": " + err);
  }
  const std::string csv = to_csv(table);
  write_text(ctx.out / ("ablate_" + ctx.opt.kind + ".csv"), provenance_line(ctx) + csv);
  std::cout << csv;
  return kOk;
}

int cmd_gradcheck(const Context& ctx) {
  // Tiny dimensions unless a config file supplies the model.
  const ModelConfig model = ctx.opt.config.empty() ? gradcheck_model_config() : ctx.cfg.model;
  const GradCheckReport r = gradcheck(model, ctx.cfg.seed);
  const std::string csv = to_csv(r);
  write_text(ctx.out / "gradcheck.csv", provenance_line(ctx) + csv);
  std::cout << csv;
  if (!r.passed()) throw CheckFailure("gradient check above tolerance " + std::to_string(r.tolerance));
  return kOk;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "JSON run configuration");
  cmd->add_option("--seed", o.seed, "Run seed (overrides the config)");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--threads", o.threads, "Evaluation threads");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Object-anchored composed retrieval toolkit"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen", "Generate the synthetic benchmark");
  add_common(gen, o);
  gen->add_option("--subsets", o.subsets, "Comma-separated subsets to generate");

  auto* train_cmd = app.add_subcommand("train", "Train a model on generated data");
  add_common(train_cmd, o);
  train_cmd->add_option("--data", o.data, "Benchmark directory (default: --out)");
  train_cmd->add_option("--subsets", o.subsets, "Comma-separated training subsets");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval_cmd, o);
  eval_cmd->add_option("--data", o.data, "Benchmark directory (default: --out)");
  eval_cmd->add_option("--subsets", o.subsets, "Comma-separated subsets to evaluate");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint (default: <out>/checkpoint.bin)");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation table");
  add_common(ablate, o);
  ablate->add_option("kind", o.kind, "beta | caam | robustness | roicrop")->required();
  ablate->add_option("--data", o.data, "Benchmark directory (default: --out)");
  ablate->add_option("--subsets", o.subsets, "Comma-separated subsets");
  ablate->add_option("--betas", o.betas, "Comma-separated β multipliers of sqrt(d_k)");
  ablate->add_option("--checkpoint", o.checkpoint, "Adaptive model; trained from scratch when absent");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  add_common(grad, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    Context ctx = make_context(o);
    if (gen->parsed()) return cmd_gen(ctx);
    if (train_cmd->parsed()) return cmd_train(ctx);
    if (eval_cmd->parsed()) return cmd_eval(ctx);
    if (ablate->parsed()) return cmd_ablate(ctx);
    if (grad->parsed()) return cmd_gradcheck(ctx);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kCheck;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kCheck;
  }
  return kOk;
}
