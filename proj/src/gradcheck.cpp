#include "anchorcir/gradcheck.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "anchorcir/optim.hpp"
#include "anchorcir/random.hpp"

namespace anchorcir {

namespace {

constexpr double kFloor = 1e-5;

std::string group_of(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (name == "fusion.queries") return "fusion_queries";
  if (starts("fusion.")) return "fusion";
  if (name == "caam.probes") return "probes";
  if (name == "caam.cls" || name == "rep_cls") return "cls";
  if (starts("caam.crm") || starts("caam.mlp")) return "crm";
  if (starts("caam.head")) return "modulator_head";
  if (starts("caam.encoder")) return "modulator_encoder";
  if (starts("head_query")) return "query_head";
  if (starts("head_image")) return "image_head";
  return name;
}

SyntheticImage random_image(const EncoderConfig& e, std::int64_t id, Rng& rng) {
  SyntheticImage img;
  img.image_id = id;
  img.grid = e.grid;
  img.latents = rng.gaussian(e.grid.count(), e.latent_dim, 1.0);
  return img;
}

}  // namespace

bool GradCheckReport::passed() const {
  return !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const GradCheckRow& r) { return r.pass; });
}

ModelConfig gradcheck_model_config() {
  ModelConfig m;
  m.encoder.grid = {2, 2};
  m.encoder.latent_dim = 4;
  m.encoder.model_dim = 6;
  m.encoder.text_tokens = 2;
  m.fusion.model_dim = 6;
  m.fusion.heads = 1;
  m.fusion.head_dim = 6;
  m.fusion.blocks = 1;
  m.fusion.ffn_dim = 6;
  m.fusion.n_queries = 2;
  m.fusion.queries_trainable = true;
  m.caam.n_probes = 2;
  m.caam.crm_layers = 1;
  m.caam.crm_head_dim = 6;
  m.caam.crm_ffn_dim = 6;
  m.embed_dim = 6;
  return m;
}

GradCheckReport gradcheck(const ModelConfig& cfg, std::uint64_t seed, std::size_t batch, double eps,
                          double tolerance) {
  ModelParams params = make_model(cfg, seed);
  Rng rng(seed, "gradcheck");
  const std::size_t out = params.caam.head.weight.cols();
  params.caam.head = make_linear(cfg.fusion.model_dim, out, rng);

  std::vector<SyntheticImage> images;
  std::vector<std::vector<double>> texts;
  for (std::size_t i = 0; i < 2 * batch; ++i) images.push_back(random_image(cfg.encoder, static_cast<std::int64_t>(i), rng));
  for (std::size_t i = 0; i < batch; ++i) texts.push_back(rng.unit_vector(cfg.encoder.latent_dim));
  std::vector<Example> examples;
  for (std::size_t i = 0; i < batch; ++i) {
    // Boxes cover the top-left patch at least.
    const double side = rng.uniform(0.55, 0.95);
    examples.push_back({&images[2 * i], &images[2 * i + 1], BBox{0.0, 0.0, side, side}, texts[i]});
  }

  const BatchGradients analytic = batch_loss_and_gradients(params, examples);
  std::vector<Tensor*> tensors;
  std::vector<std::string> names;
  std::vector<ParamGroup> groups;
  params.visit([&](const std::string& name, Tensor& t, ParamGroup g) {
    tensors.push_back(&t);
    names.push_back(name);
    groups.push_back(g);
  });

  std::map<std::string, GradCheckRow> by_group;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (groups[i] == ParamGroup::frozen) continue;
    Tensor& t = *tensors[i];
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& probe) {
          const Tensor saved = t;
          t = probe;
          const double loss = batch_loss_and_gradients(params, examples).loss;
          t = saved;
          return loss;
        },
        t, eps);
    const std::string g = group_of(names[i]);
    if (!by_group.count(g)) order.push_back(g);
    GradCheckRow& row = by_group[g];
    row.group = g;
    row.tensors += 1;
    row.entries += t.size();
    row.max_rel_error = std::max(row.max_rel_error, max_relative_error(analytic.grads[i], numeric, kFloor));
  }
  GradCheckReport report;
  report.tolerance = tolerance;
  for (const std::string& g : order) {
    GradCheckRow row = by_group[g];
    row.pass = row.max_rel_error < tolerance;
    report.rows.push_back(row);
  }
  return report;
}

std::string to_csv(const GradCheckReport& r) {
  std::string out = "group,tensors,entries,max_rel_error,pass\n";
  char buf[64];
  for (const GradCheckRow& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%.3e", row.max_rel_error);
    out += row.group + "," + std::to_string(row.tensors) + "," + std::to_string(row.entries) + "," + buf + "," +
           (row.pass ? "pass" : "fail") + "\n";
  }
  return out;
}

}  // namespace anchorcir
