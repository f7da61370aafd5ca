#include "anchorcir/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "anchorcir/errors.hpp"
#include "anchorcir/random.hpp"

namespace anchorcir {

namespace {

using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

// Reads fields from one JSON object and rejects any key nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <class T>
  void field(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(sub(key) + ": wrong type");
    }
  }

  // For nested objects handled by a callback.
  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string sub(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + sub(key) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

ojson grid_json(const GridShape& g) { return ojson{{"h", g.h}, {"w", g.w}}; }

GridShape grid_from(const json& j, const std::string& path) {
  GridShape g;
  ObjectReader r(j, path);
  r.field("h", g.h);
  r.field("w", g.w);
  r.finish();
  return g;
}

ojson world_json(const WorldConfig& c, bool embedded) {
  ojson j;
  if (!embedded) j["subset"] = c.subset;
  j["n_categories"] = c.n_categories;
  j["instances_per_category"] = c.instances_per_category;
  j["reserve_instances_per_category"] = c.reserve_instances_per_category;
  j["images_per_instance"] = c.images_per_instance;
  j["n_contexts"] = c.n_contexts;
  j["n_scenes"] = c.n_scenes;
  j["scenes_per_instance"] = c.scenes_per_instance;
  if (!embedded) {
    j["grid"] = grid_json(c.grid);
    j["latent_dim"] = c.latent_dim;
  }
  j["noise"] = c.noise;
  j["instance_spread"] = c.instance_spread;
  j["scene_weight"] = c.scene_weight;
  j["bbox_min"] = c.bbox_min;
  j["bbox_max"] = c.bbox_max;
  j["pairs_per_instance"] = c.pairs_per_instance;
  j["train_pairs_per_instance"] = c.train_pairs_per_instance;
  j["train_fraction"] = c.train_fraction;
  if (!embedded) j["seed"] = c.seed;
  return j;
}

WorldConfig world_from(const json& j, const std::string& path, bool embedded, WorldConfig c) {
  ObjectReader r(j, path);
  if (!embedded) r.field("subset", c.subset);
  r.field("n_categories", c.n_categories);
  r.field("instances_per_category", c.instances_per_category);
  r.field("reserve_instances_per_category", c.reserve_instances_per_category);
  r.field("images_per_instance", c.images_per_instance);
  r.field("n_contexts", c.n_contexts);
  r.field("n_scenes", c.n_scenes);
  r.field("scenes_per_instance", c.scenes_per_instance);
  if (!embedded) {
    if (const json* g = r.child("grid")) c.grid = grid_from(*g, r.sub("grid"));
    r.field("latent_dim", c.latent_dim);
  }
  r.field("noise", c.noise);
  r.field("instance_spread", c.instance_spread);
  r.field("scene_weight", c.scene_weight);
  r.field("bbox_min", c.bbox_min);
  r.field("bbox_max", c.bbox_max);
  r.field("pairs_per_instance", c.pairs_per_instance);
  r.field("train_pairs_per_instance", c.train_pairs_per_instance);
  r.field("train_fraction", c.train_fraction);
  if (!embedded) r.field("seed", c.seed);
  r.finish();
  return c;
}

FilterThresholds thresholds_from(const json& j, const std::string& path, FilterThresholds t) {
  ObjectReader r(j, path);
  r.field("valid", t.valid);
  r.field("high", t.high);
  r.field("centric", t.centric);
  r.field("count", t.count);
  r.finish();
  return t;
}

ojson encoder_json(const EncoderConfig& c) {
  return ojson{{"grid", grid_json(c.grid)},
               {"latent_dim", c.latent_dim},
               {"model_dim", c.model_dim},
               {"text_tokens", c.text_tokens}};
}

EncoderConfig encoder_from(const json& j, const std::string& path) {
  EncoderConfig c;
  ObjectReader r(j, path);
  if (const json* g = r.child("grid")) c.grid = grid_from(*g, r.sub("grid"));
  r.field("latent_dim", c.latent_dim);
  r.field("model_dim", c.model_dim);
  r.field("text_tokens", c.text_tokens);
  r.finish();
  return c;
}

ojson fusion_json(const FusionConfig& c) {
  return ojson{{"heads", c.heads},
               {"head_dim", c.head_dim},
               {"blocks", c.blocks},
               {"ffn_dim", c.ffn_dim},
               {"n_queries", c.n_queries},
               {"bias_all_blocks", c.bias_all_blocks},
               {"queries_trainable", c.queries_trainable}};
}

FusionConfig fusion_from(const json& j, const std::string& path) {
  FusionConfig c;
  ObjectReader r(j, path);
  r.field("heads", c.heads);
  r.field("head_dim", c.head_dim);
  r.field("blocks", c.blocks);
  r.field("ffn_dim", c.ffn_dim);
  r.field("n_queries", c.n_queries);
  r.field("bias_all_blocks", c.bias_all_blocks);
  r.field("queries_trainable", c.queries_trainable);
  r.finish();
  return c;
}

ojson caam_json(const CaamConfig& c) {
  return ojson{{"n_probes", c.n_probes},
               {"probes_learnable", c.probes_learnable},
               {"crm", to_string(c.crm)},
               {"crm_layers", c.crm_layers},
               {"crm_heads", c.crm_heads},
               {"crm_head_dim", c.crm_head_dim},
               {"crm_ffn_dim", c.crm_ffn_dim},
               {"form", to_string(c.form)},
               {"shared_encoder", c.shared_encoder},
               {"probe_init_std", c.probe_init_std}};
}

CaamConfig caam_from(const json& j, const std::string& path) {
  CaamConfig c;
  ObjectReader r(j, path);
  std::string crm = to_string(c.crm);
  std::string form = to_string(c.form);
  r.field("n_probes", c.n_probes);
  r.field("probes_learnable", c.probes_learnable);
  r.field("crm", crm);
  r.field("crm_layers", c.crm_layers);
  r.field("crm_heads", c.crm_heads);
  r.field("crm_head_dim", c.crm_head_dim);
  r.field("crm_ffn_dim", c.crm_ffn_dim);
  r.field("form", form);
  r.field("shared_encoder", c.shared_encoder);
  r.field("probe_init_std", c.probe_init_std);
  r.finish();
  c.crm = parse_crm_kind(crm);
  c.form = parse_modulation_form(form);
  return c;
}

ojson model_json(const ModelConfig& c) {
  return ojson{{"fusion", fusion_json(c.fusion)},
               {"caam", caam_json(c.caam)},
               {"embed_dim", c.embed_dim},
               {"temperature", c.temperature},
               {"variant", to_string(c.variant)},
               {"fixed_beta", c.fixed_beta}};
}

ModelConfig model_from(const json& j, const std::string& path) {
  ModelConfig c;
  ObjectReader r(j, path);
  if (const json* f = r.child("fusion")) c.fusion = fusion_from(*f, r.sub("fusion"));
  if (const json* f = r.child("caam")) c.caam = caam_from(*f, r.sub("caam"));
  r.field("embed_dim", c.embed_dim);
  r.field("temperature", c.temperature);
  std::string variant = to_string(c.variant);
  r.field("variant", variant);
  r.field("fixed_beta", c.fixed_beta);
  r.finish();
  c.variant = parse_query_variant(variant);
  return c;
}

ojson train_json(const TrainConfig& c) {
  return ojson{{"epochs", c.epochs},
               {"batch_size", c.batch_size},
               {"lr_caam", c.lr_caam},
               {"lr_encoder", c.lr_encoder},
               {"weight_decay", c.weight_decay},
               {"adam_beta1", c.adam_beta1},
               {"adam_beta2", c.adam_beta2},
               {"adam_epsilon", c.adam_epsilon}};
}

TrainConfig train_from(const json& j, const std::string& path, TrainConfig c) {
  ObjectReader r(j, path);
  r.field("epochs", c.epochs);
  r.field("batch_size", c.batch_size);
  r.field("lr_caam", c.lr_caam);
  r.field("lr_encoder", c.lr_encoder);
  r.field("weight_decay", c.weight_decay);
  r.field("adam_beta1", c.adam_beta1);
  r.field("adam_beta2", c.adam_beta2);
  r.field("adam_epsilon", c.adam_epsilon);
  r.finish();
  return c;
}

ojson eval_json(const EvalConfig& c) {
  ojson perts = ojson::array();
  for (const auto& p : c.perturbations) perts.push_back(ojson{{"mode", p.mode}, {"iou", p.iou}});
  return ojson{{"threads", c.threads},
               {"beta_grid", c.beta_grid},
               {"perturbations", perts},
               {"beta_sweep_trained", c.beta_sweep_trained},
               {"caam_crms", c.caam_crms},
               {"caam_learnable", c.caam_learnable},
               {"caam_layers", c.caam_layers},
               {"caam_probes", c.caam_probes},
               {"caam_forms", c.caam_forms}};
}

EvalConfig eval_from(const json& j, const std::string& path) {
  EvalConfig c;
  ObjectReader r(j, path);
  r.field("threads", c.threads);
  r.field("beta_grid", c.beta_grid);
  r.field("beta_sweep_trained", c.beta_sweep_trained);
  r.field("caam_crms", c.caam_crms);
  r.field("caam_learnable", c.caam_learnable);
  r.field("caam_layers", c.caam_layers);
  r.field("caam_probes", c.caam_probes);
  r.field("caam_forms", c.caam_forms);
  for (const std::string& k : c.caam_crms) parse_crm_kind(k);
  for (const std::string& f : c.caam_forms) parse_modulation_form(f);
  if (const json* p = r.child("perturbations")) {
    if (!p->is_array()) throw ConfigError(r.sub("perturbations") + ": expected an array");
    c.perturbations.clear();
    for (std::size_t i = 0; i < p->size(); ++i) {
      PerturbationSpec s;
      ObjectReader pr((*p)[i], r.sub("perturbations[" + std::to_string(i) + "]"));
      pr.field("mode", s.mode);
      pr.field("iou", s.iou);
      pr.finish();
      if (s.mode != "scale" && s.mode != "scale_shift") {
        throw ConfigError(pr.sub("mode") + ": expected scale|scale_shift");
      }
      c.perturbations.push_back(s);
    }
  }
  r.finish();
  return c;
}

ojson subset_json(const SubsetPreset& p) {
  return ojson{{"name", p.name},
               {"thresholds", to_json(p.thresholds)},
               {"gallery_distractors", p.gallery_distractors},
               {"world", world_json(p.world, true)}};
}

SubsetPreset subset_from(const json& j, const std::string& path) {
  SubsetPreset p;
  ObjectReader r(j, path);
  r.field("name", p.name);
  // Named presets seed the defaults; explicit fields override them.
  for (const SubsetPreset& d : default_subset_presets()) {
    if (d.name == p.name) p = d;
  }
  if (p.name.empty()) throw ConfigError(r.sub("name") + ": required");
  if (const json* t = r.child("thresholds")) p.thresholds = thresholds_from(*t, r.sub("thresholds"), p.thresholds);
  r.field("gallery_distractors", p.gallery_distractors);
  if (const json* w = r.child("world")) p.world = world_from(*w, r.sub("world"), true, p.world);
  r.finish();
  p.world.subset = p.name;
  return p;
}

}  // namespace

ojson to_json(const WorldConfig& c) { return world_json(c, false); }

ojson to_json(const ModelConfig& c) {
  ojson j = model_json(c);
  j["encoder"] = encoder_json(c.encoder);
  return j;
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  json rest = j;
  EncoderConfig enc;
  if (rest.is_object() && rest.contains("encoder")) {
    enc = encoder_from(rest.at("encoder"), path + ".encoder");
    rest.erase("encoder");
  }
  ModelConfig c = model_from(rest, path);
  c.encoder = enc;
  c.fusion.model_dim = enc.model_dim;
  return c;
}

ojson to_json(const FilterThresholds& t) {
  return ojson{{"valid", t.valid}, {"high", t.high}, {"centric", t.centric}, {"count", t.count}};
}

WorldConfig world_config_from_json(const json& j, const std::string& path) {
  return world_from(j, path, false, WorldConfig{});
}

ojson to_json(const RunConfig& c) {
  ojson subsets = ojson::array();
  for (const auto& s : c.subsets) subsets.push_back(subset_json(s));
  return ojson{{"seed", c.seed},
               {"out", c.out},
               {"encoder", encoder_json(c.encoder)},
               {"subsets", subsets},
               {"model", model_json(c.model)},
               {"train", train_json(c.train)},
               {"eval", eval_json(c.eval)},
               {"train_subsets", c.train_subsets}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  ObjectReader r(j, "");
  r.field("seed", c.seed);
  r.field("out", c.out);
  if (const json* e = r.child("encoder")) c.encoder = encoder_from(*e, "encoder");
  if (const json* s = r.child("subsets")) {
    if (!s->is_array()) throw ConfigError("subsets: expected an array");
    c.subsets.clear();
    for (std::size_t i = 0; i < s->size(); ++i) {
      c.subsets.push_back(subset_from((*s)[i], "subsets[" + std::to_string(i) + "]"));
    }
  }
  if (const json* m = r.child("model")) c.model = model_from(*m, "model");
  if (const json* t = r.child("train")) c.train = train_from(*t, "train", c.train);
  if (const json* e = r.child("eval")) c.eval = eval_from(*e, "eval");
  r.field("train_subsets", c.train_subsets);
  r.finish();
  return resolve(std::move(c));
}

RunConfig resolve(RunConfig c) {
  c.model.encoder = c.encoder;
  c.model.fusion.model_dim = c.encoder.model_dim;
  c.train.seed = derive_seed(c.seed, "train");
  std::set<std::string> names;
  for (SubsetPreset& s : c.subsets) {
    if (!names.insert(s.name).second) throw ConfigError("subsets: duplicate name '" + s.name + "'");
    s.world.subset = s.name;
    s.world.grid = c.encoder.grid;
    s.world.latent_dim = c.encoder.latent_dim;
    s.world.seed = derive_seed(c.seed, "subset/" + s.name);
    validate(s.world);
    validate(s.thresholds);
  }
  for (const std::string& t : c.train_subsets) {
    if (!names.count(t)) throw ConfigError("train_subsets: unknown subset '" + t + "'");
  }
  if (c.eval.beta_grid.empty()) throw ConfigError("eval.beta_grid: must not be empty");
  if (c.eval.threads == 0) throw ConfigError("eval.threads: must be >= 1");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string config_hash(const ojson& j) {
  ojson keyed = j;
  keyed.erase("out");
  keyed.erase("config_hash");
  const std::uint64_t h = fnv1a64(keyed.dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const RunConfig& c) { return config_hash(to_json(c)); }

}  // namespace anchorcir
