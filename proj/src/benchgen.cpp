#include "anchorcir/benchgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>
#include <set>

#include <json.hpp>

#include "anchorcir/config.hpp"
#include "anchorcir/errors.hpp"
#include "anchorcir/fusion.hpp"
#include "anchorcir/random.hpp"

namespace anchorcir {

void validate(const FilterThresholds& t) {
  if (!(t.centric > 0.0 && t.centric <= t.high && t.high < 1.0)) {
    throw ConfigError("thresholds: need 0 < centric <= high < 1");
  }
  if (t.valid < 2) throw ConfigError("thresholds: valid must be >= 2");
  if (t.count < 1) throw ConfigError("thresholds: count must be >= 1");
}

void validate(const WorldConfig& cfg) {
  if (cfg.images_per_instance < 2) throw ConfigError("world: images_per_instance must be >= 2");
  if (cfg.noise < 0.0) throw ConfigError("world: noise must be >= 0");
  if (cfg.n_categories == 0 || cfg.instances_per_category == 0) {
    throw ConfigError("world: n_categories and instances_per_category must be >= 1");
  }
  if (cfg.n_contexts < 2) throw ConfigError("world: n_contexts must be >= 2");
  if (cfg.n_scenes == 0 || cfg.scenes_per_instance == 0 || cfg.scenes_per_instance > cfg.n_scenes) {
    throw ConfigError("world: need 1 <= scenes_per_instance <= n_scenes");
  }
  if (cfg.latent_dim == 0 || cfg.grid.count() == 0) throw ConfigError("world: empty latent grid");
  if (!(cfg.bbox_min > 0.0 && cfg.bbox_min <= cfg.bbox_max && cfg.bbox_max <= 1.0)) {
    throw ConfigError("world: need 0 < bbox_min <= bbox_max <= 1");
  }
  if (cfg.scene_weight < 0.0 || cfg.scene_weight > 1.0) {
    throw ConfigError("world: scene_weight must lie in [0, 1]");
  }
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) {
    throw ConfigError("world: train_fraction must lie in (0, 1)");
  }
}

const SyntheticImage& World::image(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= images.size()) {
    throw DataError("world: no image with id " + std::to_string(id));
  }
  return images[static_cast<std::size_t>(id)];
}

namespace {

Tensor unit_rows(std::size_t n, std::size_t dim, Rng& rng) {
  Tensor t(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = rng.unit_vector(dim);
    std::copy(v.begin(), v.end(), t.row(i).begin());
  }
  return t;
}

BBox random_box(const WorldConfig& cfg, Rng& rng) {
  for (;;) {
    const double w = rng.uniform(cfg.bbox_min, cfg.bbox_max);
    const double h = rng.uniform(cfg.bbox_min, cfg.bbox_max);
    const double x0 = rng.uniform(0.0, 1.0 - w);
    const double y0 = rng.uniform(0.0, 1.0 - h);
    BBox b{x0, y0, x0 + w, y0 + h};
    if (b.valid() && !patches_inside(b, cfg.grid).empty()) return b;
  }
}

}  // namespace

World generate_world(const WorldConfig& cfg) {
  validate(cfg);
  const std::size_t d = cfg.latent_dim;
  Rng rng(cfg.seed, "benchgen/world/" + cfg.subset);
  World w;
  w.config = cfg;
  const Tensor prototypes = unit_rows(cfg.n_categories, d, rng);
  w.contexts = unit_rows(cfg.n_contexts, d, rng);
  w.scenes = unit_rows(cfg.n_scenes, d, rng);

  const std::size_t per_cat = cfg.instances_per_category + cfg.reserve_instances_per_category;
  const std::size_t n_instances = cfg.n_categories * per_cat;
  w.identities = Tensor(n_instances, d);
  std::vector<std::int64_t> scene_order(cfg.n_scenes);
  for (std::size_t i = 0; i < scene_order.size(); ++i) scene_order[i] = static_cast<std::int64_t>(i);

  std::int64_t next_instance = 0;
  for (std::size_t c = 0; c < cfg.n_categories; ++c) {
    for (std::size_t k = 0; k < per_cat; ++k) {
      InstanceRecord rec;
      rec.instance_id = next_instance++;
      rec.category_id = static_cast<std::int64_t>(c);
      rec.reserve = k >= cfg.instances_per_category;
      const auto dev = rng.unit_vector(d);
      std::vector<double> id(d);
      for (std::size_t j = 0; j < d; ++j) id[j] = prototypes(c, j) + cfg.instance_spread * dev[j];
      const auto unit = l2_normalize(id);
      std::copy(unit.begin(), unit.end(), w.identities.row(static_cast<std::size_t>(rec.instance_id)).begin());
      rng.shuffle(scene_order);
      rec.scenes.assign(scene_order.begin(), scene_order.begin() + static_cast<std::ptrdiff_t>(cfg.scenes_per_instance));
      w.instances.push_back(std::move(rec));
    }
  }

  const std::size_t n_patches = cfg.grid.count();
  for (InstanceRecord& rec : w.instances) {
    const auto identity = w.identities.row(static_cast<std::size_t>(rec.instance_id));
    for (std::size_t j = 0; j < cfg.images_per_instance; ++j) {
      SyntheticImage img;
      img.image_id = static_cast<std::int64_t>(w.images.size());
      img.instance_id = rec.instance_id;
      img.category_id = rec.category_id;
      img.scene_id = rec.scenes[j % rec.scenes.size()];
      img.context_id = static_cast<std::int64_t>(rng.index(cfg.n_contexts));
      img.grid = cfg.grid;
      img.bbox = random_box(cfg, rng);
      img.latents = Tensor(n_patches, d);
      const auto inside = patches_inside(img.bbox, cfg.grid);
      std::vector<bool> is_inside(n_patches, false);
      for (std::size_t p : inside) is_inside[p] = true;
      const auto scene = w.scenes.row(static_cast<std::size_t>(img.scene_id));
      const auto context = w.contexts.row(static_cast<std::size_t>(img.context_id));
      for (std::size_t p = 0; p < n_patches; ++p) {
        auto row = img.latents.row(p);
        for (std::size_t k = 0; k < d; ++k) {
          const double signal = is_inside[p]
                                    ? identity[k]
                                    : cfg.scene_weight * scene[k] + (1.0 - cfg.scene_weight) * context[k];
          row[k] = signal + rng.normal(0.0, cfg.noise);
        }
      }
      rec.image_ids.push_back(img.image_id);
      w.images.push_back(std::move(img));
    }
  }
  return w;
}

Tensor pooled_embeddings(const World& world, const FrozenEncoders& enc) {
  Tensor out(world.images.size(), enc.config.model_dim);
  for (std::size_t i = 0; i < world.images.size(); ++i) {
    const Tensor pooled = mean_rows(encode_image(world.images[i], enc));
    const auto unit = l2_normalize(pooled.row(0));
    std::copy(unit.begin(), unit.end(), out.row(i).begin());
  }
  return out;
}

PairList filter_pairs(std::span<const std::int64_t> image_ids, const Tensor& embeddings,
                      const FilterThresholds& thr) {
  validate(thr);
  if (embeddings.rows() != image_ids.size()) {
    throw DimensionError("filter_pairs: " + std::to_string(image_ids.size()) + " ids but " +
                         std::to_string(embeddings.rows()) + " embeddings");
  }
  const std::size_t n = image_ids.size();
  PairList out;
  if (n < thr.valid) return out;
  const Tensor sim = matmul_bt(embeddings, embeddings);
  std::vector<bool> removed(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t close = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && sim(i, j) > thr.centric) ++close;
    }
    removed[i] = close >= thr.count;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (removed[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || removed[j] || sim(i, j) > thr.high) continue;
      out.emplace_back(image_ids[i], image_ids[j]);
    }
  }
  return out;
}

QuadrupleSplit make_quadruples(const std::map<std::int64_t, PairList>& pairs, const World& world) {
  const WorldConfig& cfg = world.config;
  // Test instances are dealt round-robin over categories so every category is queried.
  std::map<std::int64_t, std::vector<std::int64_t>> by_category;
  std::size_t n_main = 0;
  for (const InstanceRecord& rec : world.instances) {
    if (rec.reserve) continue;
    by_category[rec.category_id].push_back(rec.instance_id);
    ++n_main;
  }
  Rng rng(cfg.seed, "benchgen/split/" + cfg.subset);
  for (auto& [cat, ids] : by_category) rng.shuffle(ids);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n_main)));
  std::set<std::int64_t> test_set;
  for (std::size_t round = 0; test_set.size() < n_main - n_train; ++round) {
    for (auto& [cat, ids] : by_category) {
      if (round < ids.size() && test_set.size() < n_main - n_train) test_set.insert(ids[round]);
    }
  }

  QuadrupleSplit split;
  for (const InstanceRecord& rec : world.instances) {
    if (rec.reserve) continue;
    const auto it = pairs.find(rec.instance_id);
    if (it == pairs.end()) continue;
    PairList usable;
    for (const auto& [ref, tgt] : it->second) {
      const SyntheticImage& a = world.image(ref);
      const SyntheticImage& b = world.image(tgt);
      if (a.instance_id != rec.instance_id || b.instance_id != rec.instance_id) {
        throw DataError("make_quadruples: pair (" + std::to_string(ref) + ", " + std::to_string(tgt) +
                        ") is not inside instance " + std::to_string(rec.instance_id));
      }
      if (a.scene_id == b.scene_id && a.context_id != b.context_id) usable.emplace_back(ref, tgt);
    }
    rng.shuffle(usable);
    const bool is_train = test_set.count(rec.instance_id) == 0;
    const std::size_t cap = is_train ? cfg.train_pairs_per_instance : cfg.pairs_per_instance;
    if (usable.size() > cap) usable.resize(cap);
    auto& dest = is_train ? split.train : split.test;
    for (const auto& [ref, tgt] : usable) {
      const SyntheticImage& a = world.image(ref);
      const SyntheticImage& b = world.image(tgt);
      dest.push_back({ref, a.bbox, b.context_id, tgt, rec.instance_id, rec.category_id, cfg.subset});
    }
  }
  return split;
}

GalleryManifest build_gallery(std::span<const Quadruple> test, const World& world,
                              std::size_t n_distractors, std::uint64_t seed) {
  GalleryManifest g;
  g.subset = world.config.subset;
  std::set<std::int64_t> seen;
  std::map<std::int64_t, std::size_t> query_hist;
  for (const Quadruple& q : test) {
    ++query_hist[q.category_id];
    if (seen.insert(q.target_image_id).second) {
      const SyntheticImage& img = world.image(q.target_image_id);
      g.entries.push_back({img.image_id, img.instance_id, img.category_id, true});
    }
  }
  if (n_distractors == 0 || test.empty()) return g;

  // Largest-remainder apportionment of the distractor budget over query categories.
  const double total = static_cast<double>(test.size());
  std::vector<std::pair<std::int64_t, std::size_t>> alloc;
  std::vector<std::pair<double, std::int64_t>> remainders;
  std::size_t assigned = 0;
  for (const auto& [cat, count] : query_hist) {
    const double share = static_cast<double>(n_distractors) * static_cast<double>(count) / total;
    const auto base = static_cast<std::size_t>(std::floor(share));
    alloc.emplace_back(cat, base);
    remainders.emplace_back(share - static_cast<double>(base), cat);
    assigned += base;
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n_distractors; ++i, ++assigned) {
    const std::int64_t cat = remainders[i % remainders.size()].second;
    for (auto& [c, n] : alloc) {
      if (c == cat) ++n;
    }
  }

  std::set<std::int64_t> target_instances;
  for (const Quadruple& q : test) target_instances.insert(q.instance_id);
  Rng rng(seed, "benchgen/gallery/" + g.subset);
  for (const auto& [cat, n] : alloc) {
    std::vector<std::int64_t> pool;
    for (const InstanceRecord& rec : world.instances) {
      if (rec.reserve && rec.category_id == cat && !target_instances.count(rec.instance_id)) {
        pool.insert(pool.end(), rec.image_ids.begin(), rec.image_ids.end());
      }
    }
    if (pool.empty()) {
      throw DataError("build_gallery: reserve pool has no images of category " + std::to_string(cat));
    }
    if (pool.size() < n) {
      throw DataError("build_gallery: category " + std::to_string(cat) + " needs " +
                      std::to_string(n) + " distractors but the reserve pool holds " +
                      std::to_string(pool.size()));
    }
    rng.shuffle(pool);
    for (std::size_t i = 0; i < n; ++i) {
      const SyntheticImage& img = world.image(pool[i]);
      g.entries.push_back({img.image_id, img.instance_id, img.category_id, false});
    }
  }
  return g;
}

std::string check_gallery(const GalleryManifest& g, std::span<const Quadruple> test) {
  std::map<std::int64_t, std::size_t> occurrences;
  for (const GalleryEntry& e : g.entries) ++occurrences[e.image_id];
  std::set<std::int64_t> targets;
  std::set<std::int64_t> target_instances;
  std::set<std::int64_t> query_categories;
  for (const Quadruple& q : test) {
    targets.insert(q.target_image_id);
    target_instances.insert(q.instance_id);
    query_categories.insert(q.category_id);
  }
  for (std::int64_t t : targets) {
    if (occurrences[t] != 1) {
      return "target image " + std::to_string(t) + " appears " + std::to_string(occurrences[t]) + " times";
    }
  }
  for (const GalleryEntry& e : g.entries) {
    if (e.is_target != (targets.count(e.image_id) > 0)) {
      return "image " + std::to_string(e.image_id) + " has a wrong target flag";
    }
    if (e.is_target) continue;
    if (target_instances.count(e.instance_id)) {
      return "distractor " + std::to_string(e.image_id) + " shares instance " + std::to_string(e.instance_id);
    }
    if (!query_categories.count(e.category_id)) {
      return "distractor " + std::to_string(e.image_id) + " has category " +
             std::to_string(e.category_id) + " absent from the queries";
    }
  }
  return "";
}

namespace {

BBox scaled_about_center(const BBox& b, double k) {
  const double cx = b.center_x();
  const double cy = b.center_y();
  const double hw = 0.5 * b.width() * k;
  const double hh = 0.5 * b.height() * k;
  return {cx - hw, cy - hh, cx + hw, cy + hh};
}

BBox shifted(const BBox& b, double dx, double dy) { return {b.x0 + dx, b.y0 + dy, b.x1 + dx, b.y1 + dy}; }

// Largest t with the box shifted by t·(ux, uy) still inside the unit square.
double max_shift(const BBox& b, double ux, double uy) {
  double t = std::numeric_limits<double>::infinity();
  if (ux > 0) t = std::min(t, (1.0 - b.x1) / ux);
  if (ux < 0) t = std::min(t, -b.x0 / ux);
  if (uy > 0) t = std::min(t, (1.0 - b.y1) / uy);
  if (uy < 0) t = std::min(t, -b.y0 / uy);
  return std::max(0.0, t);
}

}  // namespace

BBox perturb_bbox(const BBox& box, PerturbMode mode, double target_iou, std::uint64_t seed) {
  if (!(target_iou > 0.0 && target_iou <= 1.0)) {
    throw ContractError("perturb_bbox: target IoU must lie in (0, 1]");
  }
  if (!box.valid()) throw ContractError("perturb_bbox: invalid box " + to_string(box));
  if (target_iou == 1.0) return box;
  Rng rng(seed, "benchgen/perturb");

  if (mode == PerturbMode::scale) {
    const bool grow_first = rng.uniform(0.0, 1.0) < 0.5;
    const BBox grown = scaled_about_center(box, std::sqrt(1.0 / target_iou));
    const BBox shrunk = scaled_about_center(box, std::sqrt(target_iou));
    if (grow_first && grown.valid()) return grown;
    return shrunk;
  }

  for (int attempt = 0; attempt < 256; ++attempt) {
    const double nested = target_iou + rng.uniform(0.2, 0.8) * (1.0 - target_iou);
    const bool grow = rng.uniform(0.0, 1.0) < 0.5;
    const BBox scaled = scaled_about_center(box, grow ? std::sqrt(1.0 / nested) : std::sqrt(nested));
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ux = std::cos(theta);
    const double uy = std::sin(theta);
    if (!scaled.valid()) continue;
    double hi = max_shift(scaled, ux, uy);
    if (iou(box, shifted(scaled, hi * ux, hi * uy)) > target_iou) continue;
    double lo = 0.0;
    for (int it = 0; it < 80; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (iou(box, shifted(scaled, mid * ux, mid * uy)) > target_iou) lo = mid; else hi = mid;
    }
    BBox out = shifted(scaled, lo * ux, lo * uy);
    out.x0 = std::clamp(out.x0, 0.0, 1.0);
    out.y0 = std::clamp(out.y0, 0.0, 1.0);
    out.x1 = std::clamp(out.x1, 0.0, 1.0);
    out.y1 = std::clamp(out.y1, 0.0, 1.0);
    if (out.valid() && std::abs(iou(box, out) - target_iou) <= 0.02) return out;
  }
  throw DegenerateInputError("perturb_bbox: IoU " + std::to_string(target_iou) +
                             " is infeasible for in-bounds shifts of " + to_string(box));
}

std::vector<SubsetPreset> default_subset_presets() {
  std::vector<SubsetPreset> out;
  auto add = [&](std::string name, FilterThresholds thr, std::size_t images, std::size_t contexts,
                 std::size_t instances, std::size_t reserve, std::size_t distractors) {
    SubsetPreset p;
    p.name = name;
    p.thresholds = thr;
    p.world.subset = name;
    p.world.images_per_instance = images;
    p.world.n_contexts = contexts;
    p.world.instances_per_category = instances;
    p.world.reserve_instances_per_category = reserve;
    p.gallery_distractors = distractors;
    out.push_back(std::move(p));
  };
  add("fashion", {8, 0.92, 0.88, 3}, 12, 10, 40, 20, 340);
  add("car", {10, 0.88, 0.85, 2}, 12, 12, 40, 20, 340);
  add("product", {20, 0.88, 0.85, 2}, 20, 16, 40, 12, 340);
  add("landmark", {15, 0.90, 0.88, 3}, 16, 16, 48, 15, 340);
  return out;
}

FilterThresholds thresholds_for(const std::string& subset) {
  for (const SubsetPreset& p : default_subset_presets()) {
    if (p.name == subset) return p.thresholds;
  }
  throw ConfigError("unknown subset '" + subset + "'");
}

SubsetData generate_subset(const SubsetPreset& preset, const FrozenEncoders& enc) {
  if (preset.world.latent_dim != enc.config.latent_dim || !(preset.world.grid == enc.config.grid)) {
    throw ConfigError("subset " + preset.name + ": world grid/latent_dim disagree with the encoder");
  }
  SubsetData s;
  s.name = preset.name;
  s.thresholds = preset.thresholds;
  s.world = generate_world(preset.world);
  const Tensor emb = pooled_embeddings(s.world, enc);
  std::map<std::int64_t, PairList> pairs;
  for (const InstanceRecord& rec : s.world.instances) {
    if (rec.reserve) continue;
    Tensor sub(rec.image_ids.size(), emb.cols());
    for (std::size_t i = 0; i < rec.image_ids.size(); ++i) {
      const auto src = emb.row(static_cast<std::size_t>(rec.image_ids[i]));
      std::copy(src.begin(), src.end(), sub.row(i).begin());
    }
    pairs[rec.instance_id] = filter_pairs(rec.image_ids, sub, preset.thresholds);
  }
  s.quadruples = make_quadruples(pairs, s.world);
  s.gallery = build_gallery(s.quadruples.test, s.world, preset.gallery_distractors,
                            derive_seed(preset.world.seed, "gallery"));
  return s;
}

// ---- files ----

namespace {

constexpr char kWorldMagic[8] = {'A', 'C', 'W', 'O', 'R', 'L', 'D', '1'};
constexpr std::uint32_t kWorldVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(buf, sizeof(T));
}

template <class T>
T get(std::istream& in) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T))) throw DataError("world file: truncated");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (1ULL << 32)) throw DataError("world file: implausible string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("world file: truncated");
  return s;
}

void put_tensor(std::ostream& out, const Tensor& t) {
  put<std::uint64_t>(out, t.rows());
  put<std::uint64_t>(out, t.cols());
  for (double v : t.data()) put(out, v);
}

Tensor get_tensor(std::istream& in) {
  const auto r = get<std::uint64_t>(in);
  const auto c = get<std::uint64_t>(in);
  if (r * c > (1ULL << 32)) throw DataError("world file: implausible tensor shape");
  Tensor t(r, c);
  for (double& v : t.data()) v = get<double>(in);
  return t;
}

void put_box(std::ostream& out, const BBox& b) {
  put(out, b.x0);
  put(out, b.y0);
  put(out, b.x1);
  put(out, b.y1);
}

BBox get_box(std::istream& in) {
  BBox b;
  b.x0 = get<double>(in);
  b.y0 = get<double>(in);
  b.x1 = get<double>(in);
  b.y1 = get<double>(in);
  return b;
}

nlohmann::ordered_json header(const char* kind, const Provenance& prov, std::size_t count) {
  nlohmann::ordered_json h;
  h["kind"] = kind;
  h["seed"] = prov.seed;
  h["config_hash"] = prov.config_hash;
  h["count"] = count;
  return h;
}

nlohmann::json read_header(std::istream& in, const char* kind, Provenance* prov) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(std::string(kind) + " file: missing header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string(kind) + " file: bad header: " + e.what());
  }
  if (h.value("kind", "") != kind) throw DataError(std::string(kind) + " file: wrong kind");
  if (prov != nullptr) {
    prov->seed = h.at("seed").get<std::uint64_t>();
    prov->config_hash = h.at("config_hash").get<std::string>();
  }
  return h;
}

}  // namespace

void write_world(std::ostream& out, const World& w, const Provenance& prov) {
  out.write(kWorldMagic, sizeof(kWorldMagic));
  put(out, kWorldVersion);
  put(out, prov.seed);
  put_string(out, prov.config_hash);
  put_string(out, to_json(w.config).dump());
  put_tensor(out, w.identities);
  put_tensor(out, w.contexts);
  put_tensor(out, w.scenes);
  put<std::uint64_t>(out, w.instances.size());
  for (const InstanceRecord& r : w.instances) {
    put(out, r.instance_id);
    put(out, r.category_id);
    put<std::uint8_t>(out, r.reserve ? 1 : 0);
    put<std::uint64_t>(out, r.scenes.size());
    for (auto s : r.scenes) put(out, s);
    put<std::uint64_t>(out, r.image_ids.size());
    for (auto id : r.image_ids) put(out, id);
  }
  put<std::uint64_t>(out, w.images.size());
  for (const SyntheticImage& img : w.images) {
    put(out, img.image_id);
    put(out, img.instance_id);
    put(out, img.category_id);
    put(out, img.context_id);
    put(out, img.scene_id);
    put<std::uint64_t>(out, img.grid.h);
    put<std::uint64_t>(out, img.grid.w);
    put_box(out, img.bbox);
    put_tensor(out, img.latents);
  }
}

World read_world(std::istream& in, Provenance* prov) {
  char magic[sizeof(kWorldMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kWorldMagic, sizeof(magic)) != 0) {
    throw DataError("world file: bad magic");
  }
  if (get<std::uint32_t>(in) != kWorldVersion) throw DataError("world file: unsupported version");
  Provenance p;
  p.seed = get<std::uint64_t>(in);
  p.config_hash = get_string(in);
  if (prov != nullptr) *prov = p;
  World w;
  try {
    w.config = world_config_from_json(nlohmann::json::parse(get_string(in)), "world");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("world file: bad config: ") + e.what());
  }
  w.identities = get_tensor(in);
  w.contexts = get_tensor(in);
  w.scenes = get_tensor(in);
  const auto n_inst = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n_inst; ++i) {
    InstanceRecord r;
    r.instance_id = get<std::int64_t>(in);
    r.category_id = get<std::int64_t>(in);
    r.reserve = get<std::uint8_t>(in) != 0;
    const auto ns = get<std::uint64_t>(in);
    for (std::uint64_t k = 0; k < ns; ++k) r.scenes.push_back(get<std::int64_t>(in));
    const auto ni = get<std::uint64_t>(in);
    for (std::uint64_t k = 0; k < ni; ++k) r.image_ids.push_back(get<std::int64_t>(in));
    w.instances.push_back(std::move(r));
  }
  const auto n_img = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n_img; ++i) {
    SyntheticImage img;
    img.image_id = get<std::int64_t>(in);
    img.instance_id = get<std::int64_t>(in);
    img.category_id = get<std::int64_t>(in);
    img.context_id = get<std::int64_t>(in);
    img.scene_id = get<std::int64_t>(in);
    img.grid.h = get<std::uint64_t>(in);
    img.grid.w = get<std::uint64_t>(in);
    img.bbox = get_box(in);
    img.latents = get_tensor(in);
    if (img.image_id != static_cast<std::int64_t>(i)) throw DataError("world file: image ids out of order");
    w.images.push_back(std::move(img));
  }
  return w;
}

void write_quadruples(std::ostream& out, std::span<const Quadruple> quads, const Provenance& prov) {
  out << header("quadruples", prov, quads.size()).dump() << '\n';
  for (const Quadruple& q : quads) {
    nlohmann::ordered_json j;
    j["ref_image_id"] = q.ref_image_id;
    j["bbox"] = {q.bbox.x0, q.bbox.y0, q.bbox.x1, q.bbox.y1};
    j["text_context_id"] = q.text_context_id;
    j["target_image_id"] = q.target_image_id;
    j["instance_id"] = q.instance_id;
    j["category_id"] = q.category_id;
    j["subset"] = q.subset;
    out << j.dump() << '\n';
  }
}

std::vector<Quadruple> read_quadruples(std::istream& in, Provenance* prov) {
  const auto h = read_header(in, "quadruples", prov);
  std::vector<Quadruple> out;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      Quadruple q;
      q.ref_image_id = j.at("ref_image_id").get<std::int64_t>();
      const auto& b = j.at("bbox");
      q.bbox = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
      q.text_context_id = j.at("text_context_id").get<std::int64_t>();
      q.target_image_id = j.at("target_image_id").get<std::int64_t>();
      q.instance_id = j.at("instance_id").get<std::int64_t>();
      q.category_id = j.at("category_id").get<std::int64_t>();
      q.subset = j.at("subset").get<std::string>();
      out.push_back(std::move(q));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("quadruples file: ") + e.what());
  }
  if (out.size() != h.at("count").get<std::size_t>()) throw DataError("quadruples file: count mismatch");
  return out;
}

void write_gallery(std::ostream& out, const GalleryManifest& g, const Provenance& prov) {
  auto h = header("gallery", prov, g.entries.size());
  h["subset"] = g.subset;
  out << h.dump() << '\n';
  for (const GalleryEntry& e : g.entries) {
    nlohmann::ordered_json j;
    j["image_id"] = e.image_id;
    j["instance_id"] = e.instance_id;
    j["category_id"] = e.category_id;
    j["is_target"] = e.is_target;
    out << j.dump() << '\n';
  }
}

GalleryManifest read_gallery(std::istream& in, Provenance* prov) {
  const auto h = read_header(in, "gallery", prov);
  GalleryManifest g;
  g.subset = h.value("subset", "");
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      g.entries.push_back({j.at("image_id").get<std::int64_t>(), j.at("instance_id").get<std::int64_t>(),
                           j.at("category_id").get<std::int64_t>(), j.at("is_target").get<bool>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("gallery file: ") + e.what());
  }
  if (g.entries.size() != h.at("count").get<std::size_t>()) throw DataError("gallery file: count mismatch");
  return g;
}

}  // namespace anchorcir
