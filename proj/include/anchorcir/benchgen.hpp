#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "anchorcir/encoders.hpp"
#include "anchorcir/geometry.hpp"
#include "anchorcir/tensor.hpp"

namespace anchorcir {

struct FilterThresholds {
  std::size_t valid = 2;   // minimum set size
  double high = 0.9;       // near-duplicate pair cutoff
  double centric = 0.85;   // similarity counted towards over-centrality
  std::size_t count = 1;   // neighbours above `centric` that remove an image

  bool operator==(const FilterThresholds&) const = default;
};

void validate(const FilterThresholds& t);

struct WorldConfig {
  std::string subset = "fashion";
  std::size_t n_categories = 4;
  std::size_t instances_per_category = 10;
  std::size_t reserve_instances_per_category = 4;
  std::size_t images_per_instance = 10;
  std::size_t n_contexts = 6;
  std::size_t n_scenes = 1;
  std::size_t scenes_per_instance = 1;
  GridShape grid{8, 8};
  std::size_t latent_dim = 16;
  double noise = 0.1;
  double instance_spread = 0.8;   // deviation of an instance from its category prototype
  double scene_weight = 0.3;      // background = scene_weight·scene + (1 − scene_weight)·context
  double bbox_min = 0.3;          // box side range, fraction of the image
  double bbox_max = 0.55;
  std::size_t pairs_per_instance = 10;        // evaluation instances
  std::size_t train_pairs_per_instance = 5;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;

  bool operator==(const WorldConfig&) const = default;
};

void validate(const WorldConfig& cfg);

struct InstanceRecord {
  std::int64_t instance_id = 0;
  std::int64_t category_id = 0;
  bool reserve = false;
  std::vector<std::int64_t> scenes;
  std::vector<std::int64_t> image_ids;

  bool operator==(const InstanceRecord&) const = default;
};

struct World {
  WorldConfig config;
  Tensor identities;  // one unit row per instance (main and reserve)
  Tensor contexts;    // n_contexts × latent_dim, unit rows
  Tensor scenes;      // n_scenes × latent_dim, unit rows
  std::vector<InstanceRecord> instances;
  std::vector<SyntheticImage> images;  // image_id == index

  const SyntheticImage& image(std::int64_t id) const;
  std::span<const double> context(std::int64_t id) const { return contexts.row(static_cast<std::size_t>(id)); }
  bool operator==(const World&) const = default;
};

World generate_world(const WorldConfig& cfg);

struct Quadruple {
  std::int64_t ref_image_id = 0;
  BBox bbox;
  std::int64_t text_context_id = 0;
  std::int64_t target_image_id = 0;
  std::int64_t instance_id = 0;
  std::int64_t category_id = 0;
  std::string subset;

  bool operator==(const Quadruple&) const = default;
};

using PairList = std::vector<std::pair<std::int64_t, std::int64_t>>;

// Admissible ordered (ref, target) pairs inside one instance set. `embeddings` holds one
// unit row per entry of `image_ids`.
PairList filter_pairs(std::span<const std::int64_t> image_ids, const Tensor& embeddings,
                      const FilterThresholds& thr);

// Mean-pooled frozen-encoder embedding of every image in the world, unit rows.
Tensor pooled_embeddings(const World& world, const FrozenEncoders& enc);

struct QuadrupleSplit {
  std::vector<Quadruple> train;
  std::vector<Quadruple> test;
};

// Admissible pairs per instance (main pool only) → quadruples. A pair is used when ref and
// target share a scene and differ in context. Split 8:2 by instance.
QuadrupleSplit make_quadruples(const std::map<std::int64_t, PairList>& pairs, const World& world);

struct GalleryEntry {
  std::int64_t image_id = 0;
  std::int64_t instance_id = 0;
  std::int64_t category_id = 0;
  bool is_target = false;

  bool operator==(const GalleryEntry&) const = default;
};

struct GalleryManifest {
  std::string subset;
  std::vector<GalleryEntry> entries;

  bool operator==(const GalleryManifest&) const = default;
};

// Every distinct test target once, then `n_distractors` reserve images sampled per category
// in proportion to the query category histogram.
GalleryManifest build_gallery(std::span<const Quadruple> test, const World& world,
                              std::size_t n_distractors, std::uint64_t seed);

// Returns a description of the first violated manifest invariant, or "" if all hold.
std::string check_gallery(const GalleryManifest& g, std::span<const Quadruple> test);

enum class PerturbMode { scale, scale_shift };

BBox perturb_bbox(const BBox& box, PerturbMode mode, double target_iou, std::uint64_t seed);

// One generated subset: world, filtered quadruples and gallery.
struct SubsetData {
  std::string name;
  FilterThresholds thresholds;
  World world;
  QuadrupleSplit quadruples;
  GalleryManifest gallery;
};

struct SubsetPreset {
  std::string name;
  FilterThresholds thresholds;
  WorldConfig world;
  std::size_t gallery_distractors = 0;

  bool operator==(const SubsetPreset&) const = default;
};

// The four default subsets, in order fashion, car, product, landmark.
std::vector<SubsetPreset> default_subset_presets();
FilterThresholds thresholds_for(const std::string& subset);

SubsetData generate_subset(const SubsetPreset& preset, const FrozenEncoders& enc);

struct Provenance {
  std::uint64_t seed = 0;
  std::string config_hash;
};

void write_world(std::ostream& out, const World& world, const Provenance& prov);
World read_world(std::istream& in, Provenance* prov = nullptr);
void write_quadruples(std::ostream& out, std::span<const Quadruple> quads, const Provenance& prov);
std::vector<Quadruple> read_quadruples(std::istream& in, Provenance* prov = nullptr);
void write_gallery(std::ostream& out, const GalleryManifest& g, const Provenance& prov);
GalleryManifest read_gallery(std::istream& in, Provenance* prov = nullptr);

}  // namespace anchorcir
