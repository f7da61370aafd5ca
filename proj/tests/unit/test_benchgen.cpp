#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "anchorcir/benchgen.hpp"
#include "anchorcir/errors.hpp"
#include "anchorcir/random.hpp"
#include "helpers.hpp"

using namespace anchorcir;

namespace {

// Rules written out pair by pair with no shared state.
PairList brute_force_filter(const std::vector<std::int64_t>& ids, const std::vector<std::vector<double>>& emb,
                            const FilterThresholds& thr) {
  PairList out;
  if (ids.size() < thr.valid) return out;
  std::set<std::size_t> dropped;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::size_t neighbours = 0;
    for (std::size_t j = 0; j < ids.size(); ++j)
      if (i != j && cosine_sim(emb[i], emb[j]) > thr.centric) ++neighbours;
    if (neighbours >= thr.count) dropped.insert(i);
  }
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (i == j || dropped.count(i) || dropped.count(j)) continue;
      if (cosine_sim(emb[i], emb[j]) > thr.high) continue;
      out.emplace_back(ids[i], ids[j]);
    }
  return out;
}

// Clustered unit vectors so that every rule fires on some sets.
std::vector<std::vector<double>> clustered_set(std::size_t n, Rng& rng) {
  const auto centre = rng.unit_vector(6);
  const double spread = rng.uniform(0.1, 0.9);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(centre.begin(), centre.end());
    for (double& x : v) x += rng.normal(0.0, spread);
    out.push_back(l2_normalize(v));
  }
  return out;
}

Tensor stack(const std::vector<std::vector<double>>& rows) {
  Tensor t(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), t.row(i).begin());
  return t;
}

const SubsetData& tiny_subset() {
  static const SubsetData data =
      generate_subset(testing::tiny_preset(), make_frozen_encoders(testing::tiny_model_config().encoder, 1));
  return data;
}

}  // namespace

TEST_SUITE("benchgen") {

TEST_CASE("presets carry the published filtering thresholds") {
  const auto presets = default_subset_presets();
  REQUIRE(presets.size() == 4);
  CHECK(presets[0].name == "fashion");
  CHECK(presets[0].thresholds == FilterThresholds{8, 0.92, 0.88, 3});
  CHECK(presets[1].name == "car");
  CHECK(presets[1].thresholds == FilterThresholds{10, 0.88, 0.85, 2});
  CHECK(presets[2].name == "product");
  CHECK(presets[2].thresholds == FilterThresholds{20, 0.88, 0.85, 2});
  CHECK(presets[3].name == "landmark");
  CHECK(presets[3].thresholds == FilterThresholds{15, 0.90, 0.88, 3});
  for (const auto& p : presets) {
    CHECK(thresholds_for(p.name) == p.thresholds);
    CHECK(p.world.subset == p.name);
    CHECK(p.world.images_per_instance >= p.thresholds.valid);
  }
  CHECK_THROWS_AS(thresholds_for("shoes"), ConfigError);
}

TEST_CASE("threshold validation") {
  CHECK_THROWS_AS(validate(FilterThresholds{1, 0.9, 0.8, 1}), ConfigError);
  CHECK_THROWS_AS(validate(FilterThresholds{2, 0.8, 0.9, 1}), ConfigError);
  CHECK_THROWS_AS(validate(FilterThresholds{2, 1.0, 0.9, 1}), ConfigError);
  CHECK_THROWS_AS(validate(FilterThresholds{2, 0.9, 0.8, 0}), ConfigError);
  CHECK_NOTHROW(validate(FilterThresholds{2, 0.9, 0.9, 1}));
}

TEST_CASE("filter matches the brute-force oracle") {
  Rng rng(51);
  const auto presets = default_subset_presets();
  std::size_t nonempty = 0;
  for (int trial = 0; trial < 50; ++trial) {
    FilterThresholds thr = presets[trial % 4].thresholds;
    thr.valid = 2 + trial % 5;
    const std::size_t n = 1 + rng.index(10);
    std::vector<std::int64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = 100 + static_cast<std::int64_t>(3 * i);
    const auto emb = clustered_set(n, rng);
    const PairList got = filter_pairs(ids, stack(emb), thr);
    CHECK(got == brute_force_filter(ids, emb, thr));
    if (!got.empty()) ++nonempty;
  }
  CHECK(nonempty > 10);
}

TEST_CASE("filter boundary cases") {
  const FilterThresholds fashion = thresholds_for("fashion");
  Rng rng(52);
  std::vector<std::int64_t> ids(fashion.valid - 1);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
  // Mutually orthogonal images would all pass if the set were large enough.
  Tensor ortho(ids.size(), 16);
  for (std::size_t i = 0; i < ids.size(); ++i) ortho(i, i) = 1.0;
  CHECK(filter_pairs(ids, ortho, fashion).empty());

  // Two images at similarity 0.95 exceed the near-duplicate cutoff; a third is far away.
  FilterThresholds thr = fashion;
  thr.valid = 3;
  const double s = 0.95;
  const Tensor emb = Tensor::from_rows({{1, 0, 0}, {s, std::sqrt(1 - s * s), 0}, {0, 0, 1}});
  const std::vector<std::int64_t> three{7, 8, 9};
  const PairList got = filter_pairs(three, emb, thr);
  CHECK(std::find(got.begin(), got.end(), std::pair<std::int64_t, std::int64_t>{7, 8}) == got.end());
  CHECK(std::find(got.begin(), got.end(), std::pair<std::int64_t, std::int64_t>{7, 9}) != got.end());
  CHECK(got.size() == 4);
}

TEST_CASE("filtering survivors again changes nothing") {
  Rng rng(53);
  std::size_t checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const FilterThresholds thr{3, 0.9, 0.85, 2};
    const std::size_t n = 4 + rng.index(8);
    std::vector<std::int64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int64_t>(i);
    const auto emb = clustered_set(n, rng);
    const PairList first = filter_pairs(ids, stack(emb), thr);
    std::set<std::int64_t> survivors;
    for (const auto& [a, b] : first) survivors.insert(a), survivors.insert(b);
    if (survivors.size() < thr.valid) continue;
    std::vector<std::int64_t> sub_ids(survivors.begin(), survivors.end());
    std::vector<std::vector<double>> sub_emb;
    for (std::int64_t id : sub_ids) sub_emb.push_back(emb[static_cast<std::size_t>(id)]);
    CHECK(filter_pairs(sub_ids, stack(sub_emb), thr) == first);
    ++checked;
  }
  CHECK(checked > 10);
}

TEST_CASE("world generation") {
  const SubsetData& d = tiny_subset();
  const WorldConfig& c = d.world.config;
  const std::size_t instances = c.n_categories * (c.instances_per_category + c.reserve_instances_per_category);
  CHECK(d.world.instances.size() == instances);
  CHECK(d.world.images.size() == instances * c.images_per_instance);
  CHECK(d.world.identities.rows() == instances);
  for (std::size_t i = 0; i < d.world.images.size(); ++i) {
    const SyntheticImage& img = d.world.images[i];
    CHECK(img.image_id == static_cast<std::int64_t>(i));
    CHECK(img.bbox.valid());
    const auto inside = patches_inside(img.bbox, img.grid);
    REQUIRE_FALSE(inside.empty());
    // Patches in the box carry the identity; the rest do not.
    const auto identity = d.world.identities.row(static_cast<std::size_t>(img.instance_id));
    double in_corr = 0.0;
    for (std::size_t n : inside) in_corr += cosine_sim(img.latents.row(n), identity);
    in_corr /= static_cast<double>(inside.size());
    CHECK(in_corr > 0.8);
  }
  CHECK(generate_world(c) == d.world);
  WorldConfig other = c;
  other.seed = c.seed + 1;
  const World w2 = generate_world(other);
  std::size_t close = 0;
  for (std::size_t i = 0; i < instances; ++i)
    if (cosine_sim(w2.identities.row(i), d.world.identities.row(i)) > 0.99) ++close;
  CHECK(close == 0);
}

TEST_CASE("quadruples split cleanly by instance") {
  const SubsetData& d = tiny_subset();
  const auto& q = d.quadruples;
  REQUIRE_FALSE(q.train.empty());
  REQUIRE_FALSE(q.test.empty());
  std::set<std::int64_t> train_ids, test_ids;
  for (const Quadruple& x : q.train) train_ids.insert(x.instance_id);
  for (const Quadruple& x : q.test) test_ids.insert(x.instance_id);
  for (std::int64_t id : test_ids) CHECK(train_ids.count(id) == 0);
  const auto main_instances = static_cast<double>(d.world.config.n_categories * d.world.config.instances_per_category);
  CHECK(std::abs(static_cast<double>(test_ids.size()) - 0.2 * main_instances) <= 1.0);
  for (const auto* part : {&q.train, &q.test}) {
    for (const Quadruple& x : *part) {
      const SyntheticImage& ref = d.world.image(x.ref_image_id);
      const SyntheticImage& tgt = d.world.image(x.target_image_id);
      CHECK(ref.instance_id == x.instance_id);
      CHECK(tgt.instance_id == x.instance_id);
      CHECK(x.ref_image_id != x.target_image_id);
      CHECK(x.bbox == ref.bbox);
      CHECK(x.text_context_id == tgt.context_id);
      CHECK(x.category_id == ref.category_id);
      CHECK(x.subset == "fashion");
    }
  }
}

TEST_CASE("gallery invariants") {
  const SubsetData& d = tiny_subset();
  CHECK(check_gallery(d.gallery, d.quadruples.test) == "");
  std::set<std::int64_t> targets;
  for (const Quadruple& q : d.quadruples.test) targets.insert(q.target_image_id);
  std::size_t flagged = 0;
  for (const GalleryEntry& e : d.gallery.entries) flagged += e.is_target ? 1 : 0;
  CHECK(flagged == targets.size());
  CHECK(d.gallery.entries.size() == targets.size() + 10);

  GalleryManifest broken = d.gallery;
  broken.entries.pop_back();
  broken.entries.erase(broken.entries.begin());
  CHECK(check_gallery(broken, d.quadruples.test) != "");
  broken = d.gallery;
  for (GalleryEntry& e : broken.entries)
    if (!e.is_target) {
      e.instance_id = d.quadruples.test[0].instance_id;
      break;
    }
  CHECK(check_gallery(broken, d.quadruples.test).find("shares instance") != std::string::npos);
}

TEST_CASE("gallery is byte-identical under a seed") {
  const SubsetData& d = tiny_subset();
  auto bytes = [&](std::uint64_t seed) {
    std::ostringstream os;
    write_gallery(os, build_gallery(d.quadruples.test, d.world, 10, seed), {seed, "h"});
    return os.str();
  };
  CHECK(bytes(4) == bytes(4));
  CHECK(bytes(4) != bytes(5));
}

TEST_CASE("distractor histogram follows the query histogram") {
  const SubsetData& d = tiny_subset();
  // Two query categories with equal weight when the test set is balanced; force it.
  std::vector<Quadruple> test;
  std::map<std::int64_t, std::size_t> per_cat;
  for (const Quadruple& q : d.quadruples.test)
    if (per_cat[q.category_id] < 2) {
      test.push_back(q);
      ++per_cat[q.category_id];
    }
  REQUIRE(per_cat.size() == 2);
  for (std::size_t n : {2u, 4u, 6u, 7u}) {
    const GalleryManifest g = build_gallery(test, d.world, n, 9);
    std::map<std::int64_t, std::size_t> hist;
    for (const GalleryEntry& e : g.entries)
      if (!e.is_target) ++hist[e.category_id];
    for (const auto& [cat, count] : per_cat) {
      const double expect = static_cast<double>(n) * static_cast<double>(count) / static_cast<double>(test.size());
      CHECK(std::abs(static_cast<double>(hist[cat]) - expect) <= 1.0);
    }
    CHECK(check_gallery(g, test) == "");
  }
}

TEST_CASE("gallery errors name the missing category") {
  const SubsetData& d = tiny_subset();
  std::vector<Quadruple> test = d.quadruples.test;
  test[0].category_id = 42;
  try {
    build_gallery(test, d.world, 10, 1);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("42") != std::string::npos);
  }
  CHECK_THROWS_AS(build_gallery(d.quadruples.test, d.world, 100000, 1), DataError);
}

TEST_CASE("box perturbation") {
  const BBox box{0.25, 0.25, 0.75, 0.75};
  CHECK(perturb_bbox(box, PerturbMode::scale, 1.0, 3) == box);
  CHECK(perturb_bbox(box, PerturbMode::scale_shift, 1.0, 3) == box);
  CHECK_THROWS_AS(perturb_bbox(box, PerturbMode::scale, 0.0, 3), ContractError);
  CHECK_THROWS_AS(perturb_bbox(box, PerturbMode::scale, 1.2, 3), ContractError);

  // Nested centred boxes: IoU is the area ratio, so a shrunk side is √0.8 of the original.
  const BBox shrunk{0.5 - 0.25 * std::sqrt(0.8), 0.5 - 0.25 * std::sqrt(0.8), 0.5 + 0.25 * std::sqrt(0.8),
                    0.5 + 0.25 * std::sqrt(0.8)};
  CHECK(iou(box, shrunk) == doctest::Approx(0.8).epsilon(1e-12));

  auto oracle_iou = [](const BBox& a, const BBox& b) {
    const double w = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double h = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    return w * h / (a.area() + b.area() - w * h);
  };
  Rng rng(54);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const double side = rng.uniform(0.2, 0.5);
    const double x0 = rng.uniform(0.05, 0.95 - side);
    const double y0 = rng.uniform(0.05, 0.95 - side);
    const BBox b{x0, y0, x0 + side, y0 + side * 0.8};
    for (double target : {0.8, 0.5}) {
      const BBox s = perturb_bbox(b, PerturbMode::scale, target, seed);
      CHECK(s.valid());
      CHECK(std::abs(oracle_iou(b, s) - target) <= 0.02);
      CHECK(s.center_x() == doctest::Approx(b.center_x()));
      CHECK(s.center_y() == doctest::Approx(b.center_y()));
      const BBox t = perturb_bbox(b, PerturbMode::scale_shift, target, seed);
      CHECK(t.valid());
      CHECK(std::abs(oracle_iou(b, t) - target) <= 0.02);
    }
  }
  CHECK(perturb_bbox(box, PerturbMode::scale_shift, 0.5, 8) == perturb_bbox(box, PerturbMode::scale_shift, 0.5, 8));
}

TEST_CASE("files round-trip with provenance") {
  const SubsetData& d = tiny_subset();
  const Provenance prov{77, "abcdef0123456789"};
  std::stringstream ws;
  write_world(ws, d.world, prov);
  Provenance back;
  CHECK(read_world(ws, &back) == d.world);
  CHECK(back.seed == 77);
  CHECK(back.config_hash == prov.config_hash);

  std::stringstream qs;
  write_quadruples(qs, d.quadruples.test, prov);
  CHECK(read_quadruples(qs) == d.quadruples.test);

  std::stringstream gs;
  write_gallery(gs, d.gallery, prov);
  CHECK(read_gallery(gs) == d.gallery);

  std::stringstream bad("not a world file");
  CHECK_THROWS_AS(read_world(bad), DataError);
  std::stringstream bad_lines("{\"kind\":\"gallery\"}\n{oops\n");
  CHECK_THROWS_AS(read_gallery(bad_lines), DataError);
}

}  // TEST_SUITE
