#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "anchorcir/checkpoint.hpp"
#include "anchorcir/config.hpp"
#include "anchorcir/errors.hpp"
#include "anchorcir/eval.hpp"
#include "anchorcir/random.hpp"
#include "helpers.hpp"

using namespace anchorcir;

namespace {

struct Fixture {
  Tensor gallery;
  GalleryLabels labels;
  std::vector<Tensor> queries;
  RankingResult expected_order;
  nlohmann::json expected;
};

Fixture load_fixture() {
  std::ifstream in(std::string(ANCHORCIR_FIXTURES) + "/ranking_5x8.json");
  REQUIRE(in.good());
  const nlohmann::json j = nlohmann::json::parse(in);
  Fixture f;
  const auto& g = j.at("gallery");
  f.gallery = Tensor(g.size(), 3);
  for (std::size_t i = 0; i < g.size(); ++i) {
    f.labels.image_ids.push_back(g[i].at("image_id"));
    f.labels.instance_ids.push_back(g[i].at("instance_id"));
    const auto e = g[i].at("embedding").get<std::vector<double>>();
    std::copy(e.begin(), e.end(), f.gallery.row(i).begin());
  }
  for (const auto& q : j.at("queries")) {
    f.queries.push_back(Tensor::row_vector(q.at("embedding").get<std::vector<double>>()));
    f.expected_order.queries.push_back(
        {q.at("target_image_id"), q.at("instance_id"), q.at("order").get<std::vector<std::size_t>>()});
  }
  f.expected = j.at("expected");
  return f;
}

std::vector<std::size_t> sort_oracle(std::span<const double> q, const Tensor& g) {
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t i = 0; i < g.rows(); ++i) keyed.emplace_back(-dot(q, g.row(i)), i);
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::size_t> out;
  for (const auto& kv : keyed) out.push_back(kv.second);
  return out;
}

const SubsetData& tiny_subset() {
  static const SubsetData data =
      generate_subset(testing::tiny_preset(), make_frozen_encoders(testing::tiny_model_config().encoder, 1));
  return data;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("fixture rankings and recalls") {
  const Fixture f = load_fixture();
  RankingResult got;
  for (std::size_t i = 0; i < f.queries.size(); ++i) {
    const auto order = rank_gallery(f.queries[i].row(0), f.gallery);
    CHECK(order == f.expected_order.queries[i].order);
    got.queries.push_back({f.expected_order.queries[i].target_image_id, f.expected_order.queries[i].instance_id, order});
  }
  CHECK(recall_at_k(got, f.labels, 1) == f.expected.at("r_at_1").get<double>());
  CHECK(recall_at_k(got, f.labels, 5) == f.expected.at("r_at_5").get<double>());
  CHECK(instance_recall_at_k(got, f.labels, 1) == f.expected.at("rid_at_1").get<double>());
  CHECK(instance_recall_at_k(got, f.labels, 5) == f.expected.at("rid_at_5").get<double>());
  CHECK(recall_at_k(got, f.labels, 8) == 1.0);
  CHECK_THROWS_AS(recall_at_k(got, f.labels, 0), ContractError);
  CHECK_THROWS_AS(recall_at_k(got, f.labels, 9), ContractError);
  CHECK_THROWS_AS(recall_at_k(RankingResult{}, f.labels, 1), ContractError);
}

TEST_CASE("ranking matches the sort oracle") {
  Rng rng(61);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t g = 1 + rng.index(20);
    Tensor gallery = l2_normalize_rows(rng.gaussian(g, 4, 1.0));
    // Duplicate rows force ties.
    if (g > 3) {
      std::copy(gallery.row(0).begin(), gallery.row(0).end(), gallery.row(g - 1).begin());
    }
    const Tensor q = l2_normalize_rows(rng.gaussian(1, 4, 1.0));
    CHECK(rank_gallery(q.row(0), gallery) == sort_oracle(q.row(0), gallery));
  }
  CHECK_THROWS_AS(rank_gallery(std::vector<double>{1.0}, Tensor()), ContractError);
}

TEST_CASE("instance recall is never below recall") {
  Rng rng(62);
  GalleryLabels labels;
  for (std::int64_t i = 0; i < 12; ++i) {
    labels.image_ids.push_back(i);
    labels.instance_ids.push_back(i / 3);
  }
  const Tensor gallery = l2_normalize_rows(rng.gaussian(12, 5, 1.0));
  RankingResult r;
  for (int q = 0; q < 30; ++q) {
    const Tensor e = l2_normalize_rows(rng.gaussian(1, 5, 1.0));
    const std::int64_t target = static_cast<std::int64_t>(rng.index(12));
    r.queries.push_back({target, target / 3, rank_gallery(e.row(0), gallery)});
  }
  for (std::size_t k : {1u, 3u, 5u, 12u}) CHECK(recall_at_k(r, labels, k) <= instance_recall_at_k(r, labels, k));
}

TEST_CASE("report checks") {
  MetricsReport ok;
  ok.r_at_1 = 0.2;
  ok.r_at_5 = 0.6;
  ok.rid_at_1 = 0.3;
  CHECK(check_report(ok) == "");
  CHECK(ok.average() == doctest::Approx(1.1 / 3.0));
  MetricsReport bad = ok;
  bad.rid_at_1 = 0.1;
  CHECK(check_report(bad) != "");
  bad = ok;
  bad.r_at_5 = 1.5;
  CHECK(check_report(bad) != "");
}

TEST_CASE("parallel evaluation equals serial") {
  const ModelParams p = make_model(testing::tiny_model_config(), 63);
  const std::vector<SubsetData> bench{tiny_subset()};
  EvalOptions serial;
  EvalOptions parallel;
  parallel.threads = 3;
  const MetricsReport a = evaluate(p, bench, serial);
  const MetricsReport b = evaluate(p, bench, parallel);
  CHECK(a == b);
  CHECK(check_report(a) == "");
  CHECK(a.subsets.size() == 1);
  CHECK(a.subsets[0].queries == tiny_subset().quadruples.test.size());
  EvalOptions perturbed = parallel;
  perturbed.perturb = PerturbMode::scale;
  perturbed.target_iou = 0.8;
  const MetricsReport c = evaluate(p, bench, perturbed);
  perturbed.threads = 1;
  CHECK(evaluate(p, bench, perturbed) == c);
  CHECK(c.subsets[0].mean_iou == doctest::Approx(0.8).epsilon(0.03));
}

TEST_CASE("tables serialize with fixed precision") {
  Table t;
  t.value_name = "beta";
  t.achieved_name = "mean_beta";
  TableRow row;
  row.label = "fixed";
  row.value = 1.0;
  row.report.r_at_1 = 0.25;
  row.report.subsets.push_back({"fashion", 0.25, 0.5, 0.5, 4, 0, 8, 1.0, 1.0});
  t.rows.push_back(row);
  const std::string csv = to_csv(t);
  CHECK(csv.rfind("label,beta,mean_beta,", 0) == 0);
  CHECK(csv.find("fixed,1.000000,0.000000,0,0.250000") != std::string::npos);
  CHECK(csv.find("fashion_rid_at_1") != std::string::npos);
}

TEST_CASE("caam grid enumerates the product") {
  const std::vector<CrmKind> crms{CrmKind::average, CrmKind::transformer};
  const bool learn[] = {true, false};
  const std::vector<std::size_t> layers{1, 2, 3};
  const std::vector<std::size_t> probes{8};
  const std::vector<ModulationForm> forms{ModulationForm::scalar};
  const auto grid = caam_grid(crms, learn, layers, probes, forms);
  CHECK(grid.size() == 12);
  CHECK(grid.front().crm == CrmKind::average);
  CHECK(grid.back().crm == CrmKind::transformer);
  CHECK(grid.back().layers == 3);
  CHECK(grid[0].label() != grid[1].label());
}

}  // TEST_SUITE

TEST_SUITE("config") {

TEST_CASE("run config round-trips through JSON") {
  RunConfig c;
  c.seed = 19;
  c.train.epochs = 3;
  c.model.caam.crm = CrmKind::mlp;
  c.eval.beta_grid = {0.0, 1.0};
  c.train_subsets = {"car"};
  const RunConfig r = resolve(c);
  const nlohmann::json j = nlohmann::json::parse(to_json(r).dump());
  const RunConfig back = resolve(run_config_from_json(j));
  CHECK(back == r);
  CHECK(config_hash(back) == config_hash(r));
  CHECK(config_hash(r).size() == 16);
  RunConfig other = r;
  other.seed = 20;
  CHECK(config_hash(resolve(other)) != config_hash(r));
}

TEST_CASE("resolve propagates seeds and dimensions") {
  RunConfig c;
  c.encoder.model_dim = 24;
  const RunConfig r = resolve(c);
  CHECK(r.model.encoder == r.encoder);
  CHECK(r.model.fusion.model_dim == 24);
  CHECK(r.train.seed == derive_seed(r.seed, "train"));
  for (const SubsetPreset& p : r.subsets) {
    CHECK(p.world.grid == r.encoder.grid);
    CHECK(p.world.seed == derive_seed(r.seed, "subset/" + p.name));
  }
  RunConfig dup = c;
  dup.subsets.push_back(dup.subsets[0]);
  CHECK_THROWS_AS(resolve(dup), ConfigError);
  RunConfig unknown = c;
  unknown.train_subsets = {"shoes"};
  CHECK_THROWS_AS(resolve(unknown), ConfigError);
}

TEST_CASE("unknown keys are rejected with their path") {
  auto message = [](const std::string& text) {
    try {
      run_config_from_json(nlohmann::json::parse(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(R"({"sede": 3})").find("unknown config key 'sede'") != std::string::npos);
  CHECK(message(R"({"train": {"epochs": 2, "lr": 0.1}})").find("'train.lr'") != std::string::npos);
  CHECK(message(R"({"model": {"caam": {"crm": "lstm"}}})") != "");
  CHECK(message(R"({"train": {"epochs": "many"}})") != "");
  CHECK(message(R"({"seed": 3})") == "");
}

}  // TEST_SUITE

TEST_SUITE("checkpoint") {

TEST_CASE("checkpoint round-trip") {
  ModelConfig cfg = testing::tiny_model_config();
  cfg.caam.form = ModulationForm::vector;
  ModelParams p = make_model(cfg, 71);
  Rng rng(72);
  p.caam.head = make_linear(16, 4, rng);
  std::stringstream ss;
  save_checkpoint(ss, p, "0123456789abcdef");
  CheckpointInfo info;
  const ModelParams back = load_checkpoint(ss, &info);
  CHECK(info.seed == 71);
  CHECK(info.config_hash == "0123456789abcdef");
  CHECK(back.config == p.config);
  std::vector<Tensor> a, b;
  p.visit([&](const std::string&, const Tensor& t, ParamGroup) { a.push_back(t); });
  back.visit([&](const std::string&, const Tensor& t, ParamGroup) { b.push_back(t); });
  CHECK(a == b);

  std::stringstream again;
  save_checkpoint(again, back, "0123456789abcdef");
  std::stringstream first;
  save_checkpoint(first, p, "0123456789abcdef");
  CHECK(again.str() == first.str());

  std::string bytes = first.str();
  bytes.resize(bytes.size() / 2);
  std::stringstream truncated(bytes);
  CHECK_THROWS_AS(load_checkpoint(truncated), DataError);
  std::stringstream junk("garbage");
  CHECK_THROWS_AS(load_checkpoint(junk), DataError);
}

}  // TEST_SUITE
