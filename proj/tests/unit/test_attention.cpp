#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "anchorcir/caam.hpp"
#include "anchorcir/errors.hpp"
#include "anchorcir/fusion.hpp"
#include "anchorcir/layers.hpp"
#include "anchorcir/optim.hpp"
#include "anchorcir/random.hpp"

using namespace anchorcir;

namespace {

struct Qkv {
  Tensor q, k, v;
};

Qkv random_qkv(std::size_t nq, std::size_t nk, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return {rng.gaussian(nq, d, 1.0), rng.gaussian(nk, d, 1.0), rng.gaussian(nk, d, 1.0)};
}

// Attention weights from a plain loop: softmax((q·k + β m) / √d).
Tensor oracle_weights(const Qkv& x, std::span<const double> mask, double beta) {
  const double d = static_cast<double>(x.q.cols());
  Tensor w(x.q.rows(), x.k.rows());
  for (std::size_t i = 0; i < x.q.rows(); ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < x.k.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < x.q.cols(); ++c) s += x.q(i, c) * x.k(j, c);
      w(i, j) = (s + beta * mask[j]) / std::sqrt(d);
      mx = std::max(mx, w(i, j));
    }
    double z = 0.0;
    for (std::size_t j = 0; j < x.k.rows(); ++j) z += (w(i, j) = std::exp(w(i, j) - mx));
    for (std::size_t j = 0; j < x.k.rows(); ++j) w(i, j) /= z;
  }
  return w;
}

double focus(const Tensor& w, std::span<const double> mask) {
  double total = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) total += w(i, j) * mask[j];
  return total / static_cast<double>(w.rows());
}

Tensor run_modulated(const Qkv& x, std::span<const double> mask, double beta, Tensor* weights = nullptr) {
  Tape tape;
  const Var out = modulated_attention(tape.constant(x.q), tape.constant(x.k), tape.constant(x.v), mask,
                                      tape.constant(Tensor::scalar(beta)),
                                      static_cast<double>(x.q.cols()), weights);
  return out.value();
}

}  // namespace

TEST_SUITE("fusion") {

TEST_CASE("region mask on small grids") {
  const RegionMask m = region_mask_from_bbox({0.0, 0.0, 0.5, 0.5}, {4, 4});
  const std::vector<double> expect{1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  CHECK(std::equal(m.values().begin(), m.values().end(), expect.begin()));
  CHECK(m.count() == 4);

  const RegionMask full = region_mask_from_bbox({0.0, 0.0, 1.0, 1.0}, {2, 2});
  CHECK(full.count() == 4);
  // A box between patch centers covers none of them.
  CHECK_THROWS_AS(region_mask_from_bbox({0.3, 0.3, 0.7, 0.7}, {2, 2}), DegenerateInputError);
  CHECK_THROWS_AS(region_mask_from_bbox({0.5, 0.5, 0.2, 0.9}, {2, 2}), ContractError);
  CHECK_THROWS_AS(RegionMask({2, 2}, {0, 0, 0, 0}), DegenerateInputError);
}

TEST_CASE("modulated attention matches the loop oracle") {
  const Qkv x = random_qkv(3, 6, 4, 21);
  const std::vector<double> mask{0, 1, 1, 0, 0, 1};
  for (double beta : {0.0, 0.7, 3.0}) {
    Tensor w;
    const Tensor out = run_modulated(x, mask, beta, &w);
    const Tensor ref = oracle_weights(x, mask, beta);
    CHECK(max_abs_diff(w, ref) < 1e-12);
    CHECK(max_abs_diff(out, matmul(ref, x.v)) < 1e-12);
  }
}

TEST_CASE("zero beta reduces to plain attention") {
  const Qkv x = random_qkv(4, 9, 8, 22);
  const std::vector<double> mask{1, 0, 0, 1, 1, 0, 0, 0, 1};
  Tape tape;
  const Tensor plain = attention(tape.constant(x.q), tape.constant(x.k), tape.constant(x.v), 8.0).value();
  CHECK(max_abs_diff(run_modulated(x, mask, 0.0), plain) <= 1e-15);
}

TEST_CASE("large beta concentrates all weight on the region") {
  const Qkv x = random_qkv(5, 16, 8, 23);
  std::vector<double> mask(16, 0.0);
  mask[3] = mask[4] = mask[9] = 1.0;
  Tensor w;
  run_modulated(x, mask, 200.0, &w);
  CHECK(focus(w, mask) >= 0.999);
}

TEST_CASE("focus grows with beta") {
  const Qkv x = random_qkv(3, 12, 6, 24);
  std::vector<double> mask(12, 0.0);
  mask[0] = mask[5] = mask[7] = 1.0;
  double prev = -1.0;
  for (double beta = 0.0; beta <= 30.0; beta += 1.5) {
    Tensor w;
    run_modulated(x, mask, beta, &w);
    const double f = focus(w, mask);
    CHECK(f >= prev - 1e-15);
    prev = f;
  }
}

TEST_CASE("permuting keys, values and mask together leaves the output unchanged") {
  const Qkv x = random_qkv(2, 7, 5, 25);
  const std::vector<double> mask{0, 1, 0, 1, 1, 0, 0};
  const std::vector<std::size_t> perm{6, 2, 4, 0, 1, 5, 3};
  Qkv y = x;
  std::vector<double> pmask(7);
  for (std::size_t j = 0; j < 7; ++j) {
    for (std::size_t c = 0; c < 5; ++c) {
      y.k(j, c) = x.k(perm[j], c);
      y.v(j, c) = x.v(perm[j], c);
    }
    pmask[j] = mask[perm[j]];
  }
  CHECK(max_abs_diff(run_modulated(x, mask, 2.5), run_modulated(y, pmask, 2.5)) < 1e-12);
}

TEST_CASE("gradient reaches beta and matches finite differences") {
  const Qkv x = random_qkv(3, 6, 4, 26);
  const std::vector<double> mask{1, 0, 0, 1, 0, 0};
  Rng rng(27);
  const Tensor w = rng.gaussian(3, 4, 1.0);
  auto loss = [&](const Tensor& beta, Tape& tape, Var* b) {
    *b = tape.leaf(beta);
    const Var out = modulated_attention(tape.constant(x.q), tape.constant(x.k), tape.constant(x.v), mask, *b, 4.0);
    return ad::sum(ad::mul(out, tape.constant(w)));
  };
  for (const Tensor& beta0 : {Tensor::scalar(0.0), Tensor::scalar(1.3), Tensor::from_rows({{0.2}, {1.0}, {-0.5}})}) {
    Tape tape;
    Var b;
    tape.backward(loss(beta0, tape, &b));
    const Tensor g = tape.grad(b);
    double mag = 0.0;
    for (double v : g.data()) mag += std::abs(v);
    CHECK(mag > 1e-8);
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& bt) {
          Tape t;
          Var bb;
          return loss(bt, t, &bb).value().item();
        },
        beta0, 1e-6);
    CHECK(max_relative_error(g, fd, 1e-6) < 1e-5);
  }
}

TEST_CASE("multi-head attention shares beta across heads") {
  Rng rng(28);
  const AttentionShape shape{2, 4};
  const AttentionParams p = make_attention(8, shape, rng);
  const Tensor x = rng.gaussian(3, 8, 1.0);
  const Tensor src = rng.gaussian(6, 8, 1.0);
  std::vector<double> mask{0, 1, 1, 0, 0, 0};
  Tape tape;
  ParamBinder bind(tape, false);
  const KeyValue kv = project_key_value(bind, tape.constant(src), p);
  Tensor w0, w1;
  multi_head_attention(bind, tape.constant(x), kv, p, shape, mask, tape.constant(Tensor::scalar(0.0)), &w0);
  multi_head_attention(bind, tape.constant(x), kv, p, shape, mask, tape.constant(Tensor::scalar(50.0)), &w1);
  CHECK(focus(w1, mask) > focus(w0, mask));
  CHECK(focus(w1, mask) >= 0.999);
}

TEST_CASE("layer parameter counts") {
  Rng rng(29);
  CHECK(parameter_count(make_linear(3, 5, rng)) == 20);
  CHECK(parameter_count(make_layer_norm(7)) == 14);
  const AttentionShape shape{2, 4};
  CHECK(parameter_count(make_attention(8, shape, rng)) == 3 * (8 * 8 + 8) + (8 * 8 + 8));
  CHECK(parameter_count(make_feed_forward(8, 16, rng)) == 8 * 16 + 16 + 16 * 8 + 8);
}

}  // TEST_SUITE

TEST_SUITE("caam") {

namespace {

struct CaamFixture {
  FusionParams fusion;
  CaamParams caam;
  Tensor patches;
  Tensor text;
};

CaamFixture make_caam_fixture(CaamConfig cfg, std::uint64_t seed = 30) {
  Rng rng(seed);
  FusionConfig fc;
  fc.model_dim = 16;
  fc.head_dim = 16;
  fc.ffn_dim = 32;
  fc.n_queries = 4;
  cfg.crm_head_dim = 16;
  cfg.crm_ffn_dim = 32;
  CaamFixture f{make_fusion_params(fc, rng), {}, rng.gaussian(16, 16, 1.0), rng.gaussian(4, 16, 1.0)};
  f.caam = make_caam_params(cfg, f.fusion, rng);
  return f;
}

Tensor beta_of(const CaamFixture& f) {
  Tape tape;
  ParamBinder bind(tape, false);
  const Var p = tape.constant(f.patches);
  const PatchKeyValues kv = project_patches(bind, f.fusion, p);
  return predict_beta(bind, f.fusion, f.caam, p, kv, tape.constant(f.text)).value();
}

}  // namespace

TEST_CASE("zero-initialized head starts at beta zero") {
  for (ModulationForm form : {ModulationForm::scalar, ModulationForm::vector}) {
    CaamConfig cfg;
    cfg.form = form;
    const CaamFixture f = make_caam_fixture(cfg);
    const Tensor b = beta_of(f);
    CHECK(b.rows() == (form == ModulationForm::scalar ? 1u : 4u));
    CHECK(b.cols() == 1);
    for (double v : b.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("average CRM is the token mean") {
  CaamConfig cfg;
  cfg.crm = CrmKind::average;
  cfg.n_probes = 3;
  const CaamFixture f = make_caam_fixture(cfg);
  Rng rng(31);
  const Tensor tokens = rng.gaussian(4, 16, 1.0);
  Tape tape;
  ParamBinder bind(tape, false);
  const Tensor out = crm_forward(bind, tape.constant(tokens), f.caam).value();
  CHECK(max_abs_diff(out, mean_rows(tokens)) < 1e-15);
  CHECK_THROWS_AS(crm_forward(bind, tape.constant(rng.gaussian(3, 16, 1.0)), f.caam), DimensionError);
}

TEST_CASE("beta responds to the text and the image") {
  for (CrmKind crm : {CrmKind::average, CrmKind::mlp, CrmKind::transformer}) {
    CaamConfig cfg;
    cfg.crm = crm;
    CaamFixture f = make_caam_fixture(cfg);
    Rng rng(32);
    f.caam.head = make_linear(16, 1, rng);
    const double b0 = beta_of(f).item();
    CaamFixture g = f;
    g.text = rng.gaussian(4, 16, 1.0);
    CHECK(std::abs(beta_of(g).item() - b0) > 1e-9);
    CaamFixture h = f;
    h.patches = rng.gaussian(16, 16, 1.0);
    CHECK(std::abs(beta_of(h).item() - b0) > 1e-9);
  }
}

TEST_CASE("parameter counts follow the configuration") {
  for (CrmKind crm : {CrmKind::average, CrmKind::mlp, CrmKind::transformer}) {
    for (std::size_t layers : {1u, 2u, 3u}) {
      for (ModulationForm form : {ModulationForm::scalar, ModulationForm::vector}) {
        for (bool shared : {true, false}) {
          CaamConfig cfg;
          cfg.crm = crm;
          cfg.crm_layers = layers;
          cfg.form = form;
          cfg.shared_encoder = shared;
          cfg.n_probes = 4 + layers;
          const CaamFixture f = make_caam_fixture(cfg);
          CHECK(parameter_count(f.caam) == expected_parameter_count(f.caam.config, f.fusion.config));
        }
      }
    }
  }
  CaamConfig small;
  small.crm_layers = 1;
  CaamConfig big;
  big.crm_layers = 3;
  CHECK(parameter_count(make_caam_fixture(small).caam) < parameter_count(make_caam_fixture(big).caam));
}

TEST_CASE("kind names round-trip") {
  for (CrmKind k : {CrmKind::average, CrmKind::mlp, CrmKind::transformer}) CHECK(parse_crm_kind(to_string(k)) == k);
  for (ModulationForm m : {ModulationForm::scalar, ModulationForm::vector})
    CHECK(parse_modulation_form(to_string(m)) == m);
  CHECK_THROWS_AS(parse_crm_kind("lstm"), ConfigError);
}

}  // TEST_SUITE
