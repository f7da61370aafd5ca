#include <doctest.h>

#include <cmath>
#include <functional>

#include "anchorcir/autodiff.hpp"
#include "anchorcir/errors.hpp"
#include "anchorcir/optim.hpp"
#include "anchorcir/random.hpp"

using namespace anchorcir;

namespace {

using Op = std::function<Var(Tape&, std::span<const Var>)>;

// Reduces op(inputs) to a scalar through fixed random weights, then compares the tape
// gradient of every input against central differences.
double grad_error(const Op& op, std::vector<Tensor> inputs, std::uint64_t seed = 11) {
  Tensor weights;
  auto run = [&](const std::vector<Tensor>& xs, Tape& tape, std::vector<Var>& leaves) {
    leaves.clear();
    for (const Tensor& x : xs) leaves.push_back(tape.leaf(x));
    const Var y = op(tape, leaves);
    if (weights.empty()) {
      Rng rng(seed);
      weights = rng.gaussian(y.rows(), y.cols(), 1.0);
    }
    return ad::sum(ad::mul(y, tape.constant(weights)));
  };
  Tape tape;
  std::vector<Var> leaves;
  tape.backward(run(inputs, tape, leaves));
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = tape.grad(leaves[i]);
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& xi) {
          auto xs = inputs;
          xs[i] = xi;
          Tape t;
          std::vector<Var> ls;
          return run(xs, t, ls).value().item();
        },
        inputs[i], 1e-6);
    worst = std::max(worst, max_relative_error(analytic, numeric, 1e-4));
  }
  return worst;
}

Tensor randn(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  return rng.gaussian(r, c, 1.0);
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("backward through a product") {
  Tape tape;
  const Var x = tape.leaf(Tensor::scalar(3.0));
  const Var y = tape.leaf(Tensor::scalar(4.0));
  tape.backward(ad::mul(x, y));
  CHECK(tape.grad(x).item() == 4.0);
  CHECK(tape.grad(y).item() == 3.0);
}

TEST_CASE("backward through matmul and softmax") {
  Tape tape;
  const Var a = tape.leaf(Tensor::from_rows({{1, 2}}));
  const Var b = tape.leaf(Tensor::from_rows({{3}, {4}}));
  tape.backward(ad::matmul(a, b));
  CHECK(tape.grad(a) == Tensor::from_rows({{3, 4}}));
  CHECK(tape.grad(b) == Tensor::from_rows({{1}, {2}}));

  // The softmax outputs always sum to one, so a plain sum has zero gradient.
  Tape t2;
  const Var x = t2.leaf(Tensor::from_rows({{0.3, -1.2, 2.0}}));
  t2.backward(ad::sum(ad::softmax_rows(x)));
  const Tensor gx = t2.grad(x);
  for (double g : gx.data()) CHECK(std::abs(g) < 1e-15);
}

TEST_CASE("gradients accumulate across backward calls") {
  Tape tape;
  const Var x = tape.leaf(Tensor::scalar(2.0));
  const Var y = ad::square(x);
  tape.backward(y);
  tape.backward(y);
  CHECK(tape.grad(x).item() == 8.0);
  tape.zero_grad();
  CHECK(tape.grad(x).item() == 0.0);
}

TEST_CASE("constants receive no gradient") {
  Tape tape;
  const Var c = tape.constant(Tensor::scalar(5.0));
  const Var x = tape.leaf(Tensor::scalar(1.0));
  tape.backward(ad::mul(c, x));
  CHECK_FALSE(tape.requires_grad(c));
  CHECK(tape.grad(c).item() == 0.0);
}

TEST_CASE("finite-difference check of every operation") {
  const auto a = randn(3, 4, 1);
  const auto b = randn(3, 4, 2);
  const auto c = randn(4, 5, 3);
  const auto row = randn(1, 4, 4);
  const double tol = 1e-5;
  CHECK(grad_error([](Tape&, auto v) { return ad::add(v[0], v[1]); }, {a, b}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::sub(v[0], v[1]); }, {a, b}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::mul(v[0], v[1]); }, {a, b}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::scale(v[0], -1.7); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::add_row(v[0], v[1]); }, {a, row}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::matmul(v[0], v[1]); }, {a, c}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::matmul_bt(v[0], v[1]); }, {a, b}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::square(v[0]); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::transpose(v[0]); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::gelu(v[0]); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::softmax_rows(v[0]); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::log_softmax_rows(v[0]); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::layer_norm_rows(v[0], v[1], v[2]); },
                   {a, randn(1, 4, 5), randn(1, 4, 6)}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::concat_rows(v); }, {a, b}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::concat_cols(v); }, {a, b}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::slice_rows(v[0], 1, 2); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::slice_cols(v[0], 1, 2); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::mean_rows(v[0]); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::sum(v[0]); }, {a}) < tol);
  CHECK(grad_error([](Tape&, auto v) { return ad::l2_normalize_rows(v[0]); }, {a}) < tol);
  const std::vector<double> mask{1, 0, 1, 0};
  CHECK(grad_error([&](Tape&, auto v) { return ad::add_masked_bias(v[0], v[1], mask); },
                   {a, Tensor::scalar(0.8)}) < tol);
  CHECK(grad_error([&](Tape&, auto v) { return ad::add_masked_bias(v[0], v[1], mask); },
                   {a, randn(3, 1, 7)}) < tol);
}

TEST_CASE("operations reject mismatched shapes") {
  Tape tape;
  const Var a = tape.leaf(Tensor(2, 3));
  const Var b = tape.leaf(Tensor(3, 2));
  CHECK_THROWS_AS(ad::add(a, b), DimensionError);
  CHECK_THROWS_AS(ad::matmul(a, a), DimensionError);
  CHECK_THROWS_AS(ad::add_row(a, tape.leaf(Tensor(1, 2))), DimensionError);
  const std::vector<double> short_mask{1, 0};
  CHECK_THROWS_AS(ad::add_masked_bias(a, tape.leaf(Tensor::scalar(1)), short_mask), DimensionError);
}

TEST_CASE("adam examples") {
  SUBCASE("decay alone shrinks by lr*wd") {
    Tensor p = Tensor::scalar(1.0);
    AdamState s;
    s.hyper.lr = 1e-4;
    s.hyper.weight_decay = 0.05;
    std::vector<Tensor*> ps{&p};
    const std::vector<Tensor> gs{Tensor::scalar(0.0)};
    adam_step(ps, gs, s);
    CHECK(p.item() == doctest::Approx(1.0 - 5e-6).epsilon(1e-14));
  }
  SUBCASE("first step moves by about lr") {
    Tensor p = Tensor::scalar(0.5);
    AdamState s;
    s.hyper.lr = 1e-3;
    s.hyper.weight_decay = 0.0;
    std::vector<Tensor*> ps{&p};
    const std::vector<Tensor> gs{Tensor::scalar(3.0)};
    adam_step(ps, gs, s);
    CHECK(p.item() == doctest::Approx(0.5 - 1e-3).epsilon(1e-6));
  }
  SUBCASE("minimizes x squared") {
    Tensor p = Tensor::scalar(1.0);
    AdamState s;
    s.hyper.lr = 0.1;
    s.hyper.weight_decay = 0.0;
    std::vector<Tensor*> ps{&p};
    for (int i = 0; i < 200; ++i) {
      const std::vector<Tensor> gs{Tensor::scalar(2.0 * p.item())};
      adam_step(ps, gs, s);
    }
    CHECK(std::abs(p.item()) < 0.05);
  }
  SUBCASE("shape checks") {
    Tensor p(2, 2);
    AdamState s;
    std::vector<Tensor*> ps{&p};
    const std::vector<Tensor> gs{Tensor(2, 3)};
    CHECK_THROWS_AS(adam_step(ps, gs, s), DimensionError);
  }
}

}  // TEST_SUITE
