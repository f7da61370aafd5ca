#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "anchorcir/tensor.hpp"

namespace anchorcir {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.05;
  double epsilon = 1e-8;
};

// Moment buffers for one parameter group. Buffers are shaped lazily on the first step.
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

// One AdamW update: decoupled decay (p -= lr*wd*p) followed by the bias-corrected
// Adam step. params[i] and grads[i] must have equal shapes.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

using ScalarFn = std::function<double(const Tensor&)>;

// Central-difference gradient estimate of f at x.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor). The floor keeps near-zero coordinates
// from dominating the ratio.
double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-6);

}  // namespace anchorcir
