#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "anchorcir/model.hpp"

namespace anchorcir {

struct GradCheckRow {
  std::string group;
  std::size_t tensors = 0;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double tolerance = 0.0;

  bool passed() const;
};

// 2×2 patch grid, two fusion queries, two probes, width 6.
ModelConfig gradcheck_model_config();

// Central differences of the batch loss against the tape gradient for every trainable
// tensor, on a random batch of `batch` queries. The modulator head is re-drawn so that
// gradients reach the reasoning module and the probes. Relative errors use a 1e-5 floor,
// since exactly-zero gradients (key biases under softmax) leave ~1e-10 of difference noise.
GradCheckReport gradcheck(const ModelConfig& cfg, std::uint64_t seed, std::size_t batch = 2, double eps = 1e-5,
                          double tolerance = 1e-4);

std::string to_csv(const GradCheckReport& r);

}  // namespace anchorcir
