#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "anchorcir/model.hpp"

namespace anchorcir {

struct CheckpointInfo {
  std::uint32_t version = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

// Binary dump: magic, version, seed, run config hash, model config (JSON), then every
// tensor of ModelParams::visit as (name, rows, cols, raw doubles).
void save_checkpoint(std::ostream& out, const ModelParams& params, const std::string& config_hash);
ModelParams load_checkpoint(std::istream& in, CheckpointInfo* info = nullptr);

void save_checkpoint(const std::string& path, const ModelParams& params, const std::string& config_hash);
ModelParams load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr);

}  // namespace anchorcir
