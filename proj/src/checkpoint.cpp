#include "anchorcir/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "anchorcir/config.hpp"
#include "anchorcir/errors.hpp"

namespace anchorcir {

namespace {

constexpr char kMagic[8] = {'A', 'C', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(buf, sizeof(T));
}

template <class T>
T get(std::istream& in) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T))) throw DataError("checkpoint: truncated");
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
  if (n > (1ULL << 30)) throw DataError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("checkpoint: truncated");
  return s;
}

}  // namespace

void save_checkpoint(std::ostream& out, const ModelParams& params, const std::string& config_hash) {
  out.write(kMagic, sizeof(kMagic));
  put(out, kVersion);
  put(out, params.seed);
  put_string(out, config_hash);
  put_string(out, to_json(params.config).dump());
  std::uint64_t count = 0;
  params.visit([&](const std::string&, const Tensor&, ParamGroup) { ++count; });
  put(out, count);
  params.visit([&](const std::string& name, const Tensor& t, ParamGroup) {
    put_string(out, name);
    put<std::uint64_t>(out, t.rows());
    put<std::uint64_t>(out, t.cols());
    for (double v : t.data()) put(out, v);
  });
}

ModelParams load_checkpoint(std::istream& in, CheckpointInfo* info) {
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  CheckpointInfo ci;
  ci.version = get<std::uint32_t>(in);
  if (ci.version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(ci.version));
  ci.seed = get<std::uint64_t>(in);
  ci.config_hash = get_string(in);
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(get_string(in)), "model");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad model config: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: bad model config: ") + e.what());
  }
  // Rebuild the parameter layout from the config, then overwrite every tensor.
  ModelParams params = make_model(cfg, ci.seed);
  const auto count = get<std::uint64_t>(in);
  std::uint64_t seen = 0;
  params.visit([&](const std::string& name, Tensor& t, ParamGroup) {
    if (seen++ >= count) throw DataError("checkpoint: missing tensor " + name);
    const std::string stored = get_string(in);
    if (stored != name) throw DataError("checkpoint: expected tensor " + name + ", found " + stored);
    const auto r = get<std::uint64_t>(in);
    const auto c = get<std::uint64_t>(in);
    if (r != t.rows() || c != t.cols()) {
      throw DataError("checkpoint: tensor " + name + " has shape " + std::to_string(r) + "x" +
                      std::to_string(c) + ", expected " + shape_string(t));
    }
    for (double& v : t.data()) v = get<double>(in);
  });
  if (seen != count) throw DataError("checkpoint: " + std::to_string(count - seen) + " unexpected tensors");
  if (info != nullptr) *info = ci;
  return params;
}

void save_checkpoint(const std::string& path, const ModelParams& params, const std::string& config_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  save_checkpoint(out, params, config_hash);
  if (!out) throw DataError("failed writing checkpoint " + path);
}

ModelParams load_checkpoint(const std::string& path, CheckpointInfo* info) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  return load_checkpoint(in, info);
}

}  // namespace anchorcir
