#include "anchorcir/encoders.hpp"

#include <cmath>

#include "anchorcir/errors.hpp"
#include "anchorcir/random.hpp"

namespace anchorcir {

FrozenEncoders make_frozen_encoders(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.latent_dim == 0 || cfg.model_dim == 0 || cfg.text_tokens == 0) {
    throw ConfigError("encoder dimensions must be positive");
  }
  Rng image_rng(seed, "encoders/image");
  Rng text_rng(seed, "encoders/text");
  FrozenEncoders enc;
  enc.config = cfg;
  enc.image_proj = orthonormal_rows(cfg.latent_dim, cfg.model_dim, image_rng);
  enc.text_proj = orthonormal_rows(cfg.latent_dim, cfg.text_tokens * cfg.model_dim, text_rng);
  // Each token gets roughly the norm of the descriptor.
  const double gain = std::sqrt(static_cast<double>(cfg.text_tokens));
  for (double& v : enc.text_proj.data()) v *= gain;
  return enc;
}

Tensor encode_latents(const Tensor& latents, const FrozenEncoders& enc) {
  if (latents.cols() != enc.config.latent_dim) {
    throw DimensionError("encode_image: latent width " + std::to_string(latents.cols()) +
                         " but encoder expects " + std::to_string(enc.config.latent_dim));
  }
  return matmul(latents, enc.image_proj);
}

Tensor encode_image(const SyntheticImage& img, const FrozenEncoders& enc) {
  if (img.latents.rows() != img.grid.count()) {
    throw DimensionError("encode_image: image holds " + std::to_string(img.latents.rows()) +
                         " patches for a " + std::to_string(img.grid.h) + "x" +
                         std::to_string(img.grid.w) + " grid");
  }
  return encode_latents(img.latents, enc);
}

Tensor embed_text(std::span<const double> context_descriptor, const FrozenEncoders& enc) {
  const auto& cfg = enc.config;
  if (context_descriptor.size() != cfg.latent_dim) {
    throw DimensionError("embed_text: descriptor length " +
                         std::to_string(context_descriptor.size()) + " but encoder expects " +
                         std::to_string(cfg.latent_dim));
  }
  const Tensor flat = matmul(Tensor::row_vector(context_descriptor), enc.text_proj);
  return Tensor(cfg.text_tokens, cfg.model_dim,
                std::vector<double>(flat.data().begin(), flat.data().end()));
}

}  // namespace anchorcir
