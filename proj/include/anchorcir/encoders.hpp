#pragma once

#include <cstdint>
#include <span>

#include "anchorcir/geometry.hpp"
#include "anchorcir/tensor.hpp"

namespace anchorcir {

struct EncoderConfig {
  GridShape grid{8, 8};
  std::size_t latent_dim = 16;
  std::size_t model_dim = 32;
  std::size_t text_tokens = 4;

  bool operator==(const EncoderConfig&) const = default;
};

// A generated image: a grid of latent patch vectors with the anchored instance planted
// inside `bbox`. Patch n sits at grid cell (n / w, n % w).
struct SyntheticImage {
  std::int64_t image_id = 0;
  std::int64_t instance_id = 0;
  std::int64_t category_id = 0;
  std::int64_t context_id = 0;
  // Persistent background component not described by modification text.
  std::int64_t scene_id = 0;
  GridShape grid;
  Tensor latents;  // (h*w) × latent_dim
  BBox bbox;

  bool operator==(const SyntheticImage&) const = default;
};

// Frozen stand-ins for the image encoder and the text tokenizer. Neither is trained.
struct FrozenEncoders {
  EncoderConfig config;
  Tensor image_proj;  // latent_dim × model_dim, orthonormal rows
  Tensor text_proj;   // latent_dim × (text_tokens * model_dim), orthonormal rows

  bool operator==(const FrozenEncoders&) const = default;
};

FrozenEncoders make_frozen_encoders(const EncoderConfig& cfg, std::uint64_t seed);

// N × model_dim patch embeddings in raster order. Linear, no bias.
Tensor encode_image(const SyntheticImage& img, const FrozenEncoders& enc);
Tensor encode_latents(const Tensor& latents, const FrozenEncoders& enc);

// text_tokens × model_dim embedding of a context descriptor (a latent_dim vector).
Tensor embed_text(std::span<const double> context_descriptor, const FrozenEncoders& enc);

}  // namespace anchorcir
