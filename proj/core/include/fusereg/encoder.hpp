#pragma once

#include <cstddef>
#include <vector>

#include "fusereg/attention.hpp"
#include "fusereg/config.hpp"

namespace fusereg {

template <typename T>
struct PatchEmbedParams {
  Conv3d<T> conv;
  LayerNorm<T> norm;
  std::size_t stride = 1;
  std::size_t kernel = 1;

  // Padding is kernel / 2; kernel must exceed stride so patches overlap.
  static PatchEmbedParams create(Initializer<T> init, std::size_t in_channels, std::size_t out_channels,
                                 std::size_t kernel, std::size_t stride);
};

// Strided conv then layernorm over channels. Returns [C_out, D/s, H/s, W/s].
template <typename T>
Tensor<T> overlap_patch_embed(const Tensor<T>& x, const PatchEmbedParams<T>& p);

template <typename T>
struct EncoderStageParams {
  PatchEmbedParams<T> embed;
  std::vector<DualBlockParams<T>> blocks;
  LayerNorm<T> out_norm;
};

template <typename T>
struct EncoderParams {
  std::vector<EncoderStageParams<T>> stages;

  static EncoderParams create(Initializer<T> init, const ModelConfig& cfg, std::size_t in_channels = 2);
};

template <typename T>
struct FeatureLevel {
  Tensor<T> feature;  // [C, d, h, w]
  Spatial spatial;
};

template <typename T>
struct FeaturePyramid {
  std::vector<FeatureLevel<T>> levels;  // shallow to deep

  std::size_t size() const { return levels.size(); }
  const FeatureLevel<T>& operator[](std::size_t i) const { return levels[i]; }
};

// Checks the volume against the encoder strides and returns each stage's
// spatial extent; throws ConfigError naming the required divisibility.
std::vector<Spatial> pyramid_extents(const EncoderConfig& cfg, const Spatial& input);

// Runs the stages on an arbitrary [C, D, H, W] input.
template <typename T>
FeaturePyramid<T> encoder_forward(const Tensor<T>& input, const ModelConfig& cfg, const EncoderParams<T>& p);

// moving, fixed: [1, D, H, W] (or [D, H, W]); concatenated along channels.
template <typename T>
FeaturePyramid<T> encoder_forward(const Tensor<T>& moving, const Tensor<T>& fixed, const ModelConfig& cfg,
                                  const EncoderParams<T>& p);

// Brings a [D,H,W] or [1,D,H,W] volume to [1,D,H,W]; throws ShapeError otherwise.
template <typename T>
Tensor<T> as_single_channel(const Tensor<T>& v, const char* what);

}  // namespace fusereg
