#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "fusereg/encoder.hpp"

namespace fusereg {

template <typename T>
struct LkaParams {
  Conv3d<T> depthwise;
  Conv3d<T> dilated;
  Conv3d<T> pointwise;

  static LkaParams create(Initializer<T> init, std::size_t channels, std::size_t kernel,
                          std::size_t dilated_kernel, std::size_t dilation, bool zero_init = false);
};

// A = pointwise(dilated_depthwise(depthwise(x))); returns x + A * x.
template <typename T>
Tensor<T> lka_block(const Tensor<T>& x, const LkaParams<T>& p);

template <typename T>
Tensor<T> dae_former_block(const Tensor<T>& tokens, const Spatial& spatial, const DualBlockParams<T>& p) {
  return dual_attention_block(tokens, spatial, p);
}

template <typename T>
struct FusionParams {
  Linear<T> global;           // shared by the avg- and max-pooled descriptors
  Conv3d<T> local_depthwise;  // k^3 depthwise
  Conv3d<T> local_pointwise;
  Conv3d<T> local_dilated;    // k^3 depthwise, dilation 2
  Conv3d<T> local_reduce;     // 1x1x1
  LayerNorm<T> norm;
  Conv3d<T> select;           // 1x1x1, feeds the channel softmax
  Conv3d<T> gate;             // 1x1x1 on U'
  Conv3d<T> project;          // 1x1x1 output

  static FusionParams create(Initializer<T> init, std::size_t channels, std::size_t kernel);
};

// [C, d, h, w] -> [C]: global(avg_pool(x)) + global(max_pool(x)).
template <typename T>
Tensor<T> global_extract(const Tensor<T>& x2, const FusionParams<T>& p);

// Depthwise -> pointwise -> dilated depthwise -> 1x1 reduction, extent preserving.
template <typename T>
Tensor<T> feature_extract(const Tensor<T>& x1, const FusionParams<T>& p);

template <typename T>
struct FusionTrace {
  Tensor<T> u, selection, x1_sel, x2_sel, u_fused, output;
};

//   U   = LN_c(feature_extract(X1) + global_extract(X2))
//   SM  = softmax_c(select(U))
//   X1' = SM * X1 + X1,  X2' = SM * X2 + X2
//   U'  = (X1' sigmoid(X2')) (X2' sigmoid(X1'))
//   out = project(sigmoid(gate(U')) * X1)
template <typename T>
FusionTrace<T> nested_attention_fusion_trace(const Tensor<T>& x1, const Tensor<T>& x2, const FusionParams<T>& p);

template <typename T>
Tensor<T> nested_attention_fusion(const Tensor<T>& x1, const Tensor<T>& x2, const FusionParams<T>& p) {
  return nested_attention_fusion_trace(x1, x2, p).output;
}

/// One decoder level, deep to shallow. Exactly one of `dae`/`lka` is set;
/// `project` and `fusion` are absent at the shallowest level.
template <typename T>
struct DecoderStageParams {
  std::size_t level = 0;
  std::optional<DualBlockParams<T>> dae;
  std::optional<LkaParams<T>> lka;
  std::optional<Conv3d<T>> project;
  std::optional<FusionParams<T>> fusion;
};

template <typename T>
struct DecoderParams {
  std::vector<DecoderStageParams<T>> stages;
  // Applied after channel normalization without affine parameters; the 1x1
  // head already supplies the per-channel scale and shift.
  Conv3d<T> head;  // C_0 -> 3, zero initialized

  static DecoderParams create(Initializer<T> init, const ModelConfig& cfg);
};

// Returns the displacement field [3, D, H, W] at input resolution.
template <typename T>
Tensor<T> decoder_forward(const FeaturePyramid<T>& pyramid, const ModelConfig& cfg, const DecoderParams<T>& p);

}  // namespace fusereg
