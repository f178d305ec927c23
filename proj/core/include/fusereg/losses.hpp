#pragma once

#include "fusereg/config.hpp"
#include "fusereg/ops.hpp"

namespace fusereg {

/// Windowed normalized cross-correlation loss between two volumes ([D,H,W] or
/// [1,D,H,W]). Each voxel owns a cubic window of extent `window` centred on it
/// and clipped to the volume; per window cc = cross^2 / (var_f * var_w + eps)
/// using window-mean-centred sums. Returns 1 - mean(cc). Differentiable with
/// respect to both inputs.
template <typename T>
Tensor<T> ncc_loss(const Tensor<T>& fixed, const Tensor<T>& warped, std::size_t window, double eps = 1e-5);

// For u [3, D, H, W]: sum over axes of the mean over (component, adjacent
// pair along that axis) of squared forward differences.
template <typename T>
Tensor<T> smoothness_loss(const Tensor<T>& field);

template <typename T>
struct LossTerms {
  Tensor<T> total, similarity, smoothness;
  Tensor<T> warped;
};

// total = ncc_loss(fixed, warp(moving, field)) + lambda * smoothness_loss(field)
template <typename T>
LossTerms<T> composite_loss(const Tensor<T>& fixed, const Tensor<T>& moving, const Tensor<T>& field,
                            const LossConfig& cfg);

}  // namespace fusereg
