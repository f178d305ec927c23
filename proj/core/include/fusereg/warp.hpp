#pragma once

#include "fusereg/ops.hpp"

namespace fusereg {

// Zero displacement [3, D, H, W].
template <typename T>
Tensor<T> identity_field(const std::array<std::size_t, 3>& spatial);

/// Samples `moving` ([C, D, H, W]) at v + u(v) with trilinear weights over the
/// 8 lattice neighbours. `field` is [3, D, H, W] in voxels, components ordered
/// (z, y, x) to match the (D, H, W) axes. Sample coordinates are clamped to the
/// volume; the clamped directions carry no gradient.
template <typename T>
Tensor<T> warp_trilinear(const Tensor<T>& moving, const Tensor<T>& field);

}  // namespace fusereg
