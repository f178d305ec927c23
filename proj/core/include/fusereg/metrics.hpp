#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "fusereg/tensor.hpp"

namespace fusereg {

/// Mean local SSIM over a 7^3 Gaussian window (sigma 1.5), evaluated at every
/// position where the window fits inside the volume (extents must be >= 7).
/// C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L the joint intensity range of the
/// pair; a pair with L = 0 scores 1.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b);

struct Mask {
  std::array<std::size_t, 3> shape{0, 0, 0};
  std::vector<std::uint8_t> data;
  bool empty = true;  // set when no voxel passed the threshold

  std::size_t count() const;
  bool at(std::size_t z, std::size_t y, std::size_t x) const {
    return data[(z * shape[1] + y) * shape[2] + x] != 0;
  }
};

// Voxel set iff intensity > rel_threshold * max(v). An all-zero (or
// non-positive) volume yields an empty mask.
template <typename T>
Mask mask_from_volume(const Tensor<T>& v, double rel_threshold = 0.1);

// Mask voxels with at least one 6-neighbour outside the mask (the volume
// border counts as outside).
Mask surface_of(const Mask& m);

// Linear interpolation between order statistics at position q * (n - 1).
double percentile_linear(std::vector<double> values, double q);

// Symmetric 95th percentile of pooled surface-to-surface distances, in voxels.
// Throws MetricUndefinedError for an empty mask.
double hd95(const Mask& a, const Mask& b);

struct JacobianStats {
  double sdlogj = 0.0;
  double folding_fraction = 0.0;  // share of interior voxels with det J <= 0
  std::size_t voxels = 0;         // interior voxels evaluated
};

// J = I + grad u by central differences on interior voxels of u [3, D, H, W].
template <typename T>
JacobianStats jacobian_stats(const Tensor<T>& field);

}  // namespace fusereg
