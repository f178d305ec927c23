#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

#include "fusereg/tensor.hpp"

namespace fusereg {

struct SynthOptions {
  std::uint64_t seed = 0;
  std::array<std::size_t, 3> shape{32, 32, 32};
  double amplitude = 3.0;   // max |u| in voxels
  double smoothness = 5.0;  // width (sigma) of the displacement bumps, voxels
};

struct SynthPair {
  Tensor<double> moving;  // [1, D, H, W]
  Tensor<double> fixed;   // [1, D, H, W]
  Tensor<double> field;   // [3, D, H, W], moving = remap(warp(fixed, field))
  double amplitude = 0.0; // amplitude actually used
  int halvings = 0;       // times the amplitude was halved to avoid folding
};

// Multi-ellipsoid phantom with intensity gradients and low-contrast texture.
Tensor<double> synth_phantom(std::uint64_t seed, const std::array<std::size_t, 3>& shape);

// Sum of random Gaussian displacement bumps scaled to max |u| = amplitude.
Tensor<double> synth_field(std::uint64_t seed, const std::array<std::size_t, 3>& shape, double amplitude,
                           double smoothness);

// Monotone intensity remap applied to the moving image.
double intensity_remap(double x);

SynthPair synth_pair(const SynthOptions& options);

}  // namespace fusereg
