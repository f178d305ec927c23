#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fusereg/gradcheck.hpp"

namespace fusereg {

struct GradcheckSuiteOptions {
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  // Model-level case: number of sampled parameter coordinates.
  std::size_t model_coords = 400;
  // Non-empty: scale the backward of this tape op by 0.5 for the whole run.
  std::string sabotage;
};

struct GradcheckCase {
  std::string name;
  GradcheckResult result;
  double seconds = 0.0;
  bool passed = false;
};

// Finite-difference checks in 64-bit over attention, Mix-FFN, the dual block,
// LKA, fusion, patch embedding, warp, both losses, the composite loss and the
// full model at the tiny config.
std::vector<GradcheckCase> run_gradcheck_suite(const GradcheckSuiteOptions& options = {});

}  // namespace fusereg
