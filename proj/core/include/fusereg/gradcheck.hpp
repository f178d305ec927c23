#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fusereg/tensor.hpp"

namespace fusereg {

struct GradcheckOptions {
  double step = 1e-4;
  // 0 checks every coordinate; otherwise a seeded sample of this many.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  // Five-point stencil (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h.
  bool fourth_order = false;
  // Floor of the relative-error denominator.
  double min_scale = 1e-8;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares tape gradients of the scalar `f()` with respect to every tensor in
/// `wrt` against central differences (f(x+h e_i) - f(x-h e_i)) / 2h. The
/// relative error denominator is max(|analytic|, |numeric|, min_scale). `f` must
/// read the tensors in `wrt` directly; their values are perturbed in place and
/// restored. Throws ContractError when f is not deterministic.
template <typename T>
GradcheckResult gradcheck(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> wrt,
                          const GradcheckOptions& options = {});

// Single-input convenience form; returns the max relative error.
template <typename T>
double gradcheck(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                 double step = 1e-4);

}  // namespace fusereg
