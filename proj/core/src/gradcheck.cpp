#include "fusereg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <utility>

namespace fusereg {

namespace {

template <typename T>
T eval_scalar(const std::function<Tensor<T>()>& f) {
  NoGradScope<T> no_grad;
  const Tensor<T> y = f();
  if (y.numel() != 1) throw ContractError("gradcheck: f must return a scalar, got " + shape_str(y.shape()));
  return y.item();
}

}  // namespace

template <typename T>
GradcheckResult gradcheck(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> wrt,
                          const GradcheckOptions& options) {
  if (wrt.empty()) throw ContractError("gradcheck: nothing to differentiate");
  std::vector<bool> saved_flags;
  for (auto& t : wrt) {
    saved_flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
  }

  std::vector<std::vector<T>> analytic;
  T reference;
  {
    GradTape<T> tape;
    const Tensor<T> y = f();
    if (y.numel() != 1) throw ContractError("gradcheck: f must return a scalar, got " + shape_str(y.shape()));
    reference = y.item();
    tape.backward(y);
    for (const auto& t : wrt) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
      if (analytic.back().empty()) analytic.back().assign(t.numel(), T(0));
    }
  }

  const T again = eval_scalar(f);
  const T third = eval_scalar(f);
  if (!(again == reference && third == reference)) {
    throw ContractError("gradcheck: f is not deterministic across repeated evaluation");
  }

  // (tensor index, flat index) of every coordinate to probe.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < wrt.size(); ++t)
    for (std::size_t i = 0; i < wrt[t].numel(); ++i) coords.emplace_back(t, i);
  if (options.max_coords > 0 && coords.size() > options.max_coords) {
    std::vector<std::pair<std::size_t, std::size_t>> picked;
    std::mt19937_64 rng(options.seed);
    std::sample(coords.begin(), coords.end(), std::back_inserter(picked), options.max_coords, rng);
    coords = std::move(picked);
  }

  const T h = static_cast<T>(options.step);
  GradcheckResult result;
  for (const auto& [t, i] : coords) {
    auto data = wrt[t].mutable_data();
    const T original = data[i];
    auto at = [&](T offset) {
      data[i] = original + offset;
      return static_cast<double>(eval_scalar(f));
    };
    double numeric = 0.0;
    if (options.fourth_order) {
      const double p1 = at(h), m1 = at(-h), p2 = at(2 * h), m2 = at(-2 * h);
      numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * options.step);
    } else {
      const double p1 = at(h), m1 = at(-h);
      numeric = (p1 - m1) / (2.0 * options.step);
    }
    data[i] = original;
    const double a = static_cast<double>(analytic[t][i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), options.min_scale});
    const double rel = std::abs(a - numeric) / denom;
    ++result.coords_checked;
    if (rel > result.max_rel_error || result.coords_checked == 1) {
      result.max_rel_error = std::max(result.max_rel_error, rel);
      result.worst_tensor = t;
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }

  for (std::size_t t = 0; t < wrt.size(); ++t) wrt[t].set_requires_grad(saved_flags[t]);
  return result;
}

template <typename T>
double gradcheck(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                 double step) {
  GradcheckOptions opt;
  opt.step = step;
  std::function<Tensor<T>()> closed = [&f, &x] { return f(x); };
  return gradcheck<T>(closed, {x}, opt).max_rel_error;
}

template GradcheckResult gradcheck(const std::function<Tensor<float>()>&, std::vector<Tensor<float>>,
                                   const GradcheckOptions&);
template GradcheckResult gradcheck(const std::function<Tensor<double>()>&,
                                   std::vector<Tensor<double>>, const GradcheckOptions&);
template double gradcheck(const std::function<Tensor<float>(const Tensor<float>&)>&,
                          const Tensor<float>&, double);
template double gradcheck(const std::function<Tensor<double>(const Tensor<double>&)>&,
                          const Tensor<double>&, double);

}  // namespace fusereg
