#include "fusereg/losses.hpp"

#include <algorithm>
#include <cmath>

#include "fusereg/encoder.hpp"
#include "fusereg/warp.hpp"

namespace fusereg {

namespace {

using Extent = std::array<std::size_t, 3>;

// Sum over the clipped cube of radius r around each voxel, one axis at a time.
std::vector<double> box_sum(const std::vector<double>& in, const Extent& e, std::size_t r) {
  std::vector<double> cur = in, next(in.size());
  const std::size_t stride[3] = {e[1] * e[2], e[2], 1};
  std::vector<double> line, prefix;
  for (int ax = 0; ax < 3; ++ax) {
    const std::size_t n = e[ax], s = stride[ax];
    line.resize(n);
    prefix.assign(n + 1, 0.0);
    for (std::size_t base = 0; base < cur.size(); ++base) {
      if ((base / s) % n != 0) continue;  // visit each line once, from its first element
      for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + cur[base + i * s];
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= r ? i - r : 0;
        const std::size_t hi = std::min(n - 1, i + r);
        next[base + i * s] = prefix[hi + 1] - prefix[lo];
      }
    }
    std::swap(cur, next);
  }
  return cur;
}

template <typename T>
Extent spatial_of(const Tensor<T>& v, const char* what) {
  const auto s = as_single_channel(v, what).shape();
  return {s[1], s[2], s[3]};
}

}  // namespace

template <typename T>
Tensor<T> ncc_loss(const Tensor<T>& fixed, const Tensor<T>& warped, std::size_t window, double eps) {
  if (window == 0 || window % 2 == 0) throw ConfigError("ncc_loss: window must be odd, got " + std::to_string(window));
  const Extent e = spatial_of(fixed, "ncc_loss fixed");
  if (spatial_of(warped, "ncc_loss warped") != e) {
    throw ShapeError("ncc_loss: shapes " + shape_str(fixed.shape()) + " and " + shape_str(warped.shape()) + " differ");
  }
  const std::size_t r = window / 2;
  const std::size_t n = e[0] * e[1] * e[2];
  std::vector<double> f(n), w(n), ff(n), ww(n), fw(n), ones(n, 1.0);
  const auto fv = fixed.data();
  const auto wv = warped.data();
  for (std::size_t i = 0; i < n; ++i) {
    f[i] = fv[i];
    w[i] = wv[i];
    ff[i] = f[i] * f[i];
    ww[i] = w[i] * w[i];
    fw[i] = f[i] * w[i];
  }
  const auto cnt = box_sum(ones, e, r);
  const auto sf = box_sum(f, e, r), sw = box_sum(w, e, r);
  const auto sff = box_sum(ff, e, r), sww = box_sum(ww, e, r), sfw = box_sum(fw, e, r);

  // Per-window coefficients reused by the backward pass.
  std::vector<double> a(n), bf(n), bw(n), mf(n), mw(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mf[i] = sf[i] / cnt[i];
    mw[i] = sw[i] / cnt[i];
    const double cross = sfw[i] - sf[i] * mw[i];
    const double vf = sff[i] - sf[i] * mf[i];
    const double vw = sww[i] - sw[i] * mw[i];
    const double den = vf * vw + eps;
    total += cross * cross / den;
    a[i] = 2.0 * cross / den;
    bf[i] = -2.0 * cross * cross * vw / (den * den);  // d cc / d f_j through var_f, sans (f_j - mean)
    bw[i] = -2.0 * cross * cross * vf / (den * den);
  }
  Tensor<T> result = Tensor<T>::scalar(static_cast<T>(1.0 - total / static_cast<double>(n)));
  if (auto* tape = detail::tracking_tape<T>({&fixed, &warped})) {
    tape->record("ncc_loss", result, {fixed, warped},
                 [fixed, warped, e, r, n, f = std::move(f), w = std::move(w), a = std::move(a), bf = std::move(bf),
                  bw = std::move(bw), mf = std::move(mf), mw = std::move(mw)](std::span<const T> g) {
                   auto gf = detail::grad_sink(fixed);
                   auto gw = detail::grad_sink(warped);
                   const double scale = -static_cast<double>(g[0]) / static_cast<double>(n);
                   std::vector<double> tmp(n);
                   auto product = [&](const std::vector<double>& x, const std::vector<double>& y) {
                     for (std::size_t i = 0; i < n; ++i) tmp[i] = x[i] * y[i];
                     return box_sum(tmp, e, r);
                   };
                   const auto A = box_sum(a, e, r);
                   if (!gf.empty()) {
                     const auto a_mw = product(a, mw);
                     const auto B = box_sum(bf, e, r);
                     const auto b_mf = product(bf, mf);
                     for (std::size_t j = 0; j < n; ++j) {
                       gf[j] += static_cast<T>(scale * (w[j] * A[j] - a_mw[j] + f[j] * B[j] - b_mf[j]));
                     }
                   }
                   if (!gw.empty()) {
                     const auto a_mf = product(a, mf);
                     const auto B = box_sum(bw, e, r);
                     const auto b_mw = product(bw, mw);
                     for (std::size_t j = 0; j < n; ++j) {
                       gw[j] += static_cast<T>(scale * (f[j] * A[j] - a_mf[j] + w[j] * B[j] - b_mw[j]));
                     }
                   }
                 });
  }
  return result;
}

namespace {

// Forward-difference pairs along each axis with the per-axis mean weight.
struct PairPlan {
  Extent e{};
  std::size_t n = 0;
  std::size_t stride[3] = {0, 0, 0};
  double weight[3] = {0, 0, 0};

  explicit PairPlan(const Extent& ext) : e(ext), n(ext[0] * ext[1] * ext[2]) {
    stride[0] = e[1] * e[2];
    stride[1] = e[2];
    stride[2] = 1;
    for (int ax = 0; ax < 3; ++ax) {
      const std::size_t pairs = (e[ax] - 1) * (n / e[ax]);
      if (pairs > 0) weight[ax] = 1.0 / (3.0 * static_cast<double>(pairs));
    }
  }

  // fn(axis, i, j) for every adjacent pair (i, j = i + stride).
  template <typename F>
  void each(F&& fn) const {
    for (int ax = 0; ax < 3; ++ax) {
      if (weight[ax] == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i) {
        if ((i / stride[ax]) % e[ax] == e[ax] - 1) continue;
        fn(ax, i, i + stride[ax]);
      }
    }
  }
};

}  // namespace

template <typename T>
Tensor<T> smoothness_loss(const Tensor<T>& field) {
  if (field.rank() != 4 || field.dim(0) != 3) {
    throw ShapeError("smoothness_loss: field must be [3, D, H, W], got " + shape_str(field.shape()));
  }
  const PairPlan plan({field.dim(1), field.dim(2), field.dim(3)});
  const std::size_t n = plan.n;
  const auto u = field.data();
  double total = 0.0;
  for (std::size_t comp = 0; comp < 3; ++comp) {
    const T* uc = u.data() + comp * n;
    plan.each([&](int ax, std::size_t i, std::size_t j) {
      const double d = static_cast<double>(uc[j]) - static_cast<double>(uc[i]);
      total += plan.weight[ax] * d * d;
    });
  }
  Tensor<T> result = Tensor<T>::scalar(static_cast<T>(total));
  if (auto* tape = detail::tracking_tape<T>({&field})) {
    tape->record("smoothness_loss", result, {field}, [field, plan](std::span<const T> g) {
      auto gu = detail::grad_sink(field);
      if (gu.empty()) return;
      const auto u = field.data();
      const double go = static_cast<double>(g[0]);
      for (std::size_t comp = 0; comp < 3; ++comp) {
        const T* uc = u.data() + comp * plan.n;
        T* gc = gu.data() + comp * plan.n;
        plan.each([&](int ax, std::size_t i, std::size_t j) {
          const double d = static_cast<double>(uc[j]) - static_cast<double>(uc[i]);
          const T step = static_cast<T>(go * 2.0 * plan.weight[ax] * d);
          gc[j] += step;
          gc[i] -= step;
        });
      }
    });
  }
  return result;
}

template <typename T>
LossTerms<T> composite_loss(const Tensor<T>& fixed, const Tensor<T>& moving, const Tensor<T>& field,
                            const LossConfig& cfg) {
  LossTerms<T> t;
  const auto f = as_single_channel(fixed, "fixed");
  t.warped = warp_trilinear(as_single_channel(moving, "moving"), field);
  t.similarity = ncc_loss(f, t.warped, cfg.ncc_window, cfg.eps);
  t.smoothness = smoothness_loss(field);
  t.total = cfg.lambda == 0.0 ? t.similarity : add(t.similarity, scale(t.smoothness, static_cast<T>(cfg.lambda)));
  return t;
}

#define FUSEREG_INSTANTIATE_LOSSES(T)                                              \
  template Tensor<T> ncc_loss(const Tensor<T>&, const Tensor<T>&, std::size_t, double); \
  template Tensor<T> smoothness_loss(const Tensor<T>&);                           \
  template LossTerms<T> composite_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const LossConfig&);

FUSEREG_INSTANTIATE_LOSSES(float)
FUSEREG_INSTANTIATE_LOSSES(double)

#undef FUSEREG_INSTANTIATE_LOSSES

}  // namespace fusereg
