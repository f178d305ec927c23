#include "fusereg/warp.hpp"

#include <algorithm>
#include <cmath>

namespace fusereg {

template <typename T>
Tensor<T> identity_field(const std::array<std::size_t, 3>& spatial) {
  return Tensor<T>::zeros(Shape{3, spatial[0], spatial[1], spatial[2]});
}

namespace {

struct Axis {
  std::size_t i0, i1;
  double frac;
  bool clamped;
};

Axis locate(double p, std::size_t n) {
  const double hi = static_cast<double>(n - 1);
  Axis a{};
  a.clamped = p < 0.0 || p > hi;
  p = std::clamp(p, 0.0, hi);
  double fl = std::floor(p);
  a.i0 = static_cast<std::size_t>(fl);
  a.i1 = std::min(a.i0 + 1, n - 1);
  a.frac = p - fl;
  return a;
}

}  // namespace

template <typename T>
Tensor<T> warp_trilinear(const Tensor<T>& moving, const Tensor<T>& field) {
  if (moving.rank() != 4) throw ShapeError("warp: moving must be [C, D, H, W], got " + shape_str(moving.shape()));
  const std::size_t c = moving.dim(0), D = moving.dim(1), H = moving.dim(2), W = moving.dim(3);
  if (field.shape() != Shape{3, D, H, W}) {
    throw ShapeError("warp: field " + shape_str(field.shape()) + " does not match moving " +
                     shape_str(moving.shape()) + " (expected [3, D, H, W])");
  }
  const std::size_t n = D * H * W;
  const auto mv = moving.data();
  const auto uv = field.data();
  std::vector<T> out(c * n);
  std::vector<std::array<Axis, 3>> taps(n);
  const std::size_t ext[3] = {D, H, W};
  for (std::size_t z = 0, v = 0; z < D; ++z) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x, ++v) {
        const std::size_t pos[3] = {z, y, x};
        auto& t = taps[v];
        for (int d = 0; d < 3; ++d) {
          t[d] = locate(static_cast<double>(pos[d]) + static_cast<double>(uv[d * n + v]), ext[d]);
        }
        const T wz[2] = {static_cast<T>(1.0 - t[0].frac), static_cast<T>(t[0].frac)};
        const T wy[2] = {static_cast<T>(1.0 - t[1].frac), static_cast<T>(t[1].frac)};
        const T wx[2] = {static_cast<T>(1.0 - t[2].frac), static_cast<T>(t[2].frac)};
        const std::size_t iz[2] = {t[0].i0, t[0].i1}, iy[2] = {t[1].i0, t[1].i1}, ix[2] = {t[2].i0, t[2].i1};
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* img = mv.data() + ch * n;
          T acc = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e)
                acc += img[(iz[a] * H + iy[b]) * W + ix[e]] * (wz[a] * wy[b] * wx[e]);
          out[ch * n + v] = acc;
        }
      }
    }
  }
  Tensor<T> result(moving.shape(), std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&moving, &field})) {
    tape->record("warp_trilinear", result, {moving, field},
                 [moving, field, taps = std::move(taps), c, n, H, W](std::span<const T> g) {
                   auto gm = detail::grad_sink(moving);
                   auto gu = detail::grad_sink(field);
                   const auto mv = moving.data();
                   for (std::size_t v = 0; v < n; ++v) {
                     const auto& t = taps[v];
                     const double w[3][2] = {{1.0 - t[0].frac, t[0].frac},
                                             {1.0 - t[1].frac, t[1].frac},
                                             {1.0 - t[2].frac, t[2].frac}};
                     const std::size_t iz[2] = {t[0].i0, t[0].i1}, iy[2] = {t[1].i0, t[1].i1},
                                       ix[2] = {t[2].i0, t[2].i1};
                     double du[3] = {0, 0, 0};
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const double go = static_cast<double>(g[ch * n + v]);
                       if (go == 0.0) continue;
                       const T* img = mv.data() + ch * n;
                       for (int a = 0; a < 2; ++a)
                         for (int b = 0; b < 2; ++b)
                           for (int e = 0; e < 2; ++e) {
                             const std::size_t idx = (iz[a] * H + iy[b]) * W + ix[e];
                             if (!gm.empty()) gm[ch * n + idx] += static_cast<T>(go * w[0][a] * w[1][b] * w[2][e]);
                             if (gu.empty()) continue;
                             // d/dp of (1 - frac) is -1, of frac is +1.
                             const double val = go * static_cast<double>(img[idx]);
                             du[0] += val * (a ? 1.0 : -1.0) * w[1][b] * w[2][e];
                             du[1] += val * w[0][a] * (b ? 1.0 : -1.0) * w[2][e];
                             du[2] += val * w[0][a] * w[1][b] * (e ? 1.0 : -1.0);
                           }
                     }
                     if (gu.empty()) continue;
                     for (int d = 0; d < 3; ++d) {
                       if (!t[d].clamped && t[d].i0 != t[d].i1) gu[d * n + v] += static_cast<T>(du[d]);
                     }
                   }
                 });
  }
  return result;
}

template Tensor<float> identity_field(const std::array<std::size_t, 3>&);
template Tensor<double> identity_field(const std::array<std::size_t, 3>&);
template Tensor<float> warp_trilinear(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> warp_trilinear(const Tensor<double>&, const Tensor<double>&);

}  // namespace fusereg
