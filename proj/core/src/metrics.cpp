#include "fusereg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fusereg {

namespace {

using Extent = std::array<std::size_t, 3>;

template <typename T>
Extent spatial_extent(const Tensor<T>& v, const char* what) {
  if (v.rank() == 3) return {v.dim(0), v.dim(1), v.dim(2)};
  if (v.rank() == 4 && v.dim(0) == 1) return {v.dim(1), v.dim(2), v.dim(3)};
  throw ShapeError(std::string(what) + ": expected a [D,H,W] or [1,D,H,W] volume, got " + shape_str(v.shape()));
}

constexpr std::size_t kSsimWindow = 7;
constexpr double kSsimSigma = 1.5;

std::array<double, kSsimWindow> gaussian_taps() {
  std::array<double, kSsimWindow> g{};
  double s = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i) - 3.0;
    g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// "Valid" separable filtering: each axis shrinks by window - 1.
std::vector<double> gaussian_valid(const std::vector<double>& in, Extent e) {
  static const auto g = gaussian_taps();
  std::vector<double> cur = in;
  for (int ax = 0; ax < 3; ++ax) {
    Extent o = e;
    o[ax] = e[ax] - kSsimWindow + 1;
    std::vector<double> next(o[0] * o[1] * o[2], 0.0);
    const std::size_t in_stride[3] = {e[1] * e[2], e[2], 1};
    for (std::size_t z = 0; z < o[0]; ++z)
      for (std::size_t y = 0; y < o[1]; ++y)
        for (std::size_t x = 0; x < o[2]; ++x) {
          const std::size_t base = z * in_stride[0] + y * in_stride[1] + x;
          double acc = 0.0;
          for (std::size_t k = 0; k < kSsimWindow; ++k) acc += g[k] * cur[base + k * in_stride[ax]];
          next[(z * o[1] + y) * o[2] + x] = acc;
        }
    cur = std::move(next);
    e = o;
  }
  return cur;
}

}  // namespace

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  const Extent e = spatial_extent(a, "ssim");
  if (spatial_extent(b, "ssim") != e) {
    throw ShapeError("ssim: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  for (auto v : e) {
    if (v < kSsimWindow) throw ShapeError("ssim: every extent must be >= 7, got " + shape_str(a.shape()));
  }
  const std::size_t n = e[0] * e[1] * e[2];
  const auto av = a.data();
  const auto bv = b.data();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = av[i];
    y[i] = bv[i];
    lo = std::min({lo, x[i], y[i]});
    hi = std::max({hi, x[i], y[i]});
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const double range = hi - lo;
  if (range == 0.0) return 1.0;
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  const auto mx = gaussian_valid(x, e), my = gaussian_valid(y, e);
  const auto sxx = gaussian_valid(xx, e), syy = gaussian_valid(yy, e), sxy = gaussian_valid(xy, e);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

template <typename T>
Mask mask_from_volume(const Tensor<T>& v, double rel_threshold) {
  if (!(rel_threshold > 0.0 && rel_threshold < 1.0)) {
    throw ContractError("mask_from_volume: rel_threshold must lie in (0, 1), got " + std::to_string(rel_threshold));
  }
  Mask m;
  m.shape = spatial_extent(v, "mask_from_volume");
  const auto d = v.data();
  m.data.assign(d.size(), 0);
  double peak = 0.0;
  for (auto x : d) peak = std::max(peak, static_cast<double>(x));
  if (peak <= 0.0) return m;
  const double cut = rel_threshold * peak;
  for (std::size_t i = 0; i < d.size(); ++i) m.data[i] = static_cast<double>(d[i]) > cut ? 1 : 0;
  m.empty = m.count() == 0;
  return m;
}

Mask surface_of(const Mask& m) {
  Mask s;
  s.shape = m.shape;
  s.data.assign(m.data.size(), 0);
  const auto [D, H, W] = m.shape;
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        if (!m.at(z, y, x)) continue;
        const bool border = z == 0 || y == 0 || x == 0 || z + 1 == D || y + 1 == H || x + 1 == W;
        const bool edge = border || !m.at(z - 1, y, x) || !m.at(z + 1, y, x) || !m.at(z, y - 1, x) ||
                          !m.at(z, y + 1, x) || !m.at(z, y, x - 1) || !m.at(z, y, x + 1);
        if (edge) s.data[(z * H + y) * W + x] = 1;
      }
  s.empty = s.count() == 0;
  return s;
}

double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw MetricUndefinedError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

// Exact squared distance transform of a 1D sampled function (lower envelope
// of parabolas). Infinite entries are not features.
void edt_1d(const double* f, double* out, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.resize(n);
  z.resize(n + 1);
  std::ptrdiff_t k = -1;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double fq = f[q] + static_cast<double>(q * q);
    while (k >= 0) {
      const std::size_t p = v[k];
      const double s = (fq - (f[p] + static_cast<double>(p * p))) / (2.0 * static_cast<double>(q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
    } else {
      const std::size_t p = v[k];
      const double s = (fq - (f[p] + static_cast<double>(p * p))) / (2.0 * static_cast<double>(q - p));
      ++k;
      v[k] = q;
      z[k] = s;
    }
    z[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(out, out + n, inf);
    return;
  }
  std::size_t j = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[j + 1] < static_cast<double>(q)) ++j;
    const double d = static_cast<double>(q) - static_cast<double>(v[j]);
    out[q] = d * d + f[v[j]];
  }
}

// Squared Euclidean distance from every voxel to the nearest set voxel of m.
std::vector<double> squared_edt(const Mask& m) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const auto e = m.shape;
  std::vector<double> cur(m.data.size());
  for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = m.data[i] ? 0.0 : inf;
  const std::size_t stride[3] = {e[1] * e[2], e[2], 1};
  std::vector<double> line, res;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (int ax = 0; ax < 3; ++ax) {
    const std::size_t n = e[ax], s = stride[ax];
    line.resize(n);
    res.resize(n);
    for (std::size_t base = 0; base < cur.size(); ++base) {
      if ((base / s) % n != 0) continue;
      for (std::size_t i = 0; i < n; ++i) line[i] = cur[base + i * s];
      edt_1d(line.data(), res.data(), n, v, z);
      for (std::size_t i = 0; i < n; ++i) cur[base + i * s] = res[i];
    }
  }
  return cur;
}

}  // namespace

double hd95(const Mask& a, const Mask& b) {
  if (a.shape != b.shape) throw ShapeError("hd95: mask shapes differ");
  if (a.empty || b.empty || a.count() == 0 || b.count() == 0) {
    throw MetricUndefinedError("hd95 is undefined for an empty mask");
  }
  const Mask sa = surface_of(a), sb = surface_of(b);
  const auto da = squared_edt(sa), db = squared_edt(sb);
  std::vector<double> pooled;
  for (std::size_t i = 0; i < sa.data.size(); ++i) {
    if (sa.data[i]) pooled.push_back(std::sqrt(db[i]));
    if (sb.data[i]) pooled.push_back(std::sqrt(da[i]));
  }
  return percentile_linear(std::move(pooled), 0.95);
}

template <typename T>
JacobianStats jacobian_stats(const Tensor<T>& field) {
  if (field.rank() != 4 || field.dim(0) != 3) {
    throw ShapeError("jacobian: field must be [3, D, H, W], got " + shape_str(field.shape()));
  }
  const std::size_t D = field.dim(1), H = field.dim(2), W = field.dim(3);
  if (D < 3 || H < 3 || W < 3) {
    throw ShapeError("jacobian: every extent must be >= 3 for central differences, got " + shape_str(field.shape()));
  }
  const std::size_t n = D * H * W;
  const std::size_t stride[3] = {H * W, W, 1};
  const auto u = field.data();
  std::vector<double> logs;
  std::size_t folded = 0, total = 0;
  for (std::size_t z = 1; z + 1 < D; ++z)
    for (std::size_t y = 1; y + 1 < H; ++y)
      for (std::size_t x = 1; x + 1 < W; ++x) {
        const std::size_t v = (z * H + y) * W + x;
        double j[3][3];
        for (int c = 0; c < 3; ++c)
          for (int d = 0; d < 3; ++d) {
            const double up = u[c * n + v + stride[d]];
            const double dn = u[c * n + v - stride[d]];
            j[c][d] = (c == d ? 1.0 : 0.0) + 0.5 * (up - dn);
          }
        const double det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                           j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                           j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        ++total;
        if (det > 0.0) {
          logs.push_back(std::log(det));
        } else {
          ++folded;
        }
      }
  if (logs.empty()) throw MetricUndefinedError("SDlogJ is undefined: every Jacobian determinant is <= 0");
  double mean = 0.0;
  for (double l : logs) mean += l;
  mean /= static_cast<double>(logs.size());
  double var = 0.0;
  for (double l : logs) var += (l - mean) * (l - mean);
  var /= static_cast<double>(logs.size());
  JacobianStats s;
  s.sdlogj = std::sqrt(var);
  s.folding_fraction = static_cast<double>(folded) / static_cast<double>(total);
  s.voxels = total;
  return s;
}

template double ssim(const Tensor<float>&, const Tensor<float>&);
template double ssim(const Tensor<double>&, const Tensor<double>&);
template Mask mask_from_volume(const Tensor<float>&, double);
template Mask mask_from_volume(const Tensor<double>&, double);
template JacobianStats jacobian_stats(const Tensor<float>&);
template JacobianStats jacobian_stats(const Tensor<double>&);

}  // namespace fusereg
