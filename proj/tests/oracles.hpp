#pragma once

// Brute-force transcriptions used as test oracles. They share no code with
// the library: plain loops over std::vector<double>, no tape, no box sums,
// no separable filters, no distance transforms.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <vector>

#include "fusereg/decoder.hpp"

namespace oracle {

using Vec = std::vector<double>;

template <typename T>
Vec values(const fusereg::Tensor<T>& t) {
  return Vec(t.data().begin(), t.data().end());
}

inline fusereg::Tensor<double> tensor(fusereg::Shape s, Vec v) { return fusereg::Tensor<double>(std::move(s), std::move(v)); }

inline fusereg::Tensor<double> random_tensor(std::mt19937_64& rng, fusereg::Shape s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(fusereg::shape_numel(s));
  for (auto& x : v) x = u(rng);
  return tensor(std::move(s), std::move(v));
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Cross-correlation with zero padding. x [C, D, H, W]; w [Co, C/g, k, k, k].
inline Vec conv3d(const Vec& x, std::array<std::size_t, 4> xs, const Vec& w, std::size_t co, std::size_t k,
                  const Vec& bias, std::size_t stride, std::size_t pad_before, std::size_t pad_after,
                  std::size_t dilation, std::size_t groups, std::array<std::size_t, 3>& out_extent) {
  const std::size_t ci = xs[0];
  const std::size_t cig = ci / groups, cog = co / groups;
  for (int a = 0; a < 3; ++a) {
    out_extent[a] = (xs[a + 1] + pad_before + pad_after - dilation * (k - 1) - 1) / stride + 1;
  }
  const auto [od, oh, ow] = out_extent;
  Vec out(co * od * oh * ow, 0.0);
  for (std::size_t o = 0; o < co; ++o) {
    const std::size_t g = o / cog;
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < cig; ++c)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b)
                for (std::size_t d = 0; d < k; ++d) {
                  const long iz = static_cast<long>(z * stride + a * dilation) - static_cast<long>(pad_before);
                  const long iy = static_cast<long>(y * stride + b * dilation) - static_cast<long>(pad_before);
                  const long ix = static_cast<long>(xx * stride + d * dilation) - static_cast<long>(pad_before);
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<long>(xs[1]) || iy >= static_cast<long>(xs[2]) ||
                      ix >= static_cast<long>(xs[3]))
                    continue;
                  const std::size_t cin = g * cig + c;
                  acc += w[(((o * cig + c) * k + a) * k + b) * k + d] *
                         x[((cin * xs[1] + iz) * xs[2] + iy) * xs[3] + ix];
                }
          out[((o * od + z) * oh + y) * ow + xx] = acc;
        }
  }
  return out;
}

// Applies a library Conv3d's weights through the oracle convolution.
inline Vec conv(const fusereg::Conv3d<double>& c, const Vec& x, std::array<std::size_t, 4> xs) {
  std::array<std::size_t, 3> oe{};
  const auto& ws = c.weight.shape();
  return conv3d(x, xs, values(c.weight), ws[0], ws[2], values(c.bias), c.options.stride, c.options.pad_before,
                c.options.pad_after, c.options.dilation, c.options.groups, oe);
}

// x [N, in] -> [N, out]; W [in, out].
inline Vec linear(const fusereg::Linear<double>& l, const Vec& x, std::size_t n) {
  const std::size_t in = l.weight.dim(0), out = l.weight.dim(1);
  const auto w = values(l.weight);
  const auto b = values(l.bias);
  Vec y(n * out);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < out; ++j) {
      double acc = b[j];
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * w[i * out + j];
      y[r * out + j] = acc;
    }
  return y;
}

// Efficient attention on projected q, k, v [N, d], computed as
// sum_m (sum_i rho_q[n,i] rho_k[m,i]) v[m,j] within each head.
inline Vec efficient_attention(const Vec& q, const Vec& k, const Vec& v, std::size_t n, std::size_t d,
                               std::size_t heads) {
  const std::size_t dh = d / heads;
  Vec out(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    Vec rq(n * dh), rk(n * dh);
    for (std::size_t r = 0; r < n; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < dh; ++i) mx = std::max(mx, q[r * d + c0 + i]);
      double s = 0.0;
      for (std::size_t i = 0; i < dh; ++i) s += std::exp(q[r * d + c0 + i] - mx);
      for (std::size_t i = 0; i < dh; ++i) rq[r * dh + i] = std::exp(q[r * d + c0 + i] - mx) / s;
    }
    for (std::size_t i = 0; i < dh; ++i) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) s += std::exp(k[r * d + c0 + i]);
      for (std::size_t r = 0; r < n; ++r) rk[r * dh + i] = std::exp(k[r * d + c0 + i]) / s;
    }
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < dh; ++j) {
        double acc = 0.0;
        for (std::size_t m = 0; m < n; ++m) {
          double sim = 0.0;
          for (std::size_t i = 0; i < dh; ++i) sim += rq[r * dh + i] * rk[m * dh + i];
          acc += sim * v[m * d + c0 + j];
        }
        out[r * d + c0 + j] = acc;
      }
  }
  return out;
}

// Channel attention: A = column softmax of K^T Q / tau; out = V A per head.
inline Vec channel_attention(const Vec& q, const Vec& k, const Vec& v, std::size_t n, std::size_t d,
                             std::size_t heads, const Vec& log_tau) {
  const std::size_t dh = d / heads;
  Vec out(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    const double tau = std::exp(log_tau[h]);
    std::vector<Vec> a(dh, Vec(dh));
    for (std::size_t j = 0; j < dh; ++j) {
      Vec col(dh);
      for (std::size_t i = 0; i < dh; ++i) {
        double s = 0.0;
        for (std::size_t r = 0; r < n; ++r) s += k[r * d + c0 + i] * q[r * d + c0 + j];
        col[i] = s / tau;
      }
      double z = 0.0;
      for (double c : col) z += std::exp(c);
      for (std::size_t i = 0; i < dh; ++i) a[i][j] = std::exp(col[i]) / z;
    }
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < dh; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < dh; ++i) acc += v[r * d + c0 + i] * a[i][j];
        out[r * d + c0 + j] = acc;
      }
  }
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Nested attention fusion on [C, D, H, W] volumes.
inline Vec fusion(const fusereg::FusionParams<double>& p, const Vec& x1, const Vec& x2, std::array<std::size_t, 4> s) {
  const std::size_t c = s[0], n = s[1] * s[2] * s[3];
  // global descriptors of x2
  Vec avg(c, 0.0), mx(c, -std::numeric_limits<double>::infinity());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < n; ++i) {
      avg[ch] += x2[ch * n + i] / static_cast<double>(n);
      mx[ch] = std::max(mx[ch], x2[ch * n + i]);
    }
  const Vec ga = linear(p.global, avg, 1), gm = linear(p.global, mx, 1);
  // local features of x1
  Vec local = conv(p.local_depthwise, x1, s);
  local = conv(p.local_pointwise, local, s);
  local = conv(p.local_dilated, local, s);
  local = conv(p.local_reduce, local, s);
  // U = LN over channels of local + context
  const auto gamma = values(p.norm.gamma), beta = values(p.norm.beta);
  Vec u(c * n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) mean += local[ch * n + i] + ga[ch] + gm[ch];
    mean /= static_cast<double>(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double t = local[ch * n + i] + ga[ch] + gm[ch] - mean;
      var += t * t;
    }
    var /= static_cast<double>(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      u[ch * n + i] = (local[ch * n + i] + ga[ch] + gm[ch] - mean) / std::sqrt(var + p.norm.eps) * gamma[ch] + beta[ch];
    }
  }
  const Vec logits = conv(p.select, u, s);
  Vec fused(c * n);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) z += std::exp(logits[ch * n + i]);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t j = ch * n + i;
      const double sm = std::exp(logits[j]) / z;
      const double a = sm * x1[j] + x1[j];
      const double b = sm * x2[j] + x2[j];
      fused[j] = (a * sigmoid(b)) * (b * sigmoid(a));
    }
  }
  const Vec gate = conv(p.gate, fused, s);
  Vec gated(c * n);
  for (std::size_t j = 0; j < c * n; ++j) gated[j] = sigmoid(gate[j]) * x1[j];
  return conv(p.project, gated, s);
}

// Trilinear warp with coordinates clamped to the volume.
inline Vec warp(const Vec& m, std::array<std::size_t, 4> s, const Vec& u) {
  const std::size_t C = s[0], D = s[1], H = s[2], W = s[3], n = D * H * W;
  Vec out(C * n);
  const std::size_t ext[3] = {D, H, W};
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t v = (z * H + y) * W + x;
        const double base[3] = {double(z), double(y), double(x)};
        std::size_t lo[3], hi[3];
        double t[3];
        for (int a = 0; a < 3; ++a) {
          double p = base[a] + u[a * n + v];
          p = std::clamp(p, 0.0, double(ext[a] - 1));
          lo[a] = static_cast<std::size_t>(std::floor(p));
          hi[a] = std::min(lo[a] + 1, ext[a] - 1);
          t[a] = p - double(lo[a]);
        }
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int corner = 0; corner < 8; ++corner) {
            std::size_t idx[3];
            double wgt = 1.0;
            for (int a = 0; a < 3; ++a) {
              const bool up = (corner >> (2 - a)) & 1;
              idx[a] = up ? hi[a] : lo[a];
              wgt *= up ? t[a] : 1.0 - t[a];
            }
            acc += wgt * m[c * n + (idx[0] * H + idx[1]) * W + idx[2]];
          }
          out[c * n + v] = acc;
        }
      }
  return out;
}

// 1 - mean over voxels of cross^2 / (var_f var_w + eps) over clipped windows.
inline double ncc_loss(const Vec& f, const Vec& w, std::array<std::size_t, 3> e, std::size_t window, double eps) {
  const long r = static_cast<long>(window / 2);
  double total = 0.0;
  for (long z = 0; z < long(e[0]); ++z)
    for (long y = 0; y < long(e[1]); ++y)
      for (long x = 0; x < long(e[2]); ++x) {
        std::vector<std::size_t> idx;
        for (long a = std::max(0L, z - r); a <= std::min(long(e[0]) - 1, z + r); ++a)
          for (long b = std::max(0L, y - r); b <= std::min(long(e[1]) - 1, y + r); ++b)
            for (long c = std::max(0L, x - r); c <= std::min(long(e[2]) - 1, x + r); ++c)
              idx.push_back((a * e[1] + b) * e[2] + c);
        double mf = 0.0, mw = 0.0;
        for (auto i : idx) {
          mf += f[i];
          mw += w[i];
        }
        mf /= double(idx.size());
        mw /= double(idx.size());
        double cross = 0.0, vf = 0.0, vw = 0.0;
        for (auto i : idx) {
          cross += (f[i] - mf) * (w[i] - mw);
          vf += (f[i] - mf) * (f[i] - mf);
          vw += (w[i] - mw) * (w[i] - mw);
        }
        total += cross * cross / (vf * vw + eps);
      }
  return 1.0 - total / double(e[0] * e[1] * e[2]);
}

// Mean SSIM with a 7^3 Gaussian window (sigma 1.5) over valid positions.
inline double ssim(const Vec& a, const Vec& b, std::array<std::size_t, 3> e) {
  constexpr std::size_t K = 7;
  double g1[K], gs = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    g1[i] = std::exp(-(double(i) - 3.0) * (double(i) - 3.0) / (2.0 * 1.5 * 1.5));
    gs += g1[i];
  }
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  const auto [lo2, hi2] = std::minmax_element(b.begin(), b.end());
  const double range = std::max(*hi, *hi2) - std::min(*lo, *lo2);
  if (range == 0.0) return 1.0;
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t z = 0; z + K <= e[0]; ++z)
    for (std::size_t y = 0; y + K <= e[1]; ++y)
      for (std::size_t x = 0; x + K <= e[2]; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t i = 0; i < K; ++i)
          for (std::size_t j = 0; j < K; ++j)
            for (std::size_t k = 0; k < K; ++k) {
              const double wgt = g1[i] * g1[j] * g1[k] / (gs * gs * gs);
              const std::size_t v = ((z + i) * e[1] + y + j) * e[2] + x + k;
              ma += wgt * a[v];
              mb += wgt * b[v];
              saa += wgt * a[v] * a[v];
              sbb += wgt * b[v] * b[v];
              sab += wgt * a[v] * b[v];
            }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / double(count);
}

// 95th percentile (linear interpolation) of pooled directed surface
// distances, each found by exhaustive search.
inline double hd95(const std::vector<int>& a, const std::vector<int>& b, std::array<std::size_t, 3> e) {
  auto inside = [&](const std::vector<int>& m, long z, long y, long x) {
    if (z < 0 || y < 0 || x < 0 || z >= long(e[0]) || y >= long(e[1]) || x >= long(e[2])) return false;
    return m[(z * e[1] + y) * e[2] + x] != 0;
  };
  auto surface = [&](const std::vector<int>& m) {
    std::vector<std::array<long, 3>> pts;
    for (long z = 0; z < long(e[0]); ++z)
      for (long y = 0; y < long(e[1]); ++y)
        for (long x = 0; x < long(e[2]); ++x) {
          if (!inside(m, z, y, x)) continue;
          if (!inside(m, z - 1, y, x) || !inside(m, z + 1, y, x) || !inside(m, z, y - 1, x) ||
              !inside(m, z, y + 1, x) || !inside(m, z, y, x - 1) || !inside(m, z, y, x + 1))
            pts.push_back({z, y, x});
        }
    return pts;
  };
  const auto sa = surface(a), sb = surface(b);
  std::vector<double> d;
  auto directed = [&](const auto& from, const auto& to) {
    for (const auto& p : from) {
      long best = std::numeric_limits<long>::max();
      for (const auto& q : to) {
        const long dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      d.push_back(std::sqrt(double(best)));
    }
  };
  directed(sa, sb);
  directed(sb, sa);
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * double(d.size() - 1);
  const std::size_t i = static_cast<std::size_t>(pos);
  const std::size_t j = std::min(i + 1, d.size() - 1);
  return d[i] + (pos - double(i)) * (d[j] - d[i]);
}

struct JacobianResult {
  double sdlogj = 0.0;
  double folding = 0.0;
};

// det(I + grad u) by cofactor expansion along the first column; population
// standard deviation of log det over positive determinants.
inline JacobianResult jacobian(const Vec& u, std::array<std::size_t, 3> e) {
  const std::size_t n = e[0] * e[1] * e[2];
  auto at = [&](int c, std::size_t z, std::size_t y, std::size_t x) { return u[c * n + (z * e[1] + y) * e[2] + x]; };
  std::vector<double> logs;
  std::size_t folded = 0, total = 0;
  for (std::size_t z = 1; z + 1 < e[0]; ++z)
    for (std::size_t y = 1; y + 1 < e[1]; ++y)
      for (std::size_t x = 1; x + 1 < e[2]; ++x) {
        double m[3][3];
        for (int c = 0; c < 3; ++c) {
          m[c][0] = (at(c, z + 1, y, x) - at(c, z - 1, y, x)) / 2.0 + (c == 0);
          m[c][1] = (at(c, z, y + 1, x) - at(c, z, y - 1, x)) / 2.0 + (c == 1);
          m[c][2] = (at(c, z, y, x + 1) - at(c, z, y, x - 1)) / 2.0 + (c == 2);
        }
        const double det = m[0][0] * (m[1][1] * m[2][2] - m[2][1] * m[1][2]) -
                           m[1][0] * (m[0][1] * m[2][2] - m[2][1] * m[0][2]) +
                           m[2][0] * (m[0][1] * m[1][2] - m[1][1] * m[0][2]);
        ++total;
        if (det > 0) {
          logs.push_back(std::log(det));
        } else {
          ++folded;
        }
      }
  JacobianResult r;
  r.folding = double(folded) / double(total);
  double mean = 0.0;
  for (double l : logs) mean += l;
  mean /= double(logs.size());
  double ss = 0.0;
  for (double l : logs) ss += (l - mean) * (l - mean);
  r.sdlogj = std::sqrt(ss / double(logs.size()));
  return r;
}

}  // namespace oracle
