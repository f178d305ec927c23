#include "fusereg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>

#include "fusereg/metrics.hpp"
#include "fusereg/warp.hpp"

namespace fusereg {

namespace {

using Extent = std::array<std::size_t, 3>;

// Separable Gaussian blur with clamped borders.
std::vector<double> blur(const std::vector<double>& in, const Extent& e, double sigma) {
  if (sigma <= 0.0) return in;
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> taps;
  double s = 0.0;
  for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
    taps.push_back(std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma)));
    s += taps.back();
  }
  for (auto& t : taps) t /= s;
  std::vector<double> cur = in, next(in.size());
  const std::size_t stride[3] = {e[1] * e[2], e[2], 1};
  for (int ax = 0; ax < 3; ++ax) {
    const auto n = static_cast<std::ptrdiff_t>(e[ax]);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const auto pos = static_cast<std::ptrdiff_t>((i / stride[ax]) % e[ax]);
      const std::size_t base = i - static_cast<std::size_t>(pos) * stride[ax];
      double acc = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        const auto q = std::clamp<std::ptrdiff_t>(pos + k, 0, n - 1);
        acc += taps[static_cast<std::size_t>(k + radius)] * cur[base + static_cast<std::size_t>(q) * stride[ax]];
      }
      next[i] = acc;
    }
    std::swap(cur, next);
  }
  return cur;
}

std::vector<double> smooth_noise(std::mt19937_64& rng, const Extent& e, double sigma) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(e[0] * e[1] * e[2]);
  for (auto& x : v) x = normal(rng);
  v = blur(v, e, sigma);
  double mean = 0.0, var = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  for (auto& x : v) x = sd > 0.0 ? (x - mean) / sd : 0.0;
  return v;
}

}  // namespace

Tensor<double> synth_phantom(std::uint64_t seed, const Extent& e) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = e[0] * e[1] * e[2];
  std::vector<double> img(n, 0.0);
  const auto background = smooth_noise(rng, e, 1.5);
  const auto texture = smooth_noise(rng, e, 1.0);

  struct Blob {
    double c[3], r[3], level, grad[3];
  };
  std::vector<Blob> blobs;
  // One large body plus a few inner structures.
  Blob body{};
  for (int d = 0; d < 3; ++d) {
    body.c[d] = (0.5 + 0.06 * (unit(rng) - 0.5)) * static_cast<double>(e[d] - 1);
    body.r[d] = (0.36 + 0.06 * unit(rng)) * static_cast<double>(e[d]);
    body.grad[d] = 0.3 * (unit(rng) - 0.5);
  }
  body.level = 0.5;
  blobs.push_back(body);
  const int inner = 4;
  for (int k = 0; k < inner; ++k) {
    Blob b{};
    for (int d = 0; d < 3; ++d) {
      b.c[d] = body.c[d] + (unit(rng) - 0.5) * body.r[d];
      b.r[d] = (0.08 + 0.12 * unit(rng)) * static_cast<double>(e[d]);
      b.grad[d] = 0.4 * (unit(rng) - 0.5);
    }
    b.level = (k % 2 == 0 ? 0.35 : -0.25) * (0.6 + 0.4 * unit(rng));
    blobs.push_back(b);
  }

  for (std::size_t z = 0, i = 0; z < e[0]; ++z)
    for (std::size_t y = 0; y < e[1]; ++y)
      for (std::size_t x = 0; x < e[2]; ++x, ++i) {
        const double p[3] = {static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
        double v = 0.06 + 0.02 * background[i];
        for (const auto& b : blobs) {
          double q = 0.0, g = 0.0;
          for (int d = 0; d < 3; ++d) {
            const double t = (p[d] - b.c[d]) / b.r[d];
            q += t * t;
            g += b.grad[d] * t;
          }
          if (q <= 1.0) v += b.level * (1.0 + g);
        }
        if (v > 0.1) v += 0.12 * texture[i];
        img[i] = std::max(v, 0.0);
      }
  img = blur(img, e, 0.6);
  return Tensor<double>(Shape{1, e[0], e[1], e[2]}, std::move(img));
}

Tensor<double> synth_field(std::uint64_t seed, const Extent& e, double amplitude, double smoothness) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = e[0] * e[1] * e[2];
  std::vector<double> u(3 * n, 0.0);
  if (amplitude == 0.0) return Tensor<double>(Shape{3, e[0], e[1], e[2]}, std::move(u));
  if (smoothness <= 0.0) throw ConfigError("synth_field: smoothness must be > 0");
  // Sum of Gaussian bumps with random centres and random displacement vectors.
  const int bumps = 12;
  for (int k = 0; k < bumps; ++k) {
    double c[3], a[3];
    for (int d = 0; d < 3; ++d) {
      c[d] = (0.1 + 0.8 * unit(rng)) * static_cast<double>(e[d] - 1);
      a[d] = normal(rng);
    }
    for (std::size_t z = 0, i = 0; z < e[0]; ++z)
      for (std::size_t y = 0; y < e[1]; ++y)
        for (std::size_t x = 0; x < e[2]; ++x, ++i) {
          const double dz = static_cast<double>(z) - c[0], dy = static_cast<double>(y) - c[1],
                       dx = static_cast<double>(x) - c[2];
          const double w = std::exp(-(dz * dz + dy * dy + dx * dx) / (2.0 * smoothness * smoothness));
          for (int d = 0; d < 3; ++d) u[d * n + i] += a[d] * w;
        }
  }
  double peak = 0.0;
  for (double v : u) peak = std::max(peak, std::abs(v));
  for (auto& v : u) v *= amplitude / peak;
  return Tensor<double>(Shape{3, e[0], e[1], e[2]}, std::move(u));
}

double intensity_remap(double x) {
  x = std::max(x, 0.0);
  return x * (1.15 - 0.15 * std::min(x, 1.0));
}

SynthPair synth_pair(const SynthOptions& o) {
  for (auto v : o.shape) {
    if (v < 3) throw ConfigError("synth_pair: every extent must be >= 3");
  }
  if (o.amplitude < 0.0) throw ConfigError("synth_pair: amplitude must be >= 0");
  SynthPair out;
  out.fixed = synth_phantom(o.seed, o.shape);
  double amp = o.amplitude;
  for (;;) {
    out.field = synth_field(o.seed, o.shape, amp, o.smoothness);
    if (amp == 0.0 || jacobian_stats(out.field).folding_fraction == 0.0) break;
    std::cerr << "synth_pair: amplitude " << amp << " folds the field, retrying with " << amp / 2 << "\n";
    amp /= 2;
    ++out.halvings;
  }
  out.amplitude = amp;
  out.moving = warp_trilinear(out.fixed, out.field);
  for (auto& v : out.moving.mutable_data()) v = intensity_remap(v);
  return out;
}

}  // namespace fusereg
