#include "fusereg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace fusereg {

namespace {

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank, const char* op) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.resize(r);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t pa = i + a.size() >= r ? i + a.size() - r : SIZE_MAX;
    const std::size_t pb = i + b.size() >= r ? i + b.size() - r : SIZE_MAX;
    const std::size_t ea = pa == SIZE_MAX ? 1 : a[pa];
    const std::size_t eb = pb == SIZE_MAX ? 1 : b[pb];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " do not broadcast");
    }
    p.out[i] = std::max(ea, eb);
    if (ea != 1) p.stride_a[i] = sa[pa];
    if (eb != 1) p.stride_b[i] = sb[pb];
  }
  return p;
}

// Visits every output element with the matching flat offsets into a and b.
template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t n = shape_numel(p.out);
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.stride_a[ax] * p.out[ax];
      ib -= p.stride_b[ax] * p.out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da,
                    DB db) {
  const auto plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<T> out(shape_numel(plan.out));
  const auto av = a.data();
  const auto bv = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      out[o] = fwd(av[ia], bv[ib]);
    });
  }
  Tensor<T> result(plan.out, std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&a, &b})) {
    tape->record(name, result, {a, b}, [a, b, plan, da, db](std::span<const T> g) {
      auto ga = detail::grad_sink(a);
      auto gb = detail::grad_sink(b);
      const auto av = a.data();
      const auto bv = b.data();
      for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (!ga.empty()) ga[ia] += g[o] * da(av[ia], bv[ib]);
        if (!gb.empty()) gb[ib] += g[o] * db(av[ia], bv[ib]);
      });
    });
  }
  return result;
}

// `deriv(x, y)` returns dy/dx given input x and output y.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  const auto av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  Tensor<T> result(a.shape(), std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&a})) {
    tape->record(name, result, {a}, [a, result, deriv](std::span<const T> g) {
      auto ga = detail::grad_sink(a);
      if (ga.empty()) return;
      const auto x = a.data();
      const auto y = result.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
    });
  }
  return result;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op<T>("neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary_op<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary_op<T>(
      "add_scalar", a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op<T>(
      "sigmoid", a, [](T x) { return stable_sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T c = static_cast<T>(kGeluC);
  const T k = static_cast<T>(kGeluA);
  return unary_op<T>(
      "gelu", a,
      [c, k](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [c, k](T x, T) {
        const T t = std::tanh(c * (x + k * x * x * x));
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto result = Tensor<T>::scalar(acc);
  if (auto* tape = detail::tracking_tape<T>({&a})) {
    tape->record("sum", result, {a}, [a](std::span<const T> g) {
      auto ga = detail::grad_sink(a);
      for (auto& v : ga) v += g[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  T acc = 0;
  for (T v : a.data()) acc += v;
  const T n = static_cast<T>(a.numel());
  auto result = Tensor<T>::scalar(acc / n);
  if (auto* tape = detail::tracking_tape<T>({&a})) {
    tape->record("mean", result, {a}, [a, n](std::span<const T> g) {
      auto ga = detail::grad_sink(a);
      for (auto& v : ga) v += g[0] / n;
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t n = b.shape()[b.rank() - 1];
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  BroadcastPlan plan;
  try {
    plan = plan_broadcast(batch_a, batch_b, "matmul");
  } catch (const ShapeError&) {
    throw ShapeError("matmul: batch dimensions of " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not broadcast");
  }
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(shape_numel(out_shape), T(0));
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t a_mat = m * k, b_mat = k * n, c_mat = m * n;
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    const T* A = av.data() + ia * a_mat;
    const T* B = bv.data() + ib * b_mat;
    T* C = out.data() + o * c_mat;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = A[i * k + p];
        const T* brow = B + p * n;
        T* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  });
  Tensor<T> result(out_shape, std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&a, &b})) {
    tape->record("matmul", result, {a, b}, [a, b, plan, m, k, n](std::span<const T> g) {
      auto ga = detail::grad_sink(a);
      auto gb = detail::grad_sink(b);
      const auto av = a.data();
      const auto bv = b.data();
      const std::size_t a_mat = m * k, b_mat = k * n, c_mat = m * n;
      for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        const T* G = g.data() + o * c_mat;
        const T* A = av.data() + ia * a_mat;
        const T* B = bv.data() + ib * b_mat;
        if (!ga.empty()) {
          T* GA = ga.data() + ia * a_mat;  // dA = G B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T acc = 0;
              for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
              GA[i * k + p] += acc;
            }
        }
        if (!gb.empty()) {
          T* GB = gb.data() + ib * b_mat;  // dB = A^T G
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T aip = A[i * k + p];
              for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += aip * G[i * n + j];
            }
        }
      });
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> result(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (auto* tape = detail::tracking_tape<T>({&a})) {
    tape->record("reshape", result, {a}, [a](std::span<const T> g) {
      auto ga = detail::grad_sink(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> axes) {
  const std::size_t r = a.rank();
  std::vector<std::size_t> check = axes;
  std::sort(check.begin(), check.end());
  std::vector<std::size_t> iota(r);
  std::iota(iota.begin(), iota.end(), 0);
  if (check != iota) throw ShapeError("permute: axes are not a permutation of 0.." + std::to_string(r));
  const auto in_strides = contiguous_strides(a.shape());
  BroadcastPlan plan;  // reuse the strided walker: stride_a indexes the source
  plan.out.resize(r);
  plan.stride_a.resize(r);
  plan.stride_b.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) {
    plan.out[i] = a.shape()[axes[i]];
    plan.stride_a[i] = in_strides[axes[i]];
  }
  std::vector<T> out(a.numel());
  const auto av = a.data();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t) { out[o] = av[ia]; });
  Tensor<T> result(plan.out, std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&a})) {
    tape->record("permute", result, {a}, [a, plan](std::span<const T> g) {
      auto ga = detail::grad_sink(a);
      if (ga.empty()) return;
      for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t) { ga[ia] += g[o]; });
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, std::move(axes));
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    out_shape[axis] += s[axis];
    s[axis] = first[axis];
    if (s != first) {
      throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(first));
    }
  }
  const auto sp = split_at(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;  // start along axis of each part
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.shape()[axis];
    const auto pv = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.data() + o * ext * sp.inner, ext * sp.inner,
                  out.data() + (o * sp.extent + offset) * sp.inner);
    }
    offset += ext;
  }
  Tensor<T> result(out_shape, std::move(out));
  GradTape<T>* tape = GradTape<T>::active();
  const bool any = std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.requires_grad(); });
  if (tape && any) {
    std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
    tape->record("concat", result, inputs, [inputs, offsets, sp, axis](std::span<const T> g) {
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto gi = detail::grad_sink(inputs[i]);
        if (gi.empty()) continue;
        const std::size_t ext = inputs[i].shape()[axis];
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src = g.data() + (o * sp.extent + offsets[i]) * sp.inner;
          T* dst = gi.data() + o * ext * sp.inner;
          for (std::size_t j = 0; j < ext * sp.inner; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis_in) {
  const std::size_t axis = normalize_axis(axis_in, x.rank(), "softmax");
  const auto sp = split_at(x.shape(), axis);
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      T mx = xv[base];
      for (std::size_t j = 1; j < sp.extent; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      T z = 0;
      for (std::size_t j = 0; j < sp.extent; ++j) {
        const T e = std::exp(xv[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.extent; ++j) out[base + j * sp.inner] /= z;
    }
  }
  Tensor<T> result(x.shape(), std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&x})) {
    tape->record("softmax", result, {x}, [x, result, sp](std::span<const T> g) {
      auto gx = detail::grad_sink(x);
      if (gx.empty()) return;
      const auto y = result.data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = o * sp.extent * sp.inner + i;
          T dot = 0;
          for (std::size_t j = 0; j < sp.extent; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
          for (std::size_t j = 0; j < sp.extent; ++j) {
            const std::size_t q = base + j * sp.inner;
            gx[q] += y[q] * (g[q] - dot);
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    std::ptrdiff_t axis_in, double eps) {
  const std::size_t axis = normalize_axis(axis_in, x.rank(), "layernorm");
  const auto sp = split_at(x.shape(), axis);
  if (gamma.numel() != sp.extent || beta.numel() != sp.extent) {
    throw ShapeError("layernorm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match axis extent " +
                     std::to_string(sp.extent));
  }
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(sp.outer * sp.inner);
  const T n = static_cast<T>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      T mu = 0;
      for (std::size_t j = 0; j < sp.extent; ++j) mu += xv[base + j * sp.inner];
      mu /= n;
      T var = 0;
      for (std::size_t j = 0; j < sp.extent; ++j) {
        const T d = xv[base + j * sp.inner] - mu;
        var += d * d;
      }
      var /= n;
      const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
      inv_std[o * sp.inner + i] = is;
      for (std::size_t j = 0; j < sp.extent; ++j) {
        const std::size_t q = base + j * sp.inner;
        xhat[q] = (xv[q] - mu) * is;
        out[q] = xhat[q] * gv[j] + bv[j];
      }
    }
  }
  Tensor<T> result(x.shape(), std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&x, &gamma, &beta})) {
    tape->record("layernorm", result, {x, gamma, beta},
                 [x, gamma, beta, sp, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                     std::span<const T> g) {
                   auto gx = detail::grad_sink(x);
                   auto gg = detail::grad_sink(gamma);
                   auto gb = detail::grad_sink(beta);
                   const auto gv = gamma.data();
                   const T n = static_cast<T>(sp.extent);
                   for (std::size_t o = 0; o < sp.outer; ++o) {
                     for (std::size_t i = 0; i < sp.inner; ++i) {
                       const std::size_t base = o * sp.extent * sp.inner + i;
                       T m1 = 0, m2 = 0;
                       for (std::size_t j = 0; j < sp.extent; ++j) {
                         const std::size_t q = base + j * sp.inner;
                         const T dxh = g[q] * gv[j];
                         m1 += dxh;
                         m2 += dxh * xhat[q];
                         if (!gg.empty()) gg[j] += g[q] * xhat[q];
                         if (!gb.empty()) gb[j] += g[q];
                       }
                       if (gx.empty()) continue;
                       m1 /= n;
                       m2 /= n;
                       const T is = inv_std[o * sp.inner + i];
                       for (std::size_t j = 0; j < sp.extent; ++j) {
                         const std::size_t q = base + j * sp.inner;
                         gx[q] += is * (g[q] * gv[j] - m1 - xhat[q] * m2);
                       }
                     }
                   }
                 });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Convolution

Conv3dOptions Conv3dOptions::same(std::size_t kernel, std::size_t dilation, std::size_t groups) {
  Conv3dOptions o;
  const std::size_t total = dilation * (kernel - 1);
  o.pad_before = total / 2;
  o.pad_after = total - o.pad_before;
  o.dilation = dilation;
  o.groups = groups;
  return o;
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const Conv3dOptions& opt) {
  if (opt.stride == 0 || opt.dilation == 0 || kernel == 0) {
    throw ConfigError("conv3d: stride, dilation and kernel must be positive");
  }
  const auto span = static_cast<std::ptrdiff_t>(in + opt.pad_before + opt.pad_after) -
                    static_cast<std::ptrdiff_t>(opt.dilation * (kernel - 1)) - 1;
  if (span < 0) {
    throw ConfigError("conv3d: input extent " + std::to_string(in) + " with kernel " +
                      std::to_string(kernel) + " gives a nonpositive output extent");
  }
  return static_cast<std::size_t>(span) / opt.stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t cin, cout, groups, cin_g, cout_g;
  std::array<std::size_t, 3> in, k, out;
  std::size_t stride, dilation, pad;
};

// Output index range [lo, hi) for which o*stride + off lands inside [0, in).
std::pair<std::size_t, std::size_t> valid_range(std::ptrdiff_t off, std::size_t in, std::size_t out,
                                                std::size_t stride) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in) - 1 - off;
  if (last < 0) return {0, 0};
  std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out), last / s + 1);
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Calls f(ci, co, w_index, x_row, out_row, ox_lo, ox_hi, x_off) for every
// (kernel tap, output row) pair that overlaps the input.
template <typename F>
void conv_walk(const ConvGeometry& g, F&& f) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto dil = static_cast<std::ptrdiff_t>(g.dilation);
  for (std::size_t co = 0; co < g.cout; ++co) {
    const std::size_t grp = co / g.cout_g;
    for (std::size_t cl = 0; cl < g.cin_g; ++cl) {
      const std::size_t ci = grp * g.cin_g + cl;
      for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
        const std::ptrdiff_t offz = static_cast<std::ptrdiff_t>(kz) * dil - pad;
        const auto [zlo, zhi] = valid_range(offz, g.in[0], g.out[0], g.stride);
        for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
          const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ky) * dil - pad;
          const auto [ylo, yhi] = valid_range(offy, g.in[1], g.out[1], g.stride);
          for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
            const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kx) * dil - pad;
            const auto [xlo, xhi] = valid_range(offx, g.in[2], g.out[2], g.stride);
            if (xlo >= xhi) continue;
            const std::size_t widx = (((co * g.cin_g + cl) * g.k[0] + kz) * g.k[1] + ky) * g.k[2] + kx;
            for (std::size_t oz = zlo; oz < zhi; ++oz) {
              const std::size_t iz = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oz * g.stride) + offz);
              for (std::size_t oy = ylo; oy < yhi; ++oy) {
                const std::size_t iy = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oy * g.stride) + offy);
                const std::size_t xrow = ((ci * g.in[0] + iz) * g.in[1] + iy) * g.in[2];
                const std::size_t orow = ((co * g.out[0] + oz) * g.out[1] + oy) * g.out[2];
                f(widx, xrow, orow, xlo, xhi, offx);
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv3dOptions& opt) {
  if (x.rank() != 4 || w.rank() != 5) {
    throw ShapeError("conv3d: expected x [C,D,H,W] and w [Co,Ci/g,kd,kh,kw], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (opt.pad_before != opt.pad_after && opt.stride != 1) {
    throw ConfigError("conv3d: asymmetric padding requires stride 1");
  }
  ConvGeometry g{};
  g.cin = x.dim(0);
  g.cout = w.dim(0);
  g.groups = opt.groups;
  if (g.groups == 0 || g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ConfigError("conv3d: channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) +
                      " not divisible by groups " + std::to_string(g.groups));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (w.dim(1) != g.cin_g) {
    throw ShapeError("conv3d: kernel " + shape_str(w.shape()) + " expects " +
                     std::to_string(w.dim(1) * g.groups) + " input channels, got " +
                     std::to_string(g.cin));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv3d: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(g.cout) + " output channels");
  }
  g.stride = opt.stride;
  g.dilation = opt.dilation;
  g.pad = opt.pad_before;
  for (int a = 0; a < 3; ++a) {
    g.in[a] = x.dim(a + 1);
    g.k[a] = w.dim(a + 2);
    g.out[a] = conv_out_extent(g.in[a], g.k[a], opt);
  }
  const std::size_t plane = g.out[0] * g.out[1] * g.out[2];
  std::vector<T> out(g.cout * plane, T(0));
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t co = 0; co < g.cout; ++co) std::fill_n(out.data() + co * plane, plane, bv[co]);
  }
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  const std::size_t s = g.stride;
  conv_walk(g, [&](std::size_t widx, std::size_t xrow, std::size_t orow, std::size_t xlo,
                   std::size_t xhi, std::ptrdiff_t offx) {
    const T wt = wv[widx];
    const T* xr = xv + xrow;
    T* orr = out.data() + orow;
    for (std::size_t ox = xlo; ox < xhi; ++ox) {
      orr[ox] += wt * xr[static_cast<std::ptrdiff_t>(ox * s) + offx];
    }
  });
  Tensor<T> result(Shape{g.cout, g.out[0], g.out[1], g.out[2]}, std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&x, &w, &bias})) {
    std::vector<Tensor<T>> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    tape->record("conv3d", result, inputs, [x, w, bias, g](std::span<const T> gout) {
      auto gx = detail::grad_sink(x);
      auto gw = detail::grad_sink(w);
      auto gb = detail::grad_sink(bias);
      const T* xv = x.data().data();
      const T* wv = w.data().data();
      const std::size_t s = g.stride;
      const std::size_t plane = g.out[0] * g.out[1] * g.out[2];
      if (!gb.empty()) {
        for (std::size_t co = 0; co < g.cout; ++co)
          for (std::size_t i = 0; i < plane; ++i) gb[co] += gout[co * plane + i];
      }
      if (gx.empty() && gw.empty()) return;
      conv_walk(g, [&](std::size_t widx, std::size_t xrow, std::size_t orow, std::size_t xlo,
                       std::size_t xhi, std::ptrdiff_t offx) {
        const T* gr = gout.data() + orow;
        if (!gw.empty()) {
          const T* xr = xv + xrow;
          T acc = 0;
          for (std::size_t ox = xlo; ox < xhi; ++ox) {
            acc += gr[ox] * xr[static_cast<std::ptrdiff_t>(ox * s) + offx];
          }
          gw[widx] += acc;
        }
        if (!gx.empty()) {
          const T wt = wv[widx];
          T* gxr = gx.data() + xrow;
          for (std::size_t ox = xlo; ox < xhi; ++ox) {
            gxr[static_cast<std::ptrdiff_t>(ox * s) + offx] += wt * gr[ox];
          }
        }
      });
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Pooling / resampling

template <typename T>
Tensor<T> global_pool(const Tensor<T>& x, PoolMode mode) {
  if (x.rank() < 2) throw ShapeError("global_pool expects [C, ...spatial], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0);
  const std::size_t n = x.numel() / c;
  if (n == 0) throw ShapeError("global_pool over empty spatial extent");
  const auto xv = x.data();
  std::vector<T> out(c);
  std::vector<std::size_t> argmax(mode == PoolMode::Max ? c : 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* p = xv.data() + ch * n;
    if (mode == PoolMode::Avg) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += p[i];
      out[ch] = acc / static_cast<T>(n);
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (p[i] > p[best]) best = i;
      argmax[ch] = best;
      out[ch] = p[best];
    }
  }
  Tensor<T> result(Shape{c}, std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&x})) {
    tape->record(mode == PoolMode::Avg ? "avg_pool" : "max_pool", result, {x},
                 [x, mode, c, n, argmax = std::move(argmax)](std::span<const T> g) {
                   auto gx = detail::grad_sink(x);
                   if (gx.empty()) return;
                   for (std::size_t ch = 0; ch < c; ++ch) {
                     if (mode == PoolMode::Avg) {
                       const T share = g[ch] / static_cast<T>(n);
                       for (std::size_t i = 0; i < n; ++i) gx[ch * n + i] += share;
                     } else {
                       gx[ch * n + argmax[ch]] += g[ch];
                     }
                   }
                 });
  }
  return result;
}

namespace {

struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

std::vector<LerpTap> upsample_taps(std::size_t in, std::size_t factor) {
  std::vector<LerpTap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    taps[o] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

namespace {

struct UpsamplePlan {
  std::size_t channels;
  std::array<std::size_t, 3> in;
  std::vector<LerpTap> tz, ty, tx;

  // fn(out_index, in_index, weight) for all eight corners of every output voxel.
  template <typename T, typename F>
  void visit(F&& fn) const {
    std::size_t o = 0;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const std::size_t cbase = ch * in[0] * in[1] * in[2];
      for (const auto& az : tz)
        for (const auto& ay : ty)
          for (const auto& ax : tx) {
            const std::size_t zs[2] = {az.i0, az.i1};
            const std::size_t ys[2] = {ay.i0, ay.i1};
            const std::size_t xs[2] = {ax.i0, ax.i1};
            const T wz[2] = {static_cast<T>(1 - az.frac), static_cast<T>(az.frac)};
            const T wy[2] = {static_cast<T>(1 - ay.frac), static_cast<T>(ay.frac)};
            const T wx[2] = {static_cast<T>(1 - ax.frac), static_cast<T>(ax.frac)};
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int d = 0; d < 2; ++d)
                  fn(o, cbase + (zs[a] * in[1] + ys[b]) * in[2] + xs[d], wz[a] * wy[b] * wx[d]);
            ++o;
          }
    }
  }
};

}  // namespace

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, std::size_t factor) {
  if (x.rank() != 4) throw ShapeError("upsample_trilinear expects [C,d,h,w], got " + shape_str(x.shape()));
  if (factor == 0) throw ConfigError("upsample_trilinear: factor must be >= 1");
  if (factor == 1) return reshape(x, x.shape());
  UpsamplePlan plan{x.dim(0), {x.dim(1), x.dim(2), x.dim(3)}, {}, {}, {}};
  plan.tz = upsample_taps(plan.in[0], factor);
  plan.ty = upsample_taps(plan.in[1], factor);
  plan.tx = upsample_taps(plan.in[2], factor);
  const auto xv = x.data();
  std::vector<T> out(plan.channels * plan.tz.size() * plan.ty.size() * plan.tx.size());
  plan.visit<T>([&](std::size_t o, std::size_t i, T wgt) { out[o] += wgt * xv[i]; });
  Tensor<T> result(Shape{plan.channels, plan.tz.size(), plan.ty.size(), plan.tx.size()},
                   std::move(out));
  if (auto* tape = detail::tracking_tape<T>({&x})) {
    tape->record("upsample_trilinear", result, {x}, [x, plan](std::span<const T> g) {
      auto gx = detail::grad_sink(x);
      if (gx.empty()) return;
      plan.visit<T>([&](std::size_t o, std::size_t i, T wgt) { gx[i] += wgt * g[o]; });
    });
  }
  return result;
}

template <typename T>
Tensor<T> tokens_to_volume(const Tensor<T>& tokens, const std::array<std::size_t, 3>& spatial) {
  const std::size_t n = spatial[0] * spatial[1] * spatial[2];
  if (tokens.rank() != 2 || tokens.dim(0) != n) {
    throw ShapeError("tokens " + shape_str(tokens.shape()) + " do not match spatial shape " +
                     shape_str(Shape{spatial[0], spatial[1], spatial[2]}));
  }
  return reshape(transpose(tokens), Shape{tokens.dim(1), spatial[0], spatial[1], spatial[2]});
}

template <typename T>
Tensor<T> volume_to_tokens(const Tensor<T>& volume) {
  if (volume.rank() != 4) throw ShapeError("expected a [C,d,h,w] volume, got " + shape_str(volume.shape()));
  const std::size_t c = volume.dim(0);
  return transpose(reshape(volume, Shape{c, volume.numel() / c}));
}

#define FUSEREG_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> neg(const Tensor<T>&);                                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> square(const Tensor<T>&);                                                 \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> permute(const Tensor<T>&, std::vector<std::size_t>);                      \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                          \
  template Tensor<T> softmax(const Tensor<T>&, std::ptrdiff_t);                                \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                               std::ptrdiff_t, double);                                        \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                            const Conv3dOptions&);                                             \
  template Tensor<T> global_pool(const Tensor<T>&, PoolMode);                                  \
  template Tensor<T> upsample_trilinear(const Tensor<T>&, std::size_t);                        \
  template Tensor<T> tokens_to_volume(const Tensor<T>&, const std::array<std::size_t, 3>&);    \
  template Tensor<T> volume_to_tokens(const Tensor<T>&);

FUSEREG_INSTANTIATE_OPS(float)
FUSEREG_INSTANTIATE_OPS(double)

#undef FUSEREG_INSTANTIATE_OPS

}  // namespace fusereg
