#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "fusereg/tensor.hpp"

namespace fusereg {

// Elementwise arithmetic with numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T> Tensor<T> gelu(const Tensor<T>& a);

// Full reductions to a rank-0 scalar.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

// [.., m, k] @ [.., k, n] -> [.., m, n]; leading batch axes broadcast.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> axes);
// Swaps the two trailing axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);

// Max-subtracted softmax along `axis` (negative counts from the back).
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis);

// Normalizes over `axis` (population variance) then applies gamma/beta,
// which must have extent x.dim(axis).
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    std::ptrdiff_t axis = -1, double eps = 1e-5);

struct Conv3dOptions {
  std::size_t stride = 1;
  std::size_t pad_before = 0;
  std::size_t pad_after = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;

  // Padding that preserves extent at stride 1. Even kernels pad one extra
  // voxel after.
  static Conv3dOptions same(std::size_t kernel, std::size_t dilation = 1, std::size_t groups = 1);
};

// floor((in + pads - dilation*(k-1) - 1) / stride) + 1, throwing ConfigError
// when the result would be < 1.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const Conv3dOptions& opt);

// Cross-correlation. x: [C_in, D, H, W], w: [C_out, C_in/groups, kd, kh, kw],
// bias: [C_out] or undefined.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv3dOptions& opt = {});

enum class PoolMode { Avg, Max };

// [C, ...spatial] -> [C]
template <typename T> Tensor<T> global_pool(const Tensor<T>& x, PoolMode mode);

// [C, d, h, w] -> [C, d*f, h*f, w*f], align-corners-false sampling with edge clamp.
template <typename T> Tensor<T> upsample_trilinear(const Tensor<T>& x, std::size_t factor);

// [N, C] tokens (N = d*h*w) <-> [C, d, h, w] volume.
template <typename T>
Tensor<T> tokens_to_volume(const Tensor<T>& tokens, const std::array<std::size_t, 3>& spatial);
template <typename T> Tensor<T> volume_to_tokens(const Tensor<T>& volume);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

}  // namespace fusereg
