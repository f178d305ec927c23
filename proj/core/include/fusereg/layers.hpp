#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "fusereg/ops.hpp"
#include "fusereg/tensor.hpp"

namespace fusereg {

// Named trainable tensor. Dotted names encode module ownership
// ("encoder.stage0.block0.ea.query.weight").
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
class ParamStore {
 public:
  // Registers `t` under `name` (must be unique) and marks it trainable.
  Tensor<T> add(std::string name, Tensor<T> t);

  const std::vector<Parameter<T>>& params() const { return params_; }
  std::vector<Parameter<T>>& params() { return params_; }
  std::size_t size() const { return params_.size(); }

  Tensor<T> find(std::string_view name) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<Parameter<T>> params_;
};

/// Creates parameters under a dotted name prefix. Children share the store and
/// the random stream, so construction order fixes the initial values.
template <typename T>
class Initializer {
 public:
  Initializer(ParamStore<T>& store, std::mt19937_64& rng, std::string prefix = {})
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  Initializer sub(std::string_view name) const;
  std::string path(std::string_view leaf) const;

  // Normal(0, std) resampled outside +-2 std.
  Tensor<T> trunc_normal(std::string_view leaf, Shape shape, double std);
  Tensor<T> constant(std::string_view leaf, Shape shape, T value);
  Tensor<T> zeros(std::string_view leaf, Shape shape) { return constant(leaf, std::move(shape), T(0)); }
  Tensor<T> ones(std::string_view leaf, Shape shape) { return constant(leaf, std::move(shape), T(1)); }

 private:
  ParamStore<T>* store_;
  std::mt19937_64* rng_;
  std::string prefix_;
};

// y = x W + b with W: [in, out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  static Linear create(Initializer<T> init, std::size_t in, std::size_t out);
  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  double eps = 1e-5;

  static LayerNorm create(Initializer<T> init, std::size_t channels);
  Tensor<T> operator()(const Tensor<T>& x, std::ptrdiff_t axis = -1) const {
    return layernorm(x, gamma, beta, axis, eps);
  }
};

template <typename T>
struct Conv3d {
  Tensor<T> weight;  // [C_out, C_in/groups, k, k, k]
  Tensor<T> bias;    // [C_out]
  Conv3dOptions options;

  static Conv3d create(Initializer<T> init, std::size_t in, std::size_t out, std::size_t kernel,
                       Conv3dOptions options, bool zero_init = false);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv3d(x, weight, bias, options); }
};

}  // namespace fusereg
