#include "fusereg/layers.hpp"

#include <cmath>

namespace fusereg {

template <typename T>
Tensor<T> ParamStore<T>::add(std::string name, Tensor<T> t) {
  for (const auto& p : params_) {
    if (p.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
  }
  t.set_requires_grad(true);
  params_.push_back({std::move(name), t});
  return t;
}

template <typename T>
Tensor<T> ParamStore<T>::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  return {};
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Initializer<T> Initializer<T>::sub(std::string_view name) const {
  return Initializer(*store_, *rng_, path(name));
}

template <typename T>
std::string Initializer<T>::path(std::string_view leaf) const {
  if (prefix_.empty()) return std::string(leaf);
  return prefix_ + "." + std::string(leaf);
}

template <typename T>
Tensor<T> Initializer<T>::trunc_normal(std::string_view leaf, Shape shape, double std) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) {
    double z = normal(*rng_);
    while (std::abs(z) > 2.0) z = normal(*rng_);
    v = static_cast<T>(z * std);
  }
  return store_->add(path(leaf), Tensor<T>(std::move(shape), std::move(values)));
}

template <typename T>
Tensor<T> Initializer<T>::constant(std::string_view leaf, Shape shape, T value) {
  return store_->add(path(leaf), Tensor<T>(std::move(shape), value));
}

template <typename T>
Linear<T> Linear<T>::create(Initializer<T> init, std::size_t in, std::size_t out) {
  Linear l;
  l.weight = init.trunc_normal("weight", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  l.bias = init.zeros("bias", {out});
  return l;
}

template <typename T>
LayerNorm<T> LayerNorm<T>::create(Initializer<T> init, std::size_t channels) {
  LayerNorm n;
  n.gamma = init.ones("gamma", {channels});
  n.beta = init.zeros("beta", {channels});
  return n;
}

template <typename T>
Conv3d<T> Conv3d<T>::create(Initializer<T> init, std::size_t in, std::size_t out,
                            std::size_t kernel, Conv3dOptions options, bool zero_init) {
  if (options.groups == 0 || in % options.groups != 0 || out % options.groups != 0) {
    throw ConfigError("conv layer " + init.path("") + ": channels not divisible by groups");
  }
  Conv3d c;
  c.options = options;
  const Shape wshape{out, in / options.groups, kernel, kernel, kernel};
  const double fan_in = static_cast<double>(in / options.groups * kernel * kernel * kernel);
  c.weight = zero_init ? init.zeros("weight", wshape)
                       : init.trunc_normal("weight", wshape, 1.0 / std::sqrt(fan_in));
  c.bias = init.zeros("bias", {out});
  return c;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Initializer<float>;
template class Initializer<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct Conv3d<float>;
template struct Conv3d<double>;

}  // namespace fusereg
