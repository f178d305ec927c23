#include "fusereg/gradcheck_suite.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "fusereg/losses.hpp"
#include "fusereg/model.hpp"
#include "fusereg/warp.hpp"

namespace fusereg {

namespace {

using T = double;

struct FaultGuard {
  explicit FaultGuard(const std::string& op) : active(!op.empty()) {
    if (active) debug::set_backward_fault(op, 0.5);
  }
  ~FaultGuard() {
    if (active) debug::clear_backward_fault();
  }
  bool active;
};

Tensor<T> randn(std::mt19937_64& rng, Shape shape, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

Tensor<T> uniform(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

// Magnitude in [lo, hi] with a random sign: keeps sample points away from
// lattice planes so the piecewise-linear warp is smooth around them.
Tensor<T> off_lattice(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

// Scalar probe of a block output: mean(out * R) with a fixed random R.
std::function<Tensor<T>()> probe(std::function<Tensor<T>()> block, std::mt19937_64& rng) {
  NoGradScope<T> no_grad;
  const Shape shape = block().shape();
  const Tensor<T> weights = randn(rng, shape);
  return [block = std::move(block), weights] { return mean(mul(block(), weights)); };
}

std::vector<Tensor<T>> tensors(const ParamStore<T>& store) {
  std::vector<Tensor<T>> out;
  for (const auto& p : store.params()) out.push_back(p.tensor);
  return out;
}

// Non-zero values for every tensor of the store so no path is switched off by
// a zero weight (zero heads, zero biases).
void randomize(ParamStore<T>& store, std::mt19937_64& rng, double std) {
  std::normal_distribution<double> n(0.0, std);
  for (auto& p : store.params()) {
    for (auto& v : p.tensor.mutable_data()) v += n(rng);
  }
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(const GradcheckSuiteOptions& options) {
  FaultGuard guard(options.sabotage);
  std::mt19937_64 rng(options.seed);
  std::vector<GradcheckCase> cases;

  auto run = [&](std::string name, const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> wrt,
                 std::size_t max_coords = 0) {
    GradcheckOptions go;
    go.max_coords = max_coords;
    go.seed = rng();
    go.fourth_order = true;
    // A difference quotient of f cannot resolve derivatives much below
    // ~100 ulp(f) / h (forward-pass rounding, amplified 1.5x by the stencil).
    // Smaller gradients are compared at that resolution.
    double f0 = 0.0;
    {
      NoGradScope<T> no_grad;
      f0 = std::abs(f().item());
    }
    const double resolution = 150.0 * std::numeric_limits<double>::epsilon() * std::max(f0, 1e-3) / go.step;
    go.min_scale = std::max(go.min_scale, resolution / options.tolerance);
    const auto start = std::chrono::steady_clock::now();
    GradcheckCase c;
    c.name = std::move(name);
    c.result = gradcheck<T>(f, std::move(wrt), go);
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    c.passed = c.result.max_rel_error < options.tolerance;
    cases.push_back(std::move(c));
  };

  const Spatial sp{2, 3, 2};
  const std::size_t n = sp[0] * sp[1] * sp[2];
  const std::size_t d = 4, heads = 2;

  {
    ParamStore<T> store;
    std::mt19937_64 init_rng(rng());
    auto p = AttentionParams<T>::create_efficient(Initializer<T>(store, init_rng, "ea"), d, heads);
    randomize(store, rng, 0.1);
    const auto x = randn(rng, {n, d});
    auto wrt = tensors(store);
    wrt.push_back(x);
    run("efficient_attention", probe([x, p] { return efficient_attention(x, p); }, rng), wrt);
  }
  {
    ParamStore<T> store;
    std::mt19937_64 init_rng(rng());
    auto p = AttentionParams<T>::create_channel(Initializer<T>(store, init_rng, "ca"), d, heads);
    randomize(store, rng, 0.1);
    const auto x = randn(rng, {n, d});
    auto wrt = tensors(store);
    wrt.push_back(x);
    run("channel_attention", probe([x, p] { return channel_attention(x, p); }, rng), wrt);
  }
  {
    ParamStore<T> store;
    std::mt19937_64 init_rng(rng());
    auto p = MixFfnParams<T>::create(Initializer<T>(store, init_rng, "mlp"), d, 2, 3);
    randomize(store, rng, 0.1);
    const auto x = randn(rng, {n, d});
    auto wrt = tensors(store);
    wrt.push_back(x);
    run("mix_ffn", probe([x, p, sp] { return mix_ffn(x, sp, p); }, rng), wrt);
  }
  {
    ParamStore<T> store;
    std::mt19937_64 init_rng(rng());
    DualBlockOptions o;
    o.d_model = d;
    o.heads = heads;
    o.ffn_expansion = 2;
    auto p = DualBlockParams<T>::create(Initializer<T>(store, init_rng, "block"), o);
    randomize(store, rng, 0.1);
    const auto x = randn(rng, {n, d});
    auto wrt = tensors(store);
    wrt.push_back(x);
    run("dual_attention_block", probe([x, p, sp] { return dual_attention_block(x, sp, p); }, rng), wrt);
  }
  {
    ParamStore<T> store;
    std::mt19937_64 init_rng(rng());
    auto p = LkaParams<T>::create(Initializer<T>(store, init_rng, "lka"), 3, 3, 3, 2);
    randomize(store, rng, 0.1);
    const auto x = randn(rng, {3, 4, 3, 4});
    auto wrt = tensors(store);
    wrt.push_back(x);
    run("lka_block", probe([x, p] { return lka_block(x, p); }, rng), wrt);
  }
  {
    ParamStore<T> store;
    std::mt19937_64 init_rng(rng());
    auto p = FusionParams<T>::create(Initializer<T>(store, init_rng, "fusion"), 3, 3);
    randomize(store, rng, 0.1);
    const auto x1 = randn(rng, {3, 3, 4, 3});
    const auto x2 = randn(rng, {3, 3, 4, 3});
    auto wrt = tensors(store);
    wrt.push_back(x1);
    wrt.push_back(x2);
    run("nested_attention_fusion", probe([x1, x2, p] { return nested_attention_fusion(x1, x2, p); }, rng), wrt);
  }
  {
    ParamStore<T> store;
    std::mt19937_64 init_rng(rng());
    auto p = PatchEmbedParams<T>::create(Initializer<T>(store, init_rng, "embed"), 2, 3, 3, 2);
    randomize(store, rng, 0.1);
    const auto x = randn(rng, {2, 4, 6, 4});
    auto wrt = tensors(store);
    wrt.push_back(x);
    run("overlap_patch_embed", probe([x, p] { return overlap_patch_embed(x, p); }, rng), wrt);
  }
  {
    const auto moving = randn(rng, {2, 4, 5, 4});
    auto field = off_lattice(rng, {3, 4, 5, 4}, 0.1, 1.9);
    // keep |u| away from integers too
    for (auto& v : field.mutable_data()) {
      if (std::abs(std::abs(v) - 1.0) < 0.1) v = v > 0 ? 1.2 : -1.2;
    }
    run("warp_trilinear", probe([moving, field] { return warp_trilinear(moving, field); }, rng), {moving, field});
  }
  {
    const auto fixed = uniform(rng, {1, 5, 4, 5}, 0.0, 1.0);
    const auto warped = uniform(rng, {1, 5, 4, 5}, 0.0, 1.0);
    run("ncc_loss", [fixed, warped] { return ncc_loss(fixed, warped, 3); }, {fixed, warped});
  }
  {
    const auto field = randn(rng, {3, 4, 3, 5});
    run("smoothness_loss", [field] { return smoothness_loss(field); }, {field});
  }
  {
    const auto fixed = uniform(rng, {1, 5, 4, 5}, 0.0, 1.0);
    const auto moving = uniform(rng, {1, 5, 4, 5}, 0.0, 1.0);
    const auto field = off_lattice(rng, {3, 5, 4, 5}, 0.1, 0.9);
    LossConfig lc;
    lc.ncc_window = 3;
    run("composite_loss", [=] { return composite_loss(fixed, moving, field, lc).total; }, {moving, field});
  }
  {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.seed = options.seed;
    auto model = build_model<T>(cfg);
    // The zero head would leave every other parameter with a zero gradient.
    randomize(*model.store, rng, 0.05);
    const auto s = cfg.volume_shape;
    const auto fixed = uniform(rng, {1, s[0], s[1], s[2]}, 0.0, 1.0);
    const auto moving = uniform(rng, {1, s[0], s[1], s[2]}, 0.0, 1.0);
    run(
        "model_composite_tiny",
        [model, fixed, moving] {
          return composite_loss(fixed, moving, forward(model, moving, fixed), model.config.loss).total;
        },
        tensors(*model.store), options.model_coords);
  }
  return cases;
}

}  // namespace fusereg
