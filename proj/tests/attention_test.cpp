#include <gtest/gtest.h>

#include <random>

#include "fusereg/attention.hpp"
#include "fusereg/gradcheck.hpp"
#include "oracles.hpp"
#include "support.hpp"

using fusereg::Shape;
using T = fusereg::Tensor<double>;

namespace {

struct Fixture {
  fusereg::ParamStore<double> store;
  std::mt19937_64 rng{0};
  fusereg::Initializer<double> init{store, rng};
};

}  // namespace

TEST(EfficientAttention, MatchesOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Fixture fx;
    fx.rng.seed(seed);
    const std::size_t heads = 1 + seed % 3, d = heads * (1 + seed % 4), n = 3 + seed % 7;
    auto p = fusereg::AttentionParams<double>::create_efficient(fx.init, d, heads);
    testing_support::randomize(fx.store, seed, 0.7);
    std::mt19937_64 rng(100 + seed);
    const auto x = oracle::random_tensor(rng, {n, d}, -2, 2);
    const auto xv = oracle::values(x);
    const auto q = oracle::linear(p.query, xv, n), k = oracle::linear(p.key, xv, n), v = oracle::linear(p.value, xv, n);
    const auto want = oracle::linear(p.output, oracle::efficient_attention(q, k, v, n, d, heads), n);
    EXPECT_LT(oracle::max_abs_diff(oracle::values(fusereg::efficient_attention(x, p)), want), 1e-10);
  }
}

TEST(ChannelAttention, MatchesOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Fixture fx;
    fx.rng.seed(seed);
    const std::size_t heads = 1 + seed % 2, d = heads * (2 + seed % 3), n = 4 + seed % 5;
    auto p = fusereg::AttentionParams<double>::create_channel(fx.init, d, heads);
    testing_support::randomize(fx.store, seed, 0.5);
    std::mt19937_64 rng(200 + seed);
    const auto x = oracle::random_tensor(rng, {n, d}, -2, 2);
    const auto xv = oracle::values(x);
    const auto q = oracle::linear(p.query, xv, n), k = oracle::linear(p.key, xv, n), v = oracle::linear(p.value, xv, n);
    const auto want =
        oracle::linear(p.output, oracle::channel_attention(q, k, v, n, d, heads, oracle::values(p.log_tau)), n);
    EXPECT_LT(oracle::max_abs_diff(oracle::values(fusereg::channel_attention(x, p)), want), 1e-10);
  }
}

TEST(ChannelAttention, TemperatureStartsAtSqrtHeadWidth) {
  Fixture fx;
  const auto p = fusereg::AttentionParams<double>::create_channel(fx.init, 8, 2);
  for (double v : oracle::values(p.log_tau)) EXPECT_NEAR(std::exp(v), 2.0, 1e-12);
}

TEST(ChannelAttention, ConstantValueChannelsPassThrough) {
  // Columns of the mixing matrix are convex weights, so a V whose channels
  // within a head are equal is returned unchanged.
  std::mt19937_64 rng(5);
  const auto q = oracle::random_tensor(rng, {6, 4}), k = oracle::random_tensor(rng, {6, 4});
  std::vector<double> vv(24);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) vv[r * 4 + c] = double(r) + (c < 2 ? 0.0 : 10.0);
  const T v(Shape{6, 4}, vv);
  const auto out = fusereg::channel_attention_heads(q, k, v, 2, T(Shape{2}, 0.3));
  EXPECT_LT(oracle::max_abs_diff(oracle::values(out), vv), 1e-12);
}

TEST(EfficientAttention, AssociativityOfContraction) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 5 + seed % 11, d = 4;
    const auto q = oracle::random_tensor(rng, {n, d}, -3, 3), k = oracle::random_tensor(rng, {n, d}, -3, 3),
               v = oracle::random_tensor(rng, {n, d}, -3, 3);
    const auto lib = fusereg::efficient_attention_heads(q, k, v, 2);
    const auto brute = oracle::efficient_attention(oracle::values(q), oracle::values(k), oracle::values(v), n, d, 2);
    EXPECT_LT(oracle::max_abs_diff(oracle::values(lib), brute), 1e-12);
  }
}

TEST(MixFfn, ShapeAndSpatialCheck) {
  Fixture fx;
  const auto p = fusereg::MixFfnParams<double>::create(fx.init, 4, 2, 3);
  std::mt19937_64 rng(1);
  const auto x = oracle::random_tensor(rng, {12, 4});
  EXPECT_EQ(fusereg::mix_ffn(x, {2, 3, 2}, p).shape(), (Shape{12, 4}));
  EXPECT_THROW(fusereg::mix_ffn(x, {2, 2, 2}, p), fusereg::ShapeError);
}

TEST(DualBlock, ResidualStructureUnderZeroWeights) {
  // Zero projections: EA_b = X, M1 = 0, CA_b = 0, M2 = 0.
  Fixture fx;
  fusereg::DualBlockOptions o;
  o.d_model = 4;
  o.heads = 2;
  auto p = fusereg::DualBlockParams<double>::create(fx.init, o);
  for (auto& prm : fx.store.params()) {
    if (prm.name.find("log_tau") == std::string::npos && prm.name.find("gamma") == std::string::npos) {
      for (auto& v : prm.tensor.mutable_data()) v = 0;
    }
  }
  std::mt19937_64 rng(2);
  const auto x = oracle::random_tensor(rng, {8, 4});
  const auto t = fusereg::dual_attention_block_trace(x, {2, 2, 2}, p);
  EXPECT_EQ(oracle::values(t.ea_block), oracle::values(x));
  for (double v : oracle::values(t.output)) EXPECT_EQ(v, 0.0);
}

TEST(DualBlock, DisabledMechanismIsIdentity) {
  Fixture fx;
  fusereg::DualBlockOptions o;
  o.d_model = 4;
  o.efficient_enabled = false;
  const auto p = fusereg::DualBlockParams<double>::create(fx.init, o);
  EXPECT_FALSE(p.efficient.has_value());
  for (const auto& prm : fx.store.params()) EXPECT_NE(prm.name.rfind("ea.", 0), 0u) << prm.name;
  std::mt19937_64 rng(3);
  const auto x = oracle::random_tensor(rng, {8, 4});
  const auto t = fusereg::dual_attention_block_trace(x, {2, 2, 2}, p);
  std::vector<double> twice;
  for (double v : oracle::values(x)) twice.push_back(2 * v);
  EXPECT_LT(oracle::max_abs_diff(oracle::values(t.ea_block), twice), 1e-15);
}

TEST(DualBlock, Gradcheck) {
  Fixture fx;
  fusereg::DualBlockOptions o;
  o.d_model = 4;
  o.heads = 2;
  o.ffn_expansion = 2;
  const auto p = fusereg::DualBlockParams<double>::create(fx.init, o);
  testing_support::randomize(fx.store, 9, 0.3);
  std::mt19937_64 rng(4);
  const auto x = oracle::random_tensor(rng, {8, 4});
  const auto r = oracle::random_tensor(rng, {8, 4});
  std::vector<T> wrt{x};
  for (const auto& prm : fx.store.params()) wrt.push_back(prm.tensor);
  auto f = [&]() { return fusereg::mean(fusereg::mul(fusereg::dual_attention_block(x, {2, 2, 2}, p), r)); };
  fusereg::GradcheckOptions opt;
  opt.fourth_order = true;
  EXPECT_LT(fusereg::gradcheck<double>(f, wrt, opt).max_rel_error, 1e-5);
}
