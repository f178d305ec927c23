#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fusereg/gradcheck.hpp"
#include "fusereg/ops.hpp"
#include "oracles.hpp"

using fusereg::Shape;
using fusereg::Tensor;
using T = Tensor<double>;

TEST(Tensor, ConstructionAndShape) {
  T t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_DOUBLE_EQ(t.at(5), 1.5);
  EXPECT_THROW(T(Shape{2, 2}, std::vector<double>{1, 2, 3}), fusereg::ShapeError);
}

TEST(Tensor, CopiesAliasCloneDoesNot) {
  T a(Shape{3}, 0.0);
  T b = a;
  T c = a.clone();
  a.mutable_data()[0] = 7;
  EXPECT_EQ(b.at(0), 7);
  EXPECT_EQ(c.at(0), 0);
}

TEST(Ops, BroadcastAdd) {
  const T a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  const T b(Shape{3}, {10, 20, 30});
  const auto c = fusereg::add(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(oracle::values(c), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_THROW(fusereg::add(a, T(Shape{2}, 0.0)), fusereg::ShapeError);
}

TEST(Ops, MatmulMatchesLoops) {
  std::mt19937_64 rng(3);
  const auto a = oracle::random_tensor(rng, {4, 5});
  const auto b = oracle::random_tensor(rng, {5, 3});
  const auto c = fusereg::matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += a.at(i * 5 + k) * b.at(k * 3 + j);
      EXPECT_NEAR(c.at(i * 3 + j), s, 1e-12);
    }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(4);
  const auto x = oracle::random_tensor(rng, {3, 6}, -50, 50);
  const auto s = fusereg::softmax(x, -1);
  for (std::size_t r = 0; r < 3; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 6; ++c) sum += s.at(r * 6 + c);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Ops, LayernormStandardizes) {
  std::mt19937_64 rng(5);
  const auto x = oracle::random_tensor(rng, {4, 8}, -3, 5);
  const auto y = fusereg::layernorm(x, T(Shape{8}, 1.0), T(Shape{8}, 0.0), -1, 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y.at(r * 8 + c) / 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y.at(r * 8 + c) - m) * (y.at(r * 8 + c) - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-10);
  }
}

TEST(Autodiff, SquareSumGradient) {
  fusereg::GradTape<double> tape;
  T x(Shape{3}, {1, -2, 3});
  x.set_requires_grad();
  const auto loss = fusereg::sum(fusereg::mul(x, x));
  fusereg::backward(tape, loss);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, -4, 6}));
}

TEST(Autodiff, TapeRecordsNamedOps) {
  fusereg::GradTape<double> tape;
  T x(Shape{2, 2}, 1.0);
  x.set_requires_grad();
  fusereg::mean(fusereg::matmul(x, x));
  const auto names = tape.op_names();
  EXPECT_EQ(names, (std::vector<std::string>{"matmul", "mean"}));
}

TEST(Autodiff, NoGradScopeSuspendsRecording) {
  fusereg::GradTape<double> tape;
  T x(Shape{2}, 1.0);
  x.set_requires_grad();
  {
    fusereg::NoGradScope<double> guard;
    fusereg::sum(x);
  }
  EXPECT_TRUE(tape.empty());
}

TEST(Autodiff, ElementwiseGradcheck) {
  std::mt19937_64 rng(6);
  const auto x = oracle::random_tensor(rng, {2, 3});
  auto f = [](const T& a) {
    using namespace fusereg;
    return mean(add(mul(gelu(a), sigmoid(a)), exp(scale(square(a), 0.3))));
  };
  EXPECT_LT(fusereg::gradcheck<double>(f, x), 1e-6);
}

TEST(Autodiff, SoftmaxLayernormGradcheck) {
  std::mt19937_64 rng(7);
  const auto x = oracle::random_tensor(rng, {3, 4});
  const auto r = oracle::random_tensor(rng, {3, 4});
  auto f = [&](const T& a) {
    using namespace fusereg;
    return sum(mul(add(softmax(a, 0), layernorm(a, T(Shape{4}, 1.5), T(Shape{4}, 0.1))), r));
  };
  EXPECT_LT(fusereg::gradcheck<double>(f, x), 1e-6);
}

TEST(Conv3d, MatchesOracleOnRandomGeometries) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> pick(0, 1000);
  for (int inst = 0; inst < 25; ++inst) {
    const std::size_t groups = 1 + pick(rng) % 2;
    const std::size_t ci = groups * (1 + pick(rng) % 2);
    const std::size_t co = groups * (1 + pick(rng) % 2);
    const std::size_t k = 1 + pick(rng) % 3;
    fusereg::Conv3dOptions opt;
    opt.groups = groups;
    opt.dilation = 1 + pick(rng) % 2;
    opt.stride = 1 + pick(rng) % 2;
    opt.pad_before = pick(rng) % 2;
    opt.pad_after = opt.stride == 1 ? pick(rng) % 3 : opt.pad_before;
    const std::array<std::size_t, 4> xs{ci, 5 + pick(rng) % 3, 5, 5 + pick(rng) % 2};
    const auto x = oracle::random_tensor(rng, {xs[0], xs[1], xs[2], xs[3]});
    const auto w = oracle::random_tensor(rng, {co, ci / groups, k, k, k});
    const auto b = oracle::random_tensor(rng, {co});
    const auto y = fusereg::conv3d(x, w, b, opt);
    std::array<std::size_t, 3> oe{};
    const auto want = oracle::conv3d(oracle::values(x), xs, oracle::values(w), co, k, oracle::values(b), opt.stride,
                                     opt.pad_before, opt.pad_after, opt.dilation, groups, oe);
    EXPECT_EQ(y.shape(), (Shape{co, oe[0], oe[1], oe[2]}));
    EXPECT_LT(oracle::max_abs_diff(oracle::values(y), want), 1e-12) << "instance " << inst;
  }
}

TEST(Conv3d, SamePaddingPreservesExtentForEvenKernels) {
  const auto opt = fusereg::Conv3dOptions::same(6, 1, 2);
  const T x(Shape{2, 5, 5, 5}, 1.0);
  const auto y = fusereg::conv3d(x, T(Shape{2, 1, 6, 6, 6}, 1.0), T(), opt);
  EXPECT_EQ(y.shape(), (Shape{2, 5, 5, 5}));
}

TEST(Conv3d, RejectsEmptyOutput) {
  fusereg::Conv3dOptions opt;
  EXPECT_THROW(fusereg::conv_out_extent(2, 5, opt), fusereg::ConfigError);
}

TEST(Conv3d, Gradcheck) {
  std::mt19937_64 rng(12);
  auto x = oracle::random_tensor(rng, {2, 4, 3, 4});
  auto w = oracle::random_tensor(rng, {4, 1, 3, 3, 3});
  auto b = oracle::random_tensor(rng, {4});
  const auto r = oracle::random_tensor(rng, {4, 2, 2, 2});
  fusereg::Conv3dOptions opt;
  opt.groups = 2;
  opt.stride = 2;
  opt.pad_before = opt.pad_after = 1;
  auto f = [&]() { return fusereg::sum(fusereg::mul(fusereg::conv3d(x, w, b, opt), r)); };
  const auto res = fusereg::gradcheck<double>(f, {x, w, b});
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(Upsample, ConstantStaysConstantAndGradchecks) {
  const T c(Shape{1, 2, 2, 2}, 3.0);
  for (double v : oracle::values(fusereg::upsample_trilinear(c, 2))) EXPECT_DOUBLE_EQ(v, 3.0);
  std::mt19937_64 rng(13);
  const auto x = oracle::random_tensor(rng, {2, 2, 3, 2});
  const auto r = oracle::random_tensor(rng, {2, 4, 6, 4});
  auto f = [&](const T& a) { return fusereg::sum(fusereg::mul(fusereg::upsample_trilinear(a, 2), r)); };
  EXPECT_LT(fusereg::gradcheck<double>(f, x), 1e-6);
}

TEST(Tokens, VolumeRoundTrip) {
  std::mt19937_64 rng(14);
  const auto v = oracle::random_tensor(rng, {3, 2, 3, 4});
  const auto tok = fusereg::volume_to_tokens(v);
  EXPECT_EQ(tok.shape(), (Shape{24, 3}));
  EXPECT_EQ(tok.at(5 * 3 + 2), v.at(2 * 24 + 5));
  EXPECT_EQ(oracle::values(fusereg::tokens_to_volume(tok, {2, 3, 4})), oracle::values(v));
}
