#include <gtest/gtest.h>

#include <cmath>

#include "fusereg/gradcheck_suite.hpp"
#include "fusereg/ops.hpp"

using fusereg::Shape;
using T = fusereg::Tensor<double>;

TEST(Gradcheck, DetectsWrongBackwardRule) {
  T x(Shape{4}, {0.3, -1.2, 2.0, 0.7});
  auto f = [](const T& a) { return fusereg::sum(fusereg::exp(a)); };
  EXPECT_LT(fusereg::gradcheck<double>(f, x), 1e-8);
  fusereg::debug::set_backward_fault("exp", 0.5);
  const double err = fusereg::gradcheck<double>(f, x);
  fusereg::debug::clear_backward_fault();
  EXPECT_GT(err, 0.1);
}

TEST(Gradcheck, FourthOrderStencilIsMoreAccurate) {
  T x(Shape{3}, {0.5, 1.0, 1.5});
  auto f = [&]() { return fusereg::sum(fusereg::exp(fusereg::scale(x, 3.0))); };
  fusereg::GradcheckOptions two, four;
  two.step = four.step = 1e-3;
  four.fourth_order = true;
  const double e2 = fusereg::gradcheck<double>(f, {x}, two).max_rel_error;
  const double e4 = fusereg::gradcheck<double>(f, {x}, four).max_rel_error;
  EXPECT_LT(e4, e2);
}

TEST(Gradcheck, NondeterministicFunctionIsRejected) {
  T x(Shape{2}, 1.0);
  int calls = 0;
  auto f = [&]() { return fusereg::scale(fusereg::sum(x), double(++calls)); };
  EXPECT_THROW(fusereg::gradcheck<double>(f, {x}), fusereg::ContractError);
}

TEST(GradcheckSuite, PassesOnCorrectBuild) {
  const auto cases = fusereg::run_gradcheck_suite();
  EXPECT_GE(cases.size(), 12u);
  for (const auto& c : cases) {
    EXPECT_TRUE(c.passed) << c.name << " max rel error " << c.result.max_rel_error;
    EXPECT_GT(c.result.coords_checked, 0u) << c.name;
  }
}

TEST(GradcheckSuite, FailsWhenBackwardIsSabotaged) {
  for (const char* op : {"matmul", "conv3d", "warp_trilinear", "ncc_loss"}) {
    fusereg::GradcheckSuiteOptions o;
    o.sabotage = op;
    std::size_t failed = 0;
    for (const auto& c : fusereg::run_gradcheck_suite(o)) failed += !c.passed;
    EXPECT_GT(failed, 0u) << op;
  }
}
