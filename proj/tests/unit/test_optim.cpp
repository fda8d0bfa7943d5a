#include <gtest/gtest.h>

#include <cmath>

#include "packptq/autodiff.hpp"
#include "packptq/optim.hpp"

using namespace packptq;

TEST(CosineSchedule, Endpoints) {
  EXPECT_EQ(cosine_lr(0.1, 0, 500), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 250, 500), 0.05, 1e-15);
  EXPECT_LE(cosine_lr(0.1, 500, 500), 1e-12 * 0.1);
  // One step before the end the rate is already tiny but positive.
  EXPECT_GT(cosine_lr(0.1, 499, 500), 0.0);
  EXPECT_LT(cosine_lr(0.1, 499, 500), 1e-5);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  std::vector<Tensor> p{Tensor::vector({1, -2, 3})};
  const std::vector<Tensor> g{Tensor(Shape{3}, 0.0)};
  AdamState s(p, AdamConfig{0.1, 0.9, 0.999, 1e-8, 10});
  adam_step(p, g, s);
  EXPECT_EQ(p[0], Tensor::vector({1, -2, 3}));
  EXPECT_EQ(s.step(), 1u);
}

TEST(Adam, StepsAgainstTheGradient) {
  std::vector<Tensor> p{Tensor::scalar(0.5)};
  const std::vector<Tensor> g{Tensor::scalar(1.0)};
  AdamState s(p, AdamConfig{0.1, 0.9, 0.999, 1e-8, 10});
  adam_step(p, g, s);
  EXPECT_LT(p[0].item(), 0.5);
  // First bias-corrected step has magnitude ~lr.
  EXPECT_NEAR(p[0].item(), 0.4, 1e-6);
}

TEST(Adam, ConvergesOnQuadraticBowl) {
  std::vector<Tensor> p{Tensor::scalar(0.0)};
  AdamState s(p, AdamConfig{0.1, 0.9, 0.999, 1e-8, 500});
  for (int i = 0; i < 500; ++i) {
    Tape t;
    const Var v = t.param(p[0]);
    const Var d = ops::sub(v, t.constant(Tensor::scalar(3.0)));
    t.backward(ops::mul(d, d));
    const std::vector<Tensor> g{t.grad(v)};
    adam_step(p, g, s);
  }
  EXPECT_LT(std::abs(p[0].item() - 3.0), 0.05);
}

TEST(Adam, ShapeMismatchRaises) {
  std::vector<Tensor> p{Tensor::vector({1, 2})};
  AdamState s(p, AdamConfig{});
  const std::vector<Tensor> g{Tensor::vector({1, 2, 3})};
  EXPECT_THROW(adam_step(p, g, s), ShapeError);
}

TEST(Adam, MomentsTrackParameterShapes) {
  std::vector<Tensor> p{Tensor(Shape{2, 3}), Tensor(Shape{4})};
  const AdamState s(p, AdamConfig{});
  ASSERT_EQ(s.first_moments().size(), 2u);
  EXPECT_EQ(s.first_moments()[0].shape(), (Shape{2, 3}));
  EXPECT_EQ(s.second_moments()[1].shape(), (Shape{4}));
}
