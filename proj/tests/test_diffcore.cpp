#include "arrlab/diffcore.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

using namespace arrlab;

TEST(CrossEntropySoft, OneHotAgainstUniformLogits) {
  const std::vector<double> target{1.0, 0.0, 0.0}, logits{0.0, 0.0, 0.0};
  EXPECT_NEAR(cross_entropy_soft(target, logits).loss, std::log(3.0), 1e-15);
}

TEST(CrossEntropySoft, SelfEntropyOfUniformPair) {
  const std::vector<double> logits{0.7, 0.7};
  const auto target = softmax(logits);
  EXPECT_NEAR(cross_entropy_soft(target, logits).loss, std::log(2.0), 1e-15);
}

TEST(CrossEntropySoft, MatchingLogitsGiveEntropyOfTrieRootTarget) {
  std::vector<double> target{1.25, 0.5 + 1.0 / 3.0, 0.2};
  double z = 0.0;
  for (double t : target) z += t;
  for (double& t : target) t /= z;
  std::vector<double> logits;
  for (double t : target) logits.push_back(std::log(t) + 4.0);
  EXPECT_NEAR(cross_entropy_soft(target, logits).loss, 0.9109908631705586, 1e-12);
  EXPECT_NEAR(entropy(target), 0.9109908631705586, 1e-12);
}

TEST(CrossEntropySoft, GradientIsSoftmaxMinusTarget) {
  const std::vector<double> target{0.0, 1.0, 0.0, 0.0}, logits{0.3, -1.2, 2.0, 0.1};
  const auto ce = cross_entropy_soft(target, logits);
  const auto p = softmax(logits);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_DOUBLE_EQ(ce.grad[i], p[i] - target[i]);
}

TEST(CrossEntropySoft, ShiftInvariantAndBoundedByEntropy) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 2.0);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> z(6), t(6), zs(6);
    double s = 0.0;
    for (int i = 0; i < 6; ++i) {
      z[i] = g(rng);
      t[i] = u(rng);
      s += t[i];
    }
    for (double& x : t) x /= s;
    for (int i = 0; i < 6; ++i) zs[i] = z[i] + 123.5;
    const double a = cross_entropy_soft(t, z).loss;
    EXPECT_NEAR(a, cross_entropy_soft(t, zs).loss, 1e-10);
    EXPECT_GE(a + 1e-12, entropy(t));
  }
}

TEST(CrossEntropySoft, RejectsBadInput) {
  const std::vector<double> three{0.2, 0.3, 0.5}, two{0.0, 0.0}, unnormalized{0.5, 0.6};
  EXPECT_THROW(cross_entropy_soft(three, two), std::invalid_argument);
  EXPECT_THROW(cross_entropy_soft(unnormalized, two), std::invalid_argument);
}

TEST(Softmax, StableAtLargeLogits) {
  const std::vector<double> z{1000.0, 1000.0};
  const auto p = softmax(z);
  EXPECT_NEAR(p[0], 0.5, 1e-12);
  EXPECT_NEAR(log_sum_exp(z), 1000.0 + std::log(2.0), 1e-12);
}

TEST(ParamSetTest, AddAndLookup) {
  ParamSet p;
  p.add("w", {2, 3}, 1.5);
  EXPECT_THROW(p.add("w", {1}), std::invalid_argument);
  EXPECT_THROW(p.at("missing"), std::out_of_range);
  EXPECT_EQ(p.element_count(), 6u);
  auto g = p.zeros_like();
  EXPECT_TRUE(p.same_layout(g));
  g.axpy(2.0, p);
  EXPECT_DOUBLE_EQ(g.at("w").data[4], 3.0);
  EXPECT_DOUBLE_EQ(g.squared_norm(), 6 * 9.0);
  EXPECT_TRUE(g.all_finite());
}

TEST(GradCheck, SquareFunction) {
  ParamSet p;
  p.add("x", {1}, 3.0);
  const DifferentiableFn f = [](const ParamSet& q) {
    ValueAndGrad out{0.0, q.zeros_like()};
    const double x = q.at("x").data[0];
    out.value = x * x;
    out.grad.at("x").data[0] = 2.0 * x;
    return out;
  };
  const auto r = grad_check(f, p);
  EXPECT_LT(r.max_error(), 1e-8);
  EXPECT_NEAR(f(p).grad.at("x").data[0], 6.0, 0.0);
}

TEST(GradCheck, DetectsWrongGradient) {
  ParamSet p;
  p.add("x", {2}, 1.0);
  const DifferentiableFn f = [](const ParamSet& q) {
    ValueAndGrad out{0.0, q.zeros_like()};
    const auto& x = q.at("x").data;
    out.value = x[0] * x[0] * x[1];
    out.grad.at("x").data = {2.0 * x[0] * x[1], 0.0};  // second entry deliberately wrong
    return out;
  };
  EXPECT_GT(grad_check(f, p).max_error(), 0.5);
}

TEST(GradCheck, SoftmaxCrossEntropyOverLogits) {
  ParamSet p;
  auto& z = p.add("z", {5});
  z.data = {0.1, -0.4, 1.3, 0.0, 2.2};
  const std::vector<double> y{0.0, 0.0, 1.0, 0.0, 0.0};
  const DifferentiableFn f = [&](const ParamSet& q) {
    const auto ce = cross_entropy_soft(y, q.at("z").data);
    ValueAndGrad out{ce.loss, q.zeros_like()};
    out.grad.at("z").data = ce.grad;
    return out;
  };
  EXPECT_LT(grad_check(f, p).max_error(), 1e-7);
}

TEST(GradCheck, NonFiniteLossThrows) {
  ParamSet p;
  p.add("x", {1}, 0.0);
  const DifferentiableFn f = [](const ParamSet& q) {
    ValueAndGrad out{std::log(q.at("x").data[0] * 0.0), q.zeros_like()};
    return out;
  };
  EXPECT_THROW(grad_check(f, p), std::domain_error);
}
