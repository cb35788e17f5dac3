#include "arrlab/capacity.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

using namespace arrlab;

namespace {

Matrix column(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

Matrix gaussian(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

}  // namespace

TEST(DistancePermutations, TwoSitesOnALine) {
  const auto rep = count_distance_permutations(column({0.0, 1.0}));
  EXPECT_EQ(rep.achieved, 2u);
  EXPECT_TRUE(rep.exact);
}

TEST(DistancePermutations, ThreeSitesOnALineGiveFour) {
  const auto rep = count_distance_permutations(column({0.0, 1.0, 3.0}));
  EXPECT_EQ(rep.achieved, 4u);
  EXPECT_TRUE(rep.exact);
  EXPECT_DOUBLE_EQ(rep.total, 6.0);
  EXPECT_EQ(rep.verdict, "insufficient");
}

TEST(DistancePermutations, CountsRespectUpperBound) {
  std::mt19937_64 rng(1);
  for (int n : {1, 2})
    for (int k = 2; k <= 5; ++k) {
      const auto rep = count_distance_permutations(gaussian(k, n, rng), 120, 7);
      EXPECT_LE(static_cast<double>(rep.achieved), std::pow(k, 2 * n));
      EXPECT_LE(static_cast<double>(rep.achieved), rep.total);
      EXPECT_GE(rep.achieved, 2u);
    }
}

TEST(DistancePermutations, PlanarTriangleRealizesAllOrders) {
  Matrix sites(3, 2);
  sites << 0.0, 0.0, 1.0, 0.0, 0.3, 0.9;
  const auto rep = count_distance_permutations(sites, 200, 1);
  EXPECT_EQ(rep.achieved, 6u);
  EXPECT_EQ(rep.verdict, "complete");
}

TEST(DistancePermutations, RejectsBadInput) {
  EXPECT_THROW(count_distance_permutations(column({1.0, 1.0})), std::invalid_argument);
  EXPECT_THROW(count_distance_permutations(Matrix::Zero(3, 3)), std::invalid_argument);
  EXPECT_THROW(count_distance_permutations(column({1.0})), std::invalid_argument);
}

TEST(DimensionBound, ThresholdValues) {
  EXPECT_NEAR(de_dimension_bound(4), 1.1462406251802888, 1e-12);
  EXPECT_GT(de_dimension_bound(4), 1.0);  // n = 1 is insufficient for k = 4
  // Stirling: ln(k!)/(2 ln k) ~ k/2 - k/(2 ln k)
  const double k = 1000.0;
  EXPECT_NEAR(de_dimension_bound(1000) / k, 0.5 - 0.5 / std::log(k), 1e-3);
  EXPECT_THROW(de_dimension_bound(1), std::invalid_argument);
}

TEST(Bottleneck, IdentityIsFullRank) {
  const auto w = bottleneck_witness(Matrix::Identity(3, 3));
  EXPECT_TRUE(w.full_rank);
  EXPECT_EQ(w.rank_e_prime, 3);
  EXPECT_EQ(w.h.size(), 0);
}

TEST(Bottleneck, LineEmbeddingWitness) {
  const auto w = bottleneck_witness(column({1.0, 0.0, -1.0}));
  EXPECT_FALSE(w.full_rank);
  EXPECT_EQ(w.rank_e, 1);
  EXPECT_EQ(w.rank_e_prime, 2);
  const double s = 1.0 / std::sqrt(6.0);
  EXPECT_NEAR(w.h(0), s, 1e-12);
  EXPECT_NEAR(w.h(1), -2.0 * s, 1e-12);
  EXPECT_NEAR(w.h(2), s, 1e-12);
  EXPECT_EQ(w.positive, (std::vector<int>{0, 2}));
  EXPECT_EQ(w.negative, (std::vector<int>{1}));
  EXPECT_LT(w.residual, 1e-12);
}

TEST(Permutations, LineEmbeddingRealizesOnlyMonotoneOrders) {
  const Matrix e = column({1.0, 0.0, -1.0});
  const auto rep = realizable_token_permutations(e);
  EXPECT_TRUE(rep.exact);
  EXPECT_EQ(rep.total, 6u);
  EXPECT_EQ(rep.feasible, (std::vector<Permutation>{{0, 1, 2}, {2, 1, 0}}));
  for (const auto& pi : rep.feasible) EXPECT_NE(pi.front(), 1);  // the middle token never leads
  EXPECT_FALSE(*permutation_feasible(e, {1, 0, 2}));
}

TEST(Permutations, AllOrdersIffAugmentedFullRank) {
  std::mt19937_64 rng(42);
  int checked = 0;
  for (int v : {3, 4})
    for (int width : {1, 2, 3})
      for (int rep = 0; rep < 9; ++rep) {
        const Matrix e = gaussian(v, width, rng);
        const auto w = bottleneck_witness(e);
        const auto perms = realizable_token_permutations(e);
        EXPECT_TRUE(perms.exact);
        EXPECT_EQ(perms.count() == perms.total, w.full_rank) << "v=" << v << " width=" << width;
        ++checked;
      }
  EXPECT_GE(checked, 50);
}

TEST(Permutations, SamplingIsALowerBound) {
  std::mt19937_64 rng(5);
  const Matrix e = gaussian(4, 2, rng);
  const auto lp = realizable_token_permutations(e);
  const auto sm = realizable_token_permutations(e, 5000, "sampling", 3);
  EXPECT_FALSE(sm.exact);
  EXPECT_LE(sm.count(), lp.count());
  for (const auto& pi : sm.feasible) EXPECT_TRUE(*permutation_feasible(e, pi));
  EXPECT_THROW(realizable_token_permutations(e, 10, "magic"), std::invalid_argument);
  EXPECT_THROW(realizable_token_permutations(Matrix::Zero(6, 2)), std::invalid_argument);
}

TEST(SolveDistribution, FullRankSolvesAnyDistribution) {
  const std::vector<double> p{0.5, 0.2, 0.3};
  const auto s = solve_logits_for_distribution(Matrix::Identity(3, 3), p);
  EXPECT_TRUE(s.feasible);
  EXPECT_LT(s.sup_error, 1e-9);
}

TEST(SolveDistribution, LineEmbeddingObstruction) {
  const Matrix e = column({1.0, 0.0, -1.0});
  // feasible iff p2^2 = p1 p3
  const std::vector<double> geometric{1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0};
  EXPECT_TRUE(solve_logits_for_distribution(e, geometric).feasible);
  const std::vector<double> p{0.5, 0.2, 0.3};
  const auto s = solve_logits_for_distribution(e, p);
  EXPECT_FALSE(s.feasible);
  EXPECT_GT(s.sup_error, 1e-3);
  EXPECT_NEAR(std::abs(s.h(1) / s.h(0)), 2.0, 1e-9);
  EXPECT_GT(std::abs(s.positive_side - s.negative_side), 1e-3);
  EXPECT_THROW(solve_logits_for_distribution(e, std::vector<double>{0.5, 0.5, 0.0}), std::domain_error);
  EXPECT_THROW(solve_logits_for_distribution(e, std::vector<double>{0.5, 0.5}), std::invalid_argument);
}

TEST(SolveDistribution, TwoTokenChainRule) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  Matrix joint(3, 3);
  for (Eigen::Index i = 0; i < joint.size(); ++i) joint.data()[i] = u(rng);
  joint /= joint.sum();
  const auto s = solve_two_token_grid(Matrix::Identity(3, 3), joint);
  EXPECT_TRUE(s.feasible);
  EXPECT_LT(s.sup_error, 1e-9);
  EXPECT_EQ(s.second.size(), 3u);
  EXPECT_FALSE(solve_two_token_grid(column({1.0, 0.0, -1.0}), joint).feasible);
}

TEST(Reports, JsonShape) {
  const auto c = count_distance_permutations(column({0.0, 1.0, 3.0})).to_json();
  for (const char* key : {"k", "n", "achieved", "exact", "upper_bound", "total", "threshold", "verdict"})
    EXPECT_TRUE(c.contains(key)) << key;
  const auto w = bottleneck_witness(column({1.0, 0.0, -1.0})).to_json();
  EXPECT_EQ(w.at("positive"), nlohmann::json({0, 2}));
  const auto p = realizable_token_permutations(column({1.0, 0.0, -1.0})).to_json();
  EXPECT_EQ(p.at("count"), 2);
}
