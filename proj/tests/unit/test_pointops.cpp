#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "../common/oracles.hpp"
#include "helpers.hpp"
#include "marnet/grad_check.hpp"
#include "marnet/ops.hpp"
#include "marnet/pointops.hpp"

namespace marnet {
namespace {

using pointops::FpsStart;
using pointops::StartPolicy;

PointSet line(std::vector<double> xs) {
  PointSet p;
  for (double x : xs) p.positions.push_back({x, 0.0, 0.0});
  return p;
}

// ---------------------------------------------------------------------------
// farthest point sampling

TEST(Fps, CollinearExample) {
  const auto idx = pointops::farthest_point_sample(line({0, 1, 2, 10}), 3, FpsStart{StartPolicy::first});
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 3, 2}));
}

TEST(Fps, SingleAndFull) {
  Rng rng(1);
  const auto pts = test::random_points(17, rng);
  EXPECT_EQ(pointops::farthest_point_sample(pts, 1, FpsStart{StartPolicy::first}), std::vector<std::size_t>{0});
  auto all = pointops::farthest_point_sample(pts, 17);
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(17);
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(all, expect);
  EXPECT_THROW(pointops::farthest_point_sample(pts, 18), ShapeError);
}

TEST(Fps, GreedyPropertyExhaustive) {
  Rng rng(2);
  for (std::size_t n : {1u, 2u, 5u, 16u, 33u, 64u}) {
    const auto pts = test::random_points(n, rng);
    const auto idx = pointops::farthest_point_sample(pts, n);
    EXPECT_EQ(oracle::check_fps(pts, idx, oracle::lexicographic_min(pts)), "") << "n=" << n;
  }
}

TEST(Fps, TiesGoToLowestIndex) {
  // Both 1 and 2 are at distance 1 from the start.
  const auto idx = pointops::farthest_point_sample(line({0, -1, 1}), 2, FpsStart{StartPolicy::first});
  EXPECT_EQ(idx[1], 1u);
}

TEST(Fps, LexicographicStartIsPermutationInvariant) {
  Rng rng(3);
  const auto pts = test::random_points(50, rng);
  std::vector<std::size_t> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[3], perm[40]);
  const auto shuffled = select(pts, perm);
  const auto a = pointops::farthest_point_sample(pts, 12);
  const auto b = pointops::farthest_point_sample(shuffled, 12);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(a[i], perm[b[i]]);
}

TEST(Fps, RandomStartIsSeeded) {
  Rng pr(4);
  const auto pts = test::random_points(40, pr);
  Rng a(9), b(9);
  const auto x = pointops::farthest_point_sample(pts, 10, FpsStart{StartPolicy::random, &a});
  const auto y = pointops::farthest_point_sample(pts, 10, FpsStart{StartPolicy::random, &b});
  EXPECT_EQ(x, y);
  EXPECT_EQ(oracle::check_fps(pts, x, x.front()), "");
}

// ---------------------------------------------------------------------------
// ball query

TEST(BallQuery, LineExample) {
  const auto src = line({0, 1, 2, 3});
  const auto g = pointops::ball_query(src, line({0}), 1.5, 8);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0].members, (std::vector<std::size_t>{0, 1, 0, 0, 0, 0, 0, 0}));
  EXPECT_FALSE(g[0].nearest_fallback);
}

TEST(BallQuery, CoincidentCenterTinyRadius) {
  const auto src = line({0, 1, 2, 3});
  const auto g = pointops::ball_query(src, line({2}), 1e-9, 4);
  EXPECT_EQ(g[0].members, (std::vector<std::size_t>{2, 2, 2, 2}));
}

TEST(BallQuery, LargeRadiusTakesEveryIndexOnce) {
  Rng rng(5);
  const auto src = test::random_points(20, rng);
  const auto g = pointops::ball_query(src, line({0}), 10.0, 20);
  std::vector<std::size_t> expect(20);
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(g[0].members, expect);
}

TEST(BallQuery, EmptyBallFallsBackToNearest) {
  const auto g = pointops::ball_query(line({0, 5, 9}), line({6.5}), 0.5, 3);
  EXPECT_TRUE(g[0].nearest_fallback);
  EXPECT_EQ(g[0].members, (std::vector<std::size_t>{1, 1, 1}));
}

TEST(BallQuery, Errors) {
  EXPECT_THROW(pointops::ball_query(PointSet{}, line({0}), 1.0, 2), ShapeError);
  EXPECT_THROW(pointops::ball_query(line({0}), line({0}), 0.0, 2), ConfigError);
  EXPECT_THROW(pointops::ball_query(line({0}), line({0}), 1.0, 0), ConfigError);
}

TEST(BallQuery, MatchesNaiveOracle) {
  Rng rng(6);
  for (std::size_t n : {8u, 100u, 512u}) {
    const auto src = test::random_points(n, rng);
    const auto centers = test::random_points(32, rng);
    for (double r : {0.1, 0.4, 1.0}) {
      const auto groups = pointops::ball_query(src, centers, r, 16);
      for (std::size_t c = 0; c < centers.size(); ++c) {
        EXPECT_EQ(groups[c].members, oracle::ball_query(src, centers.positions[c], r, 16));
        EXPECT_EQ(groups[c].center_index, c);
        if (!groups[c].nearest_fallback) {
          for (auto m : groups[c].members) EXPECT_LE(oracle::distance(src.positions[m], centers.positions[c]), r);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// knn

TEST(Knn, Examples) {
  Rng rng(7);
  const auto src = test::random_points(10, rng);
  PointSet q;
  q.positions.push_back(src.positions[4]);
  auto r = pointops::knn(src, q, 1);
  EXPECT_EQ(r.indices[0], 4u);
  EXPECT_EQ(r.distances[0], 0.0);
  r = pointops::knn(src, q, 10);
  std::set<std::size_t> all(r.indices.begin(), r.indices.end());
  EXPECT_EQ(all.size(), 10u);
  EXPECT_TRUE(std::is_sorted(r.distances.begin(), r.distances.end()));
  EXPECT_THROW(pointops::knn(src, q, 11), ShapeError);
}

TEST(Knn, TiesByLowestIndex) {
  const auto r = pointops::knn(line({1, -1, 3, -3}), line({0}), 4);
  EXPECT_EQ(r.indices, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Knn, MatchesNaiveOracle) {
  Rng rng(8);
  for (std::size_t n : {32u, 200u, 512u}) {
    const auto src = test::random_points(n, rng);
    const auto queries = test::random_points(24, rng);
    const std::size_t k = std::min<std::size_t>(n, 8);
    const auto r = pointops::knn(src, queries, k);
    ASSERT_EQ(r.k, k);
    for (std::size_t q = 0; q < queries.size(); ++q) {
      const auto expect = oracle::knn(src, queries.positions[q], k);
      for (std::size_t j = 0; j < k; ++j) {
        EXPECT_EQ(r.indices[q * k + j], expect[j].second);
        EXPECT_EQ(r.distances[q * k + j], expect[j].first);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// interpolation

TEST(Interpolate, WeightsAreConvex) {
  Rng rng(9);
  const auto coarse = test::random_points(20, rng);
  const auto fine = test::random_points(50, rng);
  const auto w = pointops::three_nn_weights(coarse, fine);
  ASSERT_EQ(w.per_point, 3u);
  for (std::size_t f = 0; f < fine.size(); ++f) {
    double total = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_GE(w.weights[f * 3 + j], 0.0);
      total += w.weights[f * 3 + j];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Interpolate, ConstantFieldAndBroadcast) {
  Rng rng(10);
  const auto coarse = test::random_points(6, rng);
  const auto fine = test::random_points(30, rng);
  auto y = pointops::three_nn_interpolate(coarse, constant(Tensor<double>(Shape{6, 2}, 0.75)), fine);
  for (double v : y.value().data()) EXPECT_NEAR(v, 0.75, 1e-12);

  PointSet one;
  one.positions.push_back({0.1, 0.2, 0.3});
  auto b = pointops::three_nn_interpolate(one, constant(Tensor<double>(Shape{1, 3}, {1, 2, 3})), fine);
  ASSERT_EQ(b.rows(), 30u);
  for (std::size_t r = 0; r < 30; ++r) {
    EXPECT_EQ(b.value().at(r, 0), 1.0);
    EXPECT_EQ(b.value().at(r, 2), 3.0);
  }
}

TEST(Interpolate, CoincidentPointReproducesFeature) {
  Rng rng(11);
  const auto coarse = test::random_points(8, rng);
  const auto feats = test::random_tensor<double>({8, 4}, rng);
  PointSet fine;
  fine.positions.push_back(coarse.positions[5]);
  auto y = pointops::three_nn_interpolate(coarse, constant(feats), fine);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y.value()[c], feats.at(5, c), 1e-4);
}

TEST(Interpolate, MatchesWeightFormula) {
  Rng rng(12);
  for (std::size_t nc : {1u, 2u, 3u, 40u}) {
    const auto coarse = test::random_points(nc, rng);
    const auto fine = test::random_points(25, rng);
    const auto feats = test::random_tensor<double>({nc, 5}, rng);
    auto y = pointops::three_nn_interpolate(coarse, constant(feats), fine);
    const auto expect = oracle::interpolate(coarse, std::vector<double>(feats.data().begin(), feats.data().end()), 5, fine);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y.value()[i], expect[i], 1e-12);
  }
}

TEST(Interpolate, LinearInFeatures) {
  Rng rng(13);
  const auto coarse = test::random_points(12, rng);
  const auto fine = test::random_points(40, rng);
  const auto a = test::random_tensor<double>({12, 3}, rng);
  const auto b = test::random_tensor<double>({12, 3}, rng);
  const double alpha = 0.7, beta = -1.3;
  Tensor<double> mix(Shape{12, 3});
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * a[i] + beta * b[i];
  auto fa = pointops::three_nn_interpolate(coarse, constant(a), fine);
  auto fb = pointops::three_nn_interpolate(coarse, constant(b), fine);
  auto fm = pointops::three_nn_interpolate(coarse, constant(mix), fine);
  for (std::size_t i = 0; i < fm.size(); ++i) {
    EXPECT_NEAR(fm.value()[i], alpha * fa.value()[i] + beta * fb.value()[i], 1e-6);
  }
}

TEST(Interpolate, GradientMatchesFiniteDifferences) {
  Rng rng(14);
  for (std::size_t nc : {1u, 4u, 16u}) {
    const auto coarse = test::random_points(nc, rng);
    const auto fine = test::random_points(10, rng);
    auto r = grad_check([&](const Var<double>& in) { return pointops::three_nn_interpolate(coarse, in, fine); },
                        test::random_tensor<double>({nc, 3}, rng));
    EXPECT_TRUE(r.pass) << r.max_rel_err;
  }
}

// ---------------------------------------------------------------------------
// normalization

TEST(Normalize, Examples) {
  Rng rng(15);
  auto pts = test::random_points(64, rng);
  for (auto& p : pts.positions)
    for (auto& c : p) c = c * 3.0 + 5.0;
  const auto n = pointops::normalize(pts);
  Vec3 centroid{0, 0, 0};
  double max_norm = 0.0;
  for (const auto& p : n.positions) {
    for (int c = 0; c < 3; ++c) centroid[c] += p[c] / 64.0;
    max_norm = std::max(max_norm, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  for (double c : centroid) EXPECT_NEAR(c, 0.0, 1e-12);
  EXPECT_NEAR(max_norm, 1.0, 1e-6);
  EXPECT_EQ(n.normals, pts.normals);

  const auto again = pointops::normalize(n);
  for (std::size_t i = 0; i < n.size(); ++i)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(again.positions[i][c], n.positions[i][c], 1e-7);

  const auto single = pointops::normalize(line({4.0}));
  EXPECT_EQ(single.positions[0], (Vec3{0, 0, 0}));
  const auto same = pointops::normalize(line({2.0, 2.0, 2.0}));
  for (const auto& p : same.positions) EXPECT_EQ(p, (Vec3{0, 0, 0}));
}

}  // namespace
}  // namespace marnet
