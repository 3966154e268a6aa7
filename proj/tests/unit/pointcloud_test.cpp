#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "pointlama/pointcloud.hpp"

using namespace pointlama;

namespace {

std::vector<Point3> random_points(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  return pts;
}

// Plain greedy max-min: recompute every distance from scratch each round.
std::vector<std::size_t> brute_force_fps(const std::vector<Point3>& pts, std::size_t G, std::size_t start) {
  std::vector<std::size_t> chosen{start};
  while (chosen.size() < G) {
    std::size_t best = 0;
    double best_d = -1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t c : chosen) d = std::min(d, squared_distance(pts[i], pts[c]));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

PatchEncoderConfig small_patch() { return {8, 12, 10, 6}; }

}  // namespace

TEST(FarthestPointSample, Examples) {
  const std::vector<Point3> pts{{0, 0, 0}, {1, 0, 0}, {0.1, 0, 0}};
  EXPECT_EQ(farthest_point_sample(pts, 2, 0), (std::vector<std::size_t>{0, 1}));

  const auto all = farthest_point_sample(pts, 3, 2);
  EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), 3u);

  EXPECT_THROW(farthest_point_sample(pts, 4, 0), std::invalid_argument);
}

TEST(FarthestPointSample, MatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto pts = random_points(64, seed);
    EXPECT_EQ(farthest_point_sample(pts, 8, 3), brute_force_fps(pts, 8, 3));
  }
}

TEST(FarthestPointSample, SeedZeroStartsNearCentroid) {
  const auto pts = random_points(50, 7);
  Point3 c{0, 0, 0};
  for (const auto& p : pts)
    for (int k = 0; k < 3; ++k) c[k] += p[k] / 50.0;
  std::size_t nearest = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    if (squared_distance(pts[i], c) < squared_distance(pts[nearest], c)) nearest = i;
  EXPECT_EQ(fps_start_index(pts, 0, 0), nearest);

  const auto cloud = PointCloud::from_sets({pts, pts});
  const auto idx = farthest_point_sample(cloud, 6, 0);
  ASSERT_EQ(idx.size(), 12u);
  EXPECT_EQ(idx[0], nearest);
  EXPECT_EQ(std::vector<std::size_t>(idx.begin(), idx.begin() + 6), std::vector<std::size_t>(idx.begin() + 6, idx.end()));
  EXPECT_EQ(farthest_point_sample(cloud, 6, 9), farthest_point_sample(cloud, 6, 9));
}

TEST(KnnGroup, SelfNeighbor) {
  const auto pts = random_points(20, 1);
  const auto p = knn_group(PointCloud::from_sets({pts}), {4, 9}, 1);
  for (double v : p.neighborhoods.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(p.neighbor_indices, (std::vector<std::size_t>{4, 9}));
}

TEST(KnnGroup, CollinearMatchesSortedDistances) {
  const std::vector<double> xs{0.0, 0.3, 1.0, 1.8, 3.1, 4.7, 6.6};
  std::vector<Point3> pts;
  for (double x : xs) pts.push_back({x, 0, 0});
  const auto cloud = PointCloud::from_sets({pts});
  for (std::size_t c = 0; c < pts.size(); ++c) {
    std::vector<std::size_t> order(pts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(xs[a] - xs[c]) < std::abs(xs[b] - xs[c]); });
    const auto p = knn_group(cloud, {c}, 4);
    EXPECT_EQ(p.neighbor_indices, std::vector<std::size_t>(order.begin(), order.begin() + 4));
  }
}

TEST(KnnGroup, DuplicateCenterComesFirst) {
  std::vector<Point3> pts{{0.5, 0, 0}, {0, 0, 0}, {0.2, 0, 0}, {0, 0, 0}};
  const auto p = knn_group(PointCloud::from_sets({pts}), {1}, 3);
  EXPECT_EQ(p.neighbor_indices, (std::vector<std::size_t>{1, 3, 2}));
  EXPECT_THROW(knn_group(PointCloud::from_sets({pts}), {1}, 5), std::invalid_argument);
}

TEST(KnnGroup, NeighborhoodsAreCloudSubset) {
  const auto pts = random_points(40, 2);
  const auto cloud = PointCloud::from_sets({pts});
  const auto centers = farthest_point_sample(cloud, 5, 0);
  const auto p = knn_group(cloud, centers, 6);
  for (std::size_t g = 0; g < 5; ++g) {
    for (std::size_t k = 0; k < 6; ++k) {
      const std::size_t j = p.neighbor_indices[g * 6 + k];
      for (std::size_t a = 0; a < 3; ++a) {
        EXPECT_EQ(p.neighborhoods.at({0, g, k, a}) + p.centers.at({0, g, a}), pts[j][a]);
      }
    }
  }
}

TEST(PatchEncode, PermutationInvariant) {
  ParamStore store;
  Rng rng(3);
  const PatchEncoder enc(store, "pe", small_patch(), rng);
  const auto pts = random_points(30, 3);
  const auto cloud = PointCloud::from_sets({pts});
  PatchSet p = knn_group(cloud, farthest_point_sample(cloud, 3, 0), 5);
  const DenseArray a = patch_encode(p, enc).tokens.value();

  // Reverse the points of patch 1.
  PatchSet q = p;
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t d = 0; d < 3; ++d) q.neighborhoods.at({0, 1, k, d}) = p.neighborhoods.at({0, 1, 4 - k, d});
  EXPECT_EQ(patch_encode(q, enc).tokens.value(), a);
}

TEST(PatchEncode, IdenticalPatchesIdenticalTokens) {
  ParamStore store;
  Rng rng(4);
  const PatchEncoder enc(store, "pe", small_patch(), rng);
  DenseArray nb = rng.uniform_array({1, 2, 4, 3}, -0.2, 0.2);
  for (std::size_t i = 0; i < 12; ++i) nb[12 + i] = nb[i];
  const DenseArray t = enc.forward(Value::constant(nb)).value();
  for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(t[c], t[6 + c]);
}

TEST(PatchEncode, Gradient) {
  ParamStore store;
  Rng rng(5);
  const PatchEncoder enc(store, "pe", small_patch(), rng);
  std::vector<Value> inputs{pointlama::testing::param(rng, {2, 2, 4, 3}, -0.3, 0.3)};
  for (const auto& e : store.entries()) inputs.push_back(e.value);
  EXPECT_GRAD_OK(pointlama::testing::grad_check(
      [&](const auto& in) { return pointlama::testing::weighted_sum(enc.forward(in[0])); }, inputs));
}

TEST(NormalizePoints, UnitSphere) {
  auto pts = random_points(25, 6);
  for (auto& p : pts) p[0] += 5;
  normalize_points(pts);
  double r = 0;
  Point3 c{0, 0, 0};
  for (const auto& p : pts) {
    r = std::max(r, std::sqrt(squared_distance(p, {0, 0, 0})));
    for (int k = 0; k < 3; ++k) c[k] += p[k];
  }
  EXPECT_NEAR(r, 1.0, 1e-12);
  for (double v : c) EXPECT_NEAR(v, 0.0, 1e-12);
}
