#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace mesograph;

TEST(SpatialGraph, MatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-200.0, 200.0);
    std::vector<Point2> pts(400);
    for (auto& p : pts) p = {u(rng), u(rng)};
    for (double r : {5.0, 30.0, 75.0}) {
      EXPECT_EQ(radius_edges(pts, r), testutil::brute_force_edges(pts, r)) << "seed " << seed << " r " << r;
    }
  }
}

TEST(SpatialGraph, BoundaryDistanceIsInclusive) {
  // Exactly representable distances: 3-4-5 triangles scaled to the radius.
  const std::vector<Point2> pts{{0, 0}, {18, 24}, {30, 0}, {30.000001, 0}, {-30, 0}, {0, -30}};
  const auto edges = radius_edges(pts, 30.0);
  EXPECT_EQ(edges, testutil::brute_force_edges(pts, 30.0));
  auto has = [&](std::size_t i, std::size_t j) {
    return std::find(edges.begin(), edges.end(), Edge{i, j}) != edges.end();
  };
  EXPECT_TRUE(has(0, 1));
  EXPECT_TRUE(has(0, 2));
  EXPECT_FALSE(has(0, 3));
  EXPECT_TRUE(has(0, 4));
  EXPECT_TRUE(has(0, 5));
}

TEST(SpatialGraph, CoincidentAndGridEdgePoints) {
  const std::vector<Point2> pts{{0, 0}, {0, 0}, {30, 30}, {60, 0}, {-1e-9, 29.9999}};
  EXPECT_EQ(radius_edges(pts, 30.0), testutil::brute_force_edges(pts, 30.0));
}

TEST(SpatialGraph, GraphCarriesBagData) {
  std::mt19937_64 rng(5);
  Bag b = testutil::random_bag(30, 3, 100.0, rng);
  b.cells[0].instance_label = InstanceLabel::S;
  const CellGraph g = build_radius_graph(b);
  EXPECT_EQ(g.n, 30u);
  EXPECT_EQ(g.node_features.cols(), 3u);
  EXPECT_EQ(g.node_features(4, 2), b.cells[4].features[2]);
  EXPECT_EQ(g.coords(7, 1), b.cells[7].y_um);
  EXPECT_EQ(g.cell_ids[9], 9);
  EXPECT_EQ(*g.instance_labels[0], InstanceLabel::S);
  EXPECT_TRUE(std::is_sorted(g.edges.begin(), g.edges.end()));
  for (const auto& [i, j] : g.edges) EXPECT_LT(i, j);
  const auto d = degree_stats(g);
  EXPECT_DOUBLE_EQ(d.mean, 2.0 * static_cast<double>(g.edges.size()) / 30.0);
  EXPECT_LE(d.min, d.mean);
  EXPECT_GE(d.max, d.mean);
}

TEST(SpatialGraph, RejectsNonPositiveRadius) {
  std::mt19937_64 rng(1);
  const Bag b = testutil::random_bag(5, 2, 10.0, rng);
  EXPECT_THROW(build_radius_graph(b, 0.0), UsageError);
  EXPECT_THROW(build_radius_graph(b, -1.0), UsageError);
  EXPECT_THROW(build_radius_graph(b, std::numeric_limits<double>::quiet_NaN()), UsageError);
  EXPECT_EQ(kDefaultRadiusUm, 30.0);
}

TEST(SpatialGraph, WithFeaturesKeepsTopology) {
  std::mt19937_64 rng(2);
  Bag b = testutil::random_bag(20, 2, 60.0, rng);
  const CellGraph g = build_radius_graph(b);
  for (auto& c : b.cells) c.features[0] = 42.0;
  const CellGraph h = with_features(g, b);
  EXPECT_EQ(h.edges, g.edges);
  EXPECT_EQ(h.node_features(3, 0), 42.0);
}
