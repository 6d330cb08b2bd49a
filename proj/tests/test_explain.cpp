#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace mesograph;

namespace {

struct Fixture {
  CellGraph graph;
  MesoGraphParams params;
};

Fixture fixture(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Bag b = testutil::random_bag(25, 5, 80.0, rng);
  b.meta.subtype = Subtype::Biphasic;
  Architecture a;
  a.d0 = 5;
  return {build_radius_graph(b), init_params(a, seed)};
}

}  // namespace

TEST(Explain, MaskGradientMatchesFiniteDifferences) {
  const Fixture f = fixture(1);
  const MessageIndex mi = message_index(f.graph);
  ExplainConfig cfg;
  const double z_ref = score(f.graph, f.params, mi).Z + 0.05;  // off the optimum so fidelity has a gradient
  std::vector<double> logits{0.3, -0.2, 1.1, -0.7, 0.05};
  const auto obj = detail::mask_objective(f.graph, mi, f.params, logits, z_ref, cfg);
  const double h = 1e-6;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    auto lp = logits, lm = logits;
    lp[j] += h;
    lm[j] -= h;
    const double num = (detail::mask_objective(f.graph, mi, f.params, lp, z_ref, cfg).loss -
                        detail::mask_objective(f.graph, mi, f.params, lm, z_ref, cfg).loss) /
                       (2 * h);
    EXPECT_NEAR(obj.grad[j], num, 1e-6 * std::max(1.0, std::abs(num)));
  }
}

TEST(Explain, NoPenaltyKeepsMaskHigh) {
  const Fixture f = fixture(2);
  ExplainConfig cfg;
  cfg.lambda_size = 0.0;
  cfg.lambda_ent = 0.0;
  const FeatureImportance fi = learn_feature_mask(f.graph, f.params, cfg);
  // Fidelity alone is already at its minimum near M = 1, so the gap stays small.
  EXPECT_LT(fi.fidelity_gap, 0.05);
  EXPECT_LE(fi.fidelity_gap, fi.zero_mask_gap + 1e-12);
}

TEST(Explain, LargeSizePenaltyDrivesMaskDown) {
  const Fixture f = fixture(3);
  ExplainConfig cfg;
  cfg.lambda_size = 100.0;
  cfg.lambda_ent = 0.0;
  cfg.steps = 300;
  const FeatureImportance fi = learn_feature_mask(f.graph, f.params, cfg);
  for (double m : fi.mask) EXPECT_LT(m, 0.05);
}

TEST(Explain, SeededAndThreadIndependent) {
  const Fixture a = fixture(4), b = fixture(5);
  std::vector<CellGraph> graphs{a.graph, b.graph};
  graphs[1].node_features = b.graph.node_features;
  ExplainConfig cfg;
  cfg.steps = 20;
  cfg.seed = 9;
  const auto one = learn_feature_masks(graphs, a.params, cfg, 1);
  const auto two = learn_feature_masks(graphs, a.params, cfg, 2);
  ASSERT_EQ(one.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(one[k].mask, two[k].mask);
  ExplainConfig c1 = cfg;
  c1.seed = 10;
  EXPECT_EQ(learn_feature_mask(graphs[1], a.params, c1).mask, one[1].mask);
}

TEST(Explain, RejectsBadConfig) {
  const Fixture f = fixture(6);
  ExplainConfig cfg;
  cfg.lambda_size = -1;
  EXPECT_THROW(learn_feature_mask(f.graph, f.params, cfg), UsageError);
  cfg = ExplainConfig{};
  cfg.lr = 0;
  EXPECT_THROW(learn_feature_mask(f.graph, f.params, cfg), UsageError);
}

TEST(Quantiles, MatchLinearInterpolationOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(1 + rng() % 30);
    for (double& x : v) x = u(rng);
    std::sort(v.begin(), v.end());
    for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      // oracle: h = (n−1)q, x[⌊h⌋] + (h−⌊h⌋)(x[⌈h⌉] − x[⌊h⌋])
      const double h = (static_cast<double>(v.size()) - 1) * q;
      const auto lo = static_cast<std::size_t>(h);
      const std::size_t hi = static_cast<std::size_t>(std::ceil(h));
      EXPECT_NEAR(quantile_sorted(v, q), v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]), 1e-15);
    }
  }
  const std::vector<double> s{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(quantile_sorted(s, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(quantile_sorted(s, 0.5), 2.5);
}

TEST(BoxStats, TukeyWhiskers) {
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 100};
  const BoxStats b = box_stats(v);
  EXPECT_EQ(b.q25, 3);
  EXPECT_EQ(b.median, 5);
  EXPECT_EQ(b.q75, 7);
  EXPECT_EQ(b.whisker_low, 1);   // fence −3
  EXPECT_EQ(b.whisker_high, 8);  // fence 13 excludes 100
  EXPECT_EQ(b.count, 9u);
}

TEST(Aggregate, GroupsAndTopFeatures) {
  std::vector<FeatureImportance> items(3);
  items[0].subtype = Subtype::Epithelioid;
  items[0].mask = {0.1, 0.9, 0.5};
  items[1].subtype = Subtype::Epithelioid;
  items[1].mask = {0.3, 0.7, 0.6};
  items[2].subtype = Subtype::Sarcomatoid;
  items[2].mask = {0.2, 0.8, 0.9};
  const ImportanceSummary s = aggregate_importance(items, 2);
  EXPECT_EQ(s.by_subtype.size(), 2u);
  EXPECT_EQ(s.by_subtype.at(Subtype::Epithelioid)[0].median, 0.2);
  EXPECT_EQ(s.top, (std::vector<std::size_t>{1, 2}));
  EXPECT_NEAR(s.overall_mean[0], 0.2, 1e-15);
}
