#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace mesograph;

namespace {

SynthConfig small(std::size_t n_bags = 40) {
  SynthConfig c;
  c.n_bags = n_bags;
  c.cells_min = 60;
  c.cells_max = 120;
  return c;
}

}  // namespace

TEST(Synth, DeterministicFiles) {
  const auto d1 = testutil::temp_dir("synth1"), d2 = testutil::temp_dir("synth2");
  for (const auto& d : {d1, d2}) {
    const Dataset ds = generate(small());
    write_cell_table(ds, (d / "cells.csv").string());
    write_bag_table(ds.bags, (d / "bags.csv").string());
  }
  EXPECT_EQ(testutil::slurp(d1 / "cells.csv"), testutil::slurp(d2 / "cells.csv"));
  EXPECT_EQ(testutil::slurp(d1 / "bags.csv"), testutil::slurp(d2 / "bags.csv"));
  SynthConfig other = small();
  other.seed = 8;
  EXPECT_NE(generate(other), generate(small()));
}

TEST(Synth, StructureAndLabels) {
  const Dataset ds = generate(small(60));
  EXPECT_EQ(ds.d0, 16u);
  for (std::size_t i = 0; i < ds.bags.size(); ++i) {
    const Bag& b = ds.bags[i];
    EXPECT_EQ(b.meta.slide_id, "slide" + std::to_string(i % 4));
    EXPECT_EQ(b.meta.patient_id, b.meta.bag_id);
    EXPECT_GE(b.cells.size(), 60u);
    EXPECT_LE(b.cells.size(), 120u);
    EXPECT_TRUE(b.meta.has_survival());
    std::size_t n_s = 0;
    for (const auto& c : b.cells) {
      ASSERT_TRUE(c.instance_label.has_value());
      n_s += *c.instance_label == InstanceLabel::S;
      EXPECT_LE(std::hypot(c.x_um - 500, c.y_um - 500), 500 + 1e-9);
    }
    if (b.meta.subtype == Subtype::Epithelioid) {
      EXPECT_EQ(n_s, 0u);
    }
    if (b.meta.subtype == Subtype::Sarcomatoid) {
      EXPECT_EQ(n_s, b.cells.size());
    }
    if (b.meta.subtype == Subtype::Biphasic) {
      EXPECT_GT(n_s, 0u);
      EXPECT_LT(n_s, b.cells.size());
    }
  }
}

TEST(Synth, BiphasicFractionWithinBlobGranularity) {
  const Dataset ds = generate(small(120));
  for (const auto& b : ds.bags) {
    if (b.meta.subtype != Subtype::Biphasic) continue;
    double n_s = 0;
    for (const auto& c : b.cells) n_s += *c.instance_label == InstanceLabel::S;
    const double frac = n_s / static_cast<double>(b.cells.size());
    // one blob of 8 at most holds ceil(n/3) cells; allow one blob either side of the range
    const double blob = 1.0 / 3.0 + 1.0 / static_cast<double>(b.cells.size());
    EXPECT_GE(frac, 0.2 - blob);
    EXPECT_LE(frac, 0.8 + blob);
  }
}

TEST(Synth, PureMixGivesOnlyEpithelioid) {
  SynthConfig c = small(20);
  c.subtype_mix = {1.0, 0.0, 0.0};
  for (const auto& b : generate(c).bags)
    for (const auto& cell : b.cells) EXPECT_EQ(*cell.instance_label, InstanceLabel::E);
}

TEST(Synth, SubtypeFrequenciesMatchMix) {
  SynthConfig c = small(1000);
  c.cells_min = c.cells_max = 5;
  c.blobs_min = c.blobs_max = 1;
  std::array<double, 3> count{};
  for (const auto& b : generate(c).bags) count[static_cast<int>(b.meta.subtype)] += 1;
  double chi2 = 0;
  for (int k = 0; k < 3; ++k) {
    const double e = 1000 * c.subtype_mix[static_cast<std::size_t>(k)];
    chi2 += (count[static_cast<std::size_t>(k)] - e) * (count[static_cast<std::size_t>(k)] - e) / e;
  }
  // df = 2: p = exp(−chi2/2) > 0.001
  EXPECT_GT(std::exp(-chi2 / 2), 0.001);
}

TEST(Synth, DiscriminativeFeaturesSeparateInstances) {
  const Dataset ds = generate(small(30));
  double e0 = 0, s0 = 0, e1 = 0, s1 = 0, ne = 0, ns = 0;
  for (const auto& b : ds.bags)
    for (const auto& c : b.cells) {
      if (*c.instance_label == InstanceLabel::S) {
        s0 += c.features[0];
        s1 += c.features[1];
        ns += 1;
      } else {
        e0 += c.features[0];
        e1 += c.features[1];
        ne += 1;
      }
    }
  EXPECT_GT(e0 / ne, s0 / ns + 1.0);
  EXPECT_LT(e1 / ne, s1 / ns - 1.0);
}

TEST(Synth, InvalidConfigRejected) {
  SynthConfig c;
  c.subtype_mix = {0.5, 0.5, 0.5};
  EXPECT_THROW(generate(c), UsageError);
  c = SynthConfig{};
  c.d0 = 3;
  EXPECT_THROW(generate(c), UsageError);
  c = SynthConfig{};
  c.cells_min = 10;
  c.cells_max = 5;
  EXPECT_THROW(generate(c), UsageError);
}
