#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace mesograph;

namespace {

SynthConfig tiny_synth(std::uint64_t seed = 7) {
  SynthConfig c;
  c.n_bags = 24;
  c.cells_min = 40;
  c.cells_max = 60;
  c.d0 = 4;
  c.seed = seed;
  c.disc_radius_um = 150;
  c.blob_sd_um = 25;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.max_epochs = 6;
  c.batch_bags = 8;
  c.threads = 1;
  c.seed = 3;
  return c;
}

std::vector<PreparedBag> prepared(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<PreparedBag> out;
  for (std::size_t i : idx) out.push_back(prepare(build_radius_graph(ds.bags[i])));
  return out;
}

// Pairwise oracle: loss is zero iff every unequal-label pair has (y_i − y_j)(Z_i − Z_j) ≥ 1.
bool all_pairs_separated(const std::vector<double>& z, const std::vector<int>& y) {
  for (std::size_t i = 0; i < z.size(); ++i)
    for (std::size_t j = 0; j < z.size(); ++j)
      if (y[i] != y[j] && static_cast<double>(y[i] - y[j]) * (z[i] - z[j]) < 1.0) return false;
  return true;
}

}  // namespace

TEST(RankingLoss, ZeroIffAllPairsSeparatedExhaustive) {
  const std::vector<double> levels{0.0, 0.5, 1.0, 1.5, 3.0, 4.5};
  std::size_t checked = 0;
  for (std::size_t m = 1; m <= 4; ++m) {
    std::size_t label_count = 1;
    for (std::size_t k = 0; k < m; ++k) label_count *= 3;
    for (std::size_t code = 0; code < label_count; ++code) {
      std::vector<int> y(m);
      for (std::size_t k = 0, c = code; k < m; ++k, c /= 3) y[k] = static_cast<int>(c % 3);
      // every ordered choice of m distinct levels
      std::vector<std::size_t> pick(levels.size());
      std::iota(pick.begin(), pick.end(), 0);
      do {
        std::vector<double> z(m);
        for (std::size_t k = 0; k < m; ++k) z[k] = levels[pick[k]];
        const RankingLoss r = ranking_loss(z, y);
        EXPECT_EQ(r.loss == 0.0, all_pairs_separated(z, y));
        EXPECT_GE(r.loss, 0.0);
        std::vector<double> shifted = z;
        for (double& v : shifted) v += 17.25;
        EXPECT_EQ(ranking_loss(shifted, y).loss, r.loss);
        ++checked;
        std::reverse(pick.begin() + static_cast<long>(m), pick.end());
      } while (std::next_permutation(pick.begin(), pick.end()));
    }
  }
  EXPECT_GT(checked, 20000u);
}

TEST(RankingLoss, CountsAndGradient) {
  const std::vector<double> z{0.2, 0.1, 0.9};
  const std::vector<int> y{0, 0, 1};
  const RankingLoss r = ranking_loss(z, y);
  EXPECT_EQ(r.pairs, 4u);  // ordered pairs with different labels
  // pairs (2,0): 1 − 0.7; (2,1): 1 − 0.8; each counted in both orders.
  EXPECT_NEAR(r.loss, 2 * (0.3 + 0.2), 1e-15);
  EXPECT_DOUBLE_EQ(r.dZ[2], -4.0);
  EXPECT_DOUBLE_EQ(r.dZ[0], 2.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<double> w{0.0};
  const std::vector<double> g{1.0};
  AdamState s;
  adam_step(w, g, s, 0.1);
  EXPECT_NEAR(w[0], -0.1, 1e-9);
  EXPECT_EQ(s.t, 1u);
  std::vector<double> bad{std::numeric_limits<double>::quiet_NaN()};
  EXPECT_THROW(adam_step(w, bad, s, 0.1), NumericalError);
}

TEST(Schedule, CyclicValues) {
  const TrainConfig c;
  EXPECT_NEAR(cyclic_lr(0, c), 2e-5, 1e-18);
  EXPECT_NEAR(cyclic_lr(25, c), 1e-4, 1e-18);
  EXPECT_NEAR(cyclic_lr(50, c), 2e-5, 1e-18);
  EXPECT_NEAR(cyclic_lr(75, c), 8e-5, 1e-18);
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_NEAR(cyclic_lr(25 + 50 * k, c), 1e-4 * std::pow(0.8, static_cast<double>(k)), 1e-18);
  }
  // monotone up then down inside a cycle
  for (std::size_t e = 0; e < 25; ++e) EXPECT_LT(cyclic_lr(e, c), cyclic_lr(e + 1, c));
  for (std::size_t e = 25; e < 49; ++e) EXPECT_GT(cyclic_lr(e, c), cyclic_lr(e + 1, c));
}

TEST(Training, FlattenRoundTrip) {
  Architecture a;
  a.d0 = 6;
  const MesoGraphParams p = init_params(a, 2);
  MesoGraphParams q = zero_params(a);
  unflatten(flatten(p), q);
  EXPECT_EQ(flatten(q), flatten(p));
}

TEST(Training, SplitByPatientKeepsPatientsTogether) {
  Dataset ds = generate(tiny_synth());
  for (std::size_t i = 0; i < ds.bags.size(); ++i) ds.bags[i].meta.patient_id = "p" + std::to_string(i / 2);
  std::vector<std::size_t> all(ds.bags.size());
  std::iota(all.begin(), all.end(), 0);
  const auto [tr, va] = split_by_patient(ds, all, 0.25, 11);
  EXPECT_EQ(tr.size() + va.size(), ds.bags.size());
  std::set<std::string> ptr, pva;
  for (std::size_t i : tr) ptr.insert(ds.bags[i].meta.patient_id);
  for (std::size_t i : va) pva.insert(ds.bags[i].meta.patient_id);
  for (const auto& p : pva) EXPECT_FALSE(ptr.count(p));
  EXPECT_EQ(pva.size(), 3u);  // 12 patients × 0.25
  const auto again = split_by_patient(ds, all, 0.25, 11);
  EXPECT_EQ(again.first, tr);
}

TEST(Training, LossDecreasesOnSeparableData) {
  SynthConfig sc = tiny_synth();
  sc.signal = 2.0;
  const Dataset raw = generate(sc);
  std::vector<Bag> bags = raw.bags;
  const Dataset ds = zscore_apply(raw, zscore_fit(bags));
  std::vector<std::size_t> all(ds.bags.size());
  std::iota(all.begin(), all.end(), 0);
  const auto set = prepared(ds, all);
  TrainConfig cfg = tiny_train();
  cfg.max_epochs = 30;
  cfg.lr_max0 = 3e-3;
  cfg.lr_min = 1e-3;
  const TrainResult r = train(set, set, cfg);
  ASSERT_EQ(r.history.size(), 30u);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Training, ResumeReproducesUninterruptedRun) {
  const Dataset raw = generate(tiny_synth());
  std::vector<Bag> bags = raw.bags;
  const Dataset ds = zscore_apply(raw, zscore_fit(bags));
  std::vector<std::size_t> tr_idx, va_idx;
  for (std::size_t i = 0; i < ds.bags.size(); ++i) (i % 4 ? tr_idx : va_idx).push_back(i);
  const auto tr = prepared(ds, tr_idx);
  const auto va = prepared(ds, va_idx);
  const TrainConfig cfg = tiny_train();

  TrainState full = initial_state(cfg, ds.d0);
  train_from(full, tr, va, cfg);

  TrainState part = initial_state(cfg, ds.d0);
  train_from(part, tr, va, cfg, 3);
  EXPECT_EQ(part.next_epoch, 3u);
  EXPECT_FALSE(part.finished);
  const Checkpoint saved{part.params, std::nullopt, cfg.radius_um, cfg, part};
  Checkpoint loaded = from_json_string(to_json_string(saved));
  TrainState resumed = *loaded.state;
  train_from(resumed, tr, va, cfg);

  EXPECT_EQ(flatten(resumed.params), flatten(full.params));
  EXPECT_EQ(flatten(resumed.best_params), flatten(full.best_params));
  EXPECT_EQ(resumed.adam, full.adam);
  ASSERT_EQ(resumed.history.size(), full.history.size());
  for (std::size_t i = 0; i < full.history.size(); ++i) EXPECT_EQ(resumed.history[i].val_loss, full.history[i].val_loss);
}

TEST(Training, ThreadCountDoesNotChangeResult) {
  const Dataset raw = generate(tiny_synth());
  std::vector<Bag> bags = raw.bags;
  const Dataset ds = zscore_apply(raw, zscore_fit(bags));
  std::vector<std::size_t> all(ds.bags.size());
  std::iota(all.begin(), all.end(), 0);
  const auto set = prepared(ds, all);
  TrainConfig a = tiny_train();
  a.max_epochs = 2;
  TrainConfig b = a;
  b.threads = 3;
  EXPECT_EQ(flatten(train(set, set, a).params), flatten(train(set, set, b).params));
}

TEST(Training, SingleSubtypeTrainingSetWarns) {
  SynthConfig sc = tiny_synth();
  sc.subtype_mix = {1.0, 0.0, 0.0};
  const Dataset ds = generate(sc);
  std::vector<std::size_t> all(ds.bags.size());
  std::iota(all.begin(), all.end(), 0);
  const auto set = prepared(ds, all);
  const TrainResult r = train(set, set, tiny_train());
  EXPECT_TRUE(r.history.empty());
  EXPECT_FALSE(r.warnings.empty());
}

TEST(CrossValidation, FoldStructure) {
  SynthConfig sc = tiny_synth();
  sc.n_slides = 3;
  Dataset ds = generate(sc);
  // one patient spans two slides; it must be left out of the other folds' training data
  ds.bags[1].meta.patient_id = ds.bags[0].meta.patient_id;
  TrainConfig cfg = tiny_train();
  cfg.max_epochs = 2;
  const CrossValResult cv = cross_validate(ds, cfg);
  ASSERT_EQ(cv.folds.size(), 3u);
  std::set<std::size_t> tested;
  for (const auto& f : cv.folds) {
    std::set<std::string> test_patients;
    for (std::size_t i : f.test_bags) {
      EXPECT_EQ(ds.bags[i].meta.slide_id, f.test_slide);
      test_patients.insert(ds.bags[i].meta.patient_id);
      tested.insert(i);
    }
    for (std::size_t i : f.train_bags) EXPECT_FALSE(test_patients.count(ds.bags[i].meta.patient_id));
    for (std::size_t i : f.val_bags) EXPECT_FALSE(test_patients.count(ds.bags[i].meta.patient_id));
    EXPECT_EQ(f.train_checksum, content_checksum(ds, f.train_bags));
  }
  EXPECT_EQ(tested.size(), ds.bags.size());
  EXPECT_EQ(cv.predictions.size(), ds.bags.size());
}

TEST(CrossValidation, NeedsTwoSlides) {
  SynthConfig sc = tiny_synth();
  sc.n_slides = 1;
  EXPECT_THROW(cross_validate(generate(sc), tiny_train()), UsageError);
}
