#pragma once

// Synthetic TMA-like datasets with known cell-level ground truth.
//
// Cells sit in Gaussian blobs inside a disc. Epithelioid cells draw feature 0
// high and feature 1 low; sarcomatoid cells the reverse. Biphasic cores turn a
// random subset of whole blobs sarcomatoid. Remaining features are N(0,1)
// nuisance. Survival times are exponential with a hazard that grows with the
// core's true sarcomatoid fraction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mesograph/data_model.hpp"
#include "mesograph/errors.hpp"
#include "mesograph/metrics.hpp"
#include "mesograph/mesograph_net.hpp"

namespace mesograph {

struct SynthConfig {
  std::size_t n_bags = 200;
  std::size_t n_slides = 4;
  std::size_t cells_min = 300;
  std::size_t cells_max = 800;
  std::size_t d0 = 16;
  std::array<double, 3> subtype_mix{0.6, 0.25, 0.15};  // E, B, S
  double biphasic_frac_lo = 0.2;
  double biphasic_frac_hi = 0.8;
  std::size_t blobs_min = 3;
  std::size_t blobs_max = 8;
  double noise_sd = 1.0;
  double signal = 2.0;           // |mean| of the two discriminative features
  double blob_sd_um = 60.0;
  double disc_radius_um = 500.0;
  double base_survival_days = 700.0;
  double sarcomatoid_hazard_ratio = 4.0;
  double censor_min_days = 365.0;
  double censor_max_days = 2000.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (n_bags == 0) throw UsageError("synth: n_bags must be positive");
    if (n_slides == 0) throw UsageError("synth: n_slides must be positive");
    if (cells_min == 0 || cells_min > cells_max) throw UsageError("synth: invalid cells_per_bag range");
    if (blobs_min == 0 || blobs_min > blobs_max) throw UsageError("synth: invalid blob_count range");
    if (d0 < 4) throw UsageError("synth: d0 must be at least 4");
    double total = 0.0;
    for (double p : subtype_mix) {
      if (p < 0.0) throw UsageError("synth: negative subtype proportion");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw UsageError("synth: subtype_mix must sum to 1");
    if (!(0.0 <= biphasic_frac_lo && biphasic_frac_lo <= biphasic_frac_hi && biphasic_frac_hi <= 1.0))
      throw UsageError("synth: invalid biphasic_frac_range");
    if (!(noise_sd > 0.0) || !(blob_sd_um > 0.0) || !(disc_radius_um > 0.0)) throw UsageError("synth: scales must be positive");
    if (!(base_survival_days > 0.0) || !(sarcomatoid_hazard_ratio > 0.0)) throw UsageError("synth: invalid survival model");
    if (!(0.0 < censor_min_days && censor_min_days <= censor_max_days)) throw UsageError("synth: invalid censoring range");
  }
};

inline Dataset generate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::discrete_distribution<int> pick_subtype(cfg.subtype_mix.begin(), cfg.subtype_mix.end());
  std::uniform_int_distribution<std::size_t> pick_cells(cfg.cells_min, cfg.cells_max);
  std::uniform_int_distribution<std::size_t> pick_blobs(cfg.blobs_min, cfg.blobs_max);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> std_normal(0.0, 1.0);

  Dataset ds;
  ds.d0 = cfg.d0;
  char buf[32];
  for (std::size_t b = 0; b < cfg.n_bags; ++b) {
    Bag bag;
    std::snprintf(buf, sizeof buf, "core%04zu", b);
    bag.meta.bag_id = buf;
    bag.meta.patient_id = buf;
    std::snprintf(buf, sizeof buf, "slide%zu", b % cfg.n_slides);
    bag.meta.slide_id = buf;
    bag.meta.subtype = static_cast<Subtype>(pick_subtype(rng));

    const std::size_t n_cells = pick_cells(rng);
    const std::size_t n_blobs = pick_blobs(rng);
    const double centre_radius = std::max(0.0, cfg.disc_radius_um - 2.0 * cfg.blob_sd_um);
    std::vector<std::pair<double, double>> centres(n_blobs);
    for (auto& c : centres) {
      const double r = centre_radius * std::sqrt(unit(rng));
      const double theta = 2.0 * std::numbers::pi * unit(rng);
      c = {cfg.disc_radius_um + r * std::cos(theta), cfg.disc_radius_um + r * std::sin(theta)};
    }
    std::vector<bool> blob_is_s(n_blobs, bag.meta.subtype == Subtype::Sarcomatoid);
    if (bag.meta.subtype == Subtype::Biphasic) {
      const double p = cfg.biphasic_frac_lo + (cfg.biphasic_frac_hi - cfg.biphasic_frac_lo) * unit(rng);
      long k = std::lround(p * static_cast<double>(n_blobs));
      if (n_blobs >= 2) k = std::clamp<long>(k, 1, static_cast<long>(n_blobs) - 1);
      std::vector<std::size_t> order(n_blobs);
      for (std::size_t i = 0; i < n_blobs; ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
      for (long i = 0; i < k; ++i) blob_is_s[order[static_cast<std::size_t>(i)]] = true;
    }

    std::size_t n_s = 0;
    for (std::size_t i = 0; i < n_cells; ++i) {
      const std::size_t blob = i % n_blobs;
      CellRecord c;
      c.cell_id = static_cast<std::int64_t>(i);
      double x = centres[blob].first + cfg.blob_sd_um * std_normal(rng);
      double y = centres[blob].second + cfg.blob_sd_um * std_normal(rng);
      const double dx = x - cfg.disc_radius_um, dy = y - cfg.disc_radius_um;
      const double r = std::hypot(dx, dy);
      if (r > cfg.disc_radius_um) {
        x = cfg.disc_radius_um + dx * cfg.disc_radius_um / r;
        y = cfg.disc_radius_um + dy * cfg.disc_radius_um / r;
      }
      c.x_um = x;
      c.y_um = y;
      const bool s = blob_is_s[blob];
      n_s += s ? 1 : 0;
      c.instance_label = s ? InstanceLabel::S : InstanceLabel::E;
      c.features.resize(cfg.d0);
      const double sign = s ? -1.0 : 1.0;
      c.features[0] = sign * cfg.signal + cfg.noise_sd * std_normal(rng);
      c.features[1] = -sign * cfg.signal + cfg.noise_sd * std_normal(rng);
      for (std::size_t k = 2; k < cfg.d0; ++k) c.features[k] = std_normal(rng);
      bag.cells.push_back(std::move(c));
    }

    const double s_frac = static_cast<double>(n_s) / static_cast<double>(n_cells);
    const double rate = (1.0 + (cfg.sarcomatoid_hazard_ratio - 1.0) * s_frac) / cfg.base_survival_days;
    const double event_time = std::exponential_distribution<double>(rate)(rng);
    const double censor_time = cfg.censor_min_days + (cfg.censor_max_days - cfg.censor_min_days) * unit(rng);
    bag.meta.survival_days = std::max(1.0, std::round(std::min(event_time, censor_time)));
    bag.meta.event_observed = event_time <= censor_time;
    bag.meta.sex = unit(rng) < 0.5 ? Sex::Male : Sex::Female;
    bag.meta.age = std::round(std::clamp(68.0 + 8.0 * std_normal(rng), 30.0, 95.0));
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

/// AUROC of the per-cell combined score z_s − z_e against instance label S.
/// Empty when the bag lacks either instance class.
inline std::optional<double> instance_auroc(const ScoreSet& s,
                                            std::span<const std::optional<InstanceLabel>> labels) {
  if (labels.size() != s.z_s.size()) throw UsageError("instance_auroc: label count does not match scores");
  std::vector<EvalRecord> records;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    records.push_back({std::to_string(i), s.z_s[i] - s.z_e[i], *labels[i] == InstanceLabel::S});
  }
  bool pos = false, neg = false;
  for (const auto& r : records) (r.positive ? pos : neg) = true;
  if (!pos || !neg) return std::nullopt;
  return auroc(records);
}

}  // namespace mesograph
