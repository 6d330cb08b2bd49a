#pragma once

// Cell-score exports: GeoJSON point overlays and per-bag score histograms
// ("MesoGrams") over the combined score z_s − z_e ∈ [−1, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "mesograph/errors.hpp"

namespace mesograph {

struct CellScoreRow {
  std::string bag_id;
  std::int64_t cell_id = 0;
  double x_um = 0.0;
  double y_um = 0.0;
  double z_s = 0.0;
  double z_e = 0.0;
  double score() const { return z_s - z_e; }
};

/// FeatureCollection with one Point per cell; coordinates are [x_um, y_um].
inline nlohmann::ordered_json geojson_overlay(std::span<const CellScoreRow> cells) {
  nlohmann::ordered_json fc;
  fc["type"] = "FeatureCollection";
  fc["features"] = nlohmann::ordered_json::array();
  for (const auto& c : cells) {
    if (!std::isfinite(c.x_um) || !std::isfinite(c.y_um)) {
      throw DataError("geojson: non-finite coordinate for cell " + std::to_string(c.cell_id));
    }
    nlohmann::ordered_json f;
    f["type"] = "Feature";
    f["geometry"] = {{"type", "Point"}, {"coordinates", {c.x_um, c.y_um}}};
    f["properties"] = {{"bag_id", c.bag_id}, {"cell_id", c.cell_id}, {"z_s", c.z_s}, {"z_e", c.z_e}, {"score", c.score()}};
    fc["features"].push_back(std::move(f));
  }
  return fc;
}

inline constexpr std::size_t kMesoGramBins = 50;

/// Equal-width bins over [−1, 1]; the right edge falls into the last bin.
inline std::vector<std::size_t> histogram(std::span<const double> scores, std::size_t bins = kMesoGramBins,
                                          double lo = -1.0, double hi = 1.0) {
  if (bins == 0 || !(hi > lo)) throw UsageError("histogram: invalid binning");
  std::vector<std::size_t> counts(bins, 0);
  for (double s : scores) {
    if (!std::isfinite(s) || s < lo || s > hi) throw DataError("histogram: score outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    auto b = static_cast<std::size_t>(std::floor((s - lo) / (hi - lo) * static_cast<double>(bins)));
    counts[std::min(b, bins - 1)] += 1;
  }
  return counts;
}

/// Centred moving average over `window` bins; at the ends only existing bins are averaged.
inline std::vector<double> smooth(std::span<const std::size_t> counts, std::size_t window = 3) {
  const std::size_t half = window / 2;
  std::vector<double> out(counts.size(), 0.0);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const std::size_t a = i >= half ? i - half : 0;
    const std::size_t b = std::min(counts.size() - 1, i + half);
    double s = 0.0;
    for (std::size_t k = a; k <= b; ++k) s += static_cast<double>(counts[k]);
    out[i] = s / static_cast<double>(b - a + 1);
  }
  return out;
}

/// Number of strict local maxima, treating a plateau as one peak. Bins outside
/// the range count as 0, so a positive plateau touching an end can be a peak.
inline std::size_t count_local_maxima(std::span<const double> h) {
  std::size_t peaks = 0;
  for (std::size_t i = 0; i < h.size();) {
    std::size_t j = i;
    while (j + 1 < h.size() && h[j + 1] == h[i]) ++j;
    const double left = i == 0 ? 0.0 : h[i - 1];
    const double right = j + 1 == h.size() ? 0.0 : h[j + 1];
    if (h[i] > 0.0 && h[i] > left && h[i] > right) ++peaks;
    i = j + 1;
  }
  return peaks;
}

struct MesoGram {
  std::string bag_id;
  std::vector<std::size_t> counts;
  std::vector<double> smoothed;
  std::size_t peaks = 0;
  std::size_t cells = 0;
};

inline MesoGram mesogram(const std::string& bag_id, std::span<const double> scores) {
  MesoGram m;
  m.bag_id = bag_id;
  m.counts = histogram(scores);
  m.smoothed = smooth(m.counts);
  m.peaks = count_local_maxima(m.smoothed);
  m.cells = scores.size();
  return m;
}

inline nlohmann::ordered_json to_json(const MesoGram& m) {
  nlohmann::ordered_json j;
  j["bag_id"] = m.bag_id;
  j["range"] = {-1.0, 1.0};
  j["bins"] = m.counts.size();
  j["cells"] = m.cells;
  j["counts"] = m.counts;
  j["smoothed"] = m.smoothed;
  j["local_maxima"] = m.peaks;
  return j;
}

}  // namespace mesograph
