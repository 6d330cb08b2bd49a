#pragma once

// Bag-level ranking metrics: AUROC (Mann–Whitney with mid-ranks), average
// precision with tied scores grouped, and a Youden-optimal operating point.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mesograph/errors.hpp"

namespace mesograph {

struct EvalRecord {
  std::string bag_id;
  double score = 0.0;
  bool positive = false;
};

namespace detail {

inline void check_finite(std::span<const EvalRecord> records, const char* op) {
  for (const auto& r : records)
    if (!std::isfinite(r.score)) throw UsageError(std::string(op) + ": non-finite score for '" + r.bag_id + "'");
}

inline std::pair<std::size_t, std::size_t> class_counts(std::span<const EvalRecord> records) {
  std::size_t pos = 0;
  for (const auto& r : records) pos += r.positive ? 1 : 0;
  return {pos, records.size() - pos};
}

}  // namespace detail

/// P(score_pos > score_neg) + ½·P(tie), from mid-ranks.
inline double auroc(std::span<const EvalRecord> records) {
  detail::check_finite(records, "auroc");
  const auto [n_pos, n_neg] = detail::class_counts(records);
  if (n_pos == 0 || n_neg == 0) throw UsageError("auroc: undefined without both classes");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return records[a].score < records[b].score; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && records[order[j]].score == records[order[i]].score) ++j;
    // Ranks i+1..j share their average.
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (records[order[k]].positive) rank_sum += mid_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * nn);
}

/// Σ_k (R_k − R_{k−1})·P_k over thresholds taken at each distinct score, descending.
inline double average_precision(std::span<const EvalRecord> records) {
  detail::check_finite(records, "average_precision");
  const auto [n_pos, n_neg] = detail::class_counts(records);
  (void)n_neg;
  if (n_pos == 0) throw UsageError("average_precision: no positive records");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return records[a].score > records[b].score; });
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && records[order[j]].score == records[order[i]].score) {
      (records[order[j]].positive ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / static_cast<double>(n_pos);
    const double precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

struct OperatingPoint {
  double threshold = 0.0;  // predict positive iff score >= threshold
  double sensitivity = 0.0;
  double specificity = 0.0;
};

inline OperatingPoint sens_spec_at(std::span<const EvalRecord> records, double threshold) {
  const auto [n_pos, n_neg] = detail::class_counts(records);
  double tp = 0.0, tn = 0.0;
  for (const auto& r : records) {
    const bool pred = r.score >= threshold;
    if (r.positive && pred) tp += 1.0;
    if (!r.positive && !pred) tn += 1.0;
  }
  OperatingPoint op;
  op.threshold = threshold;
  op.sensitivity = n_pos ? tp / static_cast<double>(n_pos) : std::numeric_limits<double>::quiet_NaN();
  op.specificity = n_neg ? tn / static_cast<double>(n_neg) : std::numeric_limits<double>::quiet_NaN();
  return op;
}

/// Threshold maximising Youden's J over the observed scores (plus +inf, the
/// all-negative rule). Ties go to the higher specificity.
inline OperatingPoint operating_point(std::span<const EvalRecord> records) {
  detail::check_finite(records, "operating_point");
  const auto [n_pos, n_neg] = detail::class_counts(records);
  if (n_pos == 0 || n_neg == 0) throw UsageError("operating_point: needs both classes");
  std::vector<double> thresholds;
  for (const auto& r : records) thresholds.push_back(r.score);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.push_back(std::numeric_limits<double>::infinity());
  OperatingPoint best = sens_spec_at(records, thresholds.front());
  for (double t : thresholds) {
    const OperatingPoint op = sens_spec_at(records, t);
    const double j = op.sensitivity + op.specificity;
    const double best_j = best.sensitivity + best.specificity;
    if (j > best_j || (j == best_j && op.specificity >= best.specificity)) best = op;
  }
  return best;
}

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
};

/// Mean and sample standard deviation of the finite values.
inline MeanStd mean_std(std::span<const double> values) {
  std::vector<double> v;
  for (double x : values)
    if (std::isfinite(x)) v.push_back(x);
  MeanStd out;
  out.count = v.size();
  if (v.empty()) return out;
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() == 1) {
    out.std = 0.0;
    return out;
  }
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return out;
}

}  // namespace mesograph
