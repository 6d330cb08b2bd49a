#pragma once

// Feature-mask attribution. One soft mask M = σ(m) over the d0 input features
// is shared by every node of a bag and optimised so the masked bag score stays
// close to the unmasked one while the mask stays small and near-binary.
// Masked features fall to 0, which after z-scoring is the training mean.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mesograph/autodiff.hpp"
#include "mesograph/data_model.hpp"
#include "mesograph/errors.hpp"
#include "mesograph/mesograph_net.hpp"
#include "mesograph/parallel.hpp"
#include "mesograph/spatial_graph.hpp"
#include "mesograph/training.hpp"

namespace mesograph {

struct ExplainConfig {
  double lambda_size = 0.05;
  double lambda_ent = 0.1;
  std::size_t steps = 200;
  double lr = 0.05;
  double init_sd = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda_size >= 0.0) || !(lambda_ent >= 0.0)) throw UsageError("explain: penalties must be non-negative");
    if (!(lr > 0.0)) throw UsageError("explain: learning rate must be positive");
    if (!(init_sd >= 0.0)) throw UsageError("explain: init_sd must be non-negative");
  }
};

struct FeatureImportance {
  std::string bag_id;
  Subtype subtype = Subtype::Epithelioid;
  std::vector<double> mask;          // d0 values in (0,1)
  std::vector<std::size_t> ranking;  // feature indices, mask descending
  double objective = 0.0;            // final loss
  double fidelity_gap = 0.0;         // |Z(X⊙M) − Z(X)|
  double zero_mask_gap = 0.0;        // |Z(X⊙0) − Z(X)|
};

namespace detail {

struct MaskObjective {
  double loss = 0.0;
  double z_masked = 0.0;
  std::vector<double> grad;
};

inline MaskObjective mask_objective(const CellGraph& g, const MessageIndex& mi, const MesoGraphParams& params,
                                    std::span<const double> logits, double z_ref, const ExplainConfig& cfg) {
  ad::Tape t;
  const ParamVars pv = bind(t, params, false);
  const ad::Var X = t.constant(g.node_features);
  const ad::Var m = t.leaf(Matrix::row(logits));
  const ad::Var M = ad::sigmoid(m);
  const ad::Var one_minus_M = ad::sigmoid(ad::mul_scalar(m, -1.0));
  const ForwardVars f = forward(pv, ad::mul_row(X, M), mi);
  const ad::Var fidelity = ad::square(ad::sub(f.Z, t.constant(Matrix::scalar(z_ref))));
  const ad::Var size = ad::mean_all(M);
  const ad::Var entropy = ad::mul_scalar(
      ad::mean_all(ad::add(ad::mul(M, ad::log(M)), ad::mul(one_minus_M, ad::log(one_minus_M)))), -1.0);
  const ad::Var loss = ad::add(fidelity, ad::add(ad::mul_scalar(size, cfg.lambda_size), ad::mul_scalar(entropy, cfg.lambda_ent)));
  MaskObjective out;
  out.loss = loss.value()[0];
  out.z_masked = f.Z.value()[0];
  if (!std::isfinite(out.loss)) throw NumericalError("explain: non-finite mask objective for bag '" + g.bag.bag_id + "'");
  t.backward(loss);
  out.grad = m.grad().values();
  return out;
}

inline double masked_score(const CellGraph& g, const MessageIndex& mi, const MesoGraphParams& params,
                           std::span<const double> mask) {
  CellGraph masked = g;
  for (std::size_t i = 0; i < masked.n; ++i) {
    auto row = masked.node_features.row_span(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] *= mask[j];
  }
  return score(masked, params, mi).Z;
}

}  // namespace detail

/// Indices sorted by value descending; ties keep the lower index first.
inline std::vector<std::size_t> rank_descending(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return order;
}

/// Learns the mask for one bag. `g` must carry the same (normalised) features
/// the model was trained on.
inline FeatureImportance learn_feature_mask(const CellGraph& g, const MesoGraphParams& params,
                                            const ExplainConfig& cfg, const MessageIndex* messages = nullptr) {
  cfg.validate();
  if (g.n == 0) throw UsageError("explain: empty bag");
  const std::size_t d0 = g.node_features.cols();
  if (d0 != params.arch.d0) throw UsageError("explain: feature width does not match the model");
  const MessageIndex mi = messages ? *messages : message_index(g);
  const double z_ref = score(g, params, mi).Z;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> init(0.0, cfg.init_sd);
  std::vector<double> logits(d0);
  for (double& v : logits) v = cfg.init_sd > 0.0 ? init(rng) : 0.0;

  AdamState adam;
  detail::MaskObjective obj;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    obj = detail::mask_objective(g, mi, params, logits, z_ref, cfg);
    adam_step(logits, obj.grad, adam, cfg.lr);
  }
  obj = detail::mask_objective(g, mi, params, logits, z_ref, cfg);

  FeatureImportance fi;
  fi.bag_id = g.bag.bag_id;
  fi.subtype = g.bag.subtype;
  for (double v : logits) fi.mask.push_back(ad::sigmoid_value(v));
  fi.ranking = rank_descending(fi.mask);
  fi.objective = obj.loss;
  fi.fidelity_gap = std::abs(obj.z_masked - z_ref);
  const std::vector<double> zeros(d0, 0.0);
  fi.zero_mask_gap = std::abs(detail::masked_score(g, mi, params, zeros) - z_ref);
  return fi;
}

/// Masks for many bags. Bag k uses seed cfg.seed + k, so results do not
/// depend on the thread count.
inline std::vector<FeatureImportance> learn_feature_masks(std::span<const CellGraph> graphs,
                                                          const MesoGraphParams& params, const ExplainConfig& cfg,
                                                          std::size_t threads) {
  std::vector<FeatureImportance> out(graphs.size());
  parallel_for(graphs.size(), threads, [&](std::size_t k) {
    ExplainConfig c = cfg;
    c.seed = cfg.seed + k;
    out[k] = learn_feature_mask(graphs[k], params, c);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

/// Linear-interpolation quantile of sorted data (position (n−1)·q).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw UsageError("quantile: empty input");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

struct BoxStats {
  double q25 = 0.0;
  double median = 0.0;
  double q75 = 0.0;
  double whisker_low = 0.0;   // smallest value >= q25 − 1.5·IQR
  double whisker_high = 0.0;  // largest value <= q75 + 1.5·IQR
  double mean = 0.0;
  std::size_t count = 0;
};

inline BoxStats box_stats(std::span<const double> values) {
  if (values.empty()) throw UsageError("box_stats: empty input");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  BoxStats b;
  b.count = v.size();
  b.q25 = quantile_sorted(v, 0.25);
  b.median = quantile_sorted(v, 0.5);
  b.q75 = quantile_sorted(v, 0.75);
  const double iqr = b.q75 - b.q25;
  const double lo_fence = b.q25 - 1.5 * iqr, hi_fence = b.q75 + 1.5 * iqr;
  b.whisker_low = b.q25;
  b.whisker_high = b.q75;
  for (double x : v)
    if (x >= lo_fence) {
      b.whisker_low = std::min(x, b.q25);
      break;
    }
  for (auto it = v.rbegin(); it != v.rend(); ++it)
    if (*it <= hi_fence) {
      b.whisker_high = std::max(*it, b.q75);
      break;
    }
  b.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  return b;
}

struct ImportanceSummary {
  std::size_t d0 = 0;
  std::map<Subtype, std::vector<BoxStats>> by_subtype;  // [feature]
  std::vector<double> overall_mean;                     // [feature]
  std::vector<std::size_t> top;                         // up to 10 features by overall mean mask
};

inline ImportanceSummary aggregate_importance(std::span<const FeatureImportance> items, std::size_t top_k = 10) {
  if (items.empty()) throw UsageError("aggregate_importance: no bags");
  ImportanceSummary s;
  s.d0 = items.front().mask.size();
  std::map<Subtype, std::vector<const FeatureImportance*>> groups;
  for (const auto& it : items) {
    if (it.mask.size() != s.d0) throw UsageError("aggregate_importance: masks differ in length");
    groups[it.subtype].push_back(&it);
  }
  for (const auto& [subtype, members] : groups) {
    auto& stats = s.by_subtype[subtype];
    for (std::size_t j = 0; j < s.d0; ++j) {
      std::vector<double> col;
      for (const auto* m : members) col.push_back(m->mask[j]);
      stats.push_back(box_stats(col));
    }
  }
  s.overall_mean.assign(s.d0, 0.0);
  for (const auto& it : items)
    for (std::size_t j = 0; j < s.d0; ++j) s.overall_mean[j] += it.mask[j];
  for (double& v : s.overall_mean) v /= static_cast<double>(items.size());
  s.top = rank_descending(s.overall_mean);
  if (s.top.size() > top_k) s.top.resize(top_k);
  return s;
}

}  // namespace mesograph
