#pragma once

// Dual-head ranking-loss training with Adam, a decaying triangular cyclic
// learning rate, early stopping on validation loss, and hold-one-slide-out
// cross-validation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mesograph/autodiff.hpp"
#include "mesograph/data_model.hpp"
#include "mesograph/mesograph_net.hpp"
#include "mesograph/metrics.hpp"
#include "mesograph/parallel.hpp"
#include "mesograph/spatial_graph.hpp"

namespace mesograph {

struct TrainConfig {
  std::size_t max_epochs = 500;
  std::size_t cycle_len_epochs = 50;
  double lr_min = 2e-5;
  double lr_max0 = 1e-4;
  double lr_decay = 0.8;
  std::size_t batch_bags = 16;
  std::size_t patience_epochs = 100;
  std::uint64_t seed = 0;
  double val_fraction = 0.25;
  double radius_um = kDefaultRadiusUm;
  std::size_t threads = 0;
  Architecture arch;  // d0 filled from the data

  void validate() const {
    if (!(lr_min > 0.0) || !(lr_min <= lr_max0)) throw UsageError("TrainConfig: need 0 < lr_min <= lr_max0");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw UsageError("TrainConfig: val_fraction must be in (0,1)");
    if (cycle_len_epochs < 2) throw UsageError("TrainConfig: cycle_len_epochs must be >= 2");
    if (batch_bags < 2) throw UsageError("TrainConfig: batch_bags must be >= 2");
    if (!(lr_decay > 0.0)) throw UsageError("TrainConfig: lr_decay must be positive");
  }
};

// ---------------------------------------------------------------------------
// Loss

struct RankingLoss {
  double loss = 0.0;
  std::size_t pairs = 0;     // ordered pairs with unequal labels
  std::vector<double> dZ;    // ∂loss/∂Z_i
};

/// Σ over ordered pairs (i, j), y_i ≠ y_j, of max(0, 1 − (y_i − y_j)(Z_i − Z_j)).
inline RankingLoss ranking_loss(std::span<const double> Z, std::span<const int> y) {
  if (Z.size() != y.size()) throw UsageError("ranking_loss: scores and labels differ in length");
  RankingLoss r;
  r.dZ.assign(Z.size(), 0.0);
  for (std::size_t i = 0; i < Z.size(); ++i)
    for (std::size_t j = 0; j < Z.size(); ++j) {
      const double dy = static_cast<double>(y[i] - y[j]);
      if (dy == 0.0) continue;
      ++r.pairs;
      const double margin = 1.0 - dy * (Z[i] - Z[j]);
      if (margin > 0.0) {
        r.loss += margin;
        r.dZ[i] -= dy;
        r.dZ[j] += dy;
      }
    }
  return r;
}

// ---------------------------------------------------------------------------
// Optimiser and schedule

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam update in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, double lr) {
  if (params.size() != grads.size()) throw UsageError("adam_step: parameter/gradient length mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) throw NumericalError("adam_step: non-finite gradient at index " + std::to_string(i));
  }
  if (s.m.empty()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  if (s.m.size() != params.size()) throw UsageError("adam_step: state does not match parameters");
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    const double m_hat = s.m[i] / c1;
    const double v_hat = s.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + s.eps);
  }
}

/// Triangular cycles: lr_min → peak_c → lr_min over cycle_len epochs, with
/// peak_c = lr_max0 · lr_decay^c for cycle c = floor(epoch / cycle_len).
inline double cyclic_lr(std::size_t epoch, const TrainConfig& cfg) {
  const std::size_t cycle = epoch / cfg.cycle_len_epochs;
  const double pos = static_cast<double>(epoch % cfg.cycle_len_epochs);
  const double half = static_cast<double>(cfg.cycle_len_epochs) / 2.0;
  const double peak = cfg.lr_max0 * std::pow(cfg.lr_decay, static_cast<double>(cycle));
  const double frac = pos <= half ? pos / half : (2.0 * half - pos) / half;
  return peak * frac + cfg.lr_min * (1.0 - frac);
}

inline std::vector<double> flatten(const MesoGraphParams& p) {
  std::vector<double> out;
  out.reserve(parameter_count(p));
  for_each_array(p, [&](const std::string&, const Matrix& m) { out.insert(out.end(), m.values().begin(), m.values().end()); });
  return out;
}

inline void unflatten(std::span<const double> flat, MesoGraphParams& p) {
  if (flat.size() != parameter_count(p)) throw UsageError("unflatten: length mismatch");
  std::size_t off = 0;
  for_each_array(p, [&](const std::string&, Matrix& m) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off), flat.begin() + static_cast<std::ptrdiff_t>(off + m.size()),
              m.values().begin());
    off += m.size();
  });
}

// ---------------------------------------------------------------------------
// Prepared bags

/// A bag ready for the network: graph with (normalised) features, message
/// index and dual label.
struct PreparedBag {
  CellGraph graph;
  MessageIndex messages;
  DualLabel label;
};

inline PreparedBag prepare(CellGraph g) {
  PreparedBag b;
  b.messages = message_index(g);
  b.label = dual_label(g.bag.subtype);
  b.graph = std::move(g);
  return b;
}

struct BatchGradient {
  double loss_s = 0.0;
  double loss_e = 0.0;
  std::size_t pairs = 0;  // per head
  std::vector<double> grad;  // flattened, empty if no pairs
};

/// Forward every bag on its own tape, combine the two heads' ranking losses,
/// and backpropagate. Gradients are summed in bag order.
inline BatchGradient batch_gradient(const MesoGraphParams& params, std::span<const PreparedBag* const> batch,
                                    std::size_t threads) {
  const std::size_t m = batch.size();
  std::vector<ad::Tape> tapes(m);
  std::vector<ParamVars> vars(m);
  std::vector<ForwardVars> fw(m);
  parallel_for(m, threads, [&](std::size_t i) {
    vars[i] = bind(tapes[i], params, true);
    const ad::Var X = tapes[i].constant(batch[i]->graph.node_features);
    fw[i] = forward(vars[i], X, batch[i]->messages);
  });
  std::vector<double> zs(m), ze(m);
  std::vector<int> ys(m), ye(m);
  for (std::size_t i = 0; i < m; ++i) {
    zs[i] = fw[i].Z_s.value()[0];
    ze[i] = fw[i].Z_e.value()[0];
    ys[i] = batch[i]->label.y_s;
    ye[i] = batch[i]->label.y_e;
  }
  const RankingLoss ls = ranking_loss(zs, ys);
  const RankingLoss le = ranking_loss(ze, ye);
  BatchGradient out;
  out.loss_s = ls.loss;
  out.loss_e = le.loss;
  out.pairs = ls.pairs;
  if (ls.pairs == 0) return out;
  std::vector<std::vector<double>> per_bag(m);
  parallel_for(m, threads, [&](std::size_t i) {
    ad::Tape& t = tapes[i];
    const ad::Var obj = ad::add(ad::mul_scalar(fw[i].Z_s, ls.dZ[i]), ad::mul_scalar(fw[i].Z_e, le.dZ[i]));
    t.backward(obj);
    per_bag[i] = flatten(gradients(vars[i], params));
  });
  out.grad.assign(per_bag[0].size(), 0.0);
  for (const auto& g : per_bag)
    for (std::size_t k = 0; k < g.size(); ++k) out.grad[k] += g[k];
  return out;
}

/// L_s + L_e over a whole set of bags (no gradient), with the pair count per head.
struct SetLoss {
  double loss = 0.0;
  std::size_t pairs = 0;
  double per_pair() const { return pairs ? loss / static_cast<double>(pairs) : 0.0; }
};

inline std::vector<ScoreSet> score_all(const MesoGraphParams& params, std::span<const PreparedBag> bags,
                                       std::size_t threads) {
  std::vector<ScoreSet> out(bags.size());
  parallel_for(bags.size(), threads,
               [&](std::size_t i) { out[i] = score(bags[i].graph, params, bags[i].messages); });
  return out;
}

inline SetLoss set_loss(const MesoGraphParams& params, std::span<const PreparedBag> bags, std::size_t threads) {
  const auto scores = score_all(params, bags, threads);
  std::vector<double> zs, ze;
  std::vector<int> ys, ye;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    zs.push_back(scores[i].Z_s);
    ze.push_back(scores[i].Z_e);
    ys.push_back(bags[i].label.y_s);
    ye.push_back(bags[i].label.y_e);
  }
  const RankingLoss ls = ranking_loss(zs, ys);
  const RankingLoss le = ranking_loss(ze, ye);
  return {ls.loss + le.loss, ls.pairs};
}

// ---------------------------------------------------------------------------
// Training loop

struct HistoryRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean per rankable pair over the epoch's batches
  double val_loss = 0.0;    // per rankable pair over the validation set
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  MesoGraphParams params;
  AdamState adam;
  std::size_t next_epoch = 0;
  MesoGraphParams best_params;
  double best_monitor = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  bool finished = false;
  std::vector<HistoryRow> history;
  std::vector<std::string> warnings;
};

inline TrainState initial_state(const TrainConfig& cfg, std::size_t d0) {
  Architecture arch = cfg.arch;
  arch.d0 = d0;
  TrainState s;
  s.params = init_params(arch, cfg.seed);
  s.best_params = s.params;
  return s;
}

inline std::size_t distinct_subtypes(std::span<const PreparedBag* const> bags) {
  std::set<int> labels;
  for (const auto* b : bags) labels.insert(b->label.y_s);
  return labels.size();
}

/// Continues training from `state` until early stopping, max_epochs, or
/// `stop_after_epoch` (exclusive; used to pause a run).
inline void train_from(TrainState& state, std::span<const PreparedBag> train, std::span<const PreparedBag> val,
                       const TrainConfig& cfg,
                       std::size_t stop_after_epoch = std::numeric_limits<std::size_t>::max()) {
  cfg.validate();
  if (state.finished) return;
  std::vector<const PreparedBag*> train_ptrs;
  for (const auto& b : train) train_ptrs.push_back(&b);
  if (train_ptrs.size() < 2 || distinct_subtypes(train_ptrs) < 2) {
    state.warnings.push_back("training set has no rankable pairs (fewer than 2 distinct subtypes); stopping");
    state.best_params = state.params;
    state.finished = true;
    return;
  }
  const bool val_rankable = [&] {
    std::vector<const PreparedBag*> vp;
    for (const auto& b : val) vp.push_back(&b);
    return vp.size() >= 2 && distinct_subtypes(vp) >= 2;
  }();
  if (state.next_epoch == 0 && !val_rankable) {
    state.warnings.push_back("validation set has no rankable pairs; early stopping monitors training loss");
  }

  std::vector<double> flat = flatten(state.params);
  for (std::size_t epoch = state.next_epoch; epoch < cfg.max_epochs && epoch < stop_after_epoch; ++epoch) {
    const double lr = cyclic_lr(epoch, cfg);
    std::vector<const PreparedBag*> order = train_ptrs;
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    std::size_t epoch_pairs = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_bags) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_bags);
      std::span<const PreparedBag* const> batch(order.data() + start, end - start);
      if (distinct_subtypes(batch) < 2) {
        state.warnings.push_back("epoch " + std::to_string(epoch) + ": batch at " + std::to_string(start) +
                                 " has a single subtype; skipped");
        continue;
      }
      const BatchGradient bg = batch_gradient(state.params, batch, cfg.threads);
      epoch_loss += bg.loss_s + bg.loss_e;
      epoch_pairs += bg.pairs;
      try {
        adam_step(flat, bg.grad, state.adam, lr);
      } catch (const NumericalError& e) {
        state.warnings.push_back("epoch " + std::to_string(epoch) + " aborted: " + e.what());
        break;
      }
      unflatten(flat, state.params);
    }

    HistoryRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = epoch_pairs ? epoch_loss / static_cast<double>(epoch_pairs) : 0.0;
    row.val_loss = val_rankable ? set_loss(state.params, val, cfg.threads).per_pair() : row.train_loss;
    state.history.push_back(row);
    state.next_epoch = epoch + 1;

    const double monitor = row.val_loss;
    if (monitor < state.best_monitor) {
      state.best_monitor = monitor;
      state.best_epoch = epoch;
      state.best_params = state.params;
    } else if (epoch - state.best_epoch >= cfg.patience_epochs) {
      state.finished = true;
      return;
    }
  }
  if (state.next_epoch >= cfg.max_epochs) state.finished = true;
}

struct TrainResult {
  MesoGraphParams params;  // best-validation parameters
  std::vector<HistoryRow> history;
  std::vector<std::string> warnings;
  std::size_t best_epoch = 0;
};

inline TrainResult train(std::span<const PreparedBag> train_bags, std::span<const PreparedBag> val_bags,
                         const TrainConfig& cfg) {
  if (train_bags.empty()) throw UsageError("train: empty training set");
  TrainState s = initial_state(cfg, train_bags.front().graph.node_features.cols());
  train_from(s, train_bags, val_bags, cfg);
  return {s.best_params, s.history, s.warnings, s.best_epoch};
}

// ---------------------------------------------------------------------------
// Splits and cross-validation

/// Patient-level split of `bag_indices` into (train, validation).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_patient(
    const Dataset& ds, std::span<const std::size_t> bag_indices, double val_fraction, std::uint64_t seed) {
  std::vector<std::string> patients;
  std::set<std::string> seen;
  for (std::size_t i : bag_indices)
    if (seen.insert(ds.bags[i].meta.patient_id).second) patients.push_back(ds.bags[i].meta.patient_id);
  std::mt19937_64 rng(seed);
  std::shuffle(patients.begin(), patients.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(patients.size())));
  if (patients.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, patients.size() - 1);
  else n_val = 0;
  const std::set<std::string> val_patients(patients.begin(), patients.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> tr, va;
  for (std::size_t i : bag_indices) (val_patients.count(ds.bags[i].meta.patient_id) ? va : tr).push_back(i);
  return {tr, va};
}

/// FNV-1a over bag ids and feature bytes, for auditing fold contents.
inline std::uint64_t content_checksum(const Dataset& ds, std::span<const std::size_t> bag_indices) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t i : bag_indices) {
    const Bag& b = ds.bags[i];
    mix(b.meta.bag_id.data(), b.meta.bag_id.size());
    for (const auto& c : b.cells) mix(c.features.data(), c.features.size() * sizeof(double));
  }
  return h;
}

struct BagPrediction {
  std::size_t bag_index = 0;
  std::string fold_slide;
  ScoreSet scores;
};

struct FoldResult {
  std::string test_slide;
  bool skipped = false;
  std::string skip_reason;
  std::vector<std::size_t> train_bags, val_bags, test_bags;
  std::uint64_t train_checksum = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double auroc = std::numeric_limits<double>::quiet_NaN();
  double ap = std::numeric_limits<double>::quiet_NaN();
  OperatingPoint op{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                    std::numeric_limits<double>::quiet_NaN()};
  std::vector<std::string> warnings;
  MesoGraphParams params;
  NormStats norm;
};

struct CrossValResult {
  std::vector<FoldResult> folds;
  std::vector<BagPrediction> predictions;  // out-of-fold, one per tested bag
  MeanStd auroc, ap, sensitivity, specificity;
};

inline std::vector<EvalRecord> eval_records(const Dataset& ds, std::span<const std::size_t> bags,
                                            std::span<const ScoreSet> scores) {
  std::vector<EvalRecord> out;
  for (std::size_t k = 0; k < bags.size(); ++k) {
    const auto& meta = ds.bags[bags[k]].meta;
    out.push_back({meta.bag_id, scores[k].Z, is_positive(meta.subtype)});
  }
  return out;
}

inline bool both_classes(std::span<const EvalRecord> r) {
  bool pos = false, neg = false;
  for (const auto& x : r) (x.positive ? pos : neg) = true;
  return pos && neg;
}

/// Builds graphs once (raw features) for every bag.
inline std::vector<CellGraph> build_graphs(const Dataset& ds, double radius_um, std::size_t threads) {
  std::vector<CellGraph> out(ds.bags.size());
  parallel_for(ds.bags.size(), threads, [&](std::size_t i) { out[i] = build_radius_graph(ds.bags[i], radius_um); });
  return out;
}

inline std::vector<PreparedBag> prepare_normalised(const Dataset& normalised, std::span<const CellGraph> graphs,
                                                   std::span<const std::size_t> indices) {
  std::vector<PreparedBag> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(prepare(with_features(graphs[i], normalised.bags[i])));
  return out;
}

/// One fold per slide: that slide's bags are the test set; the remaining
/// bags (minus any patient that also appears on the test slide) are split
/// 75/25 by patient into train and validation.
inline CrossValResult cross_validate(const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<std::string> slides;
  for (const auto& b : ds.bags)
    if (std::find(slides.begin(), slides.end(), b.meta.slide_id) == slides.end()) slides.push_back(b.meta.slide_id);
  if (slides.size() < 2) throw UsageError("cross_validate: need at least 2 distinct slides");

  const auto graphs = build_graphs(ds, cfg.radius_um, cfg.threads);
  CrossValResult result;
  std::vector<double> aurocs, aps, senss, specs;
  for (std::size_t f = 0; f < slides.size(); ++f) {
    FoldResult fold;
    fold.test_slide = slides[f];
    std::set<std::string> test_patients;
    for (std::size_t i = 0; i < ds.bags.size(); ++i) {
      if (ds.bags[i].meta.slide_id == slides[f]) {
        fold.test_bags.push_back(i);
        test_patients.insert(ds.bags[i].meta.patient_id);
      }
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < ds.bags.size(); ++i)
      if (ds.bags[i].meta.slide_id != slides[f] && !test_patients.count(ds.bags[i].meta.patient_id)) rest.push_back(i);
    auto [tr, va] = split_by_patient(ds, rest, cfg.val_fraction, cfg.seed + 1000003ULL * (f + 1));
    fold.train_bags = tr;
    fold.val_bags = va;
    fold.train_checksum = content_checksum(ds, tr);

    std::set<Subtype> train_types;
    for (std::size_t i : tr) train_types.insert(ds.bags[i].meta.subtype);
    if (train_types.size() < 2 || tr.size() < 2) {
      fold.skipped = true;
      fold.skip_reason = "fewer than 2 subtypes in training bags";
      result.folds.push_back(std::move(fold));
      continue;
    }

    std::vector<Bag> train_only;
    for (std::size_t i : tr) train_only.push_back(ds.bags[i]);
    fold.norm = zscore_fit(train_only);
    const Dataset normalised = zscore_apply(ds, fold.norm);
    const auto train_set = prepare_normalised(normalised, graphs, tr);
    const auto val_set = prepare_normalised(normalised, graphs, va);
    const auto test_set = prepare_normalised(normalised, graphs, fold.test_bags);

    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = cfg.seed + f;
    TrainResult tr_res = train(train_set, val_set, fold_cfg);
    fold.best_epoch = tr_res.best_epoch;
    fold.epochs_run = tr_res.history.size();
    fold.warnings = tr_res.warnings;
    fold.params = tr_res.params;

    const auto test_scores = score_all(fold.params, test_set, cfg.threads);
    for (std::size_t k = 0; k < test_set.size(); ++k) {
      result.predictions.push_back({fold.test_bags[k], fold.test_slide, test_scores[k]});
    }
    const auto test_records = eval_records(ds, fold.test_bags, test_scores);
    if (both_classes(test_records)) {
      fold.auroc = auroc(test_records);
      fold.ap = average_precision(test_records);
    } else {
      fold.warnings.push_back("test slide has a single class; AUROC/AP undefined");
    }
    const auto val_scores = score_all(fold.params, val_set, cfg.threads);
    const auto val_records = eval_records(ds, va, val_scores);
    if (both_classes(val_records) && both_classes(test_records)) {
      fold.op = sens_spec_at(test_records, operating_point(val_records).threshold);
    }
    aurocs.push_back(fold.auroc);
    aps.push_back(fold.ap);
    senss.push_back(fold.op.sensitivity);
    specs.push_back(fold.op.specificity);
    result.folds.push_back(std::move(fold));
  }
  result.auroc = mean_std(aurocs);
  result.ap = mean_std(aps);
  result.sensitivity = mean_std(senss);
  result.specificity = mean_std(specs);
  std::sort(result.predictions.begin(), result.predictions.end(),
            [](const BagPrediction& a, const BagPrediction& b) { return a.bag_index < b.bag_index; });
  return result;
}

}  // namespace mesograph
