#pragma once

// Survival stratification by model score: median split, Kaplan–Meier,
// two-group log-rank and a Cox proportional hazards fit with Efron ties.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mesograph/data_model.hpp"
#include "mesograph/errors.hpp"

namespace mesograph {

enum class RiskGroup { Low, High };

inline const char* risk_group_name(RiskGroup g) { return g == RiskGroup::High ? "high" : "low"; }

struct SurvivalRecord {
  std::string patient_id;
  double time_days = 0.0;
  bool event = false;
  RiskGroup group = RiskGroup::Low;
  double sex = 0.0;  // 1 = male
  double age = 0.0;
  double score = 0.0;
};

/// Median split: strictly above the median is high, everything else low.
inline std::vector<RiskGroup> score_split(std::span<const double> scores) {
  if (scores.size() < 2) throw UsageError("score_split: needs at least 2 patients");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<RiskGroup> out;
  out.reserve(n);
  for (double s : scores) out.push_back(s > median ? RiskGroup::High : RiskGroup::Low);
  return out;
}

/// One record per patient with survival data. The patient score is the mean of
/// their bag scores; patients come out sorted by id. Groups are assigned by
/// score_split over these patients.
inline std::vector<SurvivalRecord> survival_records(std::span<const BagMeta> bags, std::span<const double> bag_scores) {
  if (bags.size() != bag_scores.size()) throw UsageError("survival_records: score count does not match bags");
  struct Acc {
    double sum = 0.0;
    std::size_t count = 0;
    const BagMeta* meta = nullptr;
  };
  std::map<std::string, Acc> by_patient;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const BagMeta& m = bags[i];
    if (!m.survival_days) continue;
    Acc& a = by_patient[m.patient_id];
    if (a.meta && (*a.meta->survival_days != *m.survival_days || *a.meta->event_observed != *m.event_observed)) {
      throw DataError("patient '" + m.patient_id + "' has conflicting survival data across bags");
    }
    if (!a.meta) a.meta = &m;
    a.sum += bag_scores[i];
    ++a.count;
  }
  std::vector<SurvivalRecord> out;
  for (const auto& [pid, a] : by_patient) {
    SurvivalRecord r;
    r.patient_id = pid;
    r.time_days = *a.meta->survival_days;
    r.event = *a.meta->event_observed;
    r.sex = a.meta->sex == Sex::Male ? 1.0 : 0.0;
    r.age = a.meta->age.value_or(std::numeric_limits<double>::quiet_NaN());
    r.score = a.sum / static_cast<double>(a.count);
    out.push_back(std::move(r));
  }
  if (out.size() >= 2) {
    std::vector<double> s;
    for (const auto& r : out) s.push_back(r.score);
    const auto groups = score_split(s);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].group = groups[i];
  }
  return out;
}

inline std::vector<SurvivalRecord> censor_at(std::vector<SurvivalRecord> records, double horizon_days) {
  if (!(horizon_days > 0.0)) throw UsageError("censor_at: horizon must be positive");
  for (auto& r : records) {
    if (r.time_days > horizon_days) {
      r.time_days = horizon_days;
      r.event = false;
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Kaplan–Meier

struct KMStep {
  double time = 0.0;
  double survival = 1.0;  // Ŝ(t) from this time until the next step
  std::size_t at_risk = 0;
  std::size_t events = 0;
  std::size_t censored = 0;
};

struct KMCurve {
  std::vector<KMStep> steps;  // first step is t = 0
  std::optional<double> median;

  double at(double t) const {
    double s = 1.0;
    for (const auto& st : steps) {
      if (st.time > t) break;
      s = st.survival;
    }
    return s;
  }
};

namespace detail {

inline void check_records(std::span<const SurvivalRecord> records, const char* op) {
  for (const auto& r : records) {
    if (!(r.time_days > 0.0) || !std::isfinite(r.time_days)) {
      throw DataError(std::string(op) + ": patient '" + r.patient_id + "' has non-positive survival time");
    }
  }
}

}  // namespace detail

/// Product-limit estimate. Rows are emitted at t = 0 and at every distinct
/// observed time; survival only drops at event times.
inline KMCurve kaplan_meier(std::span<const SurvivalRecord> records) {
  if (records.empty()) throw UsageError("kaplan_meier: no records");
  detail::check_records(records, "kaplan_meier");
  std::vector<const SurvivalRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->time_days < b->time_days; });
  KMCurve curve;
  std::size_t at_risk = sorted.size();
  double s = 1.0;
  curve.steps.push_back({0.0, 1.0, at_risk, 0, 0});
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i]->time_days;
    std::size_t d = 0, c = 0;
    for (; i < sorted.size() && sorted[i]->time_days == t; ++i) (sorted[i]->event ? d : c) += 1;
    if (d > 0) s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
    curve.steps.push_back({t, s, at_risk, d, c});
    if (!curve.median && d > 0 && s <= 0.5) curve.median = t;
    at_risk -= d + c;
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Log-rank

struct LogRankResult {
  double chi2 = 0.0;
  double p_value = 1.0;
  double observed_high = 0.0;
  double expected_high = 0.0;
  double observed_low = 0.0;
  double expected_low = 0.0;
};

/// Upper tail of χ² with one degree of freedom.
inline double chi2_sf_1df(double x) { return x <= 0.0 ? 1.0 : std::erfc(std::sqrt(x / 2.0)); }

inline LogRankResult log_rank(std::span<const SurvivalRecord> records) {
  detail::check_records(records, "log_rank");
  std::size_t n_high = 0, n_low = 0, events = 0;
  for (const auto& r : records) {
    (r.group == RiskGroup::High ? n_high : n_low) += 1;
    events += r.event ? 1 : 0;
  }
  if (n_high == 0 || n_low == 0) throw UsageError("log_rank: both groups must be non-empty");
  if (events == 0) throw UsageError("log_rank: no events observed");

  std::vector<double> times;
  for (const auto& r : records) times.push_back(r.time_days);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  LogRankResult out;
  double var = 0.0;
  for (double t : times) {
    double n1 = 0, n = 0, d1 = 0, d = 0;
    for (const auto& r : records) {
      if (r.time_days < t) continue;
      const bool high = r.group == RiskGroup::High;
      n += 1;
      n1 += high ? 1 : 0;
      if (r.time_days == t && r.event) {
        d += 1;
        d1 += high ? 1 : 0;
      }
    }
    if (d == 0) continue;
    const double e1 = d * n1 / n;
    out.observed_high += d1;
    out.expected_high += e1;
    out.observed_low += d - d1;
    out.expected_low += d - e1;
    if (n > 1) var += n1 * (n - n1) * d * (n - d) / (n * n * (n - 1));
  }
  const double diff = out.observed_high - out.expected_high;
  out.chi2 = var > 0.0 ? diff * diff / var : 0.0;
  out.p_value = chi2_sf_1df(out.chi2);
  return out;
}

// ---------------------------------------------------------------------------
// Cox proportional hazards

struct CoxFit {
  std::vector<std::string> names;
  std::vector<double> beta;
  std::vector<double> se;
  std::vector<double> hr;
  std::vector<double> ci_low;
  std::vector<double> ci_high;
  std::vector<double> p_value;  // Wald
  double loglik = 0.0;
  double loglik_null = 0.0;
  std::size_t iterations = 0;
  std::vector<double> loglik_trace;  // one entry per accepted iterate, starting at beta = 0
};

struct CoxOptions {
  std::size_t max_iter = 100;
  double tol = 1e-9;
  double separation_bound = 25.0;  // |beta| beyond this on standardised-scale data means monotone likelihood
};

namespace detail {

struct CoxEval {
  double ll = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd info;  // observed information (negative Hessian)
};

/// Efron partial log-likelihood with first and second derivatives.
/// Records must be sorted by descending time.
inline CoxEval cox_eval(const Eigen::MatrixXd& X, const std::vector<double>& time, const std::vector<bool>& event,
                        const Eigen::VectorXd& beta) {
  const Eigen::Index n = X.rows(), p = X.cols();
  CoxEval out;
  out.grad = Eigen::VectorXd::Zero(p);
  out.info = Eigen::MatrixXd::Zero(p, p);
  const Eigen::VectorXd eta = X * beta;
  Eigen::VectorXd S1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd S2 = Eigen::MatrixXd::Zero(p, p);
  double S0 = 0.0;
  for (Eigen::Index i = 0; i < n;) {
    // Block of records sharing time[i]; all of them join the risk set first.
    Eigen::Index j = i;
    double D0 = 0.0;
    Eigen::VectorXd D1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd D2 = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd xsum = Eigen::VectorXd::Zero(p);
    double d = 0.0, eta_sum = 0.0;
    for (; j < n && time[static_cast<std::size_t>(j)] == time[static_cast<std::size_t>(i)]; ++j) {
      const double w = std::exp(eta[j]);
      const Eigen::VectorXd x = X.row(j).transpose();
      S0 += w;
      S1 += w * x;
      S2 += w * x * x.transpose();
      if (event[static_cast<std::size_t>(j)]) {
        D0 += w;
        D1 += w * x;
        D2 += w * x * x.transpose();
        xsum += x;
        eta_sum += eta[j];
        d += 1.0;
      }
    }
    for (double l = 0.0; l < d; l += 1.0) {
      const double f = l / d;
      const double phi = S0 - f * D0;
      const Eigen::VectorXd a = (S1 - f * D1) / phi;
      out.ll -= std::log(phi);
      out.grad -= a;
      out.info += (S2 - f * D2) / phi - a * a.transpose();
    }
    out.ll += eta_sum;
    out.grad += xsum;
    i = j;
  }
  return out;
}

}  // namespace detail

/// Newton–Raphson on the Efron partial likelihood with step-halving.
/// `covariates` is n×p (row per record). Covariates are centred internally.
inline CoxFit cox_ph(std::span<const SurvivalRecord> records, const Eigen::MatrixXd& covariates,
                     std::vector<std::string> names, const CoxOptions& opt = {}) {
  detail::check_records(records, "cox_ph");
  const std::size_t n = records.size();
  const Eigen::Index p = covariates.cols();
  if (static_cast<std::size_t>(covariates.rows()) != n) throw UsageError("cox_ph: covariate rows do not match records");
  if (names.size() != static_cast<std::size_t>(p)) throw UsageError("cox_ph: covariate names do not match columns");
  if (p == 0) throw UsageError("cox_ph: no covariates");
  std::size_t events = 0;
  for (const auto& r : records) events += r.event ? 1 : 0;
  if (events < 2) throw UsageError("cox_ph: needs at least 2 events");
  if (!covariates.allFinite()) throw DataError("cox_ph: covariates contain missing or non-finite values");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].time_days > records[b].time_days; });
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), p);
  std::vector<double> time(n);
  std::vector<bool> event(n);
  for (std::size_t k = 0; k < n; ++k) {
    X.row(static_cast<Eigen::Index>(k)) = covariates.row(static_cast<Eigen::Index>(order[k]));
    time[k] = records[order[k]].time_days;
    event[k] = records[order[k]].event;
  }
  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  Eigen::VectorXd scale(p);
  for (Eigen::Index c = 0; c < p; ++c) {
    const double sd = std::sqrt(X.col(c).squaredNorm() / static_cast<double>(n));
    if (!(sd > 0.0)) throw UsageError("cox_ph: covariate '" + names[static_cast<std::size_t>(c)] + "' is constant");
    scale[c] = sd;
  }
  {
    Eigen::MatrixXd Z = X * scale.cwiseInverse().asDiagonal();
    Eigen::FullPivLU<Eigen::MatrixXd> lu(Z);
    lu.setThreshold(1e-10);
    if (lu.rank() < p) throw UsageError("cox_ph: covariate matrix is not full rank");
  }

  CoxFit fit;
  fit.names = std::move(names);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  detail::CoxEval cur = detail::cox_eval(X, time, event, beta);
  fit.loglik_null = cur.ll;
  fit.loglik_trace.push_back(cur.ll);
  bool converged = false;
  for (std::size_t it = 1; it <= opt.max_iter; ++it) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(cur.info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      throw NumericalError("cox_ph: information matrix is not positive definite (separation?)");
    }
    Eigen::VectorXd step = ldlt.solve(cur.grad);
    Eigen::VectorXd next = beta + step;
    detail::CoxEval cand = detail::cox_eval(X, time, event, next);
    for (int h = 0; h < 60 && !(cand.ll >= cur.ll); ++h) {
      step *= 0.5;
      next = beta + step;
      cand = detail::cox_eval(X, time, event, next);
    }
    if (!(cand.ll >= cur.ll)) {
      // No ascent possible along the Newton direction: already at the optimum to rounding.
      fit.iterations = it;
      converged = true;
      break;
    }
    beta = next;
    cur = cand;
    fit.loglik_trace.push_back(cur.ll);
    fit.iterations = it;
    if ((beta.cwiseProduct(scale)).cwiseAbs().maxCoeff() > opt.separation_bound) {
      throw NumericalError("cox_ph: monotone likelihood (separation); coefficient diverges, no estimate");
    }
    if (step.cwiseAbs().maxCoeff() < opt.tol) {
      converged = true;
      break;
    }
  }
  if (!converged) throw NumericalError("cox_ph: Newton-Raphson did not converge in " + std::to_string(opt.max_iter) + " iterations");
  // Newton can stall on the plateau of a monotone likelihood before |beta| hits
  // the bound. At a real optimum, moving 10 sd further out costs likelihood.
  for (Eigen::Index c = 0; c < p; ++c) {
    Eigen::VectorXd probe = beta;
    probe[c] += (beta[c] >= 0.0 ? 10.0 : -10.0) / scale[c];
    if (detail::cox_eval(X, time, event, probe).ll >= cur.ll - 1e-8) {
      throw NumericalError("cox_ph: monotone likelihood (separation) in '" + fit.names[static_cast<std::size_t>(c)] +
                           "'; coefficient diverges, no estimate");
    }
  }

  const Eigen::MatrixXd cov = cur.info.inverse();
  fit.loglik = cur.ll;
  for (Eigen::Index c = 0; c < p; ++c) {
    const double b = beta[c];
    const double se = std::sqrt(cov(c, c));
    fit.beta.push_back(b);
    fit.se.push_back(se);
    fit.hr.push_back(std::exp(b));
    fit.ci_low.push_back(std::exp(b - 1.96 * se));
    fit.ci_high.push_back(std::exp(b + 1.96 * se));
    fit.p_value.push_back(std::erfc(std::abs(b / se) / std::sqrt(2.0)));
  }
  return fit;
}

/// Covariates [group, sex, age] from the records.
inline Eigen::MatrixXd group_sex_age(std::span<const SurvivalRecord> records) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(records.size()), 3);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    X(r, 0) = records[i].group == RiskGroup::High ? 1.0 : 0.0;
    X(r, 1) = records[i].sex;
    X(r, 2) = records[i].age;
  }
  return X;
}

/// Partial log-likelihood (Efron) of a given coefficient vector; for checks.
inline double cox_loglik(std::span<const SurvivalRecord> records, const Eigen::MatrixXd& covariates,
                         const Eigen::VectorXd& beta) {
  const std::size_t n = records.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].time_days > records[b].time_days; });
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), covariates.cols());
  std::vector<double> time(n);
  std::vector<bool> event(n);
  for (std::size_t k = 0; k < n; ++k) {
    X.row(static_cast<Eigen::Index>(k)) = covariates.row(static_cast<Eigen::Index>(order[k]));
    time[k] = records[order[k]].time_days;
    event[k] = records[order[k]].event;
  }
  return detail::cox_eval(X, time, event, beta).ll;
}

}  // namespace mesograph
