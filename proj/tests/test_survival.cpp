#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace mesograph;

namespace {

SurvivalRecord rec(double t, bool e, RiskGroup g = RiskGroup::Low) {
  SurvivalRecord r;
  r.time_days = t;
  r.event = e;
  r.group = g;
  return r;
}

// Efron partial log-likelihood for one covariate, written out directly.
double efron_loglik(const std::vector<SurvivalRecord>& r, const std::vector<double>& x, double beta) {
  std::set<double> times;
  for (const auto& a : r)
    if (a.event) times.insert(a.time_days);
  double ll = 0.0;
  for (double t : times) {
    double risk = 0.0, tied = 0.0, sum_x = 0.0;
    std::size_t d = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (r[i].time_days >= t) risk += std::exp(beta * x[i]);
      if (r[i].time_days == t && r[i].event) {
        tied += std::exp(beta * x[i]);
        sum_x += x[i];
        ++d;
      }
    }
    ll += beta * sum_x;
    for (std::size_t l = 0; l < d; ++l) ll -= std::log(risk - static_cast<double>(l) / static_cast<double>(d) * tied);
  }
  return ll;
}

Eigen::MatrixXd column(const std::vector<double>& x) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(x.size()), 1);
  for (std::size_t i = 0; i < x.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = x[i];
  return m;
}

}  // namespace

TEST(KaplanMeier, SixRecordToy) {
  const std::vector<SurvivalRecord> r{rec(1, true), rec(2, false), rec(3, true), rec(3, true), rec(4, false), rec(5, true)};
  const KMCurve c = kaplan_meier(r);
  EXPECT_NEAR(c.at(0.5), 1.0, 1e-12);
  EXPECT_NEAR(c.at(1), 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(c.at(2.5), 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(c.at(3), 5.0 / 12.0, 1e-12);
  EXPECT_NEAR(c.at(4.5), 5.0 / 12.0, 1e-12);
  EXPECT_NEAR(c.at(5), 0.0, 1e-12);
  ASSERT_TRUE(c.median.has_value());
  EXPECT_EQ(*c.median, 3.0);
  EXPECT_EQ(c.steps.front().time, 0.0);
  EXPECT_EQ(c.steps.front().at_risk, 6u);
}

TEST(KaplanMeier, ThreeRecordToy) {
  const std::vector<SurvivalRecord> r{rec(1, true), rec(2, false), rec(3, true)};
  const KMCurve c = kaplan_meier(r);
  EXPECT_NEAR(c.at(1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(c.at(3), 0.0, 1e-15);
}

TEST(KaplanMeier, AllCensoredHasNoMedian) {
  const std::vector<SurvivalRecord> r{rec(1, false), rec(2, false)};
  const KMCurve c = kaplan_meier(r);
  EXPECT_FALSE(c.median.has_value());
  EXPECT_EQ(c.at(10), 1.0);
}

TEST(LogRank, HandComputedToy) {
  const std::vector<SurvivalRecord> r{rec(1, true, RiskGroup::High), rec(2, true, RiskGroup::High),
                                      rec(3, true, RiskGroup::Low), rec(4, true, RiskGroup::Low)};
  const LogRankResult lr = log_rank(r);
  EXPECT_NEAR(lr.observed_high, 2.0, 1e-15);
  EXPECT_NEAR(lr.expected_high, 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(lr.chi2, 49.0 / 17.0, 1e-12);
  EXPECT_NEAR(lr.p_value, std::erfc(std::sqrt(49.0 / 34.0)), 1e-12);
}

TEST(LogRank, IdenticalGroupsGiveZero) {
  const std::vector<SurvivalRecord> r{rec(1, true, RiskGroup::High), rec(1, true, RiskGroup::Low),
                                      rec(2, true, RiskGroup::High), rec(2, true, RiskGroup::Low)};
  const LogRankResult lr = log_rank(r);
  EXPECT_NEAR(lr.chi2, 0.0, 1e-15);
  EXPECT_NEAR(lr.p_value, 1.0, 1e-12);
}

TEST(LogRank, Chi2SurvivalFunction) {
  EXPECT_NEAR(chi2_sf_1df(3.841458820694124), 0.05, 1e-12);
  EXPECT_NEAR(chi2_sf_1df(6.634896601021214), 0.01, 1e-12);
}

TEST(Cox, MatchesGridSearchEightRecords) {
  const std::vector<SurvivalRecord> r{rec(2, true), rec(3, true), rec(5, false), rec(6, true),
                                      rec(7, true), rec(9, false), rec(11, true), rec(12, true)};
  const std::vector<double> x{1.2, 0.4, 1.0, -0.3, 0.9, -1.0, -0.2, -0.8};
  double best_b = 0.0, best_ll = -1e300;
  for (int k = -50000; k <= 50000; ++k) {
    const double b = k * 1e-4;
    const double ll = efron_loglik(r, x, b);
    if (ll > best_ll) {
      best_ll = ll;
      best_b = b;
    }
  }
  const CoxFit fit = cox_ph(r, column(x), {"x"});
  EXPECT_NEAR(fit.beta[0], best_b, 1e-3);
  EXPECT_NEAR(fit.loglik, best_ll, 1e-6);
  EXPECT_NEAR(fit.hr[0], std::exp(fit.beta[0]), 1e-12);
  EXPECT_LT(fit.ci_low[0], fit.hr[0]);
  EXPECT_GT(fit.ci_high[0], fit.hr[0]);
}

TEST(Cox, EfronTiesMatchDirectFormula) {
  const std::vector<SurvivalRecord> r{rec(2, true), rec(2, true), rec(2, false), rec(4, true),
                                      rec(4, true), rec(4, true), rec(6, false), rec(7, true)};
  const std::vector<double> x{0.5, -1.0, 0.3, 1.5, -0.2, 0.0, 0.7, -0.4};
  for (double b : {-1.0, 0.0, 0.37, 2.0}) {
    Eigen::VectorXd beta(1);
    beta << b;
    EXPECT_NEAR(cox_loglik(r, column(x), beta), efron_loglik(r, x, b), 1e-10);
  }
  const CoxFit fit = cox_ph(r, column(x), {"x"});
  // stationary point of the direct formula
  const double h = 1e-5;
  EXPECT_NEAR((efron_loglik(r, x, fit.beta[0] + h) - efron_loglik(r, x, fit.beta[0] - h)) / (2 * h), 0.0, 1e-5);
}

TEST(Cox, RescalingCovariateRescalesBeta) {
  std::mt19937_64 rng(4);
  std::exponential_distribution<double> ex(0.1);
  std::normal_distribution<double> nd(60, 10);
  std::vector<SurvivalRecord> r;
  std::vector<double> age, age_decades;
  for (int i = 0; i < 40; ++i) {
    const double a = nd(rng);
    r.push_back(rec(std::round(ex(rng) * (1 + (a - 60) / 40)) + 1, i % 5 != 0));
    age.push_back(a);
    age_decades.push_back(a / 10.0);
  }
  const CoxFit f1 = cox_ph(r, column(age), {"age"});
  const CoxFit f10 = cox_ph(r, column(age_decades), {"age"});
  EXPECT_NEAR(f10.beta[0], 10.0 * f1.beta[0], 1e-6);
  EXPECT_NEAR(f10.p_value[0], f1.p_value[0], 1e-6);
  EXPECT_NEAR(f10.loglik, f1.loglik, 1e-8);
}

TEST(Cox, LoglikIncreasesMonotonically) {
  std::mt19937_64 rng(9);
  std::exponential_distribution<double> ex(0.05);
  std::vector<SurvivalRecord> r;
  Eigen::MatrixXd X(60, 2);
  for (int i = 0; i < 60; ++i) {
    const bool g = i % 2;
    r.push_back(rec(std::round(ex(rng) / (g ? 2.5 : 1.0)) + 1, i % 7 != 0, g ? RiskGroup::High : RiskGroup::Low));
    X(i, 0) = g;
    X(i, 1) = static_cast<double>(rng() % 2);
  }
  const CoxFit fit = cox_ph(r, X, {"group", "sex"});
  for (std::size_t k = 1; k < fit.loglik_trace.size(); ++k) EXPECT_GE(fit.loglik_trace[k], fit.loglik_trace[k - 1] - 1e-12);
  EXPECT_GT(fit.hr[0], 1.0);
}

TEST(Cox, DetectsSeparationAndDegenerateInput) {
  // every high-group subject dies before any low-group subject: monotone likelihood
  std::vector<SurvivalRecord> r;
  std::vector<double> x;
  for (int i = 0; i < 10; ++i) {
    r.push_back(rec(i + 1, true));
    x.push_back(i < 5 ? 1.0 : 0.0);
  }
  EXPECT_THROW(cox_ph(r, column(x), {"g"}), NumericalError);
  const std::vector<double> constant(10, 1.0);
  EXPECT_THROW(cox_ph(r, column(constant), {"c"}), UsageError);
  Eigen::MatrixXd dup(10, 2);
  for (int i = 0; i < 10; ++i) dup(i, 0) = dup(i, 1) = (i * 7) % 3;
  EXPECT_THROW(cox_ph(r, dup, {"a", "b"}), UsageError);
}

TEST(Survival, RecordsAggregatePatients) {
  std::vector<BagMeta> bags(4);
  const char* pid[] = {"p2", "p1", "p2", "p3"};
  for (int i = 0; i < 4; ++i) {
    bags[i].bag_id = "b" + std::to_string(i);
    bags[i].patient_id = pid[i];
    bags[i].survival_days = 100.0 * (i % 3 + 1);
    bags[i].event_observed = true;
    bags[i].sex = Sex::Male;
    bags[i].age = 50;
  }
  bags[2].survival_days = 100.0;  // matches bags[0]
  const std::vector<double> scores{0.2, -0.5, 0.4, 0.9};
  const auto r = survival_records(bags, scores);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].patient_id, "p1");
  EXPECT_NEAR(r[1].score, 0.3, 1e-15);
  EXPECT_EQ(r[0].group, RiskGroup::Low);
  EXPECT_EQ(r[1].group, RiskGroup::Low);  // equals the median
  EXPECT_EQ(r[2].group, RiskGroup::High);
  bags[2].survival_days = 999.0;
  EXPECT_THROW(survival_records(bags, scores), DataError);
}

TEST(Survival, CensorAtHorizon) {
  const std::vector<SurvivalRecord> r{rec(100, true), rec(2000, true), rec(1095, true)};
  const auto c = censor_at(r, 1095);
  EXPECT_TRUE(c[0].event);
  EXPECT_EQ(c[1].time_days, 1095);
  EXPECT_FALSE(c[1].event);
  EXPECT_TRUE(c[2].event);
  EXPECT_THROW(censor_at(r, 0), UsageError);
}
