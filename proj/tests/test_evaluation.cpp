#include <doctest.h>

#include "crbjm/error.hpp"
#include "crbjm/evaluation.hpp"

#include <cmath>
#include <random>

using namespace crbjm;

namespace {

ScoredSubject scored(std::string id, double t, int d, std::vector<double> risk) {
  ScoredSubject s;
  s.id = std::move(id);
  s.observed_time = t;
  s.event_type = d;
  s.risk = Eigen::Map<Eigen::VectorXd>(risk.data(), static_cast<Eigen::Index>(risk.size()));
  s.measurements.resize(1);
  s.biomarker_prediction = Eigen::VectorXd::Constant(1, std::nan(""));
  return s;
}

// Six subjects, s = 0, delta = 5. Censoring KM: G = 5/6 after t=1, 5/8 after
// t=3, 5/16 after t=6.
ScoredCohort six() {
  ScoredCohort c;
  c.s = 0.0;
  c.delta = 5.0;
  c.n_event_types = 2;
  c.subjects.push_back(scored("A", 2, 1, {0.9, 0.1}));
  c.subjects.push_back(scored("B", 3, 0, {0.5, 0.1}));
  c.subjects.push_back(scored("C", 4, 2, {0.3, 0.5}));
  c.subjects.push_back(scored("D", 6, 0, {0.95, 0.1}));
  c.subjects.push_back(scored("E", 7, 1, {0.2, 0.1}));
  c.subjects.push_back(scored("F", 1, 0, {0.1, 0.1}));
  return c;
}

// Uncensored-at-risk cohort for property checks, random event times and risks.
ScoredCohort random_cohort(std::uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  ScoredCohort c;
  c.s = 1.0;
  c.delta = 3.0;
  c.n_event_types = 2;
  for (int i = 0; i < n; ++i) {
    const double t = 1.0 + 6.0 * uni(rng);
    const int d = uni(rng) < 0.3 ? 0 : (uni(rng) < 0.5 ? 1 : 2);
    c.subjects.push_back(scored("r" + std::to_string(i), t, d, {uni(rng), uni(rng)}));
  }
  return c;
}

Dataset toy_data(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<Subject> subjects;
  for (int i = 0; i < n; ++i) {
    Subject s;
    s.id = "s" + std::to_string(i);
    const double v = nd(rng);
    s.covariates = Eigen::VectorXd::Constant(1, v);
    const double t = 4.0 * std::exp(0.3 * v) * std::pow(-std::log(uni(rng)), 1.0 / 1.5);
    const int d = uni(rng) < 1.0 / (1.0 + std::exp(-(0.2 * t - 0.8))) ? 1 : 2;
    const double cens = 12.0 * uni(rng);
    s.observed_time = std::min(t, cens);
    s.event_type = cens < t ? 0 : d;
    s.measurements.resize(1);
    const double b = 0.8 * nd(rng);
    for (double tt = 0.5; tt < s.observed_time; tt += 1.0) {
      s.measurements[0].push_back({tt, 1.0 + 0.5 * v + (d == 1) - 0.2 * t + (0.3 + 0.05 * t) * tt + b + 0.5 * nd(rng)});
    }
    subjects.push_back(std::move(s));
  }
  return Dataset(std::move(subjects), 2, {"v"}, {"y1"});
}

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.variant = Variant::EX;
  cfg.quadrature.width = 0.5;
  cfg.quadrature.t_end_ex = 30.0;
  return cfg;
}

}  // namespace

TEST_CASE("censoring Kaplan-Meier") {
  const std::vector<double> t{1, 2, 2, 3, 4};
  const std::vector<int> d{0, 1, 0, 0, 2};
  const CensoringKm km(t, d);
  CHECK(km.at(0.5) == 1.0);
  CHECK(km.at(1.0) == doctest::Approx(0.8));
  CHECK(km.left_limit(1.0) == 1.0);
  CHECK(km.left_limit(2.0) == doctest::Approx(0.8));
  CHECK(km.at(2.0) == doctest::Approx(0.6));
  CHECK(km.at(3.0) == doctest::Approx(0.3));
  CHECK(km.at(10.0) == doctest::Approx(0.3));
}

TEST_CASE("IPCW weights on the six-subject cohort") {
  const Eigen::VectorXd w = ipcw_weights(six());
  CHECK(w(0) == doctest::Approx(6.0 / 5.0));
  CHECK(w(1) == 0.0);
  CHECK(w(2) == doctest::Approx(8.0 / 5.0));
  CHECK(w(3) == doctest::Approx(8.0 / 5.0));
  CHECK(w(4) == doctest::Approx(8.0 / 5.0));
  CHECK(w(5) == 0.0);
}

TEST_CASE("AUC hand values") {
  const ScoredCohort c = six();
  // Type 1: one case (A, 0.9) against C 0.3, D 0.95, E 0.2 with equal weights.
  CHECK(td_auc_cr(c, 1) == doctest::Approx(2.0 / 3.0));
  // Type 2: case C (0.5) above every control, including the other-cause failure A.
  CHECK(td_auc_cr(c, 2) == doctest::Approx(1.0));
}

TEST_CASE("AUC perfect, reversed and tied scores") {
  ScoredCohort c;
  c.s = 0.0;
  c.delta = 2.0;
  c.n_event_types = 1;
  for (int i = 0; i < 10; ++i) {
    const bool event = i < 4;
    c.subjects.push_back(scored("p" + std::to_string(i), event ? 1.0 + 0.1 * i : 3.0 + i, event ? 1 : 0,
                                {event ? 0.8 : 0.2}));
  }
  CHECK(td_auc_cr(c, 1) == 1.0);
  std::vector<double> reversed, tied(10, 0.4);
  for (const auto& s : c.subjects) reversed.push_back(-s.risk(0));
  CHECK(td_auc_cr(c, 1, reversed) == 0.0);
  CHECK(td_auc_cr(c, 1, tied) == 0.5);
}

TEST_CASE("AUC brute-force oracle and reflection property") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const ScoredCohort c = random_cohort(seed, 40);
    // Independent censoring KM and pair sum.
    auto g = [&](double t, bool left) {
      double v = 1.0;
      std::vector<double> ts;
      for (const auto& s : c.subjects) ts.push_back(s.observed_time);
      std::sort(ts.begin(), ts.end());
      ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
      for (double u : ts) {
        if (left ? u >= t : u > t) break;
        int at_risk = 0, cens = 0;
        for (const auto& s : c.subjects) {
          at_risk += s.observed_time >= u;
          cens += s.observed_time == u && s.event_type == 0;
        }
        v *= 1.0 - static_cast<double>(cens) / at_risk;
      }
      return v;
    };
    const double end = c.s + c.delta;
    for (int j = 1; j <= 2; ++j) {
      double num = 0.0, den = 0.0;
      for (const auto& a : c.subjects) {
        if (!(a.observed_time <= end && a.event_type == j)) continue;
        const double wa = 1.0 / g(a.observed_time, true);
        for (const auto& b : c.subjects) {
          double wb = 0.0;
          if (b.observed_time > end) {
            wb = 1.0 / g(end, false);
          } else if (b.event_type != 0 && b.event_type != j) {
            wb = 1.0 / g(b.observed_time, true);
          }
          den += wa * wb;
          num += wa * wb * (a.risk(j - 1) > b.risk(j - 1) ? 1.0 : a.risk(j - 1) == b.risk(j - 1) ? 0.5 : 0.0);
        }
      }
      CHECK(td_auc_cr(c, j) == doctest::Approx(num / den).epsilon(1e-12));
      std::vector<double> neg;
      for (const auto& s : c.subjects) neg.push_back(-s.risk(j - 1));
      CHECK(td_auc_cr(c, j) + td_auc_cr(c, j, neg) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("AUC errors") {
  ScoredCohort c;
  c.s = 0.0;
  c.delta = 1.0;
  c.n_event_types = 2;
  c.subjects.push_back(scored("a", 5.0, 1, {0.1, 0.1}));
  c.subjects.push_back(scored("b", 6.0, 2, {0.1, 0.1}));
  CHECK_THROWS_AS(td_auc_cr(c, 1), Error);
  try {
    td_auc_cr(c, 1);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoCases);
  }
  c.subjects = {scored("a", 0.5, 1, {0.1, 0.1})};
  try {
    td_auc_cr(c, 1);
    FAIL("expected NoControls");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoControls);
  }
  CHECK_THROWS_AS(td_auc_cr(c, 3), Error);
}

TEST_CASE("Brier hand values") {
  const ScoredCohort c = six();
  const double b1 = (1.2 * 0.1 * 0.1 + 1.6 * 0.3 * 0.3 + 1.6 * 0.95 * 0.95 + 1.6 * 0.2 * 0.2) / 6.0;
  CHECK(brier_cr(c, 1) == doctest::Approx(b1).epsilon(1e-12));
  const double b2 = (1.2 * 0.1 * 0.1 + 1.6 * 0.5 * 0.5 + 1.6 * 0.1 * 0.1 + 1.6 * 0.1 * 0.1) / 6.0;
  CHECK(brier_cr(c, 2) == doctest::Approx(b2).epsilon(1e-12));
  // Any event: A and C are events with summed risks 1.0 and 0.8.
  const double b0 = (1.2 * 0.0 + 1.6 * 0.2 * 0.2 + 1.6 * 1.05 * 1.05 + 1.6 * 0.3 * 0.3) / 6.0;
  CHECK(brier_cr(c, 0) == doctest::Approx(b0).epsilon(1e-12));
}

TEST_CASE("Brier perfect and constant-zero predictions") {
  ScoredCohort c;
  c.s = 0.0;
  c.delta = 2.0;
  c.n_event_types = 1;
  for (int i = 0; i < 6; ++i) c.subjects.push_back(scored("n" + std::to_string(i), 3.0 + i, 1, {0.0}));
  CHECK(brier_cr(c, 1) == 0.0);
  c.subjects[0].observed_time = 1.0;
  c.subjects[0].risk(0) = 1.0;
  CHECK(brier_cr(c, 1) == 0.0);
}

TEST_CASE("comparison measurement and biomarker accuracy") {
  const std::vector<Measurement> series{{0.5, 1.0}, {1.5, 2.0}, {2.5, 3.0}, {4.0, 4.0}};
  CHECK(comparison_measurement(series, 1.0, 1.5)->time == 2.5);
  CHECK(comparison_measurement(series, 1.0, 3.0)->time == 4.0);
  CHECK(comparison_measurement(series, 1.0, 0.4) == std::nullopt);
  CHECK(comparison_measurement(series, 0.5, 1.0)->time == 1.5);  // s itself is excluded

  ScoredCohort c;
  c.s = 0.0;
  c.delta = 2.0;
  c.n_event_types = 1;
  const double preds[] = {13.0, 15.0, 16.0, 10.0};
  for (int i = 0; i < 4; ++i) {
    ScoredSubject s = scored("m" + std::to_string(i), 10.0, 0, {0.1});
    s.measurements[0] = {{1.0, 7.0}, {2.0, 10.0}};
    s.biomarker_prediction(0) = preds[i];
    c.subjects.push_back(s);
  }
  ScoredSubject none = scored("none", 10.0, 0, {0.1});
  none.measurements[0] = {{3.0, 10.0}};
  none.biomarker_prediction(0) = 100.0;
  c.subjects.push_back(none);
  const BiomarkerAccuracy a = biomarker_accuracy(c, 0);
  CHECK(a.n == 4);
  CHECK(a.rmse == doctest::Approx(std::sqrt((9.0 + 25.0 + 36.0 + 0.0) / 4.0)));
  CHECK(a.p30 == doctest::Approx(0.5));   // errors 3 and 0 are within 0.3 * 10
  CHECK(a.p50 == doctest::Approx(0.75));  // 5 is on the boundary and counts

  c.subjects = {none};
  CHECK_THROWS_AS(biomarker_accuracy(c, 0), Error);
}

TEST_CASE("stratified folds") {
  const Dataset data = toy_data(103, 5);
  const auto f = stratified_folds(data, 5, 9);
  CHECK(f == stratified_folds(data, 5, 9));
  CHECK(f != stratified_folds(data, 5, 10));
  std::vector<int> total(5, 0);
  for (int stratum = 0; stratum <= 2; ++stratum) {
    std::vector<int> count(5, 0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].event_type == stratum) ++count[static_cast<std::size_t>(f[i])];
    }
    CHECK(*std::max_element(count.begin(), count.end()) - *std::min_element(count.begin(), count.end()) <= 1);
    for (int k = 0; k < 5; ++k) total[static_cast<std::size_t>(k)] += count[static_cast<std::size_t>(k)];
  }
  CHECK(*std::max_element(total.begin(), total.end()) - *std::min_element(total.begin(), total.end()) <= 1);
  CHECK_THROWS_AS(stratified_folds(data, 1, 0), Error);
}

TEST_CASE("k-fold CV accounting and worker invariance") {
  const Dataset data = toy_data(160, 3);
  CvOptions opt;
  opt.folds = 4;
  opt.landmarks = {1.0, 2.0};
  opt.delta = 3.0;
  opt.seed = 11;
  const CvReport r1 = kfold_cv(data, toy_config(), FitMethod::EM, opt);
  opt.workers = 2;
  const CvReport r2 = kfold_cv(data, toy_config(), FitMethod::EM, opt);
  REQUIRE(r1.landmarks.size() == 2);
  for (std::size_t l = 0; l < 2; ++l) {
    int at_risk = 0;
    for (const auto& s : data.subjects()) at_risk += s.observed_time > opt.landmarks[l];
    CHECK(r1.landmarks[l].n_at_risk == at_risk);
    for (int j = 0; j < 2; ++j) {
      CHECK(r1.landmarks[l].auc(j) >= 0.0);
      CHECK(r1.landmarks[l].auc(j) <= 1.0);
      CHECK(r1.landmarks[l].auc(j) == r2.landmarks[l].auc(j));
      CHECK(r1.landmarks[l].brier(j) == r2.landmarks[l].brier(j));
    }
    CHECK(r1.landmarks[l].rmse(0) == r2.landmarks[l].rmse(0));
  }
  for (const auto& e : r1.fold_errors) CHECK(e.empty());
}

TEST_CASE("k-fold CV fold failures") {
  const Dataset data = toy_data(10, 4);
  CvOptions opt;
  opt.folds = 2;
  try {
    kfold_cv(data, toy_config(), FitMethod::CCA, opt);
    FAIL("expected FoldFitFailure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::FoldFitFailure);
  }
}
