#include <doctest.h>

#include "crbjm/error.hpp"
#include "crbjm/evaluation.hpp"
#include "crbjm/simulation.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace crbjm;

namespace {

std::string dump(const Dataset& d) {
  std::ostringstream out;
  write_subjects_csv(d, out);
  write_longitudinal_csv(d, out);
  return out.str();
}

double weibull_scale_of(const TrueParameters& t, const Eigen::VectorXd& v) {
  double eta = t.weibull_coefficients(0);
  for (Eigen::Index c = 0; c < v.size(); ++c) eta += t.weibull_coefficients(1 + c) * v(c);
  return std::exp(eta);
}

// Softmax over types with type J as the reference.
Eigen::VectorXd type_probs_of(const TrueParameters& t, double u, const Eigen::VectorXd& v) {
  const Eigen::Index J = t.type_coefficients.rows() + 1;
  Eigen::VectorXd e = Eigen::VectorXd::Ones(J);
  for (Eigen::Index j = 0; j + 1 < J; ++j) {
    double lin = t.type_coefficients(j, 0) + t.type_coefficients(j, 1) * u;
    for (Eigen::Index c = 0; c < v.size(); ++c) lin += t.type_coefficients(j, 2 + c) * v(c);
    e(j) = std::exp(lin);
  }
  return e / e.sum();
}

double gk(auto f, double a, double b) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 12, 1e-12);
}

}  // namespace

TEST_CASE("same seed reproduces the cohort, another seed does not") {
  auto g = default_generator(200, Variant::TP, 9);
  const auto cal = calibrate_censoring(g);
  const auto a = simulate_cohort(g, cal);
  const auto b = simulate_cohort(g, cal);
  CHECK(dump(a.data) == dump(b.data));
  g.seed = 10;
  CHECK(dump(simulate_cohort(g, cal).data) != dump(a.data));
}

TEST_CASE("noise-free generator lays measurements on the conditional mean trajectory") {
  auto g = default_generator(60, Variant::EX, 4);
  const int M = g.n_biomarkers, J = g.n_event_types;
  g.truth.main.omega.setZero();
  g.truth.main.residual_variances.setZero();
  const auto sim = simulate_cohort(g);
  const auto& A = g.truth.main.coefficients;
  for (std::size_t i = 0; i < sim.data.size(); ++i) {
    const auto& s = sim.data[i];
    const auto& tr = sim.truth[i];
    const double v = s.covariates(0), T = tr.event_time;
    const int d = tr.event_type;
    for (int m = 0; m < M; ++m) {
      // x = (1, v, 1[d=1], T, T 1[d=1]) for J = 2
      auto coef = [&](int row) {
        double c = A(row, 0) + A(row, 1) * v + A(row, 3) * T;
        if (d == 1) c += A(row, 2) + A(row, 4) * T;
        return c;
      };
      REQUIRE(J == 2);
      for (const auto& meas : s.measurements[static_cast<std::size_t>(m)]) {
        CHECK(meas.value == doctest::Approx(coef(2 * m) + coef(2 * m + 1) * meas.time).epsilon(1e-12));
        CHECK(meas.time < s.observed_time);
      }
    }
  }
}

TEST_CASE("censoring calibration hits the configured shares") {
  SUBCASE("EX") {
    auto g = default_generator(2000, Variant::EX, 1);
    const auto cal = calibrate_censoring(g);
    CHECK(cal.expected_censoring == doctest::Approx(0.4).epsilon(1e-6));
    double mean = 0.0;
    for (int r = 0; r < 20; ++r) {
      g.seed = 100 + static_cast<std::uint64_t>(r);
      mean += simulate_cohort(g, cal).censoring_fraction / 20.0;
    }
    CHECK(std::abs(mean - 0.4) < 0.01);
  }
  SUBCASE("TP") {
    auto g = default_generator(2000, Variant::TP, 1);
    const auto cal = calibrate_censoring(g);
    CHECK(cal.expected_censoring == doctest::Approx(0.4).epsilon(1e-6));
    CHECK(cal.expected_admin == doctest::Approx(0.2).epsilon(1e-6));
    double cens = 0.0, admin = 0.0;
    for (int r = 0; r < 20; ++r) {
      g.seed = 200 + static_cast<std::uint64_t>(r);
      const auto sim = simulate_cohort(g, cal);
      cens += sim.censoring_fraction / 20.0;
      admin += sim.admin_fraction / 20.0;
      for (const auto& s : sim.data.subjects()) REQUIRE(s.observed_time <= cal.tau_max);
    }
    CHECK(std::abs(cens - 0.4) < 0.01);
    CHECK(std::abs(admin - 0.2) < 0.01);
  }
}

TEST_CASE("unreachable censoring shares throw CalibrationFailure") {
  auto g = default_generator(100, Variant::TP, 1);
  g.admin_rate = 0.5;
  CHECK_THROWS_AS(calibrate_censoring(g), Error);
  try {
    calibrate_censoring(g);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CalibrationFailure);
  }
  g.censoring_rate = 1.2;
  CHECK_THROWS_AS(calibrate_censoring(g), Error);
}

TEST_CASE("Kaplan-Meier of simulated times tracks the marginal Weibull survival") {
  auto g = default_generator(20000, Variant::EX, 3);
  const auto sim = simulate_cohort(g);
  std::vector<double> times;
  std::vector<int> flipped;  // CensoringKm steps on type 0, so swap the roles
  for (const auto& s : sim.data.subjects()) {
    times.push_back(s.observed_time);
    flipped.push_back(s.censored() ? 1 : 0);
  }
  const CensoringKm km(times, flipped);
  const auto& truth = g.truth;
  auto marginal = [&](double t) {
    return gk(
        [&](double v) {
          const Eigen::VectorXd vv = Eigen::VectorXd::Constant(1, v);
          const double lam = weibull_scale_of(truth, vv);
          return std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi) *
                 std::exp(-std::pow(t / lam, truth.weibull_shape));
        },
        -9.0, 9.0);
  };
  double worst = 0.0;
  for (double t = 0.5; t <= 15.0; t += 0.5) worst = std::max(worst, std::abs(km.at(t) - marginal(t)));
  CHECK(worst < 0.02);
}

TEST_CASE("oracle risk without history equals the prior cumulative incidence") {
  auto g = default_generator(50, Variant::EX, 5);
  const auto cal = calibrate_censoring(g);
  const TruthOracle oracle(g, cal);
  const auto& t = g.truth;
  for (double v : {-1.5, 0.0, 1.2}) {
    for (double s : {0.3, 2.0, 6.0}) {
      History h;
      h.covariates = Eigen::VectorXd::Constant(1, v);
      h.prediction_time = s;
      h.measurements.assign(3, {});
      const double delta = 3.0;
      const double lam = weibull_scale_of(t, h.covariates), k = t.weibull_shape;
      auto surv = [&](double u) { return std::exp(-std::pow(u / lam, k)); };
      auto dens = [&](double u) { return k / lam * std::pow(u / lam, k - 1.0) * surv(u); };
      const auto o = oracle.risk(h, delta);
      for (int j = 0; j < 2; ++j) {
        const double expect =
            gk([&](double u) { return dens(u) * type_probs_of(t, u, h.covariates)(j); }, s, s + delta) / surv(s);
        CHECK(o.risk(j) == doctest::Approx(expect).epsilon(1e-5));
      }
      CHECK(o.remainder == doctest::Approx(surv(s + delta) / surv(s)).epsilon(1e-5));
    }
  }
}

TEST_CASE("importance-sampling oracle agrees with the fine-grid oracle") {
  for (Variant variant : {Variant::EX, Variant::TP}) {
    auto g = default_generator(100, variant, 6);
    const auto cal = calibrate_censoring(g);
    const auto sim = simulate_cohort(g, cal);
    const TruthOracle oracle(g, cal);
    int checked = 0;
    for (std::size_t i = 0; i < sim.data.size() && checked < 3; ++i) {
      const auto& subj = sim.data[i];
      const double s = 2.0;
      if (subj.observed_time <= s + 0.5) continue;
      ++checked;
      const History h = History::from_subject(subj, s);
      const auto o = oracle.risk(h, 2.0);
      CHECK(o.risk.sum() + o.remainder == doctest::Approx(1.0).epsilon(1e-10));
      const auto mc = mc_risk(g, cal, h, 2.0, 200000, 77 + i);
      for (int j = 0; j < 2; ++j) CHECK(std::abs(mc.value(j) - o.risk(j)) < 4.0 * mc.se(j) + 1e-12);
      CHECK(std::abs(mc.value(2) - o.remainder) < 4.0 * mc.se(2) + 1e-12);

      const auto f = oracle.forecast(h, 1, s + 1.0, {0.1, 0.5, 0.9});
      const auto mf = mc_forecast_mean(g, cal, h, 1, s + 1.0, 200000, 91 + i);
      CHECK(std::abs(mf.value(0) - f.mean) < 4.0 * mf.se(0) + 1e-9);
      CHECK(f.quantiles[0] < f.quantiles[1]);
      CHECK(f.quantiles[1] < f.quantiles[2]);
    }
    CHECK(checked == 3);
  }
}

TEST_CASE("truth coefficients line up with the fitted coefficient names") {
  auto g = default_generator(300, Variant::TP, 8);
  McStudyOptions opt;
  opt.replicates = 2;
  const auto res = run_mc_study(g, opt);
  REQUIRE(res.failures == 0);
  const Eigen::VectorXd truth = true_longitudinal_coefficients(g);
  REQUIRE(res.rows.size() == static_cast<std::size_t>(truth.size()));
  int lts = 0;
  for (std::size_t r = 0; r < res.rows.size(); ++r) {
    CHECK(res.rows[r].truth == truth(static_cast<Eigen::Index>(r)));
    lts += res.rows[r].lts;
  }
  CHECK(lts == 4 * g.n_biomarkers);
}

TEST_CASE("without censoring EM and CCA coincide in the Monte Carlo study") {
  auto g = default_generator(150, Variant::EX, 2);
  g.censoring_rate = 0.0;
  McStudyOptions opt;
  opt.replicates = 3;
  opt.seed = 5;
  const auto res = run_mc_study(g, opt);
  REQUIRE(res.failures == 0);
  CHECK(res.mean_censoring == 0.0);
  for (const auto& row : res.rows) {
    CHECK(row.mean_em == doctest::Approx(row.mean_cca).epsilon(1e-6));
    CHECK(row.relative_efficiency == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("Monte Carlo study is invariant to the worker count") {
  auto g = default_generator(120, Variant::EX, 2);
  McStudyOptions opt;
  opt.replicates = 3;
  std::ostringstream a, b;
  write_mc_study_csv(run_mc_study(g, opt), a);
  opt.workers = 3;
  write_mc_study_csv(run_mc_study(g, opt), b);
  CHECK(a.str() == b.str());
}
