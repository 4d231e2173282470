#include <doctest.h>

#include "crbjm/error.hpp"
#include "crbjm/survival.hpp"

#include <cmath>
#include <random>

using namespace crbjm;

namespace {

Subject subject(const std::string& id, double t, int event, Eigen::VectorXd v) {
  Subject s;
  s.id = id;
  s.covariates = std::move(v);
  s.observed_time = t;
  s.event_type = event;
  s.measurements.resize(1);
  return s;
}

double weibull_loglik(double k, double lambda, const std::vector<double>& t, const std::vector<int>& d) {
  double ll = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double h = std::pow(t[i] / lambda, k);
    if (d[i]) ll += std::log(k / lambda) + (k - 1) * std::log(t[i] / lambda);
    ll -= h;
  }
  return ll;
}

}  // namespace

TEST_CASE("weibull: uncensored exponential sample") {
  std::mt19937_64 rng(11);
  std::exponential_distribution<double> ex(1.0);
  std::vector<double> t(2000);
  std::vector<int> d(2000, 1);
  double sum = 0.0;
  for (auto& x : t) {
    x = ex(rng);
    sum += x;
  }
  const WeibullFit fit = fit_weibull(Eigen::MatrixXd(2000, 0), t, d);
  CHECK(fit.shape == doctest::Approx(1.0).epsilon(0.05));
  const double lambda = std::exp(fit.coefficients(0));
  CHECK(lambda == doctest::Approx(1.0).epsilon(0.05));
  // With the shape pinned at 1 the MLE of the scale is the sample mean; the
  // free-shape fit must land close to it.
  CHECK(std::abs(lambda - sum / 2000.0) < 0.03);
}

TEST_CASE("weibull: censored sample agrees with a grid-search MLE") {
  std::mt19937_64 rng(12);
  std::exponential_distribution<double> ex(1.0);
  std::uniform_real_distribution<double> cu(0.0, 3.3);
  std::vector<double> t(2000);
  std::vector<int> d(2000);
  int censored = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double e = ex(rng), c = cu(rng);
    t[i] = std::min(e, c);
    d[i] = e <= c;
    censored += !d[i];
  }
  CHECK(censored > 450);
  CHECK(censored < 750);
  const WeibullFit fit = fit_weibull(Eigen::MatrixXd(2000, 0), t, d);
  const double lambda = std::exp(fit.coefficients(0));
  CHECK(std::abs(fit.shape - 1.0) < 0.1);
  CHECK(std::abs(lambda - 1.0) < 0.1);

  double best = -1e300, bk = 0, bl = 0;
  for (double k = 0.8; k <= 1.2; k += 0.002) {
    for (double l = 0.8; l <= 1.2; l += 0.002) {
      const double ll = weibull_loglik(k, l, t, d);
      if (ll > best) {
        best = ll;
        bk = k;
        bl = l;
      }
    }
  }
  CHECK(std::abs(fit.shape - bk) < 0.003);
  CHECK(std::abs(lambda - bl) < 0.003);
  CHECK(weibull_loglik(fit.shape, lambda, t, d) >= best - 1e-9);
}

TEST_CASE("weibull: null covariate effect is recovered") {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd;
  std::weibull_distribution<double> wb(1.5, 2.0);
  std::vector<Subject> subjects;
  for (int i = 0; i < 1000; ++i) {
    subjects.push_back(subject(std::to_string(i), wb(rng), 1, Eigen::VectorXd::Constant(1, nd(rng))));
  }
  const WeibullFit fit = fit_weibull(Dataset(subjects, 1, {"v"}, {"y"}));
  REQUIRE(fit.covariance.rows() == 3);
  const double se = std::sqrt(fit.covariance(1, 1));
  CHECK(std::abs(fit.coefficients(1)) < 3 * se);
  CHECK(fit.shape == doctest::Approx(1.5).epsilon(0.1));
}

TEST_CASE("weibull: all censored is an error") {
  const std::vector<double> t{1.0, 2.0};
  const std::vector<int> d{0, 0};
  CHECK_THROWS_AS(fit_weibull(Eigen::MatrixXd(2, 0), t, d), Error);
}

TEST_CASE("cox: six-subject partial likelihood") {
  // Group indicator x; times with a tie at 3.
  const std::vector<double> t{1, 2, 3, 3, 4, 5};
  const std::vector<int> d{1, 1, 1, 1, 0, 1};
  Eigen::MatrixXd x(6, 1);
  x << 1, 0, 1, 0, 1, 0;
  const CoxFit fit = fit_cox(x, t, d);

  // Hand-written Breslow partial likelihood, maximized by bisection on the score.
  auto score = [&](double g) {
    double s = 0.0;
    for (double time : {1.0, 2.0, 3.0, 5.0}) {
      double s0 = 0, s1 = 0, dsum = 0, xsum = 0;
      for (int i = 0; i < 6; ++i) {
        if (t[i] >= time) {
          s0 += std::exp(g * x(i, 0));
          s1 += x(i, 0) * std::exp(g * x(i, 0));
        }
        if (t[i] == time && d[i]) {
          dsum += 1;
          xsum += x(i, 0);
        }
      }
      s += xsum - dsum * s1 / s0;
    }
    return s;
  };
  double lo = -10, hi = 10;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (score(mid) > 0 ? lo : hi) = mid;
  }
  CHECK(std::abs(fit.coefficients(0) - 0.5 * (lo + hi)) < 1e-6);
}

TEST_CASE("cox: no covariates gives Nelson-Aalen and an exponential tail") {
  const std::vector<double> t{1, 2, 2, 3, 4, 6, 7, 8};
  const std::vector<int> d{1, 1, 0, 1, 1, 0, 1, 1};
  const CoxFit fit = fit_cox(Eigen::MatrixXd(8, 0), t, d);
  // Nelson-Aalen: sum over event times of d / n at risk.
  const std::vector<double> na_times{1, 2, 3, 4, 7, 8};
  const std::vector<double> na{1.0 / 8, 1.0 / 8 + 1.0 / 7, 1.0 / 8 + 1.0 / 7 + 1.0 / 5,
                               1.0 / 8 + 1.0 / 7 + 1.0 / 5 + 1.0 / 4,
                               1.0 / 8 + 1.0 / 7 + 1.0 / 5 + 1.0 / 4 + 1.0 / 2,
                               1.0 / 8 + 1.0 / 7 + 1.0 / 5 + 1.0 / 4 + 1.0 / 2 + 1.0};
  REQUIRE(fit.event_times == na_times);
  for (std::size_t k = 0; k < na.size(); ++k) CHECK(fit.cumulative_hazard[k] == doctest::Approx(na[k]).epsilon(1e-12));
  CHECK(fit.breslow(3.5) == doctest::Approx(na[2]));
  CHECK(fit.tail_rate > 0.0);

  SurvivalFit s;
  s.time_model = fit;
  const Eigen::VectorXd v(0);
  const double s10 = survival(s, 10.0, v), s12 = survival(s, 12.0, v);
  CHECK(std::log(s10 / s12) / 2.0 == doctest::Approx(fit.tail_rate).epsilon(1e-10));
}

TEST_CASE("cox: survival is a proper distribution with the tail") {
  std::mt19937_64 rng(3);
  std::weibull_distribution<double> wb(1.3, 3.0);
  std::normal_distribution<double> nd;
  std::vector<double> t(300);
  std::vector<int> d(300, 1);
  Eigen::MatrixXd x(300, 1);
  for (int i = 0; i < 300; ++i) {
    x(i, 0) = nd(rng);
    t[i] = wb(rng) * std::exp(-0.3 * x(i, 0));
  }
  SurvivalFit s;
  s.time_model = fit_cox(x, t, d);
  const Eigen::VectorXd v = Eigen::VectorXd::Constant(1, 0.4);
  // Integrate the density piecewise between knots (the hazard jumps there).
  std::vector<double> knots{0.0};
  for (double e : std::get<CoxFit>(s.time_model).event_times) knots.push_back(e);
  knots.push_back(200.0);
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
    const double a = knots[k], b = knots[k + 1];
    if (!(b > a)) continue;
    const int n = 200;
    const double h = (b - a) / n;
    for (int i = 0; i < n; ++i) total += time_density(s, a + (i + 0.5) * h, v) * h;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("event type: closed-form logistic intercept and symmetry") {
  std::vector<Subject> subjects;
  for (int i = 0; i < 100; ++i) subjects.push_back(subject(std::to_string(i), 1.0 + 0.05 * i, i % 5 < 3 ? 1 : 2, Eigen::VectorXd(0)));
  const Dataset data(subjects, 2, {}, {"y"});
  const EventTypeFit fit = fit_event_type(data, SplineBasis::bspline(0, {0.0, 10.0}));
  REQUIRE(fit.coefficients.size() == 1);
  CHECK(fit.coefficients(0, 0) == doctest::Approx(std::log(60.0 / 40.0)).epsilon(1e-8));

  std::vector<Subject> balanced;
  for (int i = 0; i < 40; ++i) {
    const double t = 1.0 + (i / 2) * 0.3;
    balanced.push_back(subject(std::to_string(i), t, 1 + i % 2, Eigen::VectorXd(0)));
  }
  const EventTypeFit bfit = fit_event_type(Dataset(balanced, 2, {}, {"y"}), SplineBasis::bspline(1, {0.0, 10.0}));
  CHECK(bfit.coefficients.cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("event type: eight subjects match a grid-search maximum") {
  const std::vector<double> v{-1.0, 0.5, 0.2, 1.5, -0.3, 0.9, -1.2, 0.1};
  const std::vector<int> d{2, 1, 2, 1, 1, 2, 2, 1};
  std::vector<Subject> subjects;
  for (int i = 0; i < 8; ++i) subjects.push_back(subject(std::to_string(i), 1.0 + i, d[i], Eigen::VectorXd::Constant(1, v[i])));
  const EventTypeFit fit = fit_event_type(Dataset(subjects, 2, {"v"}, {"y"}), SplineBasis::bspline(0, {0.0, 10.0}));

  auto loglik = [&](double a, double b) {
    double ll = 0.0;
    for (int i = 0; i < 8; ++i) {
      const double eta = a + b * v[i];
      ll += (d[i] == 1 ? eta : 0.0) - std::log1p(std::exp(eta));
    }
    return ll;
  };
  // Successively refined grid search.
  double ca = 0, cb = 0, span = 4.0;
  for (int level = 0; level < 12; ++level) {
    double best = -1e300, ba = ca, bb = cb;
    for (int i = -20; i <= 20; ++i) {
      for (int j = -20; j <= 20; ++j) {
        const double a = ca + span * i / 20.0, b = cb + span * j / 20.0;
        const double ll = loglik(a, b);
        if (ll > best) {
          best = ll;
          ba = a;
          bb = b;
        }
      }
    }
    ca = ba;
    cb = bb;
    span /= 4.0;
  }
  CHECK(std::abs(fit.coefficients(0, 0) - ca) < 1e-4);
  CHECK(std::abs(fit.coefficients(0, 1) - cb) < 1e-4);
}

TEST_CASE("event type: separation is flagged, not thrown") {
  std::vector<Subject> subjects;
  for (int i = 0; i < 10; ++i) {
    const double x = i < 5 ? -1.0 - i : 1.0 + i;
    subjects.push_back(subject(std::to_string(i), 2.0, i < 5 ? 1 : 2, Eigen::VectorXd::Constant(1, x)));
  }
  const EventTypeFit fit = fit_event_type(Dataset(subjects, 2, {"v"}, {"y"}), SplineBasis::bspline(0, {0.0, 10.0}));
  CHECK(fit.separation_detected);
  CHECK(fit.coefficients.norm() <= 30.0 + 1e-9);
}

TEST_CASE("event type: missing type is an error") {
  std::vector<Subject> subjects{subject("a", 1.0, 1, Eigen::VectorXd(0)), subject("b", 2.0, 1, Eigen::VectorXd(0))};
  try {
    fit_event_type(Dataset(subjects, 2, {}, {"y"}), SplineBasis::bspline(0, {0.0, 10.0}));
    FAIL("expected MissingEventType");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingEventType);
  }
}

TEST_CASE("density identities") {
  SurvivalFit fit;
  WeibullFit w;
  w.shape = 1.0;
  w.coefficients = Eigen::VectorXd::Zero(1);
  fit.time_model = w;
  const Eigen::VectorXd none(0);
  CHECK(survival(fit, 1.0, none) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(survival(fit, 0.0, none) == 1.0);
  CHECK(joint_density(fit, 0.7, 1, none) == doctest::Approx(time_density(fit, 0.7, none)).epsilon(1e-14));
  CHECK(std::exp(log_interval_mass(fit, 1.0, 2.0, none)) ==
        doctest::Approx(std::exp(-1.0) - std::exp(-2.0)).epsilon(1e-12));
  CHECK(prob_beyond_tau(fit, 3.0, none) == doctest::Approx(std::exp(-3.0)));
}

TEST_CASE("fitted competing-risk model: simplex, monotone survival, total mass") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<Subject> subjects;
  for (int i = 0; i < 600; ++i) {
    const double v = nd(rng);
    const double t = 2.0 * std::pow(-std::log(uni(rng)), 1.0 / 1.5) * std::exp(0.5 * v);
    const double p1 = 1.0 / (1.0 + std::exp(-0.3 * t));
    const int type = uni(rng) < p1 ? 1 : 2;
    const double c = 8.0 * uni(rng);
    subjects.push_back(subject(std::to_string(i), std::min(t, c), t <= c ? type : 0, Eigen::VectorXd::Constant(1, v)));
  }
  const Dataset data(subjects, 2, {"v"}, {"y"});
  const SurvivalFit fit = fit_survival(data);
  REQUIRE(fit.event_type_model.has_value());
  CHECK(fit.event_type_model->basis.dimension() == 5);

  std::mt19937_64 r2(5);
  for (int c = 0; c < 1000; ++c) {
    const double t = 20.0 * uni(r2);
    const Eigen::VectorXd v = Eigen::VectorXd::Constant(1, 3.0 * nd(r2));
    const Eigen::VectorXd p = event_type_probs(fit, t, v);
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    CHECK(p.minCoeff() > 0.0);
    CHECK(std::abs(joint_density(fit, t, 1, v) + joint_density(fit, t, 2, v) - time_density(fit, t, v)) <
          1e-12 * std::max(1.0, time_density(fit, t, v)));
  }
  const Eigen::VectorXd v = Eigen::VectorXd::Constant(1, 0.3);
  double prev = 1.0;
  for (int i = 0; i <= 1000; ++i) {
    const double s = survival(fit, 0.02 * i, v);
    CHECK(s <= prev);
    prev = s;
  }
  double total = 0.0;
  const int n = 200000;
  const double h = 200.0 / n;
  for (int i = 0; i < n; ++i) {
    const double u = (i + 0.5) * h;
    total += (joint_density(fit, u, 1, v) + joint_density(fit, u, 2, v)) * h;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-4));
}
