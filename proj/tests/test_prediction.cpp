#include <doctest.h>

#include "crbjm/error.hpp"
#include "crbjm/prediction.hpp"

#include <cmath>
#include <random>

using namespace crbjm;

namespace {

// Weibull(k = 1.5, scale 4 e^{0.3 v}) time model; logistic type model linear in t.
SurvivalFit hand_survival(double shape = 1.5) {
  WeibullFit w;
  w.shape = shape;
  w.coefficients = Eigen::Vector2d(std::log(4.0), 0.3);
  EventTypeFit et;
  et.basis = SplineBasis::bspline(1, {0.0, 10.0});
  et.coefficients.resize(1, 3);
  et.coefficients << -0.5, 1.2, 0.4;
  SurvivalFit s;
  s.time_model = w;
  s.event_type_model = et;
  s.n_event_types = 2;
  return s;
}

double surv(double t, double v) { return std::exp(-std::pow(t / (4.0 * std::exp(0.3 * v)), 1.5)); }
double dens(double t, double v) {
  const double lam = 4.0 * std::exp(0.3 * v);
  return 1.5 / lam * std::pow(t / lam, 0.5) * surv(t, v);
}
// The linear B-spline basis extends linearly, so eta is linear in t everywhere.
double p1(double t, double v) { return 1.0 / (1.0 + std::exp(-(-0.5 + 0.17 * t + 0.4 * v))); }

CrBjmModel hand_model(Variant variant, double tau = 30.0) {
  CrBjmModel m;
  m.variant = variant;
  m.spec.n_biomarkers = 1;
  m.spec.n_covariates = 1;
  m.spec.n_event_types = 2;
  m.survival = hand_survival();
  m.longitudinal.main.coefficients.resize(2, 5);
  m.longitudinal.main.coefficients << 1.0, 0.5, 1.0, -0.2, 0.1,
                                      0.3, 0.0, 0.2, 0.05, -0.03;
  m.longitudinal.main.omega = Eigen::MatrixXd::Constant(1, 1, 0.64);
  m.longitudinal.main.residual_variances = Eigen::VectorXd::Constant(1, 0.25);
  if (variant == Variant::TP) {
    LtsFit lts;
    lts.coefficients.resize(2, 2);
    lts.coefficients << 2.0, 0.3, 0.1, 0.0;
    lts.omega = Eigen::MatrixXd::Constant(1, 1, 0.5);
    lts.residual_variances = Eigen::VectorXd::Constant(1, 0.3);
    m.longitudinal.lts = lts;
  }
  m.tau_max = tau;
  m.quadrature.t_end_ex = 100.0;
  m.quadrature.prediction_width = 0.25;
  m.covariate_names = {"v"};
  m.biomarker_names = {"y"};
  return m;
}

History history(double v, double s, std::vector<std::pair<double, double>> ys) {
  History h;
  h.covariates = Eigen::VectorXd::Constant(1, v);
  h.prediction_time = s;
  h.measurements.resize(1);
  for (auto [t, y] : ys) h.measurements[0].push_back({t, y});
  return h;
}

// Composite midpoint integral of f on [a, b] with n pieces.
template <typename F>
double integrate(F f, double a, double b, int n) {
  const double h = (b - a) / n;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += f(a + (i + 0.5) * h);
  return acc * h;
}

}  // namespace

TEST_CASE("risk: empty history reduces to the survival model") {
  const CrBjmModel model = hand_model(Variant::EX);
  const double v = 0.3, s = 1.5, delta = 3.0;
  const RiskPrediction r = predict_risk(model, history(v, s, {}), delta);
  for (int j = 1; j <= 2; ++j) {
    const double exact =
        integrate([&](double u) { return dens(u, v) * (j == 1 ? p1(u, v) : 1 - p1(u, v)); }, s, s + delta, 20000) /
        surv(s, v);
    CHECK(r.risk(j - 1) == doctest::Approx(exact).epsilon(1e-3));
  }
  CHECK(r.remainder == doctest::Approx(surv(s + delta, v) / surv(s, v)).epsilon(1e-9));
}

TEST_CASE("risk: simplex, full horizon, and TP horizon check") {
  const CrBjmModel ex = hand_model(Variant::EX);
  const History h = history(-0.4, 2.0, {{0.5, 1.2}, {1.7, 0.4}});
  const RiskPrediction r = predict_risk(ex, h, 2.6);
  CHECK(r.risk.sum() + r.remainder == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(r.risk.minCoeff() >= 0.0);
  const RiskPrediction all = predict_risk(ex, h, 98.0);
  CHECK(all.risk.sum() == doctest::Approx(1.0).epsilon(1e-12));

  const CrBjmModel tp = hand_model(Variant::TP, 8.0);
  CHECK_NOTHROW(predict_risk(tp, h, 5.9));
  try {
    predict_risk(tp, h, 6.0);
    FAIL("expected HorizonBeyondTau");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::HorizonBeyondTau);
  }
  const RiskPrediction rt = predict_risk(tp, h, 4.0);
  CHECK(rt.risk.sum() + rt.remainder == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("risk: EX and TP agree when almost no mass lies beyond tau_max") {
  const CrBjmModel ex = hand_model(Variant::EX);
  const CrBjmModel tp = hand_model(Variant::TP, 30.0);
  const History h = history(0.2, 1.0, {{0.2, 1.4}, {0.9, 1.0}});
  const RiskPrediction a = predict_risk(ex, h, 3.0);
  const RiskPrediction b = predict_risk(tp, h, 3.0);
  CHECK((a.risk - b.risk).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("risk: history weighting matches a fine-grid integral") {
  const CrBjmModel model = hand_model(Variant::EX);
  const double v = 0.5, s = 2.0, delta = 3.0;
  const History h = history(v, s, {{0.5, 2.1}, {1.0, 1.7}, {1.9, 1.6}});
  const MeasurementLayout layout = MeasurementLayout::build(model.spec, h.measurements);
  const Eigen::VectorXd vv = Eigen::VectorXd::Constant(1, v);
  auto integrand = [&](double u, int j) {
    return std::exp(loglik_given_event(model.spec, model.longitudinal.main, layout, vv, u, j)) * dens(u, v) *
           (j == 1 ? p1(u, v) : 1 - p1(u, v));
  };
  const double den = integrate([&](double u) { return integrand(u, 1) + integrand(u, 2); }, s, 100.0, 100000);
  const RiskPrediction r = predict_risk(model, h, delta);
  for (int j = 1; j <= 2; ++j) {
    const double num = integrate([&](double u) { return integrand(u, j); }, s, s + delta, 10000);
    CHECK(r.risk(j - 1) == doctest::Approx(num / den).epsilon(1e-3));
  }
}

TEST_CASE("cif: zero at zero, monotone, and consistent with single queries") {
  const CrBjmModel model = hand_model(Variant::EX);
  const History h = history(0.1, 1.3, {{0.4, 1.0}, {1.2, 1.3}});
  std::vector<double> grid;
  for (int i = 0; i < 20; ++i) grid.push_back(0.37 * i);
  const Eigen::MatrixXd cif = predict_cif_curve(model, h, grid);
  CHECK(cif.row(0).cwiseAbs().maxCoeff() == 0.0);
  for (int i = 1; i < 20; ++i) {
    for (int j = 0; j < 2; ++j) CHECK(cif(i, j) >= cif(i - 1, j));
  }
  const RiskPrediction last = predict_risk(model, h, grid.back());
  CHECK(std::abs(last.risk(0) - cif(19, 0)) < 1e-12);
  CHECK(std::abs(last.risk(1) - cif(19, 1)) < 1e-12);
}

TEST_CASE("forecast: a single forced atom gives the marginal Gaussian") {
  // s beyond the EX grid end leaves one cell and J = 1: no mixing.
  CrBjmModel model = hand_model(Variant::EX);
  model.quadrature.t_end_ex = 5.0;
  model.spec.n_event_types = 1;
  model.survival.event_type_model.reset();
  model.survival.n_event_types = 1;
  model.longitudinal.main.coefficients.resize(2, 3);
  model.longitudinal.main.coefficients << 1.0, 0.5, -0.1, 0.3, 0.0, 0.02;
  const double v = 0.4, s = 6.0, t = 7.0;
  const BiomarkerForecast f = predict_biomarker(model, history(v, s, {}), 0, t);
  const double u = t + 0.125;  // the open cell is cut at t: the forecast conditions on T > t
  const double mean = (1.0 + 0.5 * v - 0.1 * u) + (0.3 + 0.02 * u) * t;
  const double sd = std::sqrt(0.64 + 0.25);
  const double h = f.values(1) - f.values(0);
  CHECK(f.mean == doctest::Approx(mean).epsilon(1e-6));
  CHECK(std::abs(f.mode - mean) < 0.05 * h);
  for (int q = 0; q < 9; ++q) {
    CHECK(std::abs(f.quantiles(q) - (mean + sd * normal_quantile(f.quantile_levels(q)))) < h);
  }
}

TEST_CASE("forecast: density is normalized and quantiles increase") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (Variant variant : {Variant::EX, Variant::TP}) {
    CrBjmModel model = hand_model(variant, 9.0);
    for (int rep = 0; rep < 5; ++rep) {
      for (Eigen::Index i = 0; i < model.longitudinal.main.coefficients.size(); ++i) {
        model.longitudinal.main.coefficients(i) += 0.2 * nd(rng);
      }
      const History h = history(nd(rng), 1.5, {{0.3, nd(rng)}, {1.1, nd(rng)}});
      const BiomarkerForecast f = predict_biomarker(model, h, 0, 1.5 + 2.0 * rep);
      const double step = f.values(1) - f.values(0);
      double area = 0.0;
      for (Eigen::Index k = 1; k < f.density.size(); ++k) area += 0.5 * step * (f.density(k - 1) + f.density(k));
      CHECK(area == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(f.density.minCoeff() >= 0.0);
      for (int q = 1; q < 9; ++q) CHECK(f.quantiles(q) >= f.quantiles(q - 1));
    }
  }
}

TEST_CASE("forecast: mixture matches an importance-sampling Monte Carlo oracle") {
  const CrBjmModel model = hand_model(Variant::EX);
  const double v = -0.3, s = 1.5, t = 3.0;
  const History h = history(v, s, {{0.4, 1.9}, {1.4, 1.2}});
  const BiomarkerForecast f = predict_biomarker(model, h, 0, t);

  // Draw T > t from the Weibull by inversion, D from the type model, weight by
  // the history likelihood, then Y(t) from the dense joint Gaussian of
  // (history, Y(t)) given (T, D).
  MeasurementSeries aug = h.measurements;
  aug[0].push_back({t, 0.0});
  const MeasurementLayout full = MeasurementLayout::build(model.spec, aug);
  const MeasurementLayout past = MeasurementLayout::build(model.spec, h.measurements);
  const Eigen::VectorXd vv = Eigen::VectorXd::Constant(1, v);
  const int n_past = past.size();
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> nd;
  const double lam = 4.0 * std::exp(0.3 * v);
  const double ht = std::pow(t / lam, 1.5);
  const int n = 200000;
  std::vector<std::pair<double, double>> draws;
  draws.reserve(n);
  double wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = lam * std::pow(ht - std::log(uni(rng)), 1.0 / 1.5);
    const int j = uni(rng) < p1(u, v) ? 1 : 2;
    const Moments mo = marginal_moments(model.spec, model.longitudinal.main, full, vv, u, j);
    const Eigen::MatrixXd s11 = mo.cov.topLeftCorner(n_past, n_past);
    const Eigen::VectorXd s12 = mo.cov.topRightCorner(n_past, 1);
    const Eigen::VectorXd sol = s11.ldlt().solve(s12);
    const double cm = mo.mean(n_past) + sol.dot(past.y - mo.mean.head(n_past));
    const double cv = mo.cov(n_past, n_past) - s12.dot(sol);
    const double w = std::exp(loglik_given_event(model.spec, model.longitudinal.main, past, vv, u, j));
    draws.push_back({cm + std::sqrt(cv) * nd(rng), w});
    wsum += w;
  }
  std::sort(draws.begin(), draws.end());
  // Gridded CDF by trapezoid.
  const double step = f.values(1) - f.values(0);
  std::vector<double> cdf(static_cast<std::size_t>(f.values.size()), 0.0);
  for (Eigen::Index k = 1; k < f.values.size(); ++k) {
    cdf[static_cast<std::size_t>(k)] = cdf[static_cast<std::size_t>(k) - 1] + 0.5 * step * (f.density(k - 1) + f.density(k));
  }
  double sup = 0.0, acc = 0.0;
  std::size_t d = 0;
  for (Eigen::Index k = 0; k < f.values.size(); ++k) {
    while (d < draws.size() && draws[d].first <= f.values(k)) acc += draws[d++].second;
    sup = std::max(sup, std::abs(acc / wsum - cdf[static_cast<std::size_t>(k)]));
  }
  CHECK(sup < 0.01);
}

TEST_CASE("forecast: a high new value pulls the forecast up, a low one down") {
  const CrBjmModel model = hand_model(Variant::EX);
  const History base = history(0.0, 2.0, {{0.5, 1.5}, {1.5, 1.6}});
  const double m0 = predict_biomarker(model, base, 0, 3.0).mean;
  History up = base, down = base;
  up.measurements[0].push_back({2.0, m0 + 3.0});
  down.measurements[0].push_back({2.0, m0 - 3.0});
  CHECK(predict_biomarker(model, up, 0, 3.0).mean > m0);
  CHECK(predict_biomarker(model, down, 0, 3.0).mean < m0);
}

TEST_CASE("occupancy: states sum to one and collapse to the survival remainder") {
  const CrBjmModel model = hand_model(Variant::EX);
  const History h = history(0.2, 1.0, {{0.3, 1.1}, {0.8, 1.4}});
  std::vector<double> times;
  for (int i = 0; i <= 12; ++i) times.push_back(1.0 + 0.5 * i);
  const StateOccupancy occ = state_occupancy(model, h, 0, {0.5, 1.5, 2.5}, times);
  for (std::size_t i = 0; i < times.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    CHECK(occ.range_probabilities.row(r).sum() + occ.event_probabilities.row(r).sum() ==
          doctest::Approx(1.0).epsilon(1e-4));
    if (i > 0) {
      for (int j = 0; j < 2; ++j) CHECK(occ.event_probabilities(r, j) >= occ.event_probabilities(r - 1, j));
    }
  }
  CHECK(occ.event_probabilities.row(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(occ.range_probabilities.row(0).sum() == doctest::Approx(1.0).epsilon(1e-12));

  const StateOccupancy one = state_occupancy(model, h, 0, {}, times);
  const Eigen::MatrixXd cif = predict_cif_curve(model, h, [&] {
    std::vector<double> d;
    for (double t : times) d.push_back(t - 1.0);
    return d;
  }());
  for (Eigen::Index i = 0; i < cif.rows(); ++i) {
    CHECK(one.range_probabilities(i, 0) == doctest::Approx(1.0 - cif.row(i).sum()).epsilon(1e-4));
  }
  CHECK_THROWS_AS(state_occupancy(model, h, 0, {1.0, 1.0}, times), Error);
}

TEST_CASE("static prediction") {
  StaticModel sm;
  sm.n_covariates = 1;
  sm.n_biomarkers = 1;
  sm.weibull.shape = 1.3;
  sm.weibull.coefficients = Eigen::Vector3d(1.0, 0.2, -0.4);
  const History h = history(0.5, 0.0, {{0.0, 2.0}});
  Eigen::VectorXd x(2);
  x << 0.5, 2.0;
  CHECK(predict_static(sm, h, 2.0) == doctest::Approx(std::exp(-sm.weibull.cumulative_hazard(2.0, x))));

  StaticModel null = sm;
  null.weibull.coefficients = Eigen::Vector3d(1.0, 0.0, 0.0);
  const double a = predict_static(null, history(0.5, 1.0, {{0.5, 2.0}}), 1.5);
  const double b = predict_static(null, history(-1.0, 1.0, {{0.5, -7.0}, {0.9, 3.0}}), 1.5);
  const double base = std::exp(std::pow(1.0 / std::exp(1.0), 1.3) - std::pow(2.5 / std::exp(1.0), 1.3));
  CHECK(a == doctest::Approx(base).epsilon(1e-12));
  CHECK(b == doctest::Approx(base).epsilon(1e-12));
  try {
    predict_static(sm, history(0.5, 1.0, {}), 1.0);
    FAIL("expected MissingCurrentValue");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingCurrentValue);
  }
}
