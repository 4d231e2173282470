#include "crbjm/simulation.hpp"

#include "crbjm/error.hpp"
#include "crbjm/numerics.hpp"
#include "crbjm/parallel.hpp"
#include "crbjm/survival.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <random>

namespace crbjm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

int n_main_features(int J, int p) { return 1 + p + (J - 1) + 1 + (J - 1); }

void validate(const GeneratorConfig& c) {
  if (c.n < 1) throw Error(ErrorCode::ConfigError, "generator needs n >= 1");
  if (c.n_event_types < 1 || c.n_covariates < 0 || c.n_biomarkers < 1) {
    throw Error(ErrorCode::ConfigError, "generator dimensions must be positive");
  }
  const TrueParameters& t = c.truth;
  const int J = c.n_event_types, p = c.n_covariates, M = c.n_biomarkers;
  if (t.weibull_coefficients.size() != 1 + p || !(t.weibull_shape > 0.0)) {
    throw Error(ErrorCode::ConfigError, "Weibull truth does not match the covariate count");
  }
  if (t.type_coefficients.rows() != J - 1 || (J > 1 && t.type_coefficients.cols() != 2 + p)) {
    throw Error(ErrorCode::ConfigError, "event-type truth must be (J-1) x (2+p)");
  }
  auto check_lmm = [&](const LmmParameters& l, int cols, const char* what) {
    if (l.coefficients.rows() != 2 * M || l.coefficients.cols() != cols || l.omega.rows() != M ||
        l.omega.cols() != M || l.residual_variances.size() != M) {
      throw Error(ErrorCode::ConfigError, std::string(what) + " truth has the wrong shape");
    }
  };
  check_lmm(t.main, n_main_features(J, p), "longitudinal");
  if (c.variant == Variant::TP) check_lmm(t.lts, 1 + p, "LTS");
  if (!(c.censoring_rate >= 0.0 && c.censoring_rate < 1.0)) {
    throw Error(ErrorCode::ConfigError, "censoring rate must be in [0, 1)");
  }
  if (!(c.visit_spacing > 0.0) || !(c.visit_jitter >= 0.0) || 2.0 * c.visit_jitter >= c.visit_spacing) {
    throw Error(ErrorCode::ConfigError, "visit jitter must be smaller than half the spacing");
  }
}

// Square root of a covariance that tolerates singular (even zero) matrices.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& s) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

// Scale of the Weibull, lambda(V) = exp(eta_0 + eta' V).
double weibull_scale(const TrueParameters& t, const Eigen::VectorXd& v) {
  return std::exp(t.weibull_coefficients(0) + t.weibull_coefficients.tail(v.size()).dot(v));
}

Eigen::VectorXd type_probs(const TrueParameters& t, int J, double u, const Eigen::VectorXd& v) {
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(J);
  for (int j = 0; j < J - 1; ++j) {
    eta(j) = t.type_coefficients(j, 0) + t.type_coefficients(j, 1) * u +
             t.type_coefficients.row(j).tail(v.size()).dot(v);
  }
  const double mx = eta.maxCoeff();
  Eigen::VectorXd e = (eta.array() - mx).exp();
  return e / e.sum();
}

Eigen::VectorXd main_features(int J, const Eigen::VectorXd& v, double u, int j) {
  const int p = static_cast<int>(v.size());
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n_main_features(J, p));
  x(0) = 1.0;
  x.segment(1, p) = v;
  if (j < J) x(1 + p + j - 1) = 1.0;
  x(p + J) = u;
  if (j < J) x(p + J + j) = u;
  return x;
}

Eigen::VectorXd lts_features(const Eigen::VectorXd& v) {
  Eigen::VectorXd x(1 + v.size());
  x(0) = 1.0;
  x.tail(v.size()) = v;
  return x;
}

// Expected censoring shares: the survival function of T is averaged over the
// linear predictor eta_0 + eta'V ~ N(eta_0, |eta|^2) at fixed quantile nodes.
struct CensoringMath {
  double k;
  std::vector<double> log_scales;

  explicit CensoringMath(const TrueParameters& t) : k(t.weibull_shape) {
    const int nodes = 400;
    const double sd = t.weibull_coefficients.tail(t.weibull_coefficients.size() - 1).norm();
    for (int i = 0; i < nodes; ++i) {
      log_scales.push_back(t.weibull_coefficients(0) + sd * normal_quantile((i + 0.5) / nodes));
    }
  }
  double surv(double x) const {
    double s = 0.0;
    for (double ls : log_scales) s += std::exp(-std::pow(x / std::exp(ls), k));
    return s / static_cast<double>(log_scales.size());
  }
  // integral of the marginal survival over (0, x), Simpson's rule
  double integral(double x) const {
    const int steps = 1000;
    const double h = x / steps;
    double acc = surv(0.0) + surv(x);
    for (int i = 1; i < steps; ++i) acc += (i % 2 ? 4.0 : 2.0) * surv(i * h);
    return acc * h / 3.0;
  }
};

template <class F>
double bisect(F f, double lo, double hi, int iterations = 80) {
  // f increasing, root in (lo, hi)
  for (int i = 0; i < iterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TrueParameters default_truth(int J, int p, int M, double history_scale) {
  TrueParameters t;
  t.weibull_shape = 1.5;
  // Covariate effect 0.5 on the log-hazard scale, i.e. -0.5 / k on the log-scale.
  t.weibull_coefficients = Eigen::VectorXd::Constant(1 + p, -0.5 / t.weibull_shape);
  t.weibull_coefficients(0) = std::log(8.0);
  t.type_coefficients = Eigen::MatrixXd::Zero(J - 1, 2 + p);
  t.type_coefficients.col(1).setConstant(0.3);

  const int C = n_main_features(J, p);
  const double scale[3] = {1.0, 1.25, 1.5};
  const double h = history_scale;
  t.main.coefficients = Eigen::MatrixXd::Zero(2 * M, C);
  t.lts.coefficients = Eigen::MatrixXd::Zero(2 * M, 1 + p);
  for (int m = 0; m < M; ++m) {
    const double sm = scale[m % 3];
    auto a0 = t.main.coefficients.row(2 * m);
    auto a1 = t.main.coefficients.row(2 * m + 1);
    a0(0) = 4.0 + 2.0 * m;
    a1(0) = -0.8 * sm;
    for (int c = 0; c < p; ++c) {
      a0(1 + c) = 1.0;
      a1(1 + c) = 0.3;
    }
    for (int j = 0; j < J - 1; ++j) {
      a0(1 + p + j) = -4.0 * h * sm;
      a1(1 + p + j) = -0.8 * h * sm;
      a0(1 + p + J + j) = -0.6 * h * sm;
      a1(1 + p + J + j) = -0.08 * h * sm;
    }
    a0(p + J) = 0.6 * h * sm;
    a1(p + J) = 0.08 * h * sm;

    t.lts.coefficients(2 * m, 0) = 8.0 + 2.0 * m;
    t.lts.coefficients(2 * m + 1, 0) = -0.3 * sm;
    for (int c = 0; c < p; ++c) {
      t.lts.coefficients(2 * m, 1 + c) = 1.0;
      t.lts.coefficients(2 * m + 1, 1 + c) = 0.3;
    }
  }
  t.main.omega = Eigen::MatrixXd::Constant(M, M, 0.3);
  t.main.omega.diagonal().setOnes();
  t.main.residual_variances = Eigen::VectorXd::Constant(M, 0.5);
  t.lts.omega = t.main.omega;
  t.lts.residual_variances = t.main.residual_variances;
  return t;
}

GeneratorConfig default_generator(int n, Variant variant, std::uint64_t seed) {
  GeneratorConfig c;
  c.n = n;
  c.variant = variant;
  c.seed = seed;
  c.truth = default_truth(c.n_event_types, c.n_covariates, c.n_biomarkers);
  return c;
}

LongitudinalSpec truth_spec(const GeneratorConfig& config) {
  LongitudinalSpec spec;
  spec.n_biomarkers = config.n_biomarkers;
  spec.n_covariates = config.n_covariates;
  spec.n_event_types = config.n_event_types;
  spec.trajectory_degree = 1;
  spec.transform = Transform::Identity;
  spec.random_effects = RandomEffects::Intercept;
  return spec;
}

CensoringCalibration calibrate_censoring(const GeneratorConfig& config) {
  validate(config);
  const CensoringMath cm(config.truth);
  CensoringCalibration cal;
  const double target = config.censoring_rate;
  if (config.variant == Variant::EX) {
    cal.tau_max = kInf;
    if (target == 0.0) {
      cal.c_max = kInf;
      return cal;
    }
    // Censoring share of uniform C on (0, c): E[min(T, c)] / c, decreasing in c.
    auto share = [&](double c) { return cm.integral(c) / c; };
    const double lo = 1e-4, hi = 1e4;
    if (share(lo) < target || share(hi) > target) {
      throw Error(ErrorCode::CalibrationFailure, "censoring rate " + format_double(target) + " is out of reach");
    }
    cal.c_max = std::exp(bisect([&](double lc) { return target - share(std::exp(lc)); }, std::log(lo), std::log(hi)));
    cal.expected_censoring = share(cal.c_max);
    return cal;
  }

  const double admin = config.admin_rate;
  if (!(admin > 0.0 && admin < target)) {
    throw Error(ErrorCode::CalibrationFailure,
                "TP needs 0 < administrative share < overall censoring rate, got " + format_double(admin) + " and " +
                    format_double(target));
  }
  // For a given c, tau solves P(T > tau) (1 - tau / c) = admin; the overall
  // share is then admin + (1/c) int_0^tau S.
  auto tau_for = [&](double c) {
    return bisect([&](double tau) { return admin - cm.surv(tau) * (1.0 - tau / c); }, 0.0, c);
  };
  auto share = [&](double c) {
    const double tau = tau_for(c);
    return admin + cm.integral(tau) / c;
  };
  const double lo = 1e-3, hi = 1e4;
  if (share(lo) < target || share(hi) > target) {
    throw Error(ErrorCode::CalibrationFailure, "censoring rate " + format_double(target) + " with administrative share " +
                                                   format_double(admin) + " is out of reach");
  }
  cal.c_max = std::exp(bisect([&](double lc) { return target - share(std::exp(lc)); }, std::log(lo), std::log(hi)));
  cal.tau_max = tau_for(cal.c_max);
  cal.expected_censoring = share(cal.c_max);
  cal.expected_admin = cm.surv(cal.tau_max) * (1.0 - cal.tau_max / cal.c_max);
  return cal;
}

SimulatedCohort simulate_cohort(const GeneratorConfig& config) {
  return simulate_cohort(config, calibrate_censoring(config));
}

SimulatedCohort simulate_cohort(const GeneratorConfig& config, const CensoringCalibration& cal) {
  validate(config);
  const TrueParameters& truth = config.truth;
  const int J = config.n_event_types, p = config.n_covariates, M = config.n_biomarkers;
  const bool tp = config.variant == Variant::TP;
  const Eigen::MatrixXd omega_root = psd_sqrt(truth.main.omega);
  const Eigen::MatrixXd lts_root = tp ? psd_sqrt(truth.lts.omega) : omega_root;

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  SimulatedCohort out;
  out.calibration = cal;
  std::vector<Subject> subjects;
  subjects.reserve(static_cast<std::size_t>(config.n));
  int censored = 0, admin = 0;
  for (int i = 0; i < config.n; ++i) {
    Subject s;
    s.id = "S" + std::to_string(i + 1);
    Eigen::VectorXd v(p);
    for (int c = 0; c < p; ++c) v(c) = normal(rng);
    s.covariates = v;

    const double t = weibull_scale(truth, v) * std::pow(-std::log1p(-uniform(rng)), 1.0 / truth.weibull_shape);
    int d = J;
    if (J > 1) {
      const Eigen::VectorXd pr = type_probs(truth, J, t, v);
      double u = uniform(rng), acc = 0.0;
      for (int j = 0; j < J; ++j) {
        acc += pr(j);
        if (u < acc) {
          d = j + 1;
          break;
        }
      }
    }
    const double c = std::isfinite(cal.c_max) ? cal.c_max * uniform(rng) : kInf;
    const bool long_term = tp && t > cal.tau_max;
    Eigen::VectorXd z(M);
    for (int m = 0; m < M; ++m) z(m) = normal(rng);
    const Eigen::VectorXd b = (long_term ? lts_root : omega_root) * z;

    double obs = t;
    int type = d;
    if (c < obs) obs = c, type = 0;
    if (tp && cal.tau_max < obs) {
      obs = cal.tau_max;
      type = 0;
      ++admin;
    }
    censored += type == 0;
    s.observed_time = obs;
    s.event_type = type;

    const LmmParameters& lmm = long_term ? truth.lts : truth.main;
    const Eigen::VectorXd x = long_term ? lts_features(v) : main_features(J, v, t, d);
    const Eigen::VectorXd theta = lmm.coefficients * x;  // (intercept, slope) per biomarker
    s.measurements.assign(static_cast<std::size_t>(M), {});
    for (int k = 1;; ++k) {
      const double jitter = config.visit_jitter * (2.0 * uniform(rng) - 1.0);
      const double when = config.visit_spacing * k + jitter;
      if (when >= obs) break;
      for (int m = 0; m < M; ++m) {
        const double e = std::sqrt(lmm.residual_variances(m)) * normal(rng);
        s.measurements[static_cast<std::size_t>(m)].push_back(
            {when, theta(2 * m) + theta(2 * m + 1) * when + b(m) + e});
      }
    }

    TruthRecord rec;
    rec.id = s.id;
    rec.event_time = t;
    rec.event_type = d;
    rec.censor_time = c;
    rec.long_term = long_term;
    rec.random_effects = b;
    out.truth.push_back(std::move(rec));
    subjects.push_back(std::move(s));
  }

  std::vector<std::string> cov, bio;
  for (int c = 0; c < p; ++c) cov.push_back("v" + std::to_string(c + 1));
  for (int m = 0; m < M; ++m) bio.push_back("y" + std::to_string(m + 1));
  std::optional<double> tau;
  if (tp) tau = cal.tau_max;
  out.data = Dataset(std::move(subjects), J, cov, bio, tau);
  out.censoring_fraction = static_cast<double>(censored) / config.n;
  out.admin_fraction = static_cast<double>(admin) / config.n;
  return out;
}

void write_truth_csv(const std::vector<TruthRecord>& truth, std::ostream& out) {
  out << "id,event_time,event_type,censor_time,long_term";
  const Eigen::Index M = truth.empty() ? 0 : truth.front().random_effects.size();
  for (Eigen::Index m = 0; m < M; ++m) out << ",b" << (m + 1);
  out << '\n';
  for (const auto& r : truth) {
    out << r.id << ',' << format_double(r.event_time) << ',' << r.event_type << ','
        << (std::isfinite(r.censor_time) ? format_double(r.censor_time) : std::string("inf")) << ','
        << (r.long_term ? 1 : 0);
    for (Eigen::Index m = 0; m < M; ++m) out << ',' << format_double(r.random_effects(m));
    out << '\n';
  }
}

CrBjmModel true_model(const GeneratorConfig& config, const CensoringCalibration& cal) {
  validate(config);
  const TrueParameters& t = config.truth;
  const int J = config.n_event_types, p = config.n_covariates;
  CrBjmModel model;
  model.variant = config.variant;
  model.spec = truth_spec(config);
  WeibullFit w;
  w.shape = t.weibull_shape;
  w.coefficients = t.weibull_coefficients;
  model.survival.time_model = w;
  model.survival.n_event_types = J;
  if (J > 1) {
    // Linear B-spline on [0, hi] spans (1, u): a + b u = a B1(u) + (a + b hi) B2(u).
    const double hi = 1000.0;
    EventTypeFit et;
    et.basis = SplineBasis::bspline(1, {0.0, hi});
    et.coefficients.resize(J - 1, 2 + p);
    for (int j = 0; j < J - 1; ++j) {
      et.coefficients(j, 0) = t.type_coefficients(j, 0);
      et.coefficients(j, 1) = t.type_coefficients(j, 0) + t.type_coefficients(j, 1) * hi;
      for (int c = 0; c < p; ++c) et.coefficients(j, 2 + c) = t.type_coefficients(j, 2 + c);
    }
    model.survival.event_type_model = et;
  }
  model.longitudinal.main = t.main;
  if (config.variant == Variant::TP) {
    model.longitudinal.lts = t.lts;
    model.tau_max = cal.tau_max;
  } else {
    model.tau_max = model.quadrature.t_end_ex;
  }
  for (int c = 0; c < p; ++c) model.covariate_names.push_back("v" + std::to_string(c + 1));
  for (int m = 0; m < config.n_biomarkers; ++m) model.biomarker_names.push_back("y" + std::to_string(m + 1));
  return model;
}

Eigen::VectorXd true_longitudinal_coefficients(const GeneratorConfig& config) {
  LongitudinalFit fit;
  fit.main = config.truth.main;
  if (config.variant == Variant::TP) fit.lts = config.truth.lts;
  return longitudinal_coefficients(fit, nullptr);
}

std::vector<std::string> longitudinal_coefficient_names(const CrBjmModel& model) {
  std::vector<std::string> out;
  for (auto& name : parameter_names(model)) {
    const bool lmm = name.rfind("long.", 0) == 0 || name.rfind("lts.", 0) == 0;
    if (lmm && name.find(".omega[") == std::string::npos && name.find(".sigma2.") == std::string::npos) {
      out.push_back(std::move(name));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Oracle. Everything below works from TrueParameters with its own Gaussian
// algebra; none of the fitted-model machinery is involved.

namespace {

struct Obs {
  int m;
  double t;
  double y;
};

// Gaussian model of a history under one longitudinal parameter set: the mean
// of y given feature vector x is D x, with D the stacked trajectory rows
// applied to the coefficients.
struct HistoryGaussian {
  std::vector<Obs> obs;
  Eigen::MatrixXd design;  // n x C: row (m, t) = coefficients(2m, :) + t coefficients(2m+1, :)
  Eigen::LLT<Eigen::MatrixXd> chol;
  double log_norm = 0.0;  // -(n log 2pi + log det S) / 2
  Eigen::MatrixXd omega;
  Eigen::VectorXd sigma2;

  HistoryGaussian(const History& h, const LmmParameters& lmm) : omega(lmm.omega), sigma2(lmm.residual_variances) {
    for (std::size_t m = 0; m < h.measurements.size(); ++m) {
      for (const auto& me : h.measurements[m]) obs.push_back({static_cast<int>(m), me.time, me.value});
    }
    const int n = static_cast<int>(obs.size());
    design.resize(n, lmm.coefficients.cols());
    Eigen::MatrixXd s(n, n);
    for (int a = 0; a < n; ++a) {
      design.row(a) = lmm.coefficients.row(2 * obs[a].m) + obs[a].t * lmm.coefficients.row(2 * obs[a].m + 1);
      for (int b = 0; b < n; ++b) s(a, b) = omega(obs[a].m, obs[b].m) + (a == b ? sigma2(obs[a].m) : 0.0);
    }
    if (n > 0) {
      chol.compute(s);
      const Eigen::MatrixXd l = chol.matrixL();
      log_norm = -0.5 * n * std::log(2.0 * M_PI) - l.diagonal().array().log().sum();
    }
  }
  int size() const { return static_cast<int>(obs.size()); }
  Eigen::VectorXd y() const {
    Eigen::VectorXd v(size());
    for (int a = 0; a < size(); ++a) v(a) = obs[a].y;
    return v;
  }
  double loglik(const Eigen::VectorXd& x) const {
    if (obs.empty()) return 0.0;
    const Eigen::VectorXd r = y() - design * x;
    return log_norm - 0.5 * r.dot(chol.solve(r));
  }
  // Cov(Y_m(t), y) for a new measurement of biomarker m.
  Eigen::VectorXd cross(int m) const {
    Eigen::VectorXd c(size());
    for (int a = 0; a < size(); ++a) c(a) = omega(m, obs[a].m);
    return c;
  }
};

// log-likelihood of the history as a quadratic in u for each type: the main
// model's features are affine in u.
struct TypeQuadratic {
  double c0, c1, c2;  // loglik(u) = c0 + c1 u + c2 u^2
};

std::vector<TypeQuadratic> type_quadratics(const HistoryGaussian& g, int J, const Eigen::VectorXd& v) {
  std::vector<TypeQuadratic> out;
  for (int j = 1; j <= J; ++j) {
    if (g.size() == 0) {
      out.push_back({0.0, 0.0, 0.0});
      continue;
    }
    const Eigen::VectorXd x0 = main_features(J, v, 0.0, j);
    const Eigen::VectorXd x1 = main_features(J, v, 1.0, j) - x0;
    const Eigen::VectorXd r0 = g.y() - g.design * x0;
    const Eigen::VectorXd d1 = g.design * x1;
    const Eigen::VectorXd sr = g.chol.solve(r0), sd = g.chol.solve(d1);
    out.push_back({g.log_norm - 0.5 * r0.dot(sr), r0.dot(sd), -0.5 * d1.dot(sd)});
  }
  return out;
}

double weibull_log_density(double k, double lambda, double u) {
  const double z = u / lambda;
  return std::log(k / lambda) + (k - 1.0) * std::log(z) - std::pow(z, k);
}

double weibull_cumhaz(double k, double lambda, double u) { return std::pow(u / lambda, k); }

void check_history(const GeneratorConfig& c, const History& h) {
  if (h.covariates.size() != c.n_covariates || static_cast<int>(h.measurements.size()) != c.n_biomarkers) {
    throw Error(ErrorCode::InvalidArgument, "history does not match the generator");
  }
}

}  // namespace

TruthOracle::TruthOracle(const GeneratorConfig& config, const CensoringCalibration& calibration, int points)
    : config_(config), calibration_(calibration), points_(points) {
  validate(config_);
  if (points_ < 100) throw Error(ErrorCode::InvalidArgument, "oracle needs at least 100 points");
}

double TruthOracle::upper(const History& h, double from) const {
  if (config_.variant == Variant::TP) return calibration_.tau_max;
  // S(hi) / S(from) = e^-40
  const TrueParameters& t = config_.truth;
  const double k = t.weibull_shape, lambda = weibull_scale(t, h.covariates);
  return lambda * std::pow(weibull_cumhaz(k, lambda, from) + 40.0, 1.0 / k);
}

std::vector<TruthOracle::Node> TruthOracle::nodes(const History& h, double a, double b, int points) const {
  const TrueParameters& t = config_.truth;
  const int J = config_.n_event_types;
  const double k = t.weibull_shape, lambda = weibull_scale(t, h.covariates);
  std::vector<Node> out;
  if (!(b > a) || points < 1) return out;
  const HistoryGaussian g(h, t.main);
  const auto quad = type_quadratics(g, J, h.covariates);
  const double w = (b - a) / points;
  for (int i = 0; i < points; ++i) {
    const double u = a + (i + 0.5) * w;
    const double lf = weibull_log_density(k, lambda, u) + std::log(w);
    const Eigen::VectorXd pr = type_probs(t, J, u, h.covariates);
    for (int j = 1; j <= J; ++j) {
      const auto& q = quad[static_cast<std::size_t>(j - 1)];
      out.push_back({u, j, lf + std::log(pr(j - 1)) + q.c0 + u * (q.c1 + u * q.c2)});
    }
  }
  return out;
}

double TruthOracle::tail_log_weight(const History& h) const {
  if (config_.variant != Variant::TP) return -kInf;
  const TrueParameters& t = config_.truth;
  const double lambda = weibull_scale(t, h.covariates);
  const HistoryGaussian g(h, t.lts);
  return -weibull_cumhaz(t.weibull_shape, lambda, calibration_.tau_max) + g.loglik(lts_features(h.covariates));
}

OracleRisk TruthOracle::risk(const History& h, double delta) const {
  check_history(config_, h);
  const double s = h.prediction_time;
  const double end = s + delta;
  const double far = upper(h, s);
  if (config_.variant == Variant::TP && end >= far) {
    throw Error(ErrorCode::HorizonBeyondTau, "s + delta reaches tau_max");
  }
  // The grid breaks at s + delta; points are split in proportion to the two
  // lengths, each piece keeping at least a tenth of them.
  std::vector<Node> inside, outside;
  if (end >= far) {
    inside = nodes(h, s, far, points_);
  } else {
    const int first = std::clamp(static_cast<int>(std::lround(points_ * (end - s) / (far - s))), points_ / 10,
                                 points_ - points_ / 10);
    inside = nodes(h, s, end, first);
    outside = nodes(h, end, far, points_ - first);
  }
  std::vector<double> lw;
  for (const auto& n : inside) lw.push_back(n.log_weight);
  for (const auto& n : outside) lw.push_back(n.log_weight);
  const double tail = tail_log_weight(h);
  if (std::isfinite(tail)) lw.push_back(tail);
  const double den = log_sum_exp(lw);
  OracleRisk out;
  out.risk = Eigen::VectorXd::Zero(config_.n_event_types);
  for (const auto& n : inside) out.risk(n.j - 1) += std::exp(n.log_weight - den);
  for (const auto& n : outside) out.remainder += std::exp(n.log_weight - den);
  if (std::isfinite(tail)) out.remainder += std::exp(tail - den);
  return out;
}

OracleForecast TruthOracle::forecast(const History& h, int biomarker, double t,
                                     const std::vector<double>& levels) const {
  check_history(config_, h);
  if (biomarker < 0 || biomarker >= config_.n_biomarkers) throw Error(ErrorCode::InvalidArgument, "bad biomarker");
  if (t < h.prediction_time) throw Error(ErrorCode::InvalidArgument, "forecast time before s");
  const TrueParameters& tr = config_.truth;
  const int J = config_.n_event_types, m = biomarker;
  const bool tp = config_.variant == Variant::TP;

  struct Comp {
    double lw, mean, var;
  };
  std::vector<Comp> comps;
  auto conditional = [&](const HistoryGaussian& g, const LmmParameters& lmm, const Eigen::VectorXd& x, double* mean,
                         double* var) {
    const double mu_t = (lmm.coefficients.row(2 * m) + t * lmm.coefficients.row(2 * m + 1)).dot(x);
    const double prior_var = lmm.omega(m, m) + lmm.residual_variances(m);
    if (g.size() == 0) {
      *mean = mu_t;
      *var = prior_var;
      return;
    }
    const Eigen::VectorXd c = g.cross(m);
    const Eigen::VectorXd sc = g.chol.solve(c);
    *mean = mu_t + sc.dot(g.y() - g.design * x);
    *var = prior_var - c.dot(sc);
  };

  if (!tp || t < calibration_.tau_max) {
    const HistoryGaussian g(h, tr.main);
    for (const auto& n : nodes(h, t, upper(h, t), points_)) {
      double mean = 0.0, var = 0.0;
      conditional(g, tr.main, main_features(J, h.covariates, n.u, n.j), &mean, &var);
      comps.push_back({n.log_weight, mean, var});
    }
  }
  if (tp) {
    const HistoryGaussian g(h, tr.lts);
    double mean = 0.0, var = 0.0;
    conditional(g, tr.lts, lts_features(h.covariates), &mean, &var);
    comps.push_back({tail_log_weight(h), mean, var});
  }
  std::vector<double> lw;
  for (const auto& c : comps) lw.push_back(c.lw);
  const double den = log_sum_exp(lw);
  std::vector<Comp> kept;
  double lo = kInf, hi = -kInf;
  OracleForecast out;
  for (const auto& c : comps) {
    const double w = std::exp(c.lw - den);
    if (w < 1e-16) continue;
    kept.push_back({w, c.mean, c.var});
    out.mean += w * c.mean;
    lo = std::min(lo, c.mean - 10.0 * std::sqrt(c.var));
    hi = std::max(hi, c.mean + 10.0 * std::sqrt(c.var));
  }
  double total = 0.0;
  for (const auto& c : kept) total += c.lw;
  out.mean /= total;
  auto cdf = [&](double y) {
    double acc = 0.0;
    for (const auto& c : kept) acc += c.lw * normal_cdf((y - c.mean) / std::sqrt(c.var));
    return acc / total;
  };
  for (double p : levels) out.quantiles.push_back(bisect([&](double y) { return cdf(y) - p; }, lo, hi, 100));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Draw {
  double u;
  int j;
  bool lts;
  double log_weight;
};

// Prior draws of (T, D) given T > from, weighted by the history likelihood.
std::vector<Draw> weighted_draws(const GeneratorConfig& config, const CensoringCalibration& cal, const History& h,
                                 double from, int draws, std::uint64_t seed) {
  check_history(config, h);
  if (draws < 2) throw Error(ErrorCode::InvalidArgument, "need at least 2 draws");
  const TrueParameters& t = config.truth;
  const int J = config.n_event_types;
  const double k = t.weibull_shape, lambda = weibull_scale(t, h.covariates);
  const bool tp = config.variant == Variant::TP;
  const HistoryGaussian gm(h, t.main);
  const auto quad = type_quadratics(gm, J, h.covariates);
  const double lts_ll = tp ? HistoryGaussian(h, t.lts).loglik(lts_features(h.covariates)) : 0.0;
  const double h0 = weibull_cumhaz(k, lambda, from);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::exponential_distribution<double> ex(1.0);
  std::vector<Draw> out(static_cast<std::size_t>(draws));
  for (auto& d : out) {
    d.u = lambda * std::pow(h0 + ex(rng), 1.0 / k);
    const Eigen::VectorXd pr = type_probs(t, J, d.u, h.covariates);
    const double r = uni(rng);
    double acc = 0.0;
    d.j = J;
    for (int j = 0; j < J; ++j) {
      acc += pr(j);
      if (r < acc) {
        d.j = j + 1;
        break;
      }
    }
    d.lts = tp && d.u > cal.tau_max;
    const auto& q = quad[static_cast<std::size_t>(d.j - 1)];
    d.log_weight = d.lts ? lts_ll : q.c0 + d.u * (q.c1 + d.u * q.c2);
  }
  return out;
}

// Self-normalized estimate of E[f] and its delta-method standard error.
void ratio_estimate(const std::vector<Draw>& draws, const std::vector<double>& f, double* value, double* se) {
  double mx = -kInf;
  for (const auto& d : draws) mx = std::max(mx, d.log_weight);
  double sw = 0.0, swf = 0.0;
  std::vector<double> w(draws.size());
  for (std::size_t i = 0; i < draws.size(); ++i) {
    w[i] = std::exp(draws[i].log_weight - mx);
    sw += w[i];
    swf += w[i] * f[i];
  }
  *value = swf / sw;
  double v = 0.0;
  for (std::size_t i = 0; i < draws.size(); ++i) v += w[i] * w[i] * (f[i] - *value) * (f[i] - *value);
  *se = std::sqrt(v) / sw;
}

}  // namespace

McEstimate mc_risk(const GeneratorConfig& config, const CensoringCalibration& cal, const History& h, double delta,
                   int draws, std::uint64_t seed) {
  const double s = h.prediction_time;
  const auto ds = weighted_draws(config, cal, h, s, draws, seed);
  const int J = config.n_event_types;
  McEstimate out{Eigen::VectorXd(J + 1), Eigen::VectorXd(J + 1)};
  std::vector<double> f(ds.size());
  for (int j = 0; j <= J; ++j) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const bool in = ds[i].u <= s + delta && !ds[i].lts;
      f[i] = j < J ? (in && ds[i].j == j + 1 ? 1.0 : 0.0) : (in ? 0.0 : 1.0);
    }
    ratio_estimate(ds, f, &out.value(j), &out.se(j));
  }
  return out;
}

McEstimate mc_forecast_mean(const GeneratorConfig& config, const CensoringCalibration& cal, const History& h,
                            int biomarker, double t, int draws, std::uint64_t seed) {
  const auto ds = weighted_draws(config, cal, h, t, draws, seed);
  const TrueParameters& tr = config.truth;
  const int J = config.n_event_types, m = biomarker;
  const HistoryGaussian gm(h, tr.main);
  std::optional<HistoryGaussian> gl;
  if (config.variant == Variant::TP) gl.emplace(h, tr.lts);
  // Conditional mean given (T, D) is affine in the feature vector.
  auto cond_mean = [&](const HistoryGaussian& g, const LmmParameters& lmm, const Eigen::VectorXd& x) {
    const double mu_t = (lmm.coefficients.row(2 * m) + t * lmm.coefficients.row(2 * m + 1)).dot(x);
    if (g.size() == 0) return mu_t;
    return mu_t + g.chol.solve(g.cross(m)).dot(g.y() - g.design * x);
  };
  std::vector<double> f(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    f[i] = ds[i].lts ? cond_mean(*gl, tr.lts, lts_features(h.covariates))
                     : cond_mean(gm, tr.main, main_features(J, h.covariates, ds[i].u, ds[i].j));
  }
  McEstimate out{Eigen::VectorXd(1), Eigen::VectorXd(1)};
  ratio_estimate(ds, f, &out.value(0), &out.se(0));
  return out;
}

// ---------------------------------------------------------------------------

McStudyResult run_mc_study(const GeneratorConfig& generator, const McStudyOptions& options) {
  if (options.replicates < 2) throw Error(ErrorCode::InvalidArgument, "an MC study needs at least 2 replicates");
  const CensoringCalibration cal = calibrate_censoring(generator);
  ModelConfig mc = options.model;
  mc.variant = generator.variant;
  if (generator.variant == Variant::TP) mc.tau_max = cal.tau_max;

  const Eigen::VectorXd truth = true_longitudinal_coefficients(generator);
  const std::vector<std::string> names = longitudinal_coefficient_names(true_model(generator, cal));
  int lts_offset = 0;
  {
    LongitudinalFit f;
    f.main = generator.truth.main;
    longitudinal_coefficients(f, &lts_offset);
  }

  struct Rep {
    std::optional<Eigen::VectorXd> cca, em;
    bool converged = false;
    int iterations = 0;
    double censoring = 0.0, admin = 0.0;
    std::string error;
  };
  const auto R = static_cast<std::size_t>(options.replicates);
  std::vector<Rep> reps(R);
  parallel_for(R, options.workers, [&](std::size_t r) {
    Rep& rep = reps[r];
    try {
      GeneratorConfig g = generator;
      g.seed = stream_seed(options.seed, r);
      const SimulatedCohort sim = simulate_cohort(g, cal);
      rep.censoring = sim.censoring_fraction;
      rep.admin = sim.admin_fraction;
      const Dataset& data = sim.data;
      const LongitudinalSpec spec = make_spec(data, mc);
      const SurvivalFit surv = fit_survival(data, mc.survival);
      const LongitudinalFit cca = fit_cca(data, spec, mc.variant, mc.lmm);
      rep.cca = longitudinal_coefficients(cca, nullptr);
      const EmResult em = em_fit(data, spec, surv, cca, mc.variant, mc.quadrature, mc.em, 1, true);
      rep.em = longitudinal_coefficients(em.fit, nullptr);
      rep.converged = em.converged;
      rep.iterations = em.iterations;
    } catch (const std::exception& e) {
      rep.error = e.what();
      rep.cca.reset();
      rep.em.reset();
    }
  });

  McStudyResult out;
  out.replicates = options.replicates;
  std::vector<const Rep*> ok;
  for (std::size_t r = 0; r < R; ++r) {
    out.mean_censoring += reps[r].censoring / static_cast<double>(R);
    out.mean_admin += reps[r].admin / static_cast<double>(R);
    if (reps[r].em) {
      ok.push_back(&reps[r]);
      out.converged += reps[r].converged;
      out.mean_em_iterations += reps[r].iterations;
      out.max_em_iterations = std::max(out.max_em_iterations, static_cast<double>(reps[r].iterations));
    } else {
      ++out.failures;
      out.failure_messages.push_back("replicate " + std::to_string(r) + ": " + reps[r].error);
    }
  }
  if (ok.size() < 2) {
    throw Error(ErrorCode::TooManyFailures, std::to_string(out.failures) + " of " + std::to_string(R) +
                                                " replicates failed" +
                                                (out.failure_messages.empty() ? "" : "; first: " + out.failure_messages[0]));
  }
  out.mean_em_iterations /= static_cast<double>(ok.size());

  const auto n_ok = static_cast<double>(ok.size());
  for (Eigen::Index k = 0; k < truth.size(); ++k) {
    McParameterRow row;
    row.name = names[static_cast<std::size_t>(k)];
    row.truth = truth(k);
    row.lts = k >= lts_offset;
    double sc = 0.0, se = 0.0;
    for (const Rep* r : ok) {
      sc += (*r->cca)(k);
      se += (*r->em)(k);
    }
    row.mean_cca = sc / n_ok;
    row.mean_em = se / n_ok;
    double vc = 0.0, ve = 0.0;
    for (const Rep* r : ok) {
      vc += std::pow((*r->cca)(k) - row.mean_cca, 2);
      ve += std::pow((*r->em)(k) - row.mean_em, 2);
    }
    row.sd_cca = std::sqrt(vc / (n_ok - 1.0));
    row.sd_em = std::sqrt(ve / (n_ok - 1.0));
    const double nan = std::numeric_limits<double>::quiet_NaN();
    row.bias_cca = row.truth != 0.0 ? 100.0 * (row.mean_cca - row.truth) / std::abs(row.truth) : nan;
    row.bias_em = row.truth != 0.0 ? 100.0 * (row.mean_em - row.truth) / std::abs(row.truth) : nan;
    row.relative_efficiency = row.sd_cca > 0.0 ? row.sd_em / row.sd_cca : nan;
    out.rows.push_back(std::move(row));
  }
  return out;
}

void write_mc_study_csv(const McStudyResult& result, std::ostream& out) {
  out << "parameter,submodel,truth,mean_cca,mean_em,pct_bias_cca,pct_bias_em,sd_cca,sd_em,relative_efficiency\n";
  for (const auto& r : result.rows) {
    out << r.name << ',' << (r.lts ? "lts" : "main") << ',' << format_double(r.truth) << ','
        << format_double(r.mean_cca) << ',' << format_double(r.mean_em) << ',' << format_double(r.bias_cca) << ','
        << format_double(r.bias_em) << ',' << format_double(r.sd_cca) << ',' << format_double(r.sd_em) << ','
        << format_double(r.relative_efficiency) << '\n';
  }
}

}  // namespace crbjm
