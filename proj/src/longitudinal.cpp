#include "crbjm/longitudinal.hpp"

#include "crbjm/error.hpp"

#include <cmath>
#include <limits>

namespace crbjm {

std::string to_string(Transform t) { return t == Transform::Identity ? "identity" : "log"; }
std::string to_string(RandomEffects r) { return r == RandomEffects::Intercept ? "intercept" : "intercept_slope"; }

Transform parse_transform(const std::string& text) {
  if (text == "identity") return Transform::Identity;
  if (text == "log") return Transform::Log;
  throw Error(ErrorCode::ConfigError, "transform must be 'identity' or 'log', got '" + text + "'");
}

RandomEffects parse_random_effects(const std::string& text) {
  if (text == "intercept") return RandomEffects::Intercept;
  if (text == "intercept_slope") return RandomEffects::InterceptSlope;
  throw Error(ErrorCode::ConfigError,
              "random_effects must be 'intercept' or 'intercept_slope', got '" + text + "'");
}

// ---------------------------------------------------------------------------

int LongitudinalSpec::n_features() const noexcept {
  const int types = n_event_types - 1;
  int c = 1;
  if (terms.covariates) c += n_covariates;
  if (terms.event_type) c += types;
  if (terms.event_time) c += 1;
  if (terms.time_by_type) c += types;
  return c;
}

double LongitudinalSpec::phi(double u) const {
  if (transform == Transform::Identity) return u;
  if (!(u > 0.0)) throw Error(ErrorCode::NonPositiveEventTime, "log transform needs a positive event time");
  return std::log(u);
}

Eigen::VectorXd LongitudinalSpec::features(const Eigen::VectorXd& v, double u, int j) const {
  Eigen::VectorXd x(n_features());
  const int types = n_event_types - 1;
  const double f = phi(u);
  int c = 0;
  x(c++) = 1.0;
  if (terms.covariates) {
    x.segment(c, n_covariates) = v;
    c += n_covariates;
  }
  if (terms.event_type) {
    for (int k = 1; k <= types; ++k) x(c++) = j == k ? 1.0 : 0.0;
  }
  if (terms.event_time) x(c++) = f;
  if (terms.time_by_type) {
    for (int k = 1; k <= types; ++k) x(c++) = j == k ? f : 0.0;
  }
  return x;
}

Eigen::VectorXd LongitudinalSpec::lts_features(const Eigen::VectorXd& v) const {
  Eigen::VectorXd x(n_lts_features());
  x(0) = 1.0;
  x.tail(n_covariates) = v;
  return x;
}

std::vector<std::string> LongitudinalSpec::feature_names(const std::vector<std::string>& covariate_names) const {
  std::vector<std::string> names{"intercept"};
  const int types = n_event_types - 1;
  if (terms.covariates) names.insert(names.end(), covariate_names.begin(), covariate_names.end());
  if (terms.event_type) {
    for (int k = 1; k <= types; ++k) names.push_back("type" + std::to_string(k));
  }
  const std::string t = transform == Transform::Identity ? "T" : "logT";
  if (terms.event_time) names.push_back(t);
  if (terms.time_by_type) {
    for (int k = 1; k <= types; ++k) names.push_back(t + ":type" + std::to_string(k));
  }
  return names;
}

std::vector<std::string> LongitudinalSpec::lts_feature_names(const std::vector<std::string>& covariate_names) const {
  std::vector<std::string> names{"intercept"};
  names.insert(names.end(), covariate_names.begin(), covariate_names.end());
  return names;
}

// ---------------------------------------------------------------------------

Eigen::VectorXd trajectory_row(const LongitudinalSpec& spec, int m, double t) {
  Eigen::VectorXd r = Eigen::VectorXd::Zero(spec.n_rows());
  double g = 1.0;
  for (int l = 0; l < spec.n_basis(); ++l, g *= t) r(m * spec.n_basis() + l) = g;
  return r;
}

Eigen::VectorXd random_effect_row(const LongitudinalSpec& spec, int m, double t) {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(spec.n_random());
  const int q = spec.n_random_per_biomarker();
  z(m * q) = 1.0;
  if (q == 2) z(m * q + 1) = t;
  return z;
}

MeasurementLayout MeasurementLayout::build(const LongitudinalSpec& spec, const MeasurementSeries& series) {
  MeasurementLayout layout;
  std::size_t n = 0;
  for (const auto& s : series) n += s.size();
  const auto rows = static_cast<Eigen::Index>(n);
  layout.y.resize(rows);
  layout.time.resize(rows);
  layout.R.resize(rows, spec.n_rows());
  layout.Z.resize(rows, spec.n_random());
  Eigen::Index r = 0;
  for (int m = 0; m < static_cast<int>(series.size()); ++m) {
    for (const auto& meas : series[static_cast<std::size_t>(m)]) {
      layout.y(r) = meas.value;
      layout.time(r) = meas.time;
      layout.biomarker.push_back(m);
      layout.R.row(r) = trajectory_row(spec, m, meas.time).transpose();
      layout.Z.row(r) = random_effect_row(spec, m, meas.time).transpose();
      ++r;
    }
  }
  return layout;
}

Design build_design(const LongitudinalSpec& spec, const MeasurementLayout& layout, const Eigen::VectorXd& v,
                    double u, int j) {
  const Eigen::VectorXd x = spec.features(v, u, j);
  const auto c = x.size();
  Design d;
  d.fixed.resize(layout.size(), layout.R.cols() * c);
  for (Eigen::Index a = 0; a < layout.R.cols(); ++a) {
    for (Eigen::Index k = 0; k < c; ++k) d.fixed.col(a * c + k) = layout.R.col(a) * x(k);
  }
  d.random = layout.Z;
  return d;
}

Eigen::MatrixXd marginal_covariance(const MeasurementLayout& layout, const LmmParameters& params) {
  Eigen::MatrixXd cov = layout.Z * params.omega * layout.Z.transpose();
  for (int r = 0; r < layout.size(); ++r) {
    cov(r, r) += params.residual_variances(layout.biomarker[static_cast<std::size_t>(r)]);
  }
  return cov;
}

Moments marginal_moments(const LongitudinalSpec& spec, const LmmParameters& params,
                         const MeasurementLayout& layout, const Eigen::VectorXd& v, double u, int j) {
  if (layout.size() == 0) return {};
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(params.omega, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff())) {
    throw Error(ErrorCode::NonPositiveDefinite, "random-effect covariance is not positive semi-definite");
  }
  if (params.residual_variances.minCoeff() <= 0.0) {
    throw Error(ErrorCode::NonPositiveDefinite, "residual variances must be positive");
  }
  Moments m;
  m.mean = layout.R * params.coefficients * spec.features(v, u, j);
  m.cov = marginal_covariance(layout, params);
  return m;
}

double loglik_given_event(const LongitudinalSpec& spec, const LmmParameters& params,
                          const MeasurementLayout& layout, const Eigen::VectorXd& v, double u, int j) {
  if (layout.size() == 0) return 0.0;
  const Moments m = marginal_moments(spec, params, layout, v, u, j);
  return mvn_logpdf(layout.y, m.mean, m.cov);
}

double loglik_lts(const LongitudinalSpec& spec, const LtsFit& lts, const MeasurementLayout& layout,
                  const Eigen::VectorXd& v) {
  if (layout.size() == 0) return 0.0;
  const Eigen::VectorXd mean = layout.R * lts.coefficients * spec.lts_features(v);
  return mvn_logpdf(layout.y, mean, marginal_covariance(layout, lts));
}

// ---------------------------------------------------------------------------

SubjectKernel SubjectKernel::build(const MeasurementLayout& layout, const Eigen::MatrixXd& omega,
                                   const Eigen::VectorXd& residual_variances) {
  SubjectKernel k;
  k.n = layout.size();
  const auto a = layout.R.cols();
  if (k.n == 0) {
    k.Q = Eigen::MatrixXd::Zero(a, a);
    k.r = Eigen::VectorXd::Zero(a);
    return k;
  }
  Eigen::MatrixXd cov = layout.Z * omega * layout.Z.transpose();
  for (int r = 0; r < k.n; ++r) cov(r, r) += residual_variances(layout.biomarker[static_cast<std::size_t>(r)]);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::NonPositiveDefinite, "marginal covariance is not positive definite");
  const Eigen::MatrixXd lr = llt.matrixL().solve(layout.R);
  const Eigen::VectorXd ly = llt.matrixL().solve(layout.y);
  k.Q = lr.transpose() * lr;
  k.r = lr.transpose() * ly;
  k.c0 = ly.squaredNorm();
  k.logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return k;
}

KernelProjection::KernelProjection(const SubjectKernel& kernel, const Eigen::MatrixXd& coefficients) {
  constant = -0.5 * (kernel.n * kLog2Pi + kernel.logdet + kernel.c0);
  linear = coefficients.transpose() * kernel.r;
  quadratic = coefficients.transpose() * kernel.Q * coefficients;
}

void FeatureMoments::add(const Eigen::VectorXd& x, double w) {
  weight += w;
  first += w * x;
  second.noalias() += w * x * x.transpose();
}

GlsAccumulator::GlsAccumulator(int n_rows, int n_features)
    : rows_(n_rows),
      cols_(n_features),
      normal_(Eigen::MatrixXd::Zero(n_rows * n_features, n_rows * n_features)),
      rhs_(Eigen::VectorXd::Zero(n_rows * n_features)) {}

void GlsAccumulator::add(const SubjectKernel& kernel, const FeatureMoments& moments) {
  if (kernel.n == 0 || moments.weight == 0.0) return;
  for (int a = 0; a < rows_; ++a) {
    rhs_.segment(a * cols_, cols_) += kernel.r(a) * moments.first;
    for (int b = 0; b < rows_; ++b) {
      const double q = kernel.Q(a, b);
      if (q != 0.0) normal_.block(a * cols_, b * cols_, cols_, cols_) += q * moments.second;
    }
  }
}

void GlsAccumulator::merge(const GlsAccumulator& other) {
  normal_ += other.normal_;
  rhs_ += other.rhs_;
}

Eigen::MatrixXd GlsAccumulator::solve() const {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(normal_);
  const Eigen::VectorXd d = ldlt.vectorD().cwiseAbs();
  if (ldlt.info() != Eigen::Success || d.size() == 0 || !(d.minCoeff() > 1e-10 * d.maxCoeff())) {
    throw Error(ErrorCode::RankDeficientDesign, "longitudinal design is rank deficient");
  }
  const Eigen::VectorXd beta = ldlt.solve(rhs_);
  Eigen::MatrixXd coef(rows_, cols_);
  for (int a = 0; a < rows_; ++a) coef.row(a) = beta.segment(a * cols_, cols_).transpose();
  return coef;
}

Eigen::MatrixXd weighted_coef_update(const LongitudinalSpec& spec, const std::vector<WeightedSubject>& subjects,
                                     const Eigen::MatrixXd& omega, const Eigen::VectorXd& residual_variances) {
  GlsAccumulator acc(spec.n_rows(), spec.n_features());
  for (const auto& s : subjects) {
    FeatureMoments mom(spec.n_features());
    for (const auto& row : s.rows) {
      if (row.weight < 0.0) throw Error(ErrorCode::InvalidArgument, "negative pseudo-observation weight");
      mom.add(spec.features(s.covariates, row.u, row.j), row.weight);
    }
    acc.add(SubjectKernel::build(*s.layout, omega, residual_variances), mom);
  }
  return acc.solve();
}

// ---------------------------------------------------------------------------

namespace {

struct CovarianceParam {
  int q = 0;  // random-effect dimension
  int m = 0;  // biomarkers

  int n_omega() const { return q * (q + 1) / 2; }
  int size() const { return n_omega() + m; }

  Eigen::MatrixXd cholesky(const Eigen::VectorXd& psi) const {
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(q, q);
    int k = 0;
    for (int c = 0; c < q; ++c) {
      for (int r = c; r < q; ++r, ++k) l(r, c) = r == c ? std::exp(psi(k)) : psi(k);
    }
    return l;
  }

  Eigen::VectorXd pack(const Eigen::MatrixXd& omega, const Eigen::VectorXd& sigma2) const {
    Eigen::VectorXd psi(size());
    Eigen::LLT<Eigen::MatrixXd> llt(omega);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::NonPositiveDefinite, "initial random-effect covariance");
    const Eigen::MatrixXd l = llt.matrixL();
    int k = 0;
    for (int c = 0; c < q; ++c) {
      for (int r = c; r < q; ++r, ++k) psi(k) = r == c ? std::log(l(r, c)) : l(r, c);
    }
    psi.tail(m) = sigma2.array().log();
    return psi;
  }

  /// dOmega / dpsi_k for the Omega parameters.
  std::vector<Eigen::MatrixXd> omega_derivatives(const Eigen::MatrixXd& l) const {
    std::vector<Eigen::MatrixXd> out;
    for (int c = 0; c < q; ++c) {
      for (int r = c; r < q; ++r) {
        Eigen::MatrixXd dl = Eigen::MatrixXd::Zero(q, q);
        dl(r, c) = r == c ? l(r, c) : 1.0;
        out.push_back(dl * l.transpose() + l * dl.transpose());
      }
    }
    return out;
  }
};

// Expected residual outer product sum_k w_k (y - R B x_k)(y - R B x_k)'.
Eigen::MatrixXd residual_second_moment(const MeasurementLayout& layout, const FeatureMoments& mom,
                                       const Eigen::MatrixXd& coef) {
  const Eigen::MatrixXd rb = layout.R * coef;
  const Eigen::VectorXd m1 = rb * mom.first;
  Eigen::MatrixXd e = mom.weight * layout.y * layout.y.transpose();
  e -= layout.y * m1.transpose() + m1 * layout.y.transpose();
  e += rb * mom.second * rb.transpose();
  return e;
}

}  // namespace

double lmm_loglik(const std::vector<LmmObservation>& data, const LmmParameters& params) {
  double total = 0.0;
  for (const auto& obs : data) {
    const MeasurementLayout& layout = *obs.layout;
    if (layout.size() == 0 || obs.moments.weight == 0.0) continue;
    const Eigen::MatrixXd cov = marginal_covariance(layout, params);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::NonPositiveDefinite, "marginal covariance");
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::MatrixXd e = residual_second_moment(layout, obs.moments, params.coefficients);
    total += -0.5 * (obs.moments.weight * (layout.size() * kLog2Pi + logdet) + llt.solve(e).trace());
  }
  return total;
}

LmmParameters fit_lmm(const std::vector<LmmObservation>& data, int n_rows, int n_features,
                      const LongitudinalSpec& spec, const std::optional<LmmParameters>& init,
                      const LmmOptions& options) {
  const int m_count = spec.n_biomarkers;
  const CovarianceParam param{spec.n_random(), m_count};
  double n_subjects = 0.0;
  std::vector<double> rows_per_biomarker(static_cast<std::size_t>(m_count), 0.0);
  for (const auto& obs : data) {
    if (obs.layout->size() == 0 || obs.moments.weight == 0.0) continue;
    n_subjects += obs.moments.weight;
    for (int b : obs.layout->biomarker) rows_per_biomarker[static_cast<std::size_t>(b)] += obs.moments.weight;
  }
  for (int m = 0; m < m_count; ++m) {
    if (rows_per_biomarker[static_cast<std::size_t>(m)] == 0.0) {
      throw Error(ErrorCode::TooFewCompleteCases, "no measurements of biomarker " + std::to_string(m + 1));
    }
  }

  auto gls = [&](const Eigen::MatrixXd& omega, const Eigen::VectorXd& sigma2) {
    GlsAccumulator acc(n_rows, n_features);
    for (const auto& obs : data) acc.add(SubjectKernel::build(*obs.layout, omega, sigma2), obs.moments);
    return acc.solve();
  };

  Eigen::VectorXd psi0;
  if (init) {
    psi0 = param.pack(init->omega, init->residual_variances);
  } else {
    // Ordinary least squares, then split each biomarker's residual variance
    // evenly between the random intercept and the error.
    const Eigen::MatrixXd coef = gls(Eigen::MatrixXd::Zero(param.q, param.q), Eigen::VectorXd::Ones(m_count));
    Eigen::VectorXd rss = Eigen::VectorXd::Zero(m_count);
    double t2 = 0.0, tw = 0.0;
    for (const auto& obs : data) {
      const MeasurementLayout& layout = *obs.layout;
      if (layout.size() == 0 || obs.moments.weight == 0.0) continue;
      const Eigen::MatrixXd e = residual_second_moment(layout, obs.moments, coef);
      for (int r = 0; r < layout.size(); ++r) {
        rss(layout.biomarker[static_cast<std::size_t>(r)]) += e(r, r);
        t2 += obs.moments.weight * layout.time(r) * layout.time(r);
        tw += obs.moments.weight;
      }
    }
    Eigen::VectorXd var(m_count);
    for (int m = 0; m < m_count; ++m) var(m) = std::max(rss(m) / rows_per_biomarker[static_cast<std::size_t>(m)], 1e-8);
    Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(param.q, param.q);
    const int per = spec.n_random_per_biomarker();
    for (int m = 0; m < m_count; ++m) {
      omega(m * per, m * per) = 0.5 * var(m);
      if (per == 2) omega(m * per + 1, m * per + 1) = 0.05 * var(m) / std::max(1.0, t2 / tw);
    }
    psi0 = param.pack(omega, 0.5 * var);
  }

  const double scale = 1.0 / n_subjects;
  const int np = param.size();
  const int n_om = param.n_omega();
  const Objective objective = [&](const Eigen::VectorXd& psi) {
    Evaluation ev;
    ev.value = -std::numeric_limits<double>::infinity();
    const Eigen::MatrixXd l = param.cholesky(psi);
    const Eigen::MatrixXd omega = l * l.transpose();
    const Eigen::VectorXd sigma2 = psi.tail(m_count).array().exp();
    if (!sigma2.allFinite() || !omega.allFinite()) return ev;
    Eigen::MatrixXd coef;
    try {
      coef = gls(omega, sigma2);
    } catch (const Error&) {
      return ev;
    }
    const std::vector<Eigen::MatrixXd> d_omega = param.omega_derivatives(l);

    double value = 0.0;
    Eigen::MatrixXd g_omega = Eigen::MatrixXd::Zero(param.q, param.q);
    Eigen::VectorXd g_sigma = Eigen::VectorXd::Zero(m_count);
    Eigen::MatrixXd fisher = Eigen::MatrixXd::Zero(np, np);
    for (const auto& obs : data) {
      const MeasurementLayout& layout = *obs.layout;
      const double w = obs.moments.weight;
      if (layout.size() == 0 || w == 0.0) continue;
      const Eigen::MatrixXd cov = marginal_covariance(layout, {coef, omega, sigma2});
      Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() != Eigen::Success) return ev;
      const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(layout.size(), layout.size()));
      const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
      const Eigen::MatrixXd e = residual_second_moment(layout, obs.moments, coef);
      const Eigen::MatrixXd ie = inv * e;
      value += -0.5 * (w * (layout.size() * kLog2Pi + logdet) + ie.trace());

      // dl/dS = (S^-1 E S^-1 - w S^-1) / 2
      const Eigen::MatrixXd g_s = 0.5 * (ie * inv - w * inv);
      g_omega += layout.Z.transpose() * g_s * layout.Z;
      for (int r = 0; r < layout.size(); ++r) g_sigma(layout.biomarker[static_cast<std::size_t>(r)]) += g_s(r, r);

      // Expected information w/2 tr(S^-1 dS_a S^-1 dS_b).
      const Eigen::MatrixXd wz = inv * layout.Z;
      const Eigen::MatrixXd p = layout.Z.transpose() * wz;
      std::vector<Eigen::MatrixXd> pd(static_cast<std::size_t>(n_om));
      for (int a = 0; a < n_om; ++a) pd[static_cast<std::size_t>(a)] = d_omega[static_cast<std::size_t>(a)] * p;
      for (int a = 0; a < n_om; ++a) {
        for (int b = a; b < n_om; ++b) {
          const double t = (pd[static_cast<std::size_t>(a)] * pd[static_cast<std::size_t>(b)]).trace();
          fisher(a, b) += 0.5 * w * t;
        }
      }
      for (int m = 0; m < m_count; ++m) {
        Eigen::MatrixXd wzm = Eigen::MatrixXd::Zero(param.q, param.q);
        for (int r = 0; r < layout.size(); ++r) {
          if (layout.biomarker[static_cast<std::size_t>(r)] == m) wzm += wz.row(r).transpose() * wz.row(r);
        }
        for (int a = 0; a < n_om; ++a) {
          fisher(a, n_om + m) += 0.5 * w * sigma2(m) * (d_omega[static_cast<std::size_t>(a)] * wzm).trace();
        }
        for (int m2 = m; m2 < m_count; ++m2) {
          double fro = 0.0;
          for (int r = 0; r < layout.size(); ++r) {
            if (layout.biomarker[static_cast<std::size_t>(r)] != m) continue;
            for (int c = 0; c < layout.size(); ++c) {
              if (layout.biomarker[static_cast<std::size_t>(c)] == m2) fro += inv(r, c) * inv(r, c);
            }
          }
          fisher(n_om + m, n_om + m2) += 0.5 * w * sigma2(m) * sigma2(m2) * fro;
        }
      }
    }
    ev.value = value * scale;
    ev.gradient.resize(np);
    for (int a = 0; a < n_om; ++a) ev.gradient(a) = (g_omega * d_omega[static_cast<std::size_t>(a)]).trace() * scale;
    for (int m = 0; m < m_count; ++m) ev.gradient(n_om + m) = g_sigma(m) * sigma2(m) * scale;
    fisher = fisher.selfadjointView<Eigen::Upper>();
    ev.hessian = -fisher * scale;
    return ev;
  };

  const MaximizeResult r = maximize(objective, psi0, {options.tol, options.max_iter, 40});
  LmmParameters out;
  const Eigen::MatrixXd l = param.cholesky(r.x);
  out.omega = l * l.transpose();
  out.residual_variances = r.x.tail(m_count).array().exp();
  out.coefficients = gls(out.omega, out.residual_variances);
  return out;
}

}  // namespace crbjm
