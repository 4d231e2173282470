#include "crbjm/estimation.hpp"

#include "crbjm/error.hpp"
#include "crbjm/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <random>

namespace crbjm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

double coefficient_change(const LongitudinalFit& a, const LongitudinalFit& b) {
  double d = max_abs_diff(a.main.coefficients, b.main.coefficients);
  if (a.lts && b.lts) d = std::max(d, max_abs_diff(a.lts->coefficients, b.lts->coefficients));
  return d;
}

FeatureMoments unit_moments(const Eigen::VectorXd& x) {
  FeatureMoments m(static_cast<int>(x.size()));
  m.add(x, 1.0);
  return m;
}

}  // namespace

std::string to_string(FitMethod m) { return m == FitMethod::CCA ? "cca" : "em"; }

FitMethod parse_fit_method(const std::string& text) {
  if (text == "cca") return FitMethod::CCA;
  if (text == "em") return FitMethod::EM;
  throw Error(ErrorCode::ConfigError, "method must be 'cca' or 'em', got '" + text + "'");
}

LongitudinalSpec make_spec(const Dataset& data, const ModelConfig& config) {
  LongitudinalSpec spec;
  spec.n_biomarkers = data.n_biomarkers();
  spec.n_covariates = data.n_covariates();
  spec.n_event_types = data.n_event_types();
  spec.trajectory_degree = config.trajectory_degree;
  spec.transform = config.transform;
  spec.random_effects = config.random_effects;
  spec.terms = config.terms;
  if (spec.trajectory_degree < 0) throw Error(ErrorCode::ConfigError, "trajectory degree must be >= 0");
  if (spec.random_effects == RandomEffects::InterceptSlope && spec.trajectory_degree < 1) {
    throw Error(ErrorCode::ConfigError, "a random slope needs trajectory degree >= 1");
  }
  return spec;
}

// ---------------------------------------------------------------------------

LongitudinalFit fit_cca(const Dataset& data, const LongitudinalSpec& spec, Variant variant,
                        const LmmOptions& options) {
  const LtsSplit split = split_lts(data);
  std::vector<std::size_t> main_idx = split.non_lts;
  if (variant == Variant::EX) {
    for (auto i : split.lts) {
      if (!data[i].censored()) main_idx.push_back(i);
    }
    std::sort(main_idx.begin(), main_idx.end());
  }

  auto collect = [&](const std::vector<std::size_t>& idx, std::vector<MeasurementLayout>& layouts,
                     std::vector<Eigen::VectorXd>& xs, bool lts) {
    for (auto i : idx) {
      const Subject& s = data[i];
      if (s.n_measurements() == 0) continue;
      layouts.push_back(MeasurementLayout::build(spec, s.measurements));
      xs.push_back(lts ? spec.lts_features(s.covariates)
                       : spec.features(s.covariates, s.observed_time, s.event_type));
    }
  };
  auto fit_stratum = [&](const std::vector<std::size_t>& idx, int n_features, bool lts) {
    std::vector<MeasurementLayout> layouts;
    std::vector<Eigen::VectorXd> xs;
    collect(idx, layouts, xs, lts);
    const std::size_t needed = static_cast<std::size_t>(spec.n_rows() * n_features) + 2;
    if (layouts.size() < needed) {
      throw Error(ErrorCode::TooFewCompleteCases,
                  std::string(lts ? "LTS stratum (T > tau_max)" : "main model") + " has " +
                      std::to_string(layouts.size()) + " complete cases with measurements, needs " +
                      std::to_string(needed));
    }
    std::vector<LmmObservation> obs;
    obs.reserve(layouts.size());
    for (std::size_t k = 0; k < layouts.size(); ++k) obs.push_back({&layouts[k], unit_moments(xs[k])});
    return fit_lmm(obs, spec.n_rows(), n_features, spec, std::nullopt, options);
  };

  LongitudinalFit fit;
  fit.main = fit_stratum(main_idx, spec.n_features(), false);
  if (variant == Variant::TP) fit.lts = fit_stratum(split.lts, spec.n_lts_features(), true);
  return fit;
}

// ---------------------------------------------------------------------------
// EM

struct EmProblem::Impl {
  const Dataset& data;
  LongitudinalSpec spec;
  Variant variant;
  QuadratureConfig quadrature;

  std::vector<MeasurementLayout> layouts;  // all subjects
  std::vector<std::size_t> uncensored;     // point mass at (T_i, D_i)
  std::vector<std::size_t> censored;       // posterior over cells
  std::vector<std::size_t> lts;            // TP: known T_i > tau_max
  std::vector<Eigen::VectorXd> x_uncensored;

  std::vector<QuadratureGrid> grids;
  std::vector<Eigen::VectorXd> midpoints;
  std::vector<Eigen::MatrixXd> log_mass;  // cells x J
  std::vector<double> log_tail_mass;      // -inf when the subject has no tail cell

  // Kernels depend on (Omega, sigma^2) only, so they are cached per value.
  struct KernelCache {
    LmmParameters key;
    std::vector<SubjectKernel> kernels;  // indexed like `layouts`
    std::optional<GlsAccumulator> fixed;
    bool valid = false;
  };
  mutable std::mutex mu;
  mutable KernelCache main_cache;
  mutable KernelCache lts_cache;

  Impl(const Dataset& d, const LongitudinalSpec& s, const SurvivalFit& survival, Variant v,
       const QuadratureConfig& q)
      : data(d), spec(s), variant(v), quadrature(q) {
    layouts.reserve(data.size());
    for (const auto& subj : data.subjects()) layouts.push_back(MeasurementLayout::build(spec, subj.measurements));

    const double tau = data.tau_max();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Subject& subj = data[i];
      if (variant == Variant::TP && beyond_tau(subj, tau)) {
        lts.push_back(i);
      } else if (subj.censored()) {
        censored.push_back(i);
      } else {
        uncensored.push_back(i);
        x_uncensored.push_back(spec.features(subj.covariates, subj.observed_time, subj.event_type));
      }
    }

    const int J = data.n_event_types();
    grids.resize(censored.size());
    midpoints.resize(censored.size());
    log_mass.resize(censored.size());
    log_tail_mass.assign(censored.size(), -kInf);
    for (std::size_t c = 0; c < censored.size(); ++c) {
      const Subject& subj = data[censored[c]];
      const QuadratureGrid grid = build_grid(subj.observed_time, tau, quadrature.width, variant, quadrature.t_end_ex);
      const int n_cells = variant == Variant::TP ? grid.size() - 1 : grid.size();
      Eigen::VectorXd mids(n_cells);
      Eigen::MatrixXd lm(n_cells, J);
      for (int k = 0; k < n_cells; ++k) {
        const double a = grid.lower(k), b = grid.upper(k);
        const double u = std::isinf(b) ? a + 0.5 * quadrature.width : grid.midpoint(k);
        mids(k) = u;
        const double lt = log_interval_mass(survival, a, b, subj.covariates);
        const Eigen::VectorXd p = event_type_probs(survival, u, subj.covariates);
        for (int j = 0; j < J; ++j) lm(k, j) = lt + std::log(p(j));
      }
      if (variant == Variant::TP) {
        log_tail_mass[c] = log_interval_mass(survival, grid.lower(grid.size() - 1), kInf, subj.covariates);
      }
      grids[c] = grid;
      midpoints[c] = std::move(mids);
      log_mass[c] = std::move(lm);
    }
  }

  static bool same_variance(const LmmParameters& a, const LmmParameters& b) {
    return a.omega.rows() == b.omega.rows() && a.omega == b.omega &&
           a.residual_variances == b.residual_variances;
  }

  const KernelCache& main_kernels(const LmmParameters& p) const {
    std::lock_guard<std::mutex> lock(mu);
    if (!main_cache.valid || !same_variance(main_cache.key, p)) {
      main_cache.key = p;
      main_cache.kernels.assign(layouts.size(), SubjectKernel{});
      GlsAccumulator acc(spec.n_rows(), spec.n_features());
      for (std::size_t k = 0; k < uncensored.size(); ++k) {
        const std::size_t i = uncensored[k];
        main_cache.kernels[i] = SubjectKernel::build(layouts[i], p.omega, p.residual_variances);
        acc.add(main_cache.kernels[i], unit_moments(x_uncensored[k]));
      }
      for (auto i : censored) main_cache.kernels[i] = SubjectKernel::build(layouts[i], p.omega, p.residual_variances);
      main_cache.fixed = acc;
      main_cache.valid = true;
    }
    return main_cache;
  }

  const KernelCache& lts_kernels(const LmmParameters& p) const {
    std::lock_guard<std::mutex> lock(mu);
    if (!lts_cache.valid || !same_variance(lts_cache.key, p)) {
      lts_cache.key = p;
      lts_cache.kernels.assign(layouts.size(), SubjectKernel{});
      GlsAccumulator acc(spec.n_rows(), spec.n_lts_features());
      for (auto i : lts) {
        lts_cache.kernels[i] = SubjectKernel::build(layouts[i], p.omega, p.residual_variances);
        acc.add(lts_cache.kernels[i], unit_moments(spec.lts_features(data[i].covariates)));
      }
      for (auto i : censored) lts_cache.kernels[i] = SubjectKernel::build(layouts[i], p.omega, p.residual_variances);
      lts_cache.fixed = acc;
      lts_cache.valid = true;
    }
    return lts_cache;
  }

  void check_fit(const LongitudinalFit& fit) const {
    if (fit.main.coefficients.rows() != spec.n_rows() || fit.main.coefficients.cols() != spec.n_features()) {
      throw Error(ErrorCode::InvalidArgument, "longitudinal fit does not match the model specification");
    }
    if (variant == Variant::TP && !fit.lts) throw Error(ErrorCode::InvalidArgument, "TP fit lacks the LTS model");
  }

  // Unnormalized log cell masses of censored subject c, plus the tail.
  void log_cells(std::size_t c, const KernelProjection& main, const KernelProjection* lts_proj,
                 Eigen::MatrixXd& out, double& tail) const {
    const Subject& subj = data[censored[c]];
    const Eigen::MatrixXd& lm = log_mass[c];
    out.resize(lm.rows(), lm.cols());
    for (int k = 0; k < lm.rows(); ++k) {
      for (int j = 0; j < lm.cols(); ++j) {
        out(k, j) = lm(k, j) == -kInf ? -kInf
                                      : lm(k, j) + main.loglik(spec.features(subj.covariates, midpoints[c](k), j + 1));
      }
    }
    tail = -kInf;
    if (lts_proj && log_tail_mass[c] > -kInf) {
      tail = log_tail_mass[c] + lts_proj->loglik(spec.lts_features(subj.covariates));
    }
  }
};

EmProblem::EmProblem(const Dataset& data, const LongitudinalSpec& spec, const SurvivalFit& survival, Variant variant,
                     const QuadratureConfig& quadrature)
    : impl_(new Impl(data, spec, survival, variant, quadrature)) {}

EmProblem::~EmProblem() { delete impl_; }

std::size_t EmProblem::n_censored() const { return impl_->censored.size(); }

PosteriorWeights EmProblem::e_step(const LongitudinalFit& fit, int workers) const {
  const Impl& p = *impl_;
  p.check_fit(fit);
  const auto& mk = p.main_kernels(fit.main);
  const auto* lk = fit.lts && p.variant == Variant::TP ? &p.lts_kernels(*fit.lts) : nullptr;

  const std::size_t n = p.censored.size();
  PosteriorWeights w;
  w.subjects = p.censored;
  w.grids = p.grids;
  w.midpoints = p.midpoints;
  w.cells.resize(n);
  w.tail.assign(n, 0.0);
  parallel_for(n, workers, [&](std::size_t c) {
    const std::size_t i = p.censored[c];
    const KernelProjection main(mk.kernels[i], fit.main.coefficients);
    std::optional<KernelProjection> lts;
    if (lk) lts.emplace(lk->kernels[i], fit.lts->coefficients);
    Eigen::MatrixXd cells;
    double tail = -kInf;
    p.log_cells(c, main, lts ? &*lts : nullptr, cells, tail);
    double top = tail;
    if (cells.size() > 0) top = std::max(top, cells.maxCoeff());
    if (!std::isfinite(top)) {
      throw Error(ErrorCode::DegenerateWeights, "all posterior cell masses vanish", p.data[i].id);
    }
    // std::exp per entry: Eigen's vectorized exp maps -inf to a denormal, not 0.
    const Eigen::MatrixXd e = (cells.array() - top).unaryExpr([](double z) { return std::exp(z); }).matrix();
    double t = std::exp(tail - top);
    const double total = e.sum() + t;
    w.cells[c] = e / total;
    w.tail[c] = t / total;
  });
  return w;
}

LongitudinalFit EmProblem::m_step(const PosteriorWeights& weights, const LongitudinalFit& current,
                                  bool reestimate_variance, const LmmOptions& lmm) const {
  const Impl& p = *impl_;
  p.check_fit(current);
  const LongitudinalSpec& spec = p.spec;
  const int C = spec.n_features();
  const int CL = spec.n_lts_features();
  const std::size_t n = p.censored.size();
  if (weights.cells.size() != n) throw Error(ErrorCode::InvalidArgument, "posterior weights do not match problem");

  std::vector<FeatureMoments> main_mom(n, FeatureMoments(C));
  std::vector<FeatureMoments> lts_mom(n, FeatureMoments(CL));
  for (std::size_t c = 0; c < n; ++c) {
    const Subject& subj = p.data[p.censored[c]];
    const Eigen::MatrixXd& wc = weights.cells[c];
    for (int k = 0; k < wc.rows(); ++k) {
      for (int j = 0; j < wc.cols(); ++j) {
        if (wc(k, j) > 0.0) main_mom[c].add(spec.features(subj.covariates, p.midpoints[c](k), j + 1), wc(k, j));
      }
    }
    if (weights.tail[c] > 0.0) lts_mom[c].add(spec.lts_features(subj.covariates), weights.tail[c]);
  }

  LongitudinalFit next = current;
  if (!reestimate_variance) {
    const auto& mk = p.main_kernels(current.main);
    GlsAccumulator acc = *mk.fixed;
    for (std::size_t c = 0; c < n; ++c) acc.add(mk.kernels[p.censored[c]], main_mom[c]);
    next.main.coefficients = acc.solve();
    if (p.variant == Variant::TP) {
      const auto& lk = p.lts_kernels(*current.lts);
      GlsAccumulator lacc = *lk.fixed;
      for (std::size_t c = 0; c < n; ++c) lacc.add(lk.kernels[p.censored[c]], lts_mom[c]);
      next.lts->coefficients = lacc.solve();
    }
    return next;
  }

  std::vector<LmmObservation> obs;
  for (std::size_t k = 0; k < p.uncensored.size(); ++k) {
    obs.push_back({&p.layouts[p.uncensored[k]], unit_moments(p.x_uncensored[k])});
  }
  for (std::size_t c = 0; c < n; ++c) obs.push_back({&p.layouts[p.censored[c]], main_mom[c]});
  next.main = fit_lmm(obs, spec.n_rows(), C, spec, current.main, lmm);
  if (p.variant == Variant::TP) {
    std::vector<LmmObservation> lobs;
    for (auto i : p.lts) lobs.push_back({&p.layouts[i], unit_moments(spec.lts_features(p.data[i].covariates))});
    for (std::size_t c = 0; c < n; ++c) lobs.push_back({&p.layouts[p.censored[c]], lts_mom[c]});
    next.lts = fit_lmm(lobs, spec.n_rows(), CL, spec, *current.lts, lmm);
  }
  return next;
}

double EmProblem::objective(const LongitudinalFit& fit, int workers) const {
  const Impl& p = *impl_;
  p.check_fit(fit);
  const auto& mk = p.main_kernels(fit.main);
  const auto* lk = fit.lts && p.variant == Variant::TP ? &p.lts_kernels(*fit.lts) : nullptr;

  double total = 0.0;
  for (std::size_t k = 0; k < p.uncensored.size(); ++k) {
    total += KernelProjection(mk.kernels[p.uncensored[k]], fit.main.coefficients).loglik(p.x_uncensored[k]);
  }
  if (lk) {
    for (auto i : p.lts) {
      total += KernelProjection(lk->kernels[i], fit.lts->coefficients).loglik(p.spec.lts_features(p.data[i].covariates));
    }
  }
  std::vector<double> per(p.censored.size(), 0.0);
  parallel_for(p.censored.size(), workers, [&](std::size_t c) {
    const std::size_t i = p.censored[c];
    const KernelProjection main(mk.kernels[i], fit.main.coefficients);
    std::optional<KernelProjection> lts;
    if (lk) lts.emplace(lk->kernels[i], fit.lts->coefficients);
    Eigen::MatrixXd cells;
    double tail = -kInf;
    p.log_cells(c, main, lts ? &*lts : nullptr, cells, tail);
    std::vector<double> v(cells.data(), cells.data() + cells.size());
    v.push_back(tail);
    per[c] = log_sum_exp(v);
  });
  for (double v : per) total += v;
  return total;
}

PosteriorWeights e_step(const Dataset& data, const LongitudinalSpec& spec, const SurvivalFit& survival,
                        const LongitudinalFit& current, Variant variant, const QuadratureConfig& quadrature) {
  const EmProblem problem(data, spec, survival, variant, quadrature);
  return problem.e_step(current);
}

EmResult em_fit(const Dataset& data, const LongitudinalSpec& spec, const SurvivalFit& survival,
                const LongitudinalFit& init, Variant variant, const QuadratureConfig& quadrature,
                const EmOptions& options, int workers, bool allow_nonconvergence) {
  if (options.max_iter < 1) throw Error(ErrorCode::InvalidArgument, "EM max_iter must be >= 1");
  const EmProblem problem(data, spec, survival, variant, quadrature);
  EmResult result;
  result.fit = init;
  result.trace.push_back({0, problem.objective(init, workers), 0.0});
  for (int it = 1; it <= options.max_iter; ++it) {
    const PosteriorWeights w = problem.e_step(result.fit, workers);
    LongitudinalFit next = problem.m_step(w, result.fit, options.reestimate_variance);
    const double change = coefficient_change(next, result.fit);
    result.fit = std::move(next);
    result.iterations = it;
    result.final_change = change;
    result.trace.push_back({it, problem.objective(result.fit, workers), change});
    if (change < options.tol) {
      result.converged = true;
      break;
    }
  }
  if (!result.converged && !allow_nonconvergence) {
    throw Error(ErrorCode::NoConvergence, "EM did not converge in " + std::to_string(options.max_iter) +
                                              " iterations (last change " + format_double(result.final_change) +
                                              ")");
  }
  return result;
}

// ---------------------------------------------------------------------------

FitResult fit_model(const Dataset& input, const ModelConfig& config, FitMethod method, std::uint64_t seed,
                    int workers) {
  std::optional<Dataset> rebuilt;
  if (config.tau_max && *config.tau_max != input.tau_max()) {
    rebuilt.emplace(input.subjects(), input.n_event_types(), input.covariate_names(), input.biomarker_names(),
                    config.tau_max);
  }
  const Dataset& data = rebuilt ? *rebuilt : input;

  FitResult out;
  CrBjmModel& model = out.model;
  model.variant = config.variant;
  model.spec = make_spec(data, config);
  model.survival = fit_survival(data, config.survival);
  model.tau_max = data.tau_max();
  model.quadrature = config.quadrature;
  model.covariate_names = data.covariate_names();
  model.biomarker_names = data.biomarker_names();
  model.provenance.dataset_hash = data.content_hash();
  model.provenance.seed = seed;
  model.provenance.method = method;

  out.cca = fit_cca(data, model.spec, config.variant, config.lmm);
  if (method == FitMethod::CCA) {
    model.longitudinal = out.cca;
    return out;
  }
  EmResult em = em_fit(data, model.spec, model.survival, out.cca, config.variant, config.quadrature, config.em,
                       workers);
  model.longitudinal = std::move(em.fit);
  model.provenance.iterations = em.iterations;
  model.provenance.final_change = em.final_change;
  out.trace = std::move(em.trace);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void append_lmm(const LmmParameters& p, const std::string& prefix, const std::vector<std::string>& features,
                const LongitudinalSpec& spec, const std::vector<std::string>& biomarkers,
                std::vector<std::string>* names, std::vector<double>* values) {
  for (int a = 0; a < p.coefficients.rows(); ++a) {
    const int m = a / spec.n_basis(), l = a % spec.n_basis();
    for (int c = 0; c < p.coefficients.cols(); ++c) {
      if (names) {
        names->push_back(prefix + biomarkers[static_cast<std::size_t>(m)] + ".t" + std::to_string(l) + "." +
                         features[static_cast<std::size_t>(c)]);
      }
      if (values) values->push_back(p.coefficients(a, c));
    }
  }
  for (int c = 0; c < p.omega.cols(); ++c) {
    for (int r = c; r < p.omega.rows(); ++r) {
      if (names) names->push_back(prefix + "omega[" + std::to_string(r + 1) + "," + std::to_string(c + 1) + "]");
      if (values) values->push_back(p.omega(r, c));
    }
  }
  for (int m = 0; m < p.residual_variances.size(); ++m) {
    if (names) names->push_back(prefix + "sigma2." + biomarkers[static_cast<std::size_t>(m)]);
    if (values) values->push_back(p.residual_variances(m));
  }
}

void flatten(const CrBjmModel& model, std::vector<std::string>* names, std::vector<double>* values) {
  const auto& cov = model.covariate_names;
  if (const auto* w = std::get_if<WeibullFit>(&model.survival.time_model)) {
    for (int k = 0; k < w->coefficients.size(); ++k) {
      if (names) names->push_back("surv.eta." + (k == 0 ? std::string("intercept") : cov[static_cast<std::size_t>(k - 1)]));
      if (values) values->push_back(w->coefficients(k));
    }
    if (names) names->push_back("surv.shape");
    if (values) values->push_back(w->shape);
  } else {
    const auto& c = std::get<CoxFit>(model.survival.time_model);
    for (int k = 0; k < c.coefficients.size(); ++k) {
      if (names) names->push_back("surv.gamma." + cov[static_cast<std::size_t>(k)]);
      if (values) values->push_back(c.coefficients(k));
    }
  }
  if (const auto& et = model.survival.event_type_model) {
    const int nb = et->basis.dimension();
    for (int j = 0; j < et->coefficients.rows(); ++j) {
      for (int c = 0; c < et->coefficients.cols(); ++c) {
        if (names) {
          const std::string feat = c < nb ? "B" + std::to_string(c + 1) : cov[static_cast<std::size_t>(c - nb)];
          names->push_back("type" + std::to_string(j + 1) + "." + feat);
        }
        if (values) values->push_back(et->coefficients(j, c));
      }
    }
  }
  append_lmm(model.longitudinal.main, "long.", model.spec.feature_names(cov), model.spec, model.biomarker_names, names,
             values);
  if (model.longitudinal.lts) {
    append_lmm(*model.longitudinal.lts, "lts.", model.spec.lts_feature_names(cov), model.spec,
               model.biomarker_names, names, values);
  }
}

}  // namespace

std::vector<std::string> parameter_names(const CrBjmModel& model) {
  std::vector<std::string> names;
  flatten(model, &names, nullptr);
  return names;
}

Eigen::VectorXd parameter_vector(const CrBjmModel& model) {
  std::vector<double> values;
  flatten(model, nullptr, &values);
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

Eigen::VectorXd longitudinal_coefficients(const LongitudinalFit& fit, int* lts_offset) {
  const Eigen::Index main = fit.main.coefficients.size();
  const Eigen::Index lts = fit.lts ? fit.lts->coefficients.size() : 0;
  Eigen::VectorXd out(main + lts);
  // Row-major so the order matches parameter_names.
  Eigen::Index k = 0;
  for (int a = 0; a < fit.main.coefficients.rows(); ++a) {
    for (int c = 0; c < fit.main.coefficients.cols(); ++c) out(k++) = fit.main.coefficients(a, c);
  }
  if (lts_offset) *lts_offset = static_cast<int>(main);
  if (fit.lts) {
    for (int a = 0; a < fit.lts->coefficients.rows(); ++a) {
      for (int c = 0; c < fit.lts->coefficients.cols(); ++c) out(k++) = fit.lts->coefficients(a, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

BootstrapResult bootstrap(const Dataset& data, const ModelConfig& config, FitMethod method, int reps,
                          std::uint64_t seed, int workers, const ReplicateFit& fit) {
  if (reps < 2) throw Error(ErrorCode::InvalidArgument, "bootstrap needs reps >= 2");
  if (data.size() == 0) throw Error(ErrorCode::InvalidArgument, "bootstrap needs a non-empty dataset");

  // Replicates keep the original tau_max so every refit has the same parameter layout.
  ModelConfig rep_config = config;
  rep_config.tau_max = config.tau_max.value_or(data.tau_max());
  const ReplicateFit refit = fit ? fit : ReplicateFit([&](const Dataset& d) {
    return parameter_vector(fit_model(d, rep_config, method, seed, 1).model);
  });

  BootstrapResult result;
  result.reps = reps;
  if (!fit) {
    const CrBjmModel full = fit_model(data, config, method, seed, workers).model;
    result.names = parameter_names(full);
    result.estimate = parameter_vector(full);
  }

  std::vector<std::optional<Eigen::VectorXd>> draws(static_cast<std::size_t>(reps));
  std::vector<std::string> errors(static_cast<std::size_t>(reps));
  parallel_for(static_cast<std::size_t>(reps), workers, [&](std::size_t r) {
    std::mt19937_64 rng(stream_seed(seed, r));
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::vector<std::size_t> idx(data.size());
    for (auto& i : idx) i = pick(rng);
    try {
      draws[r] = refit(data.subset(idx));
    } catch (const std::exception& e) {
      errors[r] = e.what();
    }
  });

  std::vector<Eigen::VectorXd> ok;
  for (std::size_t r = 0; r < draws.size(); ++r) {
    if (draws[r]) {
      ok.push_back(*draws[r]);
    } else {
      ++result.failures;
      result.failure_messages.push_back("replicate " + std::to_string(r) + ": " + errors[r]);
    }
  }
  if (result.failures * 5 > reps || ok.size() < 2) {
    throw Error(ErrorCode::TooManyFailures, std::to_string(result.failures) + " of " + std::to_string(reps) +
                                                " bootstrap replicates failed" +
                                                (result.failure_messages.empty() ? "" : "; first: " + result.failure_messages.front()));
  }
  const Eigen::Index p = ok.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
  for (const auto& d : ok) {
    if (d.size() != p) throw Error(ErrorCode::InvalidArgument, "bootstrap replicates returned different lengths");
    mean += d;
  }
  mean /= static_cast<double>(ok.size());
  Eigen::VectorXd ss = Eigen::VectorXd::Zero(p);
  for (const auto& d : ok) ss += (d - mean).cwiseAbs2();
  result.sd = (ss / static_cast<double>(ok.size() - 1)).cwiseSqrt();
  return result;
}

}  // namespace crbjm
