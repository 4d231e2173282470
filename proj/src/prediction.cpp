#include "crbjm/prediction.hpp"

#include "crbjm/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace crbjm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Conditional law of Y_m(t) given the history: mean = g' B x + offset with
// variance `var`, for each parameter set (main or LTS).
struct ConditionalGaussian {
  Eigen::VectorXd g;
  double offset = 0.0;
  double var = 0.0;
};

ConditionalGaussian conditional(const LongitudinalSpec& spec, const LmmParameters& params,
                                const MeasurementLayout& layout, int m, double t) {
  ConditionalGaussian out;
  const Eigen::VectorXd rt = trajectory_row(spec, m, t);
  const Eigen::VectorXd zt = random_effect_row(spec, m, t);
  out.var = zt.dot(params.omega * zt) + params.residual_variances(m);
  out.g = rt;
  if (layout.size() == 0) return out;
  const Eigen::MatrixXd cov = marginal_covariance(layout, params);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::NonPositiveDefinite, "history covariance");
  const Eigen::VectorXd c = layout.Z * (params.omega * zt);
  const Eigen::VectorXd sc = llt.solve(c);
  out.g = rt - layout.R.transpose() * sc;
  out.offset = sc.dot(layout.y);
  out.var -= c.dot(sc);
  if (!(out.var > 0.0)) throw Error(ErrorCode::NonPositiveDefinite, "conditional forecast variance is not positive");
  return out;
}

struct Component {
  double weight;  // log scale from components(); forecast() turns it into a probability
  double mean;
  double var;
};

}  // namespace

struct Predictor::Impl {
  const CrBjmModel& model;
  History history;
  MeasurementLayout layout;
  KernelProjection main;
  std::optional<KernelProjection> lts;
  QuadratureGrid grid;
  // log weight of each (cell, type) from s; the TP tail cell is type-free.
  Eigen::MatrixXd cell_logw;
  double tail_logw = -kInf;
  double log_den = -kInf;

  Impl(const CrBjmModel& m, History h) : model(m), history(std::move(h)) {
    const double s = history.prediction_time;
    if (!(s >= 0.0)) throw Error(ErrorCode::InvalidArgument, "prediction time must be >= 0");
    if (history.covariates.size() != model.spec.n_covariates) {
      throw Error(ErrorCode::InvalidArgument, "history has the wrong number of covariates");
    }
    if (static_cast<int>(history.measurements.size()) != model.spec.n_biomarkers) {
      throw Error(ErrorCode::InvalidArgument, "history has the wrong number of biomarkers");
    }
    for (const auto& series : history.measurements) {
      for (const auto& meas : series) {
        if (meas.time > s) throw Error(ErrorCode::MeasurementAfterExit, "history has a measurement after s");
      }
    }
    layout = MeasurementLayout::build(model.spec, history.measurements);
    const LongitudinalFit& fit = model.longitudinal;
    main = KernelProjection(SubjectKernel::build(layout, fit.main.omega, fit.main.residual_variances),
                            fit.main.coefficients);
    if (model.variant == Variant::TP) {
      if (!fit.lts) throw Error(ErrorCode::InvalidArgument, "TP model lacks the LTS sub-model");
      lts.emplace(SubjectKernel::build(layout, fit.lts->omega, fit.lts->residual_variances), fit.lts->coefficients);
    }
    grid = build_grid(s, model.tau_max, model.quadrature.prediction_width, model.variant, model.quadrature.t_end_ex);
    const int J = model.spec.n_event_types;
    const int n_cells = typed_cells();
    cell_logw.resize(n_cells, J);
    for (int k = 0; k < n_cells; ++k) {
      for (int j = 1; j <= J; ++j) cell_logw(k, j - 1) = log_weight(grid.lower(k), grid.upper(k), j);
    }
    if (model.variant == Variant::TP) tail_logw = log_tail(grid.lower(grid.size() - 1));
    std::vector<double> all(cell_logw.data(), cell_logw.data() + cell_logw.size());
    all.push_back(tail_logw);
    log_den = log_sum_exp(all);
    if (!std::isfinite(log_den)) {
      throw Error(ErrorCode::EmptyDenominator, "P(history, T > s) vanishes on the quadrature grid");
    }
  }

  int typed_cells() const { return model.variant == Variant::TP ? grid.size() - 1 : grid.size(); }

  double event_time(double a, double b) const {
    return std::isinf(b) ? a + 0.5 * model.quadrature.prediction_width : 0.5 * (a + b);
  }

  Eigen::VectorXd x(double u, int j) const { return model.spec.features(history.covariates, u, j); }

  double log_weight(double a, double b, int j) const {
    const double u = event_time(a, b);
    const double lm = log_interval_mass(model.survival, a, b, history.covariates);
    if (lm == -kInf) return -kInf;
    const double p = event_type_probs(model.survival, u, history.covariates)(j - 1);
    return lm + std::log(p) + main.loglik(x(u, j));
  }

  double log_tail(double from) const {
    return log_interval_mass(model.survival, from, kInf, history.covariates) +
           lts->loglik(model.spec.lts_features(history.covariates));
  }

  void check_horizon(double end) const {
    if (model.variant == Variant::TP && !(end < model.tau_max)) {
      throw Error(ErrorCode::HorizonBeyondTau, "TP predictions need s + delta < tau_max (" +
                                                   format_double(model.tau_max) + ")");
    }
  }

  // Unnormalized log probabilities of s < T <= end per type.
  Eigen::VectorXd log_numerators(double end) const {
    const int J = model.spec.n_event_types;
    Eigen::VectorXd out = Eigen::VectorXd::Constant(J, -kInf);
    for (int j = 1; j <= J; ++j) {
      std::vector<double> terms;
      for (int k = 0; k < typed_cells(); ++k) {
        const double a = grid.lower(k), b = grid.upper(k);
        if (a >= end) break;
        terms.push_back(b <= end ? cell_logw(k, j - 1) : log_weight(a, end, j));
      }
      out(j - 1) = log_sum_exp(terms);
    }
    return out;
  }

  RiskPrediction risk(double delta) const {
    if (!(delta >= 0.0)) throw Error(ErrorCode::InvalidArgument, "horizon must be >= 0");
    const double s = history.prediction_time;
    check_horizon(s + delta);
    RiskPrediction r;
    r.s = s;
    r.delta = delta;
    r.risk = (log_numerators(s + delta).array() - log_den).unaryExpr([](double z) { return std::exp(z); }).matrix();
    r.remainder = std::exp(log_beyond(s + delta) - log_den);
    return r;
  }

  // Unnormalized log P(history, T > end), from the same cells.
  double log_beyond(double end) const {
    std::vector<double> terms{tail_logw};
    for (int k = 0; k < typed_cells(); ++k) {
      const double a = grid.lower(k), b = grid.upper(k);
      if (b <= end) continue;
      for (int j = 1; j <= model.spec.n_event_types; ++j) {
        terms.push_back(a >= end ? cell_logw(k, j - 1) : log_weight(end, b, j));
      }
    }
    return log_sum_exp(terms);
  }

  // Mixture components of Y_m(t) jointly with T > t; log weights share the
  // scale of log_den.
  std::vector<Component> components(int m, double t) const {
    const LongitudinalSpec& spec = model.spec;
    const int J = spec.n_event_types;
    std::vector<Component> out;
    const ConditionalGaussian cg = conditional(spec, model.longitudinal.main, layout, m, t);
    const Eigen::RowVectorXd gb = cg.g.transpose() * model.longitudinal.main.coefficients;
    const bool only_tail = model.variant == Variant::TP && t >= model.tau_max;
    if (!only_tail) {
      for (int k = 0; k < typed_cells(); ++k) {
        const double a = grid.lower(k), b = grid.upper(k);
        if (b <= t) continue;
        const bool split = a < t;
        const double lo = split ? t : a;
        const double u = event_time(lo, b);
        for (int j = 1; j <= J; ++j) {
          const double lw = split ? log_weight(lo, b, j) : cell_logw(k, j - 1);
          out.push_back({lw, gb.dot(x(u, j)) + cg.offset, cg.var});
        }
      }
    }
    if (model.variant == Variant::TP) {
      const ConditionalGaussian cl = conditional(spec, *model.longitudinal.lts, layout, m, t);
      const Eigen::VectorXd xl = spec.lts_features(history.covariates);
      const double mean = (cl.g.transpose() * model.longitudinal.lts->coefficients).dot(xl) + cl.offset;
      out.push_back({tail_logw, mean, cl.var});
    }
    return out;
  }

  void check_forecast(int m, double t) const {
    if (m < 0 || m >= model.spec.n_biomarkers) throw Error(ErrorCode::InvalidArgument, "biomarker index out of range");
    if (!(t >= history.prediction_time)) throw Error(ErrorCode::InvalidArgument, "forecast time must be >= s");
  }

  BiomarkerForecast forecast(int m, double t, const ForecastOptions& opt) const {
    check_forecast(m, t);
    if (opt.points < 3) throw Error(ErrorCode::InvalidArgument, "forecast grid needs >= 3 points");
    std::vector<Component> comps = components(m, t);
    double top = -kInf;
    for (const auto& c : comps) top = std::max(top, c.weight);
    if (!std::isfinite(top)) throw Error(ErrorCode::EmptyDenominator, "P(history, T > t) vanishes");
    double total = 0.0;
    for (auto& c : comps) {
      c.weight = std::exp(c.weight - top);
      total += c.weight;
    }
    double mean = 0.0, second = 0.0;
    for (auto& c : comps) {
      c.weight /= total;
      mean += c.weight * c.mean;
      second += c.weight * (c.var + c.mean * c.mean);
    }
    const double sd = std::sqrt(std::max(second - mean * mean, 0.0));
    // Mean +- span SDs, widened to cover any component carrying non-negligible
    // weight: a small far-away component (e.g. the LTS term) can sit outside
    // the mixture's own span.
    double lo = mean - opt.sd_span * sd, hi = mean + opt.sd_span * sd;
    for (const auto& c : comps) {
      if (c.weight < 1e-3 * opt.outside_tolerance) continue;
      lo = std::min(lo, c.mean - opt.sd_span * std::sqrt(c.var));
      hi = std::max(hi, c.mean + opt.sd_span * std::sqrt(c.var));
    }
    double outside = 0.0;
    for (const auto& c : comps) {
      const double s = std::sqrt(c.var);
      outside += c.weight * (normal_cdf((lo - c.mean) / s) + normal_cdf(-(hi - c.mean) / s));
    }
    if (outside > opt.outside_tolerance) {
      throw Error(ErrorCode::GridTooNarrow, "forecast grid misses " + format_double(outside) + " of the mass");
    }

    BiomarkerForecast f;
    f.biomarker = m;
    f.t = t;
    const int n = opt.points;
    f.values = Eigen::VectorXd::LinSpaced(n, lo, hi);
    f.density = Eigen::VectorXd::Zero(n);
    for (const auto& c : comps) {
      const double inv = 1.0 / std::sqrt(2.0 * M_PI * c.var);
      for (int i = 0; i < n; ++i) {
        const double z = f.values(i) - c.mean;
        f.density(i) += c.weight * inv * std::exp(-0.5 * z * z / c.var);
      }
    }
    const double h = (hi - lo) / (n - 1);
    Eigen::VectorXd cdf(n);
    cdf(0) = 0.0;
    for (int i = 1; i < n; ++i) cdf(i) = cdf(i - 1) + 0.5 * h * (f.density(i - 1) + f.density(i));
    const double area = cdf(n - 1);
    f.density /= area;
    cdf /= area;

    f.mean = 0.0;
    for (int i = 1; i < n; ++i) {
      f.mean += 0.5 * h * (f.values(i - 1) * f.density(i - 1) + f.values(i) * f.density(i));
    }
    Eigen::Index best = 0;
    f.density.maxCoeff(&best);
    f.mode = f.values(best);
    if (best > 0 && best < n - 1) {
      const double y0 = f.density(best - 1), y1 = f.density(best), y2 = f.density(best + 1);
      const double den = y0 - 2.0 * y1 + y2;
      if (den < 0.0) f.mode += 0.5 * h * (y0 - y2) / den;
    }
    f.quantile_levels = Eigen::VectorXd::LinSpaced(9, 0.1, 0.9);
    f.quantiles.resize(9);
    for (int q = 0; q < 9; ++q) {
      const double p = f.quantile_levels(q);
      const auto it = std::lower_bound(cdf.data(), cdf.data() + n, p);
      const Eigen::Index i = std::clamp<Eigen::Index>(it - cdf.data(), 1, n - 1);
      const double span = cdf(i) - cdf(i - 1);
      const double frac = span > 0.0 ? (p - cdf(i - 1)) / span : 0.0;
      f.quantiles(q) = f.values(i - 1) + frac * h;
    }
    return f;
  }

  StateOccupancy occupancy(int m, const std::vector<double>& cuts, const std::vector<double>& times) const {
    for (std::size_t i = 1; i < cuts.size(); ++i) {
      if (!(cuts[i] > cuts[i - 1])) throw Error(ErrorCode::InvalidArgument, "cut points must be strictly increasing");
    }
    StateOccupancy occ;
    occ.biomarker = m;
    occ.times = times;
    occ.cut_points = cuts;
    const int J = model.spec.n_event_types;
    const auto nt = static_cast<Eigen::Index>(times.size());
    const auto nr = static_cast<Eigen::Index>(cuts.size() + 1);
    occ.range_probabilities.resize(nt, nr);
    occ.event_probabilities.resize(nt, J);
    const double s = history.prediction_time;
    for (Eigen::Index i = 0; i < nt; ++i) {
      const double t = times[static_cast<std::size_t>(i)];
      check_forecast(m, t);
      occ.event_probabilities.row(i) = risk(t - s).risk.transpose();
      occ.range_probabilities.row(i).setZero();
      for (const auto& c : components(m, t)) {
        const double w = std::exp(c.weight - log_den);
        if (w == 0.0) continue;
        const double sd = std::sqrt(c.var);
        double prev = 0.0;
        for (Eigen::Index r = 0; r < nr; ++r) {
          const double cum = r + 1 < nr ? normal_cdf((cuts[static_cast<std::size_t>(r)] - c.mean) / sd) : 1.0;
          occ.range_probabilities(i, r) += w * (cum - prev);
          prev = cum;
        }
      }
    }
    return occ;
  }
};

Predictor::Predictor(const CrBjmModel& model, History history)
    : impl_(std::make_unique<Impl>(model, std::move(history))) {}
Predictor::~Predictor() = default;
Predictor::Predictor(Predictor&&) noexcept = default;
Predictor& Predictor::operator=(Predictor&&) noexcept = default;

double Predictor::s() const noexcept { return impl_->history.prediction_time; }
double Predictor::log_denominator() const { return impl_->log_den; }
RiskPrediction Predictor::risk(double delta) const { return impl_->risk(delta); }

Eigen::MatrixXd Predictor::cif(const std::vector<double>& horizons) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(horizons.size()), impl_->model.spec.n_event_types);
  for (std::size_t h = 0; h < horizons.size(); ++h) {
    out.row(static_cast<Eigen::Index>(h)) = impl_->risk(horizons[h]).risk.transpose();
  }
  return out;
}

BiomarkerForecast Predictor::forecast(int biomarker, double t, const ForecastOptions& options) const {
  return impl_->forecast(biomarker, t, options);
}

StateOccupancy Predictor::occupancy(int biomarker, const std::vector<double>& cut_points,
                                    const std::vector<double>& times) const {
  return impl_->occupancy(biomarker, cut_points, times);
}

RiskPrediction predict_risk(const CrBjmModel& model, const History& history, double delta) {
  return Predictor(model, history).risk(delta);
}

Eigen::MatrixXd predict_cif_curve(const CrBjmModel& model, const History& history,
                                  const std::vector<double>& horizons) {
  return Predictor(model, history).cif(horizons);
}

BiomarkerForecast predict_biomarker(const CrBjmModel& model, const History& history, int biomarker, double t,
                                    const ForecastOptions& options) {
  return Predictor(model, history).forecast(biomarker, t, options);
}

StateOccupancy state_occupancy(const CrBjmModel& model, const History& history, int biomarker,
                               const std::vector<double>& cut_points, const std::vector<double>& times) {
  return Predictor(model, history).occupancy(biomarker, cut_points, times);
}

double predict_static(const StaticModel& model, const History& history, double delta) {
  if (!(delta >= 0.0)) throw Error(ErrorCode::InvalidArgument, "horizon must be >= 0");
  if (history.covariates.size() != model.n_covariates ||
      static_cast<int>(history.measurements.size()) != model.n_biomarkers) {
    throw Error(ErrorCode::InvalidArgument, "history does not match the static model");
  }
  const double s = history.prediction_time;
  Eigen::VectorXd x(model.n_covariates + model.n_biomarkers);
  x.head(model.n_covariates) = history.covariates;
  for (int m = 0; m < model.n_biomarkers; ++m) {
    const Measurement* last = nullptr;
    for (const auto& meas : history.measurements[static_cast<std::size_t>(m)]) {
      if (meas.time <= s && (!last || meas.time >= last->time)) last = &meas;
    }
    if (!last) {
      throw Error(ErrorCode::MissingCurrentValue, "no value of biomarker " + std::to_string(m + 1) + " at or before s");
    }
    x(model.n_covariates + m) = last->value;
  }
  return std::exp(model.weibull.cumulative_hazard(s, x) - model.weibull.cumulative_hazard(s + delta, x));
}

}  // namespace crbjm
