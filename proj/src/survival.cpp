#include "crbjm/survival.hpp"

#include "crbjm/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace crbjm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_inputs(const Eigen::MatrixXd& covariates, std::span<const double> times, std::span<const int> events) {
  if (static_cast<std::size_t>(covariates.rows()) != times.size() || times.size() != events.size()) {
    throw Error(ErrorCode::InvalidArgument, "survival fit: inconsistent input lengths");
  }
  if (std::none_of(events.begin(), events.end(), [](int e) { return e != 0; })) {
    throw Error(ErrorCode::AllCensored, "no uncensored subjects to fit the time model");
  }
  for (double t : times) {
    if (!(t > 0.0)) throw Error(ErrorCode::NonPositiveTime, "survival times must be positive");
  }
}

Eigen::MatrixXd inverse_information(const Eigen::MatrixXd& hessian) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(-hessian);
  if (ldlt.info() != Eigen::Success) return {};
  return ldlt.solve(Eigen::MatrixXd::Identity(hessian.rows(), hessian.cols()));
}

}  // namespace

Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& covariates) {
  Eigen::MatrixXd x(covariates.rows(), covariates.cols() + 1);
  x.col(0).setOnes();
  x.rightCols(covariates.cols()) = covariates;
  return x;
}

Eigen::MatrixXd covariate_matrix(const Dataset& data) {
  Eigen::MatrixXd v(static_cast<Eigen::Index>(data.size()), data.n_covariates());
  for (std::size_t i = 0; i < data.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = data[i].covariates.transpose();
  return v;
}

// ---------------------------------------------------------------------------
// Weibull

double WeibullFit::log_scale(const Eigen::VectorXd& v) const {
  return coefficients(0) + coefficients.tail(coefficients.size() - 1).dot(v);
}

double WeibullFit::cumulative_hazard(double t, const Eigen::VectorXd& v) const {
  if (t <= 0.0) return 0.0;
  return std::exp(shape * (std::log(t) - log_scale(v)));
}

double WeibullFit::log_density(double t, const Eigen::VectorXd& v) const {
  if (t <= 0.0) return -kInf;
  const double z = shape * (std::log(t) - log_scale(v));
  return std::log(shape) - std::log(t) + z - std::exp(z);
}

WeibullFit fit_weibull(const Eigen::MatrixXd& covariates, std::span<const double> times,
                       std::span<const int> events) {
  check_inputs(covariates, times, events);
  const Eigen::MatrixXd x = with_intercept(covariates);
  const auto n = x.rows();
  const auto q = x.cols();
  Eigen::VectorXd logt(n), delta(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    logt(i) = std::log(times[static_cast<std::size_t>(i)]);
    delta(i) = events[static_cast<std::size_t>(i)] != 0 ? 1.0 : 0.0;
  }

  // theta = (eta, log k); the objective is the mean log-likelihood.
  const Objective objective = [&](const Eigen::VectorXd& theta) {
    const Eigen::VectorXd eta = theta.head(q);
    const double alpha = theta(q);
    const double k = std::exp(alpha);
    Evaluation e;
    e.value = 0.0;
    e.gradient = Eigen::VectorXd::Zero(q + 1);
    e.hessian = Eigen::MatrixXd::Zero(q + 1, q + 1);
    const Eigen::VectorXd lin = x * eta;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double z = k * (logt(i) - lin(i));
      const double ez = std::exp(z);
      const double d = delta(i);
      e.value += d * (alpha - logt(i) + z) - ez;
      const auto xi = x.row(i).transpose();
      e.gradient.head(q) += (d - ez) * (-k) * xi;
      e.gradient(q) += d * (1.0 + z) - ez * z;
      e.hessian.topLeftCorner(q, q) -= ez * k * k * xi * xi.transpose();
      e.hessian.col(q).head(q) += k * (ez * z + ez - d) * xi;
      e.hessian(q, q) += d * z - ez * z * (z + 1.0);
    }
    e.hessian.row(q).head(q) = e.hessian.col(q).head(q).transpose();
    const double inv_n = 1.0 / static_cast<double>(n);
    e.value *= inv_n;
    e.gradient *= inv_n;
    e.hessian *= inv_n;
    return e;
  };

  Eigen::VectorXd init = Eigen::VectorXd::Zero(q + 1);
  init(0) = std::log(logt.array().exp().sum() / std::max(1.0, delta.sum()));
  const MaximizeResult r = maximize(objective, init, {1e-10, 200, 40});

  WeibullFit fit;
  fit.coefficients = r.x.head(q);
  fit.shape = std::exp(r.x(q));
  fit.covariance = inverse_information(objective(r.x).hessian * static_cast<double>(n));
  return fit;
}

WeibullFit fit_weibull(const Dataset& data) {
  std::vector<double> times;
  std::vector<int> events;
  for (const auto& s : data.subjects()) {
    times.push_back(s.observed_time);
    events.push_back(s.event_type);
  }
  return fit_weibull(covariate_matrix(data), times, events);
}

// ---------------------------------------------------------------------------
// Cox

double CoxFit::breslow(double t) const {
  const auto it = std::upper_bound(event_times.begin(), event_times.end(), t);
  if (it == event_times.begin()) return 0.0;
  return cumulative_hazard[static_cast<std::size_t>(it - event_times.begin()) - 1];
}

double CoxFit::baseline_cumulative_hazard(double t) const {
  if (t <= 0.0) return 0.0;
  const double last = event_times.back();
  if (t >= last) return cumulative_hazard.back() + tail_rate * (t - last);
  const auto k = static_cast<std::size_t>(std::upper_bound(event_times.begin(), event_times.end(), t) -
                                          event_times.begin());
  const double t0 = k == 0 ? 0.0 : event_times[k - 1];
  const double h0 = k == 0 ? 0.0 : cumulative_hazard[k - 1];
  return h0 + (cumulative_hazard[k] - h0) * (t - t0) / (event_times[k] - t0);
}

double CoxFit::baseline_hazard(double t) const {
  const double last = event_times.back();
  if (t >= last) return tail_rate;
  const auto k = static_cast<std::size_t>(std::upper_bound(event_times.begin(), event_times.end(), t) -
                                          event_times.begin());
  const double t0 = k == 0 ? 0.0 : event_times[k - 1];
  const double h0 = k == 0 ? 0.0 : cumulative_hazard[k - 1];
  return (cumulative_hazard[k] - h0) / (event_times[k] - t0);
}

CoxFit fit_cox(const Eigen::MatrixXd& covariates, std::span<const double> times, std::span<const int> events) {
  check_inputs(covariates, times, events);
  const auto n = covariates.rows();
  const auto p = covariates.cols();

  // Subjects by decreasing time so risk sets accumulate.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return times[static_cast<std::size_t>(a)] > times[static_cast<std::size_t>(b)];
  });

  // Visit distinct times in decreasing order; fn(time, members) sees the risk set
  // already including every subject with T >= time.
  auto for_each_time = [&](auto&& fn) {
    std::size_t i = 0;
    while (i < order.size()) {
      const double t = times[static_cast<std::size_t>(order[i])];
      std::size_t j = i;
      while (j < order.size() && times[static_cast<std::size_t>(order[j])] == t) ++j;
      fn(t, i, j);
      i = j;
    }
  };

  const Objective objective = [&](const Eigen::VectorXd& gamma) {
    Evaluation e;
    e.value = 0.0;
    e.gradient = Eigen::VectorXd::Zero(p);
    e.hessian = Eigen::MatrixXd::Zero(p, p);
    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
    for_each_time([&](double, std::size_t lo, std::size_t hi) {
      double d = 0.0;
      Eigen::VectorXd xsum = Eigen::VectorXd::Zero(p);
      for (std::size_t r = lo; r < hi; ++r) {
        const auto xi = covariates.row(order[r]).transpose();
        const double w = std::exp(xi.dot(gamma));
        s0 += w;
        s1 += w * xi;
        s2 += w * xi * xi.transpose();
        if (events[static_cast<std::size_t>(order[r])] != 0) {
          d += 1.0;
          xsum += xi;
          e.value += xi.dot(gamma);
        }
      }
      if (d == 0.0) return;
      const Eigen::VectorXd mean = s1 / s0;
      e.value -= d * std::log(s0);
      e.gradient += xsum - d * mean;
      e.hessian -= d * (s2 / s0 - mean * mean.transpose());
    });
    const double inv_n = 1.0 / static_cast<double>(n);
    e.value *= inv_n;
    e.gradient *= inv_n;
    e.hessian *= inv_n;
    return e;
  };

  CoxFit fit;
  fit.coefficients = Eigen::VectorXd::Zero(p);
  if (p > 0) {
    const MaximizeResult r = maximize(objective, Eigen::VectorXd::Zero(p), {1e-10, 200, 40});
    fit.coefficients = r.x;
    fit.covariance = inverse_information(objective(r.x).hessian * static_cast<double>(n));
  }

  // Breslow increments at distinct event times, collected in decreasing order.
  std::vector<std::pair<double, double>> increments;
  double s0 = 0.0;
  for_each_time([&](double t, std::size_t lo, std::size_t hi) {
    double d = 0.0;
    for (std::size_t r = lo; r < hi; ++r) {
      s0 += std::exp(covariates.row(order[r]).dot(fit.coefficients));
      if (events[static_cast<std::size_t>(order[r])] != 0) d += 1.0;
    }
    if (d > 0.0) increments.emplace_back(t, d / s0);
  });
  std::reverse(increments.begin(), increments.end());
  double acc = 0.0;
  for (const auto& [t, inc] : increments) {
    acc += inc;
    fit.event_times.push_back(t);
    fit.cumulative_hazard.push_back(acc);
  }

  // Tail: least-squares line through log hazard rates of the last quartile of
  // event times, evaluated at the last event time.
  const std::size_t k_events = increments.size();
  const std::size_t first = k_events - std::max<std::size_t>(2, (k_events + 3) / 4);
  std::vector<double> xs, ys;
  for (std::size_t k = k_events >= 2 ? first : 0; k < k_events; ++k) {
    const double t0 = k == 0 ? 0.0 : increments[k - 1].first;
    xs.push_back(increments[k].first - increments.back().first);
    ys.push_back(std::log(increments[k].second / (increments[k].first - t0)));
  }
  if (xs.size() < 2) {
    fit.tail_rate = std::exp(ys.back());
  } else {
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      sxy += (xs[k] - mx) * (ys[k] - my);
      sxx += (xs[k] - mx) * (xs[k] - mx);
    }
    const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
    fit.tail_rate = std::exp(my - slope * mx);
  }
  return fit;
}

CoxFit fit_cox(const Dataset& data) {
  std::vector<double> times;
  std::vector<int> events;
  for (const auto& s : data.subjects()) {
    times.push_back(s.observed_time);
    events.push_back(s.event_type);
  }
  return fit_cox(covariate_matrix(data), times, events);
}

// ---------------------------------------------------------------------------
// Event type

Eigen::VectorXd EventTypeFit::features(double t, const Eigen::VectorXd& v) const {
  const Eigen::VectorXd b = basis.evaluate(t);
  Eigen::VectorXd f(b.size() + v.size());
  f << b, v;
  return f;
}

Eigen::VectorXd EventTypeFit::probabilities(double t, const Eigen::VectorXd& v) const {
  return probabilities_from_features(features(t, v));
}

Eigen::VectorXd EventTypeFit::probabilities_from_features(const Eigen::VectorXd& f) const {
  const Eigen::VectorXd eta = coefficients * f;
  const int J = n_types();
  Eigen::VectorXd p(J);
  const double mx = std::max(0.0, eta.size() > 0 ? eta.maxCoeff() : 0.0);
  double total = std::exp(-mx);
  for (int j = 0; j + 1 < J; ++j) {
    p(j) = std::exp(eta(j) - mx);
    total += p(j);
  }
  p(J - 1) = std::exp(-mx);
  return p / total;
}

SplineBasis default_event_type_basis(const Dataset& data, std::span<const double> quantiles) {
  std::vector<double> event_times;
  for (const auto& s : data.subjects()) {
    if (!s.censored()) event_times.push_back(s.observed_time);
  }
  if (event_times.empty()) throw Error(ErrorCode::AllCensored, "no uncensored subjects for the event-type basis");
  return SplineBasis::natural_cubic_at_quantiles(event_times, quantiles);
}

EventTypeFit fit_event_type(const Dataset& data, const SplineBasis& basis, double separation_cap) {
  const int J = data.n_event_types();
  EventTypeFit fit;
  fit.basis = basis;
  const int q = basis.dimension() + data.n_covariates();
  fit.coefficients = Eigen::MatrixXd::Zero(J - 1, q);
  if (J == 1) return fit;

  std::vector<int> counts(static_cast<std::size_t>(J), 0);
  std::vector<Eigen::VectorXd> feats;
  std::vector<int> types;
  for (const auto& s : data.subjects()) {
    if (s.censored()) continue;
    ++counts[static_cast<std::size_t>(s.event_type - 1)];
    feats.push_back(fit.features(s.observed_time, s.covariates));
    types.push_back(s.event_type - 1);
  }
  for (int j = 0; j < J; ++j) {
    if (counts[static_cast<std::size_t>(j)] == 0) {
      throw Error(ErrorCode::MissingEventType, "no observed events of type " + std::to_string(j + 1));
    }
  }

  const int dim = (J - 1) * q;
  const double inv_n = 1.0 / static_cast<double>(feats.size());
  auto evaluate = [&](const Eigen::VectorXd& theta) {
    fit.coefficients = Eigen::Map<const Eigen::MatrixXd>(theta.data(), q, J - 1).transpose();
    Evaluation e;
    e.value = 0.0;
    e.gradient = Eigen::VectorXd::Zero(dim);
    e.hessian = Eigen::MatrixXd::Zero(dim, dim);
    for (std::size_t i = 0; i < feats.size(); ++i) {
      const Eigen::VectorXd eta = fit.coefficients * feats[i];
      // Softmax with the reference category at zero.
      const double mx = std::max(0.0, eta.maxCoeff());
      double total = std::exp(-mx);
      Eigen::VectorXd prob(J - 1);
      for (int j = 0; j < J - 1; ++j) {
        prob(j) = std::exp(eta(j) - mx);
        total += prob(j);
      }
      prob /= total;
      const int d = types[i];
      e.value += (d < J - 1 ? eta(d) : 0.0) - mx - std::log(total);
      const Eigen::MatrixXd ff = feats[i] * feats[i].transpose();
      for (int j = 0; j < J - 1; ++j) {
        e.gradient.segment(j * q, q) += ((d == j ? 1.0 : 0.0) - prob(j)) * feats[i];
        for (int l = 0; l < J - 1; ++l) {
          const double c = (j == l ? prob(j) : 0.0) - prob(j) * prob(l);
          e.hessian.block(j * q, l * q, q, q) -= c * ff;
        }
      }
    }
    e.value *= inv_n;
    e.gradient *= inv_n;
    e.hessian *= inv_n;
    return e;
  };

  // Newton with step halving; under separation the coefficients grow without
  // bound, so the iteration stops once their norm passes the cap.
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(dim);
  Evaluation cur = evaluate(theta);
  bool converged = false;
  for (int iter = 0; iter < 500 && !converged; ++iter) {
    if (cur.gradient.norm() < 1e-15) break;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(-cur.hessian);
    Eigen::VectorXd step = ldlt.solve(cur.gradient);
    if (ldlt.info() != Eigen::Success || !step.allFinite() || step.dot(cur.gradient) <= 0.0) step = cur.gradient;
    double scale = 1.0;
    bool moved = false;
    for (int h = 0; h < 40; ++h, scale *= 0.5) {
      const Eigen::VectorXd trial = theta + scale * step;
      Evaluation next = evaluate(trial);
      if (std::isfinite(next.value) && next.value >= cur.value) {
        converged = (scale * step).norm() < 1e-10;
        theta = trial;
        cur = std::move(next);
        moved = true;
        break;
      }
    }
    if (!moved) break;
    // Under separation Newton steps stay of order one while the norm grows.
    if (theta.norm() > separation_cap) {
      theta *= separation_cap / theta.norm();
      fit.separation_detected = true;
      break;
    }
  }
  fit.coefficients = Eigen::Map<const Eigen::MatrixXd>(theta.data(), q, J - 1).transpose();
  // Fitted probabilities numerically 0 or 1 signal (quasi-)separation.
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (fit.probabilities_from_features(feats[i])(types[i]) > 1.0 - 1e-10) fit.separation_detected = true;
  }
  return fit;
}

// ---------------------------------------------------------------------------

SurvivalFit fit_survival(const Dataset& data, const SurvivalOptions& options) {
  SurvivalFit fit;
  fit.n_event_types = data.n_event_types();
  if (options.time_model == TimeModel::Weibull) {
    fit.time_model = fit_weibull(data);
  } else {
    fit.time_model = fit_cox(data);
  }
  if (data.n_event_types() > 1) {
    const SplineBasis basis = options.event_type_basis
                                  ? *options.event_type_basis
                                  : default_event_type_basis(data, options.knot_quantiles);
    fit.event_type_model = fit_event_type(data, basis, options.separation_cap);
  }
  return fit;
}

double cumulative_hazard(const SurvivalFit& fit, double u, const Eigen::VectorXd& v) {
  if (u <= 0.0) return 0.0;
  if (const auto* w = std::get_if<WeibullFit>(&fit.time_model)) return w->cumulative_hazard(u, v);
  const auto& c = std::get<CoxFit>(fit.time_model);
  return c.baseline_cumulative_hazard(u) * std::exp(c.coefficients.dot(v));
}

double survival(const SurvivalFit& fit, double u, const Eigen::VectorXd& v) {
  return std::exp(-cumulative_hazard(fit, u, v));
}

double log_time_density(const SurvivalFit& fit, double u, const Eigen::VectorXd& v) {
  if (const auto* w = std::get_if<WeibullFit>(&fit.time_model)) return w->log_density(u, v);
  const auto& c = std::get<CoxFit>(fit.time_model);
  if (u <= 0.0) return -kInf;
  const double lp = c.coefficients.dot(v);
  return std::log(c.baseline_hazard(u)) + lp - c.baseline_cumulative_hazard(u) * std::exp(lp);
}

double time_density(const SurvivalFit& fit, double u, const Eigen::VectorXd& v) {
  return std::exp(log_time_density(fit, u, v));
}

Eigen::VectorXd event_type_probs(const SurvivalFit& fit, double u, const Eigen::VectorXd& v) {
  if (!fit.event_type_model) return Eigen::VectorXd::Ones(1);
  return fit.event_type_model->probabilities(u, v);
}

double joint_density(const SurvivalFit& fit, double u, int j, const Eigen::VectorXd& v) {
  if (j < 1 || j > fit.n_event_types) throw Error(ErrorCode::EventTypeOutOfRange, "event type out of range");
  return time_density(fit, u, v) * event_type_probs(fit, u, v)(j - 1);
}

double prob_beyond_tau(const SurvivalFit& fit, double tau_max, const Eigen::VectorXd& v) {
  return survival(fit, tau_max, v);
}

double log_interval_mass(const SurvivalFit& fit, double a, double b, const Eigen::VectorXd& v) {
  const double ha = cumulative_hazard(fit, a, v);
  if (std::isinf(b)) return -ha;
  const double hb = cumulative_hazard(fit, b, v);
  if (!(hb > ha)) return -kInf;
  return -ha + std::log(-std::expm1(ha - hb));
}

// ---------------------------------------------------------------------------

StaticModel fit_static_model(const Dataset& data) {
  const int p = data.n_covariates();
  const int m = data.n_biomarkers();
  std::vector<Eigen::VectorXd> rows;
  std::vector<double> times;
  std::vector<int> events;
  for (const auto& s : data.subjects()) {
    Eigen::VectorXd x(p + m);
    x.head(p) = s.covariates;
    bool complete = true;
    for (int k = 0; k < m; ++k) {
      const auto& series = s.measurements[static_cast<std::size_t>(k)];
      if (series.empty()) {
        complete = false;
        break;
      }
      x(p + k) = series.front().value;
    }
    if (!complete) continue;
    rows.push_back(std::move(x));
    times.push_back(s.observed_time);
    events.push_back(s.event_type);
  }
  if (rows.empty()) throw Error(ErrorCode::TooFewCompleteCases, "no subjects with baseline biomarker values");
  Eigen::MatrixXd design(static_cast<Eigen::Index>(rows.size()), p + m);
  for (std::size_t i = 0; i < rows.size(); ++i) design.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  StaticModel model;
  model.weibull = fit_weibull(design, times, events);
  model.n_covariates = p;
  model.n_biomarkers = m;
  return model;
}

}  // namespace crbjm
