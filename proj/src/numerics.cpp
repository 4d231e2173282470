#include "crbjm/numerics.hpp"

#include "crbjm/error.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace crbjm {

std::string to_string(Variant v) { return v == Variant::EX ? "ex" : "tp"; }

Variant parse_variant(const std::string& text) {
  if (text == "ex" || text == "EX") return Variant::EX;
  if (text == "tp" || text == "TP") return Variant::TP;
  throw Error(ErrorCode::ConfigError, "variant must be 'ex' or 'tp', got '" + text + "'");
}

// ---------------------------------------------------------------------------

namespace {

// Derivative `order` of every degree-d B-spline on the full knot sequence at t.
// t must lie in [tau[d], tau[n]] where n is the basis count.
Eigen::VectorXd bspline_raw(const std::vector<double>& tau, int d, double t, int order) {
  const int n_intervals = static_cast<int>(tau.size()) - 1;
  const int n_basis = static_cast<int>(tau.size()) - d - 1;
  if (order > d) return Eigen::VectorXd::Zero(n_basis);

  // Span containing t; the right boundary belongs to the last non-empty span.
  int span = -1;
  for (int i = d; i < n_basis; ++i) {
    if (tau[i] <= t && t < tau[i + 1]) {
      span = i;
      break;
    }
  }
  if (span < 0) {
    for (int i = n_basis - 1; i >= d; --i) {
      if (tau[i] < tau[i + 1]) {
        span = i;
        break;
      }
    }
  }

  std::vector<double> vals(static_cast<std::size_t>(n_intervals), 0.0);
  vals[static_cast<std::size_t>(span)] = 1.0;
  const int value_degree = d - order;
  for (int q = 1; q <= d; ++q) {
    std::vector<double> next(vals.size() - 1, 0.0);
    for (std::size_t j = 0; j < next.size(); ++j) {
      const double left_den = tau[j + q] - tau[j];
      const double right_den = tau[j + q + 1] - tau[j + 1];
      double v = 0.0;
      if (q <= value_degree) {
        if (left_den > 0) v += (t - tau[j]) / left_den * vals[j];
        if (right_den > 0) v += (tau[j + q + 1] - t) / right_den * vals[j + 1];
      } else {
        if (left_den > 0) v += q * vals[j] / left_den;
        if (right_den > 0) v -= q * vals[j + 1] / right_den;
      }
      next[j] = v;
    }
    vals = std::move(next);
  }
  Eigen::VectorXd out(n_basis);
  for (int i = 0; i < n_basis; ++i) out(i) = vals[static_cast<std::size_t>(i)];
  return out;
}

}  // namespace

SplineBasis SplineBasis::bspline(int degree, std::vector<double> knots) {
  if (degree < 0) throw Error(ErrorCode::InvalidArgument, "spline degree must be >= 0");
  if (knots.size() < 2) throw Error(ErrorCode::InvalidArgument, "a spline basis needs two boundary knots");
  std::sort(knots.begin(), knots.end());
  if (!(knots.front() < knots.back())) throw Error(ErrorCode::InvalidArgument, "boundary knots must differ");
  SplineBasis b;
  b.kind_ = Kind::BSpline;
  b.degree_ = degree;
  b.knots_ = knots;
  b.full_knots_.assign(static_cast<std::size_t>(degree), knots.front());
  b.full_knots_.insert(b.full_knots_.end(), knots.begin(), knots.end());
  b.full_knots_.insert(b.full_knots_.end(), static_cast<std::size_t>(degree), knots.back());
  b.dimension_ = static_cast<int>(knots.size()) - 1 + degree;
  return b;
}

SplineBasis SplineBasis::natural_cubic(std::vector<double> knots) {
  SplineBasis b = bspline(3, std::move(knots));
  b.kind_ = Kind::NaturalCubic;
  const int n = b.dimension_;
  Eigen::MatrixXd constraints(n, 2);
  constraints.col(0) = bspline_raw(b.full_knots_, 3, b.knots_.front(), 2);
  constraints.col(1) = bspline_raw(b.full_knots_, 3, b.knots_.back(), 2);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(constraints);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  b.natural_map_ = q.rightCols(n - 2);
  b.dimension_ = n - 2;
  return b;
}

SplineBasis SplineBasis::natural_cubic_at_quantiles(std::span<const double> sample,
                                                    std::span<const double> probs) {
  if (sample.empty()) throw Error(ErrorCode::InvalidArgument, "empty sample for spline knots");
  std::vector<double> sorted(sample.begin(), sample.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> knots{sorted.front()};
  const double n = static_cast<double>(sorted.size());
  for (double p : probs) {
    // Type-7 sample quantile.
    const double h = (n - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double q = sorted[lo] + (h - std::floor(h)) * (sorted[hi] - sorted[lo]);
    if (q > knots.back() && q < sorted.back()) knots.push_back(q);
  }
  knots.push_back(sorted.back());
  if (!(knots.front() < knots.back())) {
    knots = {knots.front() - 0.5, knots.front() + 0.5};
  }
  return natural_cubic(std::move(knots));
}

Eigen::VectorXd SplineBasis::inside(double t, int order) const {
  Eigen::VectorXd v = bspline_raw(full_knots_, degree_, t, order);
  if (kind_ == Kind::NaturalCubic) return natural_map_.transpose() * v;
  return v;
}

Eigen::VectorXd SplineBasis::raw(double t, int order) const {
  const double lo = knots_.front();
  const double hi = knots_.back();
  if (t >= lo && t <= hi) return inside(t, order);
  const double edge = t < lo ? lo : hi;
  if (order == 0) return inside(edge, 0) + (t - edge) * inside(edge, 1);
  if (order == 1) return inside(edge, 1);
  return Eigen::VectorXd::Zero(dimension_);
}

Eigen::VectorXd SplineBasis::evaluate(double t) const { return raw(t, 0); }
Eigen::VectorXd SplineBasis::derivative(double t) const { return raw(t, 1); }

Eigen::VectorXd eval_spline(const SplineBasis& basis, double t) { return basis.evaluate(t); }

// ---------------------------------------------------------------------------

std::vector<double> equal_width_breaks(double a, double b, double width) {
  std::vector<double> breaks{a};
  if (!(b > a)) return breaks;
  const auto n = static_cast<long>(std::ceil((b - a) / width - 1e-9));
  for (long k = 1; k < n; ++k) breaks.push_back(a + static_cast<double>(k) * width);
  breaks.push_back(b);
  return breaks;
}

QuadratureGrid build_grid(double start, double tau_max, double width, Variant variant,
                          double t_end_ex) {
  if (!(start >= 0.0)) throw Error(ErrorCode::InvalidArgument, "grid start must be >= 0");
  if (!(width > 0.0)) throw Error(ErrorCode::InvalidArgument, "grid width must be > 0");
  constexpr double inf = std::numeric_limits<double>::infinity();
  QuadratureGrid grid;
  const double end = variant == Variant::EX ? t_end_ex : tau_max;
  if (start >= end) {
    grid.breaks = {start, inf};
    grid.has_tail = true;
    return grid;
  }
  grid.breaks = equal_width_breaks(start, end, width);
  if (variant == Variant::TP) {
    grid.breaks.push_back(inf);
    grid.has_tail = true;
  }
  return grid;
}

// ---------------------------------------------------------------------------

double mvn_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  const auto n = y.size();
  if (mean.size() != n || cov.rows() != n || cov.cols() != n) {
    throw Error(ErrorCode::InvalidArgument, "mvn_logpdf dimension mismatch");
  }
  if (n == 0) return 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::NonPositiveDefinite, "covariance factorization failed");
  const Eigen::VectorXd z = llt.matrixL().solve(y - mean);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  if (!std::isfinite(logdet)) throw Error(ErrorCode::NonPositiveDefinite, "singular covariance");
  return -0.5 * (static_cast<double>(n) * kLog2Pi + logdet + z.squaredNorm());
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<>(), p);
}

double log_sum_exp(std::span<const double> values) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : values) mx = std::max(mx, v);
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

// ---------------------------------------------------------------------------

MaximizeResult maximize(const Objective& objective, Eigen::VectorXd init, const MaximizeOptions& options) {
  if (!init.allFinite()) throw Error(ErrorCode::InvalidArgument, "maximize: non-finite initial point");
  Eigen::VectorXd x = std::move(init);
  Evaluation cur = objective(x);
  if (!std::isfinite(cur.value)) throw Error(ErrorCode::NoConvergence, "objective not finite at the initial point");

  for (int iter = 0; iter <= options.max_iter; ++iter) {
    const double gnorm = cur.gradient.norm();
    if (gnorm < options.tol) return {x, cur.value, gnorm, iter};
    if (iter == options.max_iter) break;

    Eigen::VectorXd step;
    bool newton = false;
    Eigen::LLT<Eigen::MatrixXd> llt(-cur.hessian);
    if (llt.info() == Eigen::Success) {
      step = llt.solve(cur.gradient);
      newton = step.allFinite() && step.dot(cur.gradient) > 0.0;
    }
    if (!newton) step = cur.gradient / std::max(1.0, gnorm);

    double scale = 1.0;
    bool moved = false;
    for (int h = 0; h <= options.max_halvings; ++h, scale *= 0.5) {
      Eigen::VectorXd trial = x + scale * step;
      Evaluation next = objective(trial);
      if (std::isfinite(next.value) && next.gradient.allFinite() &&
          next.value >= cur.value - 1e-12 * std::abs(cur.value)) {
        // A flat step only counts when the gradient also shrinks.
        if (next.value > cur.value || next.gradient.norm() < gnorm) {
          x = std::move(trial);
          cur = std::move(next);
          moved = true;
          break;
        }
      }
    }
    if (!moved) {
      throw Error(ErrorCode::NoConvergence,
                  "line search failed with gradient norm " + std::to_string(gnorm));
    }
  }
  throw Error(ErrorCode::NoConvergence, "no convergence after " + std::to_string(options.max_iter) +
                                            " iterations (gradient norm " +
                                            std::to_string(cur.gradient.norm()) + ")");
}

}  // namespace crbjm
