#pragma once

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace crbjm {

enum class Variant { EX, TP };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

// ---------------------------------------------------------------------------
// Regression splines

/// B-spline basis on [first knot, last knot] with clamped ends, optionally
/// restricted to the natural cubic subspace (zero second derivative at both
/// boundary knots). Outside the knot span each basis function continues
/// linearly from its boundary value and slope.
class SplineBasis {
 public:
  enum class Kind { BSpline, NaturalCubic };

  SplineBasis() = default;

  /// `knots` holds both boundary knots and any interior knots, sorted.
  static SplineBasis bspline(int degree, std::vector<double> knots);
  static SplineBasis natural_cubic(std::vector<double> knots);

  /// Natural cubic basis with boundary knots at the sample extremes and
  /// interior knots at the given sample quantiles.
  static SplineBasis natural_cubic_at_quantiles(std::span<const double> sample,
                                                std::span<const double> probs);

  Kind kind() const noexcept { return kind_; }
  int degree() const noexcept { return degree_; }
  const std::vector<double>& knots() const noexcept { return knots_; }
  int dimension() const noexcept { return dimension_; }

  Eigen::VectorXd evaluate(double t) const;
  /// First derivative of every basis function (one-sided at the boundary).
  Eigen::VectorXd derivative(double t) const;

 private:
  Eigen::VectorXd raw(double t, int order) const;
  Eigen::VectorXd inside(double t, int order) const;

  Kind kind_ = Kind::BSpline;
  int degree_ = 0;
  std::vector<double> knots_;
  std::vector<double> full_knots_;
  Eigen::MatrixXd natural_map_;  // raw B-spline coefficients -> natural basis
  int dimension_ = 0;
};

Eigen::VectorXd eval_spline(const SplineBasis& basis, double t);

// ---------------------------------------------------------------------------
// Quadrature grids over residual event time

/// Connected intervals [a_k, b_k) starting at a subject's observed time.
/// The last interval of a tail grid is [a_K, +inf).
struct QuadratureGrid {
  std::vector<double> breaks;  // K + 1 entries; breaks.back() is +inf for tail grids
  bool has_tail = false;

  int size() const noexcept { return static_cast<int>(breaks.size()) - 1; }
  double lower(int k) const { return breaks[static_cast<std::size_t>(k)]; }
  double upper(int k) const { return breaks[static_cast<std::size_t>(k) + 1]; }
  double midpoint(int k) const { return 0.5 * (lower(k) + upper(k)); }
  bool is_tail(int k) const noexcept { return has_tail && k == size() - 1; }
};

QuadratureGrid build_grid(double start, double tau_max, double width, Variant variant,
                          double t_end_ex);

/// Equal-width breaks from a to b (b included, last piece possibly shorter).
std::vector<double> equal_width_breaks(double a, double b, double width);

// ---------------------------------------------------------------------------
// Gaussian kernels

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double mvn_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov);

double normal_cdf(double z);
double normal_quantile(double p);
double log_sum_exp(std::span<const double> values);

// ---------------------------------------------------------------------------
// Damped Newton maximizer

struct Evaluation {
  double value = 0.0;
  Eigen::VectorXd gradient;
  /// Exact or expected (Fisher) Hessian; anything symmetric is accepted.
  Eigen::MatrixXd hessian;
};

using Objective = std::function<Evaluation(const Eigen::VectorXd&)>;

struct MaximizeOptions {
  double tol = 1e-8;
  int max_iter = 200;
  int max_halvings = 40;
};

struct MaximizeResult {
  Eigen::VectorXd x;
  double value = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
};

/// Newton ascent with step-halving. Steps fall back to backtracking gradient
/// ascent whenever the Hessian is not negative definite. Throws NoConvergence
/// instead of returning a point whose gradient norm is >= tol.
MaximizeResult maximize(const Objective& objective, Eigen::VectorXd init,
                        const MaximizeOptions& options = {});

}  // namespace crbjm
