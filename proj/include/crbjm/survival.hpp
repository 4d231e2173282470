#pragma once

#include "crbjm/data_model.hpp"
#include "crbjm/numerics.hpp"

#include <Eigen/Dense>

#include <optional>
#include <variant>
#include <vector>

namespace crbjm {

/// Weibull regression on the log-scale: S(t|V) = exp(-(t / lambda(V))^k) with
/// lambda(V) = exp(eta_0 + eta' V).
struct WeibullFit {
  double shape = 1.0;
  Eigen::VectorXd coefficients;  // eta, intercept first
  /// Inverse observed information for (eta, log k); empty when not computed.
  Eigen::MatrixXd covariance;

  double log_scale(const Eigen::VectorXd& v) const;
  double cumulative_hazard(double t, const Eigen::VectorXd& v) const;
  double log_density(double t, const Eigen::VectorXd& v) const;
};

/// Cox model with Breslow baseline and an exponential tail beyond the last
/// event time. Between event times the cumulative baseline hazard is
/// interpolated linearly so the time model has a density.
struct CoxFit {
  Eigen::VectorXd coefficients;  // gamma, no intercept
  std::vector<double> event_times;
  std::vector<double> cumulative_hazard;  // Breslow Lambda_0 at event_times
  double tail_rate = 0.0;
  Eigen::MatrixXd covariance;

  /// Right-continuous Breslow step function.
  double breslow(double t) const;
  double baseline_cumulative_hazard(double t) const;
  double baseline_hazard(double t) const;
};

/// Multinomial logit for P(D = j | T = t, V) with features (B(t), V) and type J
/// as the reference category.
struct EventTypeFit {
  SplineBasis basis;
  Eigen::MatrixXd coefficients;  // (J-1) x (basis dim + p)
  bool separation_detected = false;

  int n_types() const noexcept { return static_cast<int>(coefficients.rows()) + 1; }
  Eigen::VectorXd features(double t, const Eigen::VectorXd& v) const;
  Eigen::VectorXd probabilities(double t, const Eigen::VectorXd& v) const;
  Eigen::VectorXd probabilities_from_features(const Eigen::VectorXd& f) const;
};

struct SurvivalFit {
  std::variant<WeibullFit, CoxFit> time_model;
  std::optional<EventTypeFit> event_type_model;  // absent when J = 1
  int n_event_types = 1;

  bool is_weibull() const noexcept { return std::holds_alternative<WeibullFit>(time_model); }
};

enum class TimeModel { Weibull, Cox };

struct SurvivalOptions {
  TimeModel time_model = TimeModel::Weibull;
  /// Empty: natural cubic with knots at event-time quantiles.
  std::optional<SplineBasis> event_type_basis;
  std::vector<double> knot_quantiles{0.25, 0.5, 0.75};
  double separation_cap = 30.0;
};

WeibullFit fit_weibull(const Eigen::MatrixXd& covariates, std::span<const double> times,
                       std::span<const int> events);
WeibullFit fit_weibull(const Dataset& data);

CoxFit fit_cox(const Eigen::MatrixXd& covariates, std::span<const double> times,
               std::span<const int> events);
CoxFit fit_cox(const Dataset& data);

EventTypeFit fit_event_type(const Dataset& data, const SplineBasis& basis, double separation_cap = 30.0);

/// Default event-type basis for a cohort.
SplineBasis default_event_type_basis(const Dataset& data, std::span<const double> quantiles);

SurvivalFit fit_survival(const Dataset& data, const SurvivalOptions& options = {});

double cumulative_hazard(const SurvivalFit& fit, double u, const Eigen::VectorXd& v);
double survival(const SurvivalFit& fit, double u, const Eigen::VectorXd& v);
double time_density(const SurvivalFit& fit, double u, const Eigen::VectorXd& v);
double log_time_density(const SurvivalFit& fit, double u, const Eigen::VectorXd& v);
Eigen::VectorXd event_type_probs(const SurvivalFit& fit, double u, const Eigen::VectorXd& v);
/// j in 1..J.
double joint_density(const SurvivalFit& fit, double u, int j, const Eigen::VectorXd& v);
double prob_beyond_tau(const SurvivalFit& fit, double tau_max, const Eigen::VectorXd& v);

/// log P(a <= T < b | V); b may be +inf. Accurate when both survivals are tiny.
double log_interval_mass(const SurvivalFit& fit, double a, double b, const Eigen::VectorXd& v);

/// Covariate design with an intercept column.
Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& covariates);
Eigen::MatrixXd covariate_matrix(const Dataset& data);

// ---------------------------------------------------------------------------
// Static prediction model: Weibull on baseline covariates plus the first
// recorded value of every biomarker.

struct StaticModel {
  WeibullFit weibull;
  int n_covariates = 0;
  int n_biomarkers = 0;
};

StaticModel fit_static_model(const Dataset& data);

}  // namespace crbjm
