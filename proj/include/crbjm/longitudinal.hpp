#pragma once

#include "crbjm/data_model.hpp"
#include "crbjm/numerics.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace crbjm {

enum class Transform { Identity, Log };
enum class RandomEffects { Intercept, InterceptSlope };

std::string to_string(Transform t);
std::string to_string(RandomEffects r);
Transform parse_transform(const std::string& text);
RandomEffects parse_random_effects(const std::string& text);

/// Which terms enter each trajectory coefficient theta_ml. The intercept is
/// always present.
struct FeatureTerms {
  bool covariates = true;    // V
  bool event_type = true;    // one-hot D (reference type J)
  bool event_time = true;    // phi(T)
  bool time_by_type = true;  // phi(T) x one-hot D
};

/// Structure of the longitudinal sub-model: Y_m(t) = sum_l theta_ml(x) t^l
/// + u_m(t)' b_m + e with theta_ml(x) linear in the feature vector
/// x(V, T, D) = (1, V, onehot(D), phi(T), phi(T) onehot(D)).
/// The LTS sub-model uses x = (1, V).
struct LongitudinalSpec {
  int n_biomarkers = 1;
  int n_covariates = 0;
  int n_event_types = 1;
  int trajectory_degree = 1;  // L
  Transform transform = Transform::Identity;
  RandomEffects random_effects = RandomEffects::Intercept;
  FeatureTerms terms;

  int n_basis() const noexcept { return trajectory_degree + 1; }
  /// Rows of the coefficient matrix: one per (biomarker, trajectory term).
  int n_rows() const noexcept { return n_biomarkers * n_basis(); }
  int n_features() const noexcept;
  int n_lts_features() const noexcept { return 1 + n_covariates; }
  int n_random_per_biomarker() const noexcept { return random_effects == RandomEffects::Intercept ? 1 : 2; }
  int n_random() const noexcept { return n_biomarkers * n_random_per_biomarker(); }

  double phi(double u) const;
  /// x(V, u, j); j in 1..J.
  Eigen::VectorXd features(const Eigen::VectorXd& v, double u, int j) const;
  Eigen::VectorXd lts_features(const Eigen::VectorXd& v) const;

  std::vector<std::string> feature_names(const std::vector<std::string>& covariate_names) const;
  std::vector<std::string> lts_feature_names(const std::vector<std::string>& covariate_names) const;
};

/// Parameters of one multivariate linear mixed model.
/// coefficients(a, c) multiplies feature c in trajectory term a = m * (L + 1) + l.
struct LmmParameters {
  Eigen::MatrixXd coefficients;
  Eigen::MatrixXd omega;               // random-effect covariance
  Eigen::VectorXd residual_variances;  // per biomarker
};

using LtsFit = LmmParameters;

struct LongitudinalFit {
  LmmParameters main;
  std::optional<LtsFit> lts;
};

/// Stacked measurements of one subject with the pieces of the design that do
/// not depend on (T, D): trajectory rows R (n x A) and random-effect rows Z.
struct MeasurementLayout {
  Eigen::VectorXd y;
  Eigen::VectorXd time;
  std::vector<int> biomarker;
  Eigen::MatrixXd R;
  Eigen::MatrixXd Z;

  int size() const noexcept { return static_cast<int>(y.size()); }
  static MeasurementLayout build(const LongitudinalSpec& spec, const MeasurementSeries& series);
};

/// Trajectory row r(t) for biomarker m (length A) and random-effect row z(t).
Eigen::VectorXd trajectory_row(const LongitudinalSpec& spec, int m, double t);
Eigen::VectorXd random_effect_row(const LongitudinalSpec& spec, int m, double t);

struct Design {
  Eigen::MatrixXd fixed;   // n x (A * C), column a * C + c
  Eigen::MatrixXd random;  // n x n_random
};

Design build_design(const LongitudinalSpec& spec, const MeasurementLayout& layout, const Eigen::VectorXd& v,
                    double u, int j);

Eigen::MatrixXd marginal_covariance(const MeasurementLayout& layout, const LmmParameters& params);

struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

Moments marginal_moments(const LongitudinalSpec& spec, const LmmParameters& params,
                         const MeasurementLayout& layout, const Eigen::VectorXd& v, double u, int j);

/// Reference implementations (dense mvn_logpdf per call).
double loglik_given_event(const LongitudinalSpec& spec, const LmmParameters& params,
                          const MeasurementLayout& layout, const Eigen::VectorXd& v, double u, int j);
double loglik_lts(const LongitudinalSpec& spec, const LtsFit& lts, const MeasurementLayout& layout,
                  const Eigen::VectorXd& v);

/// Sufficient statistics of one subject's measurements under fixed (Omega,
/// sigma^2): Q = R' S^-1 R, r = R' S^-1 y, c0 = y' S^-1 y, with S the marginal
/// covariance. The Gaussian log-likelihood at feature vector x is then
/// -(n log 2pi + logdet + c0 - 2 x' B' r + x' B' Q B x) / 2.
struct SubjectKernel {
  int n = 0;
  double logdet = 0.0;
  double c0 = 0.0;
  Eigen::MatrixXd Q;
  Eigen::VectorXd r;

  static SubjectKernel build(const MeasurementLayout& layout, const Eigen::MatrixXd& omega,
                             const Eigen::VectorXd& residual_variances);
};

/// A kernel projected on a coefficient matrix, evaluating log-likelihoods in
/// O(C^2) per feature vector.
struct KernelProjection {
  double constant = 0.0;
  Eigen::VectorXd linear;
  Eigen::MatrixXd quadratic;

  KernelProjection() = default;
  KernelProjection(const SubjectKernel& kernel, const Eigen::MatrixXd& coefficients);
  double loglik(const Eigen::VectorXd& x) const { return constant + x.dot(linear) - 0.5 * x.dot(quadratic * x); }
};

/// First and second weighted moments of a subject's feature vectors.
struct FeatureMoments {
  double weight = 0.0;
  Eigen::VectorXd first;   // sum w x
  Eigen::MatrixXd second;  // sum w x x'

  explicit FeatureMoments(int c = 0)
      : first(Eigen::VectorXd::Zero(c)), second(Eigen::MatrixXd::Zero(c, c)) {}
  void add(const Eigen::VectorXd& x, double w);
};

/// Accumulates the weighted GLS normal equations sum kron(Q_i, S_i) beta =
/// sum kron(r_i, s_i).
class GlsAccumulator {
 public:
  GlsAccumulator(int n_rows, int n_features);
  void add(const SubjectKernel& kernel, const FeatureMoments& moments);
  void merge(const GlsAccumulator& other);
  /// Throws RankDeficientDesign when the normal matrix is singular.
  Eigen::MatrixXd solve() const;

 private:
  int rows_;
  int cols_;
  Eigen::MatrixXd normal_;
  Eigen::VectorXd rhs_;
};

/// A pseudo-observation (u, j, w) of weighted_coef_update.
struct PseudoRow {
  double u = 0.0;
  int j = 1;
  double weight = 1.0;
};

struct WeightedSubject {
  const MeasurementLayout* layout = nullptr;
  Eigen::VectorXd covariates;
  std::vector<PseudoRow> rows;
};

Eigen::MatrixXd weighted_coef_update(const LongitudinalSpec& spec, const std::vector<WeightedSubject>& subjects,
                                     const Eigen::MatrixXd& omega, const Eigen::VectorXd& residual_variances);

// ---------------------------------------------------------------------------
// Maximum likelihood for the mixed model

/// A subject's measurements together with the (weighted) moments of its
/// feature vectors; complete cases carry a single unit-weight vector.
struct LmmObservation {
  const MeasurementLayout* layout = nullptr;
  FeatureMoments moments;
};

struct LmmOptions {
  double tol = 1e-7;
  int max_iter = 200;
};

/// Profile maximum likelihood over (Omega, sigma^2) with coefficients
/// profiled out by GLS. Omega uses a log-Cholesky parameterization. The
/// objective is sum_i E_w[log N(y_i; R_i B x, S_i)] so the same routine serves
/// complete-case fits and weighted M-steps.
LmmParameters fit_lmm(const std::vector<LmmObservation>& data, int n_rows, int n_features,
                      const LongitudinalSpec& spec, const std::optional<LmmParameters>& init = std::nullopt,
                      const LmmOptions& options = {});

/// Weighted log-likelihood of fit_lmm's objective at given parameters.
double lmm_loglik(const std::vector<LmmObservation>& data, const LmmParameters& params);

}  // namespace crbjm
