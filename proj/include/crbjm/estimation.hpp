#pragma once

#include "crbjm/data_model.hpp"
#include "crbjm/longitudinal.hpp"
#include "crbjm/numerics.hpp"
#include "crbjm/survival.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace crbjm {

struct QuadratureConfig {
  double width = 0.25;
  double t_end_ex = 100.0;
  /// Grid width used by the prediction integrals.
  double prediction_width = 0.25;
};

struct EmOptions {
  double tol = 1e-4;
  int max_iter = 200;
  /// Re-estimate Omega and sigma^2 in each M-step instead of freezing them at
  /// the complete-case values.
  bool reestimate_variance = false;
};

/// Everything needed to fit a model apart from the data.
struct ModelConfig {
  Variant variant = Variant::EX;
  SurvivalOptions survival;
  int trajectory_degree = 1;
  Transform transform = Transform::Identity;
  RandomEffects random_effects = RandomEffects::Intercept;
  FeatureTerms terms;
  std::optional<double> tau_max;
  QuadratureConfig quadrature;
  EmOptions em;
  LmmOptions lmm;
};

enum class FitMethod { CCA, EM };
std::string to_string(FitMethod m);
FitMethod parse_fit_method(const std::string& text);

struct Provenance {
  std::string dataset_hash;
  std::uint64_t seed = 0;
  FitMethod method = FitMethod::CCA;
  int iterations = 0;
  double final_change = 0.0;
};

struct CrBjmModel {
  Variant variant = Variant::EX;
  LongitudinalSpec spec;
  SurvivalFit survival;
  LongitudinalFit longitudinal;
  double tau_max = 0.0;
  QuadratureConfig quadrature;
  std::vector<std::string> covariate_names;
  std::vector<std::string> biomarker_names;
  Provenance provenance;
};

LongitudinalSpec make_spec(const Dataset& data, const ModelConfig& config);

/// Complete-case fit: the main model on subjects with an observed event
/// (T <= tau_max under TP) and, under TP, the LTS model on subjects with
/// T > tau_max.
LongitudinalFit fit_cca(const Dataset& data, const LongitudinalSpec& spec, Variant variant,
                        const LmmOptions& options = {});

/// Posterior weights of the censored subjects over (interval, type) cells.
struct PosteriorWeights {
  std::vector<std::size_t> subjects;        // dataset indices of censored subjects
  std::vector<QuadratureGrid> grids;        // per subject
  /// Event time at which each type-specific cell is evaluated. Usually the
  /// interval midpoint; an EX subject censored beyond the grid end gets one
  /// cell covering [T_i, inf) evaluated at T_i + width / 2.
  std::vector<Eigen::VectorXd> midpoints;
  std::vector<Eigen::MatrixXd> cells;       // per subject: cells x J
  std::vector<double> tail;                 // per subject: weight of T > tau_max (TP), else 0
};

struct FitTraceEntry {
  int iteration = 0;
  double objective = 0.0;
  double max_change = 0.0;
};

/// Precomputed EM state: layouts, grids, interval masses and feature vectors
/// are built once and reused across iterations.
class EmProblem {
 public:
  EmProblem(const Dataset& data, const LongitudinalSpec& spec, const SurvivalFit& survival, Variant variant,
            const QuadratureConfig& quadrature);
  ~EmProblem();
  EmProblem(const EmProblem&) = delete;
  EmProblem& operator=(const EmProblem&) = delete;

  PosteriorWeights e_step(const LongitudinalFit& fit, int workers = 1) const;
  LongitudinalFit m_step(const PosteriorWeights& weights, const LongitudinalFit& current, bool reestimate_variance,
                         const LmmOptions& lmm = {}) const;
  /// Discretized observed-data log-likelihood of the longitudinal part; EM
  /// never decreases it.
  double objective(const LongitudinalFit& fit, int workers = 1) const;

  std::size_t n_censored() const;

 private:
  struct Impl;
  Impl* impl_;
};

PosteriorWeights e_step(const Dataset& data, const LongitudinalSpec& spec, const SurvivalFit& survival,
                        const LongitudinalFit& current, Variant variant, const QuadratureConfig& quadrature);

struct EmResult {
  LongitudinalFit fit;
  std::vector<FitTraceEntry> trace;
  int iterations = 0;
  double final_change = 0.0;
  bool converged = false;
};

/// Alternates E- and M-steps from `init`. Throws NoConvergence when the
/// coefficient change is still >= tol after max_iter iterations, unless
/// `allow_nonconvergence` is set, in which case `converged` reports it.
EmResult em_fit(const Dataset& data, const LongitudinalSpec& spec, const SurvivalFit& survival,
                const LongitudinalFit& init, Variant variant, const QuadratureConfig& quadrature,
                const EmOptions& options = {}, int workers = 1, bool allow_nonconvergence = false);

struct FitResult {
  CrBjmModel model;
  LongitudinalFit cca;
  std::vector<FitTraceEntry> trace;
};

/// Survival fit, then CCA, then (for FitMethod::EM) the EM algorithm
/// initialized at the CCA estimates.
FitResult fit_model(const Dataset& data, const ModelConfig& config, FitMethod method, std::uint64_t seed = 0,
                    int workers = 1);

// ---------------------------------------------------------------------------
// Flattened parameters

std::vector<std::string> parameter_names(const CrBjmModel& model);
Eigen::VectorXd parameter_vector(const CrBjmModel& model);
/// Longitudinal fixed effects only (main, then LTS); `lts_offset` receives the
/// index where LTS coefficients start.
Eigen::VectorXd longitudinal_coefficients(const LongitudinalFit& fit, int* lts_offset = nullptr);

// ---------------------------------------------------------------------------
// Bootstrap

using ReplicateFit = std::function<Eigen::VectorXd(const Dataset&)>;

struct BootstrapResult {
  std::vector<std::string> names;
  Eigen::VectorXd estimate;
  Eigen::VectorXd sd;
  int reps = 0;
  int failures = 0;
  std::vector<std::string> failure_messages;
};

/// Resamples subjects with replacement and refits each replicate. Replicates
/// that throw are recorded and excluded. `fit` overrides the default refit
/// (the full pipeline); `names`/`estimate` are then left empty unless given.
BootstrapResult bootstrap(const Dataset& data, const ModelConfig& config, FitMethod method, int reps,
                          std::uint64_t seed, int workers = 1, const ReplicateFit& fit = {});

}  // namespace crbjm
