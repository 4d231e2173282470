#pragma once

#include "crbjm/data_model.hpp"
#include "crbjm/estimation.hpp"
#include "crbjm/longitudinal.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace crbjm {

/// Generating parameters. The longitudinal part uses a linear trajectory, a
/// random intercept per biomarker and the identity transform, with features
/// (1, V, onehot(D), T, T onehot(D)) for the main model and (1, V) for LTS.
struct TrueParameters {
  double weibull_shape = 1.5;
  Eigen::VectorXd weibull_coefficients;  // log-scale: intercept, covariates
  Eigen::MatrixXd type_coefficients;     // (J-1) x (2 + p): intercept, time, covariates; type J is the reference
  LmmParameters main;
  LmmParameters lts;
};

struct GeneratorConfig {
  int n = 300;
  int n_event_types = 2;
  int n_covariates = 1;
  int n_biomarkers = 3;
  Variant variant = Variant::EX;
  TrueParameters truth;
  double visit_spacing = 0.5;
  double visit_jitter = 0.1;
  double censoring_rate = 0.4;  // overall, administrative share included
  double admin_rate = 0.2;      // TP only: share censored at tau_max
  std::uint64_t seed = 1;
};

/// Default truth for the given dimensions. `history_scale` multiplies every
/// dependence of the trajectories on (T, D).
TrueParameters default_truth(int n_event_types, int n_covariates, int n_biomarkers, double history_scale = 1.0);
GeneratorConfig default_generator(int n, Variant variant, std::uint64_t seed = 1);

/// Structure of the generating longitudinal model.
LongitudinalSpec truth_spec(const GeneratorConfig& config);

struct CensoringCalibration {
  double c_max = 0.0;    // uniform censoring on (0, c_max)
  double tau_max = 0.0;  // TP administrative cut; +inf under EX
  double expected_censoring = 0.0;
  double expected_admin = 0.0;
};

/// Solves for the censoring parameters that hit the configured rates in
/// expectation. Throws CalibrationFailure when they cannot be reached.
CensoringCalibration calibrate_censoring(const GeneratorConfig& config);

struct TruthRecord {
  std::string id;
  double event_time = 0.0;
  int event_type = 1;
  double censor_time = 0.0;
  bool long_term = false;  // measurements drawn from the LTS model
  Eigen::VectorXd random_effects;
};

struct SimulatedCohort {
  Dataset data;
  std::vector<TruthRecord> truth;
  CensoringCalibration calibration;
  double censoring_fraction = 0.0;
  double admin_fraction = 0.0;
};

SimulatedCohort simulate_cohort(const GeneratorConfig& config);
/// Same with a precomputed calibration (replicates of one study share it).
SimulatedCohort simulate_cohort(const GeneratorConfig& config, const CensoringCalibration& calibration);

void write_truth_csv(const std::vector<TruthRecord>& truth, std::ostream& out);

/// The generating model in fitted-model form (for prediction under the truth).
CrBjmModel true_model(const GeneratorConfig& config, const CensoringCalibration& calibration);

/// Row-major longitudinal coefficients of the truth, main then LTS (TP only),
/// in the order of longitudinal_coefficients().
Eigen::VectorXd true_longitudinal_coefficients(const GeneratorConfig& config);
std::vector<std::string> longitudinal_coefficient_names(const CrBjmModel& model);

// ---------------------------------------------------------------------------
// Reference computations under the truth

struct OracleRisk {
  Eigen::VectorXd risk;  // per type
  double remainder = 0.0;
};

struct OracleForecast {
  double mean = 0.0;
  std::vector<double> quantiles;  // at the requested levels
};

/// Brute-force targets by fine-grid integration over the event time, assembled
/// from the generating parameters directly.
class TruthOracle {
 public:
  TruthOracle(const GeneratorConfig& config, const CensoringCalibration& calibration, int points = 10000);

  OracleRisk risk(const History& history, double delta) const;
  OracleForecast forecast(const History& history, int biomarker, double t, const std::vector<double>& levels) const;

 private:
  struct Node {
    double u;
    int j;
    double log_weight;
  };
  /// Midpoint nodes on [a, b] with log weights density x type x likelihood x width.
  std::vector<Node> nodes(const History& history, double a, double b, int points) const;
  /// Upper end of the event-time integral for T > from.
  double upper(const History& history, double from) const;
  double tail_log_weight(const History& history) const;

  GeneratorConfig config_;
  CensoringCalibration calibration_;
  int points_;
};

struct McEstimate {
  Eigen::VectorXd value;
  Eigen::VectorXd se;
};

/// Self-normalized importance sampling from the prior of (T, D) given T > s,
/// weighted by the marginal likelihood of the history. Returns the J risks
/// then the remainder.
McEstimate mc_risk(const GeneratorConfig& config, const CensoringCalibration& calibration, const History& history,
                   double delta, int draws, std::uint64_t seed);
/// Predictive mean of biomarker m at t (T > t), same sampler.
McEstimate mc_forecast_mean(const GeneratorConfig& config, const CensoringCalibration& calibration,
                            const History& history, int biomarker, double t, int draws, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Monte Carlo study

struct McStudyOptions {
  int replicates = 100;
  std::uint64_t seed = 1;
  int workers = 1;
  ModelConfig model;  // variant is taken from the generator
};

struct McParameterRow {
  std::string name;
  double truth = 0.0;
  double mean_cca = 0.0;
  double mean_em = 0.0;
  double bias_cca = 0.0;  // percent of truth
  double bias_em = 0.0;
  double sd_cca = 0.0;
  double sd_em = 0.0;
  double relative_efficiency = 0.0;  // sd_em / sd_cca
  bool lts = false;
};

struct McStudyResult {
  std::vector<McParameterRow> rows;
  int replicates = 0;
  int failures = 0;
  int converged = 0;  // among successful EM fits
  std::vector<std::string> failure_messages;
  double mean_censoring = 0.0;
  double mean_admin = 0.0;
  double mean_em_iterations = 0.0;
  double max_em_iterations = 0.0;
};

McStudyResult run_mc_study(const GeneratorConfig& generator, const McStudyOptions& options);

void write_mc_study_csv(const McStudyResult& result, std::ostream& out);

}  // namespace crbjm
