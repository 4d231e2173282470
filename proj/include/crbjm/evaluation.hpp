#pragma once

#include "crbjm/data_model.hpp"
#include "crbjm/estimation.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crbjm {

/// A validation subject scored at landmark s. Predictions that could not be
/// made are NaN.
struct ScoredSubject {
  std::string id;
  double observed_time = 0.0;
  int event_type = 0;
  Eigen::VectorXd risk;                  // P(s < T <= s + delta, D = j | history), j = 1..J
  Eigen::VectorXd biomarker_prediction;  // per biomarker, at its comparison time
  MeasurementSeries measurements;        // full observed series
};

/// Subjects at risk at s (T_i > s) with their predictions for horizon delta.
struct ScoredCohort {
  double s = 0.0;
  double delta = 0.0;
  int n_event_types = 1;
  std::vector<ScoredSubject> subjects;
};

/// Marginal Kaplan-Meier estimate of the censoring survivor function G.
class CensoringKm {
 public:
  CensoringKm(std::span<const double> times, std::span<const int> event_types);
  double at(double t) const;           // G(t)
  double left_limit(double t) const;   // G(t-)

 private:
  std::vector<double> times_;
  std::vector<double> values_;  // G right after times_[k]
};

/// Inverse-probability-of-censoring weights for the window (s, s + delta]:
/// failures in the window get 1/G(T_i-), subjects beyond the window
/// 1/G(s + delta), subjects censored in the window 0.
Eigen::VectorXd ipcw_weights(const ScoredCohort& cohort);

/// Time-dependent AUC for type j (Definition A: failures of other types in the
/// window are controls). Ties in predicted risk count 1/2.
double td_auc_cr(const ScoredCohort& cohort, int j);
/// Same with explicit scores in place of cohort.subjects[i].risk(j - 1).
double td_auc_cr(const ScoredCohort& cohort, int j, std::span<const double> scores);

/// IPCW Brier score for type j; j = 0 scores the composite "any event" with
/// risk = sum of the type risks.
double brier_cr(const ScoredCohort& cohort, int j);
double brier_cr(const ScoredCohort& cohort, int j, std::span<const double> risks);

/// Measurement used to judge a biomarker prediction: the one at s + delta,
/// else the last one in (s, s + delta]. Empty when there is none.
std::optional<Measurement> comparison_measurement(const std::vector<Measurement>& series, double s, double delta);

struct BiomarkerAccuracy {
  double rmse = 0.0;
  double p30 = 0.0;  // share with |pred - obs| <= 0.3 |obs|
  double p50 = 0.0;
  int n = 0;
};

BiomarkerAccuracy biomarker_accuracy(const ScoredCohort& cohort, int biomarker);

// ---------------------------------------------------------------------------
// Cross-validation

struct CvOptions {
  int folds = 5;
  std::vector<double> landmarks{1.0, 2.0, 3.0, 4.0};
  double delta = 3.0;
  std::uint64_t seed = 0;
  int workers = 1;
};

/// Metrics at one landmark, pooled over the held-out folds. NaN marks a metric
/// that could not be computed (reason in `notes`).
struct CvLandmark {
  double s = 0.0;
  int n_at_risk = 0;
  Eigen::VectorXd auc;    // per type
  Eigen::VectorXd brier;  // per type
  Eigen::VectorXd rmse;   // per biomarker
  Eigen::VectorXd p30;
  Eigen::VectorXd p50;
  std::vector<std::string> notes;
};

struct CvReport {
  int folds = 0;
  double delta = 0.0;
  std::vector<CvLandmark> landmarks;
  std::vector<int> fold_of;  // per subject
  std::vector<std::string> fold_errors;
  std::vector<std::vector<FitTraceEntry>> fit_logs;  // per fold, empty for failed folds
};

/// Subject-level folds stratified by event type (censoring is its own stratum).
std::vector<int> stratified_folds(const Dataset& data, int k, std::uint64_t seed);

/// Fits on k - 1 folds, scores the held-out fold at each landmark. Throws
/// FoldFitFailure when more than one fold fails.
CvReport kfold_cv(const Dataset& data, const ModelConfig& config, FitMethod method, const CvOptions& options);

/// Scores the subjects at risk at s under a fitted model.
ScoredCohort score_cohort(const CrBjmModel& model, const Dataset& data, std::span<const std::size_t> subjects,
                          double s, double delta);

}  // namespace crbjm
