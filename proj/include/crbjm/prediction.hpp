#pragma once

#include "crbjm/data_model.hpp"
#include "crbjm/estimation.hpp"
#include "crbjm/survival.hpp"

#include <Eigen/Dense>

#include <memory>
#include <vector>

namespace crbjm {

struct RiskPrediction {
  double s = 0.0;
  double delta = 0.0;
  Eigen::VectorXd risk;  // P(s < T <= s + delta, D = j | history, T > s), j = 1..J
  double remainder = 1.0;  // P(T > s + delta | history, T > s)
};

struct ForecastOptions {
  int points = 513;
  double sd_span = 6.0;
  /// Largest mixture mass allowed outside the value grid.
  double outside_tolerance = 1e-4;
};

struct BiomarkerForecast {
  int biomarker = 0;  // 0-based
  double t = 0.0;
  Eigen::VectorXd values;
  Eigen::VectorXd density;
  double mean = 0.0;
  double mode = 0.0;
  Eigen::VectorXd quantile_levels;  // 0.1, ..., 0.9
  Eigen::VectorXd quantiles;
};

struct StateOccupancy {
  int biomarker = 0;
  std::vector<double> times;
  std::vector<double> cut_points;
  /// times x (cut_points + 1): P(Y_m(t) in range r, T > t | history, T > s).
  Eigen::MatrixXd range_probabilities;
  /// times x J: P(s < T <= t, D = j | history, T > s).
  Eigen::MatrixXd event_probabilities;
};

/// Prediction for one history. The denominator P(history, T > s) and the
/// quadrature cells from s are computed once and shared by every query.
class Predictor {
 public:
  Predictor(const CrBjmModel& model, History history);
  ~Predictor();
  Predictor(Predictor&&) noexcept;
  Predictor& operator=(Predictor&&) noexcept;

  double s() const noexcept;
  /// log P(history, T > s | V) on the quadrature grid.
  double log_denominator() const;

  RiskPrediction risk(double delta) const;
  /// Rows: horizons; columns: event types.
  Eigen::MatrixXd cif(const std::vector<double>& horizons) const;
  BiomarkerForecast forecast(int biomarker, double t, const ForecastOptions& options = {}) const;
  StateOccupancy occupancy(int biomarker, const std::vector<double>& cut_points,
                           const std::vector<double>& times) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

RiskPrediction predict_risk(const CrBjmModel& model, const History& history, double delta);
Eigen::MatrixXd predict_cif_curve(const CrBjmModel& model, const History& history,
                                  const std::vector<double>& horizons);
BiomarkerForecast predict_biomarker(const CrBjmModel& model, const History& history, int biomarker, double t,
                                    const ForecastOptions& options = {});
StateOccupancy state_occupancy(const CrBjmModel& model, const History& history, int biomarker,
                               const std::vector<double>& cut_points, const std::vector<double>& times);

/// Static prediction P(T - s > delta | T > s, Y(s), V) using the most recent
/// value of every biomarker at or before s as covariates.
double predict_static(const StaticModel& model, const History& history, double delta);

}  // namespace crbjm
