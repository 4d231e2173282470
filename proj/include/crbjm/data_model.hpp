#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crbjm {

struct Measurement {
  double time = 0.0;
  double value = 0.0;
};

/// Per-biomarker measurement series, index m = 0..M-1.
using MeasurementSeries = std::vector<std::vector<Measurement>>;

/// One cohort member. event_type 0 encodes censoring, 1..J an observed
/// terminal event of that type.
struct Subject {
  std::string id;
  Eigen::VectorXd covariates;
  double observed_time = 0.0;
  int event_type = 0;
  MeasurementSeries measurements;

  bool censored() const noexcept { return event_type == 0; }
  std::size_t n_measurements() const noexcept;
};

/// Covariates and biomarker history of a subject known to be at risk at s.
struct History {
  Eigen::VectorXd covariates;
  double prediction_time = 0.0;
  MeasurementSeries measurements;

  std::size_t n_measurements() const noexcept;

  /// Truncates a subject's measurements at s (times <= s are kept).
  static History from_subject(const Subject& subject, double s);
};

class Dataset {
 public:
  Dataset() = default;

  /// Validates the cohort. tau_max defaults to the largest observed event
  /// time; an override may only move it upward.
  Dataset(std::vector<Subject> subjects, int n_event_types,
          std::vector<std::string> covariate_names,
          std::vector<std::string> biomarker_names,
          std::optional<double> tau_max_override = std::nullopt);

  const std::vector<Subject>& subjects() const noexcept { return subjects_; }
  const Subject& operator[](std::size_t i) const { return subjects_[i]; }
  std::size_t size() const noexcept { return subjects_.size(); }
  int n_event_types() const noexcept { return n_event_types_; }
  int n_biomarkers() const noexcept { return static_cast<int>(biomarker_names_.size()); }
  int n_covariates() const noexcept { return static_cast<int>(covariate_names_.size()); }
  const std::vector<std::string>& covariate_names() const noexcept { return covariate_names_; }
  const std::vector<std::string>& biomarker_names() const noexcept { return biomarker_names_; }
  double tau_max() const noexcept { return tau_max_; }
  std::optional<double> tau_max_override() const noexcept { return tau_override_; }

  /// Rows of the given subjects (repeats allowed, as in bootstrap resampling).
  /// Repeated subjects get a "#k" id suffix so ids stay unique.
  Dataset subset(std::span<const std::size_t> indices) const;

  /// FNV-1a hash of a canonical rendering; used for artifact provenance.
  std::string content_hash() const;

 private:
  std::vector<Subject> subjects_;
  int n_event_types_ = 1;
  std::vector<std::string> covariate_names_;
  std::vector<std::string> biomarker_names_;
  double tau_max_ = 0.0;
  std::optional<double> tau_override_;
};

/// Column mapping for the flat-file readers.
struct Schema {
  std::string id_column = "id";
  std::string time_column = "time";
  std::string event_column = "event";
  /// Empty: every remaining subjects-file column is a covariate, in file order.
  std::vector<std::string> covariate_columns;
  /// Empty: biomarkers in order of first appearance in the longitudinal file.
  std::vector<std::string> biomarkers;
  std::optional<int> n_event_types;
  std::optional<double> tau_max;
  /// Measurements recorded exactly at t = 0 are moved to this time.
  double zero_time_shift = 1e-6;
};

Dataset load_dataset(const std::filesystem::path& subjects_file,
                     const std::filesystem::path& longitudinal_file, const Schema& schema = {});

Dataset read_dataset(std::istream& subjects, std::istream& longitudinal, const Schema& schema = {});

void write_subjects_csv(const Dataset& data, std::ostream& out);
void write_longitudinal_csv(const Dataset& data, std::ostream& out);

/// T_i > tau is known: observed beyond tau, or censored at tau itself.
inline bool beyond_tau(const Subject& s, double tau) noexcept {
  return s.observed_time > tau || (s.censored() && s.observed_time >= tau);
}

struct LtsSplit {
  std::vector<std::size_t> non_lts;              // event observed, T_i <= tau_max
  std::vector<std::size_t> lts;                  // T_i > tau_max
  std::vector<std::size_t> censored_before_tau;  // censored, T_i <= tau_max
};

LtsSplit split_lts(const Dataset& data);

/// Shortest round-trip decimal rendering of a double.
std::string format_double(double x);

/// Minimal RFC-4180 style reader: header row plus records.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;

  std::size_t column(const std::string& name) const;
  std::optional<std::size_t> find_column(const std::string& name) const;
};

CsvTable read_csv(std::istream& in);
double parse_double(const std::string& text, std::size_t line, const std::string& what);

}  // namespace crbjm
