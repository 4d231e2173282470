#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace crbjm {

enum class ErrorCode {
  // data / input
  ParseError,
  ConfigError,
  MissingSubject,
  NonPositiveTime,
  MeasurementAfterExit,
  EventTypeOutOfRange,
  DuplicateMeasurement,
  InvalidTauMax,
  VersionMismatch,
  MissingEventType,
  MissingCurrentValue,
  HorizonBeyondTau,
  NoCases,
  NoControls,
  NoComparableSubjects,
  AllCensored,
  TooFewCompleteCases,
  InvalidArgument,
  // numerical
  NonPositiveDefinite,
  NoConvergence,
  RankDeficientDesign,
  NonPositiveEventTime,
  DegenerateWeights,
  EmptyDenominator,
  GridTooNarrow,
  TooManyFailures,
  FoldFitFailure,
  CalibrationFailure,
};

std::string_view to_string(ErrorCode code);

/// True for failures of the numerical machinery (exit code 3) as opposed to
/// bad input (exit code 2).
bool is_numerical(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string subject_id = {});

  ErrorCode code() const noexcept { return code_; }
  const std::string& subject_id() const noexcept { return subject_id_; }

 private:
  ErrorCode code_;
  std::string subject_id_;
};

}  // namespace crbjm
