#include "crbjm/error.hpp"

namespace crbjm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::MissingSubject: return "MissingSubject";
    case ErrorCode::NonPositiveTime: return "NonPositiveTime";
    case ErrorCode::MeasurementAfterExit: return "MeasurementAfterExit";
    case ErrorCode::EventTypeOutOfRange: return "EventTypeOutOfRange";
    case ErrorCode::DuplicateMeasurement: return "DuplicateMeasurement";
    case ErrorCode::InvalidTauMax: return "InvalidTauMax";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::MissingEventType: return "MissingEventType";
    case ErrorCode::MissingCurrentValue: return "MissingCurrentValue";
    case ErrorCode::HorizonBeyondTau: return "HorizonBeyondTau";
    case ErrorCode::NoCases: return "NoCases";
    case ErrorCode::NoControls: return "NoControls";
    case ErrorCode::NoComparableSubjects: return "NoComparableSubjects";
    case ErrorCode::AllCensored: return "AllCensored";
    case ErrorCode::TooFewCompleteCases: return "TooFewCompleteCases";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonPositiveDefinite: return "NonPositiveDefinite";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::RankDeficientDesign: return "RankDeficientDesign";
    case ErrorCode::NonPositiveEventTime: return "NonPositiveEventTime";
    case ErrorCode::DegenerateWeights: return "DegenerateWeights";
    case ErrorCode::EmptyDenominator: return "EmptyDenominator";
    case ErrorCode::GridTooNarrow: return "GridTooNarrow";
    case ErrorCode::TooManyFailures: return "TooManyFailures";
    case ErrorCode::FoldFitFailure: return "FoldFitFailure";
    case ErrorCode::CalibrationFailure: return "CalibrationFailure";
  }
  return "Unknown";
}

bool is_numerical(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonPositiveDefinite:
    case ErrorCode::NoConvergence:
    case ErrorCode::RankDeficientDesign:
    case ErrorCode::NonPositiveEventTime:
    case ErrorCode::DegenerateWeights:
    case ErrorCode::EmptyDenominator:
    case ErrorCode::GridTooNarrow:
    case ErrorCode::TooManyFailures:
    case ErrorCode::FoldFitFailure:
    case ErrorCode::CalibrationFailure:
      return true;
    default:
      return false;
  }
}

Error::Error(ErrorCode code, const std::string& message, std::string subject_id)
    : std::runtime_error(std::string(to_string(code)) + ": " + message +
                         (subject_id.empty() ? std::string{} : " (subject " + subject_id + ")")),
      code_(code),
      subject_id_(std::move(subject_id)) {}

}  // namespace crbjm
