#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace figground {

enum class ErrorCode {
  InvalidArgument,
  RetryExhausted,
  DegenerateInput,
  EmptyConflict,
  DimensionMismatch,
  EmptySet,
  ShapeMismatch,
  NonFiniteActivation,
  DivergenceDetected,
  ChecksumMismatch,
  VersionMismatch,
  EmptyTargetSet,
  IndexOutOfRange,
  NotNormalized,
  EmptyCorpus,
  IoError,
  InvariantViolation,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::RetryExhausted: return "RetryExhausted";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::EmptyConflict: return "EmptyConflict";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::EmptyTargetSet: return "EmptyTargetSet";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI and the HTTP layer can map it to an exit status or response code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace figground
