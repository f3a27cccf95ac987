#pragma once

#include <stdexcept>
#include <string>

namespace osaq {

enum class ErrorKind {
  NonFinite,
  NoConvergence,
  NotPositiveDefinite,
  DimMismatch,
  EmptySpectrum,
  EmptyNullSpace,
  EmptyCalibration,
  IoError,
  NameCollision,
  MalformedHeader,
  TruncatedPayload,
  UnknownDtype,
  TokenOutOfRange,
  SequenceTooLong,
  UnknownLayer,
  ConfigError,
};

const char* error_kind_name(ErrorKind kind);

/// All failures in the toolkit surface as Error; kind() tells callers whether
/// the problem is configuration, data, or numerics.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace osaq
