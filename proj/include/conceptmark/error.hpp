#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace conceptmark {

enum class ErrorCode {
  // registry
  DuplicateToken,
  SecretCollision,
  BadLength,
  UnknownConcept,
  IndexOutOfRange,
  SchemaVersionMismatch,
  IntegrityError,
  ParseError,
  TargetNotInPrompt,
  // shapes and numerics
  DimensionMismatch,
  ShapeMismatch,
  LengthMismatch,
  UnknownTargetPosition,
  NonPositiveAlpha,
  ZeroVector,
  EmptyPrompt,
  NonFiniteLoss,
  DivergenceDetected,
  InsufficientData,
  InvalidParameter,
  BackboneFailure,
  ConceptAlreadyTrained,
  // plumbing
  ConfigError,
  IoError,
};

std::string_view error_name(ErrorCode code);

/// Process exit code for a failure of the given kind.
///   2 config, 3 data, 4 numeric, 5 I/O.
int exit_code_for(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace conceptmark
