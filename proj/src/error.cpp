#include "conceptmark/error.hpp"

namespace conceptmark {

std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::DuplicateToken: return "DuplicateToken";
    case ErrorCode::SecretCollision: return "SecretCollision";
    case ErrorCode::BadLength: return "BadLength";
    case ErrorCode::UnknownConcept: return "UnknownConcept";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
    case ErrorCode::IntegrityError: return "IntegrityError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::TargetNotInPrompt: return "TargetNotInPrompt";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::UnknownTargetPosition: return "UnknownTargetPosition";
    case ErrorCode::NonPositiveAlpha: return "NonPositiveAlpha";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::EmptyPrompt: return "EmptyPrompt";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::InvalidParameter: return "InvalidParameter";
    case ErrorCode::BackboneFailure: return "BackboneFailure";
    case ErrorCode::ConceptAlreadyTrained: return "ConceptAlreadyTrained";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidParameter:
    case ErrorCode::BadLength:
    case ErrorCode::NonPositiveAlpha:
      return 2;
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::DivergenceDetected:
    case ErrorCode::ZeroVector:
      return 4;
    case ErrorCode::IoError:
      return 5;
    default:
      return 3;
  }
}

}  // namespace conceptmark
