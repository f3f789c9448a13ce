#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mtpcr {

/// Error classes raised by the library. The CLI maps each one to a distinct
/// process exit code (see exit_code()).
enum class ErrorCode {
  kParse,
  kEmptyCloud,
  kIo,
  kInvalidParameter,
  kDegenerateExtent,
  kInsufficientPoints,
  kNoConsensus,
  kEmptyPixel,
  kTooFewCorrespondences,
  kDegenerateConfiguration,
  kConvergenceFailed,
  kNoCorrespondencesInRange,
  kExternalMatcherFailure,
  kUnsatisfiableOverlap,
  kUsage,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kParse: return "ParseError";
    case ErrorCode::kEmptyCloud: return "EmptyCloud";
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kInvalidParameter: return "InvalidParameter";
    case ErrorCode::kDegenerateExtent: return "DegenerateExtent";
    case ErrorCode::kInsufficientPoints: return "InsufficientPoints";
    case ErrorCode::kNoConsensus: return "NoConsensus";
    case ErrorCode::kEmptyPixel: return "EmptyPixel";
    case ErrorCode::kTooFewCorrespondences: return "TooFewCorrespondences";
    case ErrorCode::kDegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::kConvergenceFailed: return "ConvergenceFailed";
    case ErrorCode::kNoCorrespondencesInRange: return "NoCorrespondencesInRange";
    case ErrorCode::kExternalMatcherFailure: return "ExternalMatcherFailure";
    case ErrorCode::kUnsatisfiableOverlap: return "UnsatisfiableOverlap";
    case ErrorCode::kUsage: return "UsageError";
  }
  return "UnknownError";
}

/// Process exit code for an error class. 0 is success, 1 is reserved for
/// unexpected exceptions.
inline int exit_code(ErrorCode code) { return 10 + static_cast<int>(code); }

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string stage = {})
      : std::runtime_error(compose(code, message, stage)),
        code_(code),
        stage_(std::move(stage)),
        detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& stage() const noexcept { return stage_; }
  const std::string& detail() const noexcept { return detail_; }

  /// Same error re-tagged with the pipeline stage it surfaced from.
  Error with_stage(std::string stage) const { return Error(code_, detail_, std::move(stage)); }

 private:
  static std::string compose(ErrorCode code, const std::string& message, const std::string& stage) {
    std::string out(to_string(code));
    if (!stage.empty()) out += " [stage " + stage + "]";
    out += ": " + message;
    return out;
  }

  ErrorCode code_;
  std::string stage_;
  std::string detail_;
};

}  // namespace mtpcr
