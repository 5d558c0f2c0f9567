#pragma once

#include <stdexcept>
#include <string>

namespace jointvo {

enum class ErrorCode {
  kAngleNearPi,
  kBehindCamera,
  kNonPositiveDepth,
  kOutOfImage,
  kImageTooSmall,
  kEmptySystem,
  kSingularHessian,
  kTrackingLost,
  kIllegalTransition,
  kNoSurfaceInView,
  kMalformedDataset,
  kInsufficientOverlap,
  kInvalidConfig,
};

const char* to_string(ErrorCode code);

// All recoverable failures surface as this exception; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace jointvo
