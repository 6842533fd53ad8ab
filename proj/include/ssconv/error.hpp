#pragma once

#include <stdexcept>
#include <string>

namespace ssconv {

enum class ErrorCode {
  kInvalidArgument,
  kOrderExceedsMax,
  kSelectionRule,
  kNonUnitVector,
  kFieldMismatch,
  kShapeMismatch,
  kFormat,
  kIo,
  kDivergence,
  kStaleTape,
};

/// All library failures are reported through this exception type; the code
/// lets callers (the CLI in particular) map failures onto exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace ssconv
