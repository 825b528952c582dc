#pragma once

#include <stdexcept>
#include <string>

namespace snaptraj {

enum class ErrorCode {
  InvalidAllocation,
  DimensionMismatch,
  SolverSingular,
  OutOfRange,
  DegenerateSegment,
  DuplicateOutput,
  DegenerateOutput,
  BracketFailure,
  SequenceTooLong,
  SizeMismatch,
  NumericFailure,
  BadInput,
  Io,
};

/// All library failures throw this single exception type; `code()` tells
/// callers which contract was violated.
class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace snaptraj
