#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hetflow {

enum class ErrorCode {
  invalid_argument,
  degenerate_input,
  non_finite,
  not_rigid,
  unknown_kernel,
  unknown_buffer,
  duplicate,
  contract_violation,
  dependency,
  unmapped_task,
  residency,
  busy,
  kernel_failure,
  format,
  io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::degenerate_input: return "degenerate input";
    case ErrorCode::non_finite: return "non-finite input";
    case ErrorCode::not_rigid: return "not a rigid transform";
    case ErrorCode::unknown_kernel: return "unknown kernel";
    case ErrorCode::unknown_buffer: return "unknown buffer";
    case ErrorCode::duplicate: return "duplicate";
    case ErrorCode::contract_violation: return "contract violation";
    case ErrorCode::dependency: return "dependency";
    case ErrorCode::unmapped_task: return "unmapped task";
    case ErrorCode::residency: return "residency";
    case ErrorCode::busy: return "busy";
    case ErrorCode::kernel_failure: return "kernel failure";
    case ErrorCode::format: return "format error";
    case ErrorCode::io: return "io error";
  }
  return "error";
}

/// Single exception type for the library. The message is prefixed with the
/// category so callers that only print `what()` still see what went wrong.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail) { throw Error(code, detail); }

inline void require(bool condition, ErrorCode code, const std::string& detail) {
  if (!condition) fail(code, detail);
}

}  // namespace hetflow
