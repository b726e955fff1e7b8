#pragma once

#include <stdexcept>
#include <string>

namespace suede {

enum class ErrorCode {
  kDimension,           // incompatible tensor shapes
  kDomain,              // value outside an operation's domain (e.g. log of <= 0)
  kContract,            // precondition violated (non-scalar loss, empty input, ...)
  kConfig,              // invalid configuration value or unknown key
  kIo,                  // file read/write failure
  kCheckpointVersion,   // unsupported checkpoint format version
  kCheckpointTruncated, // checkpoint file ends mid-record
  kCheckpointShape,     // stored tensor does not match the target model
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::kDimension: return "dimension_error";
    case ErrorCode::kDomain: return "domain_error";
    case ErrorCode::kContract: return "contract_error";
    case ErrorCode::kConfig: return "config_error";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kCheckpointVersion: return "checkpoint_version_error";
    case ErrorCode::kCheckpointTruncated: return "checkpoint_truncated_error";
    case ErrorCode::kCheckpointShape: return "checkpoint_shape_error";
  }
  return "unknown_error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }
  const char* code_name() const { return error_code_name(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool cond, ErrorCode code, const std::string& message) {
  if (!cond) fail(code, message);
}

}  // namespace suede
