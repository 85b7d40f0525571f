// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace violet {

enum class ErrorCode {
  kInvalidSpec,
  kInvalidConfig,
  kInvalidArgument,
  kOutOfVocabulary,
  kUnsupportedTarget,
  kDegenerateCodebook,
  kInvalidTeacher,
  kDegenerateTarget,
  kInvalidInstance,
  kCheckpointIncompatible,
  kSchema,
  kIo,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidSpec: return "invalid-spec";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kOutOfVocabulary: return "out-of-vocabulary";
    case ErrorCode::kUnsupportedTarget: return "unsupported-target";
    case ErrorCode::kDegenerateCodebook: return "degenerate-codebook";
    case ErrorCode::kInvalidTeacher: return "invalid-teacher";
    case ErrorCode::kDegenerateTarget: return "degenerate-target";
    case ErrorCode::kInvalidInstance: return "invalid-instance";
    case ErrorCode::kCheckpointIncompatible: return "checkpoint-incompatible";
    case ErrorCode::kSchema: return "schema";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can dispatch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace violet
