#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace teleop {

enum class ErrorCode {
  kSchema,
  kCyclicMimic,
  kUnknownFrame,
  kDegenerate,
  kInfeasible,
  kMalformed,
  kUnsupportedVersion,
  kUnknownType,
  kConnectRefused,
  kHandshakeTimeout,
  kPeerError,
  kNonMonotoneTime,
  kMissingJoint,
  kVersionMismatch,
  kCorrupt,
  kIo,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-checkable code next to the human message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace teleop
