#include "teleop/error.hpp"

namespace teleop {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSchema: return "SCHEMA";
    case ErrorCode::kCyclicMimic: return "CYCLIC_MIMIC";
    case ErrorCode::kUnknownFrame: return "UNKNOWN_FRAME";
    case ErrorCode::kDegenerate: return "DEGENERATE";
    case ErrorCode::kInfeasible: return "INFEASIBLE";
    case ErrorCode::kMalformed: return "MALFORMED";
    case ErrorCode::kUnsupportedVersion: return "UNSUPPORTED_VERSION";
    case ErrorCode::kUnknownType: return "UNKNOWN_TYPE";
    case ErrorCode::kConnectRefused: return "CONNECT_REFUSED";
    case ErrorCode::kHandshakeTimeout: return "HANDSHAKE_TIMEOUT";
    case ErrorCode::kPeerError: return "PEER_ERROR";
    case ErrorCode::kNonMonotoneTime: return "NON_MONOTONE_TIME";
    case ErrorCode::kMissingJoint: return "MISSING_JOINT";
    case ErrorCode::kVersionMismatch: return "VERSION_MISMATCH";
    case ErrorCode::kCorrupt: return "CORRUPT";
    case ErrorCode::kIo: return "IO";
  }
  return "UNKNOWN";
}

}  // namespace teleop
