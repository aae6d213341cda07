#pragma once

// Framed binary protocol between the robot server and its clients.
//
// Frame: "LFRX" | version u8 (=1) | type u8 | 2 reserved zero bytes |
//        payload length u32 | payload. Integers and doubles little-endian.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "teleop/error.hpp"

namespace teleop::wire {

constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kHeaderSize = 12;
constexpr std::uint32_t kMaxPayload = 65536;

enum class MsgType : std::uint8_t { kHello = 0x01, kCommand = 0x02, kState = 0x03, kHeartbeat = 0x04, kError = 0x05 };
enum class Role : std::uint8_t { kCommander = 1, kObserver = 2 };

// ERROR message codes sent by the server.
constexpr std::uint16_t kErrCommanderTaken = 1;
constexpr std::uint16_t kErrMalformed = 2;

struct Hello {
  Role role = Role::kObserver;
  std::uint16_t state_rate_hz = 30;
  bool operator==(const Hello&) const = default;
};

struct Command {
  std::uint64_t timestamp_us = 0;
  std::vector<double> targets;
  bool operator==(const Command&) const = default;
};

struct State {
  std::uint64_t timestamp_us = 0;
  std::vector<double> q;
  std::vector<double> dq;
  bool operator==(const State&) const = default;
};

struct Heartbeat {
  std::uint64_t timestamp_us = 0;
  bool operator==(const Heartbeat&) const = default;
};

struct ErrorMsg {
  std::uint16_t code = 0;
  std::string text;
  bool operator==(const ErrorMsg&) const = default;
};

using Message = std::variant<Hello, Command, State, Heartbeat, ErrorMsg>;

MsgType type_of(const Message& m);

/// Decoding failure with the byte offset (within the frame) it was found at.
class WireError : public Error {
 public:
  WireError(ErrorCode code, std::size_t offset, const std::string& what)
      : Error(code, what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

std::vector<std::uint8_t> encode(const Message& m);
void encode_into(const Message& m, std::vector<std::uint8_t>& out);

/// Decodes exactly one complete frame. Throws WireError (MALFORMED,
/// UNSUPPORTED_VERSION or UNKNOWN_TYPE).
Message decode(std::span<const std::uint8_t> frame);

/// Incremental decoder for a byte stream split at arbitrary points.
class FrameDecoder {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  /// Next complete message, or nullopt if only a partial frame is buffered.
  /// Throws WireError as soon as a header is invalid.
  std::optional<Message> next();
  std::size_t buffered() const { return buf_.size() - pos_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

}  // namespace teleop::wire
