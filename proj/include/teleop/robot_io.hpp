#pragma once

// Robot I/O: a simulated arm+hand plant behind the framed wire protocol.
//
// The server owns a 1 kHz plant. One commander feeds joint targets through
// the trajectory bridge; any number of observers receive StateMsgs at their
// requested rate. In deterministic mode no wall clock is used: the plant only
// advances when the commander sends a HEARTBEAT carrying a future timestamp.

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "teleop/error.hpp"
#include "teleop/kinematics.hpp"
#include "teleop/traj.hpp"
#include "teleop/wire.hpp"

namespace teleop::io {

constexpr std::uint16_t kDefaultPort = 47853;
constexpr std::uint16_t kDefaultWsPort = 47854;
constexpr std::uint16_t kMaxStateRateHz = 1000;

// ERROR codes sent by the server before it closes a connection.
constexpr std::uint16_t kErrCommanderTaken = 1;  // "commander slot occupied"
constexpr std::uint16_t kErrMalformed = 2;
constexpr std::uint16_t kErrProtocol = 3;        // valid frame, not allowed here

/// Joint-space plant: trajectory bridge plus clamped velocity integration.
class Plant {
 public:
  Plant(const KinematicModel& model, std::vector<Limits> limits, const JointVector& q0,
        std::int64_t tick_us = 1000);

  /// Queues a target stamped t_us (plant time). Targets are clamped into the
  /// model limits. Throws Error(kSchema) on a size mismatch and
  /// Error(kNonMonotoneTime) if stamps go backwards.
  void command(std::int64_t t_us, const JointVector& target);

  /// One control tick: samples the bridge and integrates q += v dt, clamped.
  void step();

  std::int64_t now_us() const { return bridge_.now_us(); }
  std::int64_t ticks() const { return bridge_.next_tick(); }
  std::int64_t tick_us() const { return tick_us_; }
  const JointVector& q() const { return q_; }
  const JointVector& dq() const { return dq_; }
  const JointVector& lower() const { return lower_; }
  const JointVector& upper() const { return upper_; }
  bool timed_out() const { return bridge_.timed_out(); }
  int dof() const { return static_cast<int>(q_.size()); }

  wire::State state() const;

 private:
  std::int64_t tick_us_;
  JointVector lower_, upper_;
  OnlineBridge bridge_;
  JointVector q_, dq_;
};

/// Default trajectory limits used for every joint when none are configured.
std::vector<Limits> default_limits(int dof);

struct ServerConfig {
  std::string bind_address = "127.0.0.1";
  std::uint16_t port = kDefaultPort;  // 0 picks a free port
  bool deterministic = false;
  std::vector<Limits> limits;         // empty: default_limits(dof)
  std::optional<JointVector> initial; // default: mid-range
  std::int64_t tick_us = 1000;
  std::size_t command_queue = 64;     // realtime inbox; oldest dropped when full
  std::size_t send_queue_frames = 2048;
  std::chrono::milliseconds slow_client_timeout{1000};
};

struct ServerStats {
  std::uint64_t ticks = 0;
  std::uint64_t commands = 0;
  std::uint64_t dropped_commands = 0;
  std::uint64_t limit_violations = 0;  // should stay zero; checked every tick
  std::uint64_t slow_disconnects = 0;
  std::size_t clients = 0;
};

class RobotServer {
 public:
  RobotServer(KinematicModel model, ServerConfig cfg);
  ~RobotServer();
  RobotServer(const RobotServer&) = delete;
  RobotServer& operator=(const RobotServer&) = delete;

  /// Binds and starts the network (and, in realtime mode, control) threads.
  void start();
  void stop();

  std::uint16_t port() const;
  const KinematicModel& model() const;
  const ServerConfig& config() const;
  ServerStats stats() const;
  /// Latest plant state (thread-safe copy).
  wire::State snapshot() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Error returned by the peer in an ERROR message.
class PeerError : public Error {
 public:
  PeerError(std::uint16_t peer_code, const std::string& text)
      : Error(ErrorCode::kPeerError, "code " + std::to_string(peer_code) + ": " + text),
        peer_code_(peer_code),
        text_(text) {}
  std::uint16_t peer_code() const noexcept { return peer_code_; }
  const std::string& text() const noexcept { return text_; }

 private:
  std::uint16_t peer_code_;
  std::string text_;
};

struct ClientOptions {
  wire::Role role = wire::Role::kObserver;
  std::uint16_t state_rate_hz = 30;  // 0: one state per processed command
  std::chrono::milliseconds handshake_timeout{2000};
  std::chrono::milliseconds heartbeat_period{1000};
};

class RobotClient {
 public:
  /// Connects and completes the HELLO handshake. Throws
  /// Error(kConnectRefused), Error(kHandshakeTimeout) or PeerError.
  RobotClient(const std::string& host, std::uint16_t port, ClientOptions opts = {});
  ~RobotClient();
  RobotClient(const RobotClient&) = delete;
  RobotClient& operator=(const RobotClient&) = delete;

  void send_command(std::uint64_t timestamp_us, const std::vector<double>& targets);
  void send_heartbeat(std::uint64_t timestamp_us);

  /// Next StateMsg, or nullopt after `timeout`. Throws PeerError if the server
  /// sent ERROR and Error(kIo) once the connection is gone.
  std::optional<wire::State> next_state(std::chrono::microseconds timeout);
  /// Skips states older than `timestamp_us`.
  std::optional<wire::State> state_at_least(std::uint64_t timestamp_us, std::chrono::microseconds timeout);

  /// Granted rate from the server's HELLO reply.
  std::uint16_t state_rate_hz() const;
  bool connected() const;
  void close();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct LatencyReport {
  std::size_t samples = 0;
  double p50_us = 0.0;
  double p99_us = 0.0;
  double max_us = 0.0;
  double mean_us = 0.0;
};

/// Command-to-state round trips on a commander connected with rate 0. Each
/// command re-sends the last observed position, so the plant does not move.
LatencyReport measure_round_trip(RobotClient& commander, std::size_t n,
                                 std::chrono::milliseconds per_message_timeout = std::chrono::milliseconds(1000));

}  // namespace teleop::io
