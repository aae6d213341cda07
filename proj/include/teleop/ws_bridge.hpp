#pragma once

// JSON-over-WebSocket mirror of the robot protocol at /ws.
//
// Outbound: state (field-for-field StateMsg), link_poses (every model frame,
// computed server-side), hello/error replies, relayed tracking frames.
// Inbound: hello, command, heartbeat (forwarded to the robot on a commander
// connection), tracking (validated, relayed to "tracking" subscribers),
// subscribe, end. Invalid input gets an error reply; the socket stays open.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "teleop/kinematics.hpp"
#include "teleop/wire.hpp"

namespace teleop::io {

using json = nlohmann::json;

struct WsBridgeConfig {
  std::string bind_address = "127.0.0.1";
  std::uint16_t port = 47854;  // 0 picks an ephemeral port
  std::string robot_host = "127.0.0.1";
  std::uint16_t robot_port = 47853;
  std::uint16_t state_rate_hz = 30;
  std::size_t send_queue_messages = 4096;
};

// JSON mirrors of the binary messages.
json to_json(const wire::State& s);
json to_json(const wire::Command& c);
json to_json(const wire::Hello& h);
json to_json(const wire::Heartbeat& h);
json to_json(const wire::ErrorMsg& e);
/// Frame name -> {"p": [x, y, z], "q": [w, x, y, z]} for every model frame.
json link_poses(const KinematicModel& model, const wire::State& s);

/// Problem with an inbound command object for a robot of `dof` joints, or
/// nullopt if it is well-formed.
std::optional<std::string> command_problem(const json& j, int dof);

class WsBridge {
 public:
  /// `model` is the composite the robot serves; it must outlive the bridge.
  WsBridge(const KinematicModel& model, WsBridgeConfig cfg);
  ~WsBridge();
  WsBridge(const WsBridge&) = delete;
  WsBridge& operator=(const WsBridge&) = delete;

  /// Connects the state observer to the robot and starts listening.
  /// Throws Error(kConnectRefused) if the robot is unreachable.
  void start();
  void stop();
  std::uint16_t port() const;
  std::size_t sessions() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

/// Minimal WebSocket JSON client. Messages arrive on an internal thread and
/// are either handed to `on_message` or queued for receive().
class WsClient {
 public:
  struct Handlers {
    std::function<void(const json&)> on_message;
    std::function<void()> on_close;
  };

  /// Throws Error(kConnectRefused) on TCP or upgrade failure.
  WsClient(const std::string& host, std::uint16_t port, const std::string& path = "/ws", Handlers handlers = {});
  ~WsClient();
  WsClient(const WsClient&) = delete;
  WsClient& operator=(const WsClient&) = delete;

  void send(const json& j);
  void send_text(std::string text);
  /// Next queued message; nullopt on timeout or once closed and drained.
  std::optional<json> receive(std::chrono::milliseconds timeout);
  /// Next queued message of the given type, discarding others.
  std::optional<json> receive_type(const std::string& type, std::chrono::milliseconds timeout);
  bool open() const;
  void close();

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

}  // namespace teleop::io
