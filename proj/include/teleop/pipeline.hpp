#pragma once

// Session orchestration: tracking frames in, 19-D joint commands out.
//
// Per frame the arm branch maps the wrist motion since engagement onto the
// end-effector and resolves the redundant IK; the hand branch retargets the
// landmarks. The concatenated action (arm joints, then hand joints) is sent
// to the robot and, optionally, recorded together with the observed state.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "teleop/arm_ik.hpp"
#include "teleop/formats.hpp"
#include "teleop/hand_retarget.hpp"
#include "teleop/kinematics.hpp"
#include "teleop/robot_io.hpp"
#include "teleop/se3.hpp"
#include "teleop/ws_bridge.hpp"

namespace teleop {

struct SessionConfig {
  std::filesystem::path arm_model;
  std::filesystem::path hand_model;
  std::filesystem::path robot_model;  // composite served by robot-io; optional here
  FrameMap frame_map = FrameMap::vr_default();
  double w_m = 1.0, w_n = 0.5, w_c = 2.0;
  std::optional<JointVector> arm_neutral;  // default: arm mid-range
  IkConfig ik;
  RetargetConfig retarget;
  Limits limits;  // per-joint trajectory limits used when serving
  std::string task = "teleop";
  std::string episode_id = "episode-0000";
  bool arm_enabled = true;
  bool hand_enabled = true;
  std::string host = "127.0.0.1";
  std::uint16_t port = io::kDefaultPort;

  /// Parses a session-v1 document; relative model paths resolve against
  /// `base_dir`. Throws Error(kSchema) on unknown keys or bad values.
  static SessionConfig from_json(const formats::json& j, const std::filesystem::path& base_dir);
  static SessionConfig load(const std::filesystem::path& path);
};

/// Per-frame output of the two branches.
struct StepResult {
  JointVector action;       // arm then hand
  bool ik_ok = true;        // false: arm command held from the previous frame
  int ik_evaluations = 0;
  int hand_iterations = 0;
  bool hand_converged = true;
  double compute_ms = 0.0;
};

/// Pure computation; no I/O. Deterministic for identical inputs.
class TeleopEngine {
 public:
  explicit TeleopEngine(const SessionConfig& cfg);
  TeleopEngine(const TeleopEngine&) = delete;
  TeleopEngine& operator=(const TeleopEngine&) = delete;

  int arm_dof() const { return arm_.dof(); }
  int hand_dof() const { return hand_.dof(); }
  int action_dim() const { return arm_.dof() + hand_.dof(); }

  /// Records the robot configuration the session starts from; the initial
  /// end-effector pose is its forward kinematics.
  void start(const JointVector& q_robot);
  bool started() const { return started_; }

  /// The first frame, and any frame flagged engage, anchors the operator
  /// wrist pose (and the current commanded end-effector pose).
  StepResult step(const formats::TrackingRecord& rec);

  const SessionConfig& config() const { return cfg_; }
  const KinematicModel& arm() const { return arm_; }
  const KinematicModel& hand() const { return hand_; }
  const Pose& ee_anchor() const { return ee0_; }
  const Pose& wrist_anchor() const { return wrist0_; }

 private:
  SessionConfig cfg_;
  KinematicModel arm_;
  KinematicModel hand_;
  RedundancyWeights weights_;
  JointVector arm_neutral_;
  RetargetSession retarget_;
  bool started_ = false;
  bool anchored_ = false;
  Pose wrist0_, ee0_;
  JointVector arm_cmd_, hand_cmd_;
};

// ------------------------------------------------------------ frame sources

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  /// Next frame, or nullopt at end of input.
  virtual std::optional<formats::TrackingRecord> next() = 0;
};

class StreamFileSource : public FrameSource {
 public:
  explicit StreamFileSource(const std::filesystem::path& path);
  std::optional<formats::TrackingRecord> next() override;

 private:
  std::ifstream in_;
  std::unique_ptr<formats::StreamReader> reader_;
};

/// Thread-safe hand-off for frames arriving from the network.
class TrackingQueue : public FrameSource {
 public:
  void push(formats::TrackingRecord rec);
  /// Ends the stream once the queued frames are consumed.
  void close();
  std::optional<formats::TrackingRecord> next() override;

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<formats::TrackingRecord> q_;
  bool closed_ = false;
};

/// Tracking frames relayed by a WebSocket bridge. The stream ends on an
/// "end" message or when the connection drops; frames whose t goes backwards
/// are discarded.
class LiveTrackingSource : public FrameSource {
 public:
  /// Connects, subscribes to the tracking topic and waits for the
  /// acknowledgement. Throws Error(kConnectRefused) or Error(kHandshakeTimeout).
  LiveTrackingSource(const std::string& host, std::uint16_t ws_port);
  std::optional<formats::TrackingRecord> next() override;

 private:
  TrackingQueue queue_;
  std::optional<double> last_t_;
  std::unique_ptr<io::WsClient> client_;
};

// -------------------------------------------------------------- robot links

struct Observation {
  std::uint64_t timestamp_us = 0;
  JointVector q, dq;
};

class RobotLink {
 public:
  virtual ~RobotLink() = default;
  /// State the session starts from.
  virtual Observation initial() = 0;
  /// State at (or, in realtime, the latest before) offset_us after start.
  virtual Observation observe(std::uint64_t offset_us) = 0;
  virtual void send(std::uint64_t offset_us, const JointVector& action) = 0;
};

/// Commander connection to a robot-io server. In deterministic mode the
/// link drives the server clock; otherwise it paces frames in wall time.
class ClientLink : public RobotLink {
 public:
  ClientLink(const std::string& host, std::uint16_t port, bool deterministic);
  Observation initial() override;
  Observation observe(std::uint64_t offset_us) override;
  void send(std::uint64_t offset_us, const JointVector& action) override;

 private:
  io::RobotClient client_;
  bool deterministic_;
  Observation last_;
  std::uint64_t base_us_ = 0;
  std::chrono::steady_clock::time_point wall0_;
};

// ------------------------------------------------------------------ running

struct CommandRecord {
  std::uint64_t offset_us = 0;
  JointVector action;
};

struct RunOptions {
  std::optional<std::filesystem::path> record_dir;
  std::vector<CommandRecord>* command_log = nullptr;
  std::function<void(const StepResult&)> on_step;
};

struct RunReport {
  std::size_t frames = 0;
  std::size_t ik_failures = 0;
  double ik_evaluations_mean = 0.0;
  int ik_evaluations_max = 0;
  double hand_iterations_mean = 0.0;
  int hand_iterations_max = 0;
  std::size_t hand_not_converged = 0;
  double compute_ms_mean = 0.0;
  double compute_ms_max = 0.0;
  bool disconnected = false;
  std::string disconnect_reason;
  std::size_t recorded_steps = 0;

  formats::json to_json() const;
};

/// Runs frames from `source` through `engine` against `link` until the input
/// ends or the link fails. A lost connection ends the run early with the
/// episode recorded so far preserved.
RunReport run_teleop(TeleopEngine& engine, FrameSource& source, RobotLink& link, const RunOptions& opts = {});

}  // namespace teleop
