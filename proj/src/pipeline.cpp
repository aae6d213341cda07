#include "teleop/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <set>
#include <thread>

#include "teleop/error.hpp"

namespace teleop {

namespace fs = std::filesystem;
using formats::json;
using Clock = std::chrono::steady_clock;

// ------------------------------------------------------------ configuration

namespace {

void allow_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw Error(ErrorCode::kSchema, where + ": expected an object");
  const std::set<std::string> ok(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw Error(ErrorCode::kSchema, where + ": unknown key \"" + k + "\"");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j[key].get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::kSchema, where + "." + key + ": wrong type");
  }
}

JointVector read_vector(const json& j, const std::string& where) {
  if (!j.is_array()) throw Error(ErrorCode::kSchema, where + ": expected an array of numbers");
  JointVector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw Error(ErrorCode::kSchema, where + ": expected an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

FrameMap read_frame_map(const json& j) {
  if (j.is_string()) return FrameMap::named(j.get<std::string>());
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::kSchema, "frame_map: expected a name or a 3x3 matrix");
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    const JointVector row = read_vector(j[i], "frame_map");
    if (row.size() != 3) throw Error(ErrorCode::kSchema, "frame_map: rows must have 3 entries");
    r.row(i) = row.transpose();
  }
  return FrameMap::from_matrix("custom", r);
}

fs::path resolve_path(const json& j, const char* key, const fs::path& base) {
  if (!j.contains(key)) return {};
  if (!j[key].is_string()) throw Error(ErrorCode::kSchema, std::string(key) + ": expected a path string");
  const fs::path p = j[key].get<std::string>();
  return p.is_absolute() ? p : base / p;
}

}  // namespace

SessionConfig SessionConfig::from_json(const json& j, const fs::path& base_dir) {
  allow_keys(j, "session",
             {"format", "arm_model", "hand_model", "robot_model", "frame_map", "redundancy", "ik", "retarget",
              "limits", "episode", "branches", "robot"});
  if (j.value("format", "") != "session-v1") throw Error(ErrorCode::kSchema, "session: format must be \"session-v1\"");
  SessionConfig c;
  c.arm_model = resolve_path(j, "arm_model", base_dir);
  c.hand_model = resolve_path(j, "hand_model", base_dir);
  c.robot_model = resolve_path(j, "robot_model", base_dir);
  if (c.arm_model.empty() || c.hand_model.empty())
    throw Error(ErrorCode::kSchema, "session: arm_model and hand_model are required");
  for (const auto& p : {c.arm_model, c.hand_model, c.robot_model})
    if (!p.empty() && !fs::exists(p)) throw Error(ErrorCode::kSchema, "session: model file not found: " + p.string());
  if (j.contains("frame_map")) c.frame_map = read_frame_map(j["frame_map"]);

  if (j.contains("redundancy")) {
    const json& r = j["redundancy"];
    allow_keys(r, "redundancy", {"w_m", "w_n", "w_c", "q_neutral"});
    read(r, "w_m", c.w_m, "redundancy");
    read(r, "w_n", c.w_n, "redundancy");
    read(r, "w_c", c.w_c, "redundancy");
    if (c.w_m < 0 || c.w_n < 0 || c.w_c < 0) throw Error(ErrorCode::kSchema, "redundancy: weights must be >= 0");
    if (r.contains("q_neutral")) c.arm_neutral = read_vector(r["q_neutral"], "redundancy.q_neutral");
  }
  if (j.contains("ik")) {
    const json& k = j["ik"];
    allow_keys(k, "ik",
               {"ee_frame", "bracket_half_width", "scan_samples", "extra_seeds", "min_manipulability", "search_tol",
                "search_max_iterations"});
    read(k, "ee_frame", c.ik.ee_frame, "ik");
    read(k, "bracket_half_width", c.ik.bracket_half_width, "ik");
    read(k, "scan_samples", c.ik.scan_samples, "ik");
    read(k, "extra_seeds", c.ik.extra_seeds, "ik");
    read(k, "min_manipulability", c.ik.min_manipulability, "ik");
    read(k, "search_tol", c.ik.search_tol, "ik");
    read(k, "search_max_iterations", c.ik.search_max_iterations, "ik");
  }
  if (j.contains("retarget")) {
    const json& r = j["retarget"];
    auto& rc = c.retarget;
    allow_keys(r, "retarget",
               {"d_proj", "d_esc", "eta_finger", "eta_wrist", "scale", "weight_finger_projected",
                "weight_wrist_projected", "weight_free", "huber_delta", "lambda", "ema_alpha", "pinky_scaling",
                "gamma_lo", "gamma_hi", "ratio_lo", "ratio_hi", "tol", "max_iterations", "hand_scale"});
    read(r, "d_proj", rc.d_proj, "retarget");
    read(r, "d_esc", rc.d_esc, "retarget");
    read(r, "eta_finger", rc.eta_finger, "retarget");
    read(r, "eta_wrist", rc.eta_wrist, "retarget");
    read(r, "scale", rc.scale, "retarget");
    read(r, "weight_finger_projected", rc.weight_finger_projected, "retarget");
    read(r, "weight_wrist_projected", rc.weight_wrist_projected, "retarget");
    read(r, "weight_free", rc.weight_free, "retarget");
    read(r, "huber_delta", rc.huber_delta, "retarget");
    read(r, "lambda", rc.lambda, "retarget");
    read(r, "ema_alpha", rc.ema_alpha, "retarget");
    read(r, "pinky_scaling", rc.pinky_scaling, "retarget");
    read(r, "gamma_lo", rc.gamma_lo, "retarget");
    read(r, "gamma_hi", rc.gamma_hi, "retarget");
    read(r, "ratio_lo", rc.ratio_lo, "retarget");
    read(r, "ratio_hi", rc.ratio_hi, "retarget");
    read(r, "tol", rc.tol, "retarget");
    read(r, "max_iterations", rc.max_iterations, "retarget");
    read(r, "hand_scale", rc.hand_scale, "retarget");
    rc.validate();
  }
  if (j.contains("limits")) {
    const json& l = j["limits"];
    allow_keys(l, "limits", {"v_max", "a_max", "j_max"});
    read(l, "v_max", c.limits.v_max, "limits");
    read(l, "a_max", c.limits.a_max, "limits");
    read(l, "j_max", c.limits.j_max, "limits");
    if (!(c.limits.v_max > 0 && c.limits.a_max > 0 && c.limits.j_max > 0))
      throw Error(ErrorCode::kSchema, "limits: must be positive");
  }
  if (j.contains("episode")) {
    allow_keys(j["episode"], "episode", {"task", "episode_id"});
    read(j["episode"], "task", c.task, "episode");
    read(j["episode"], "episode_id", c.episode_id, "episode");
  }
  if (j.contains("branches")) {
    allow_keys(j["branches"], "branches", {"arm", "hand"});
    read(j["branches"], "arm", c.arm_enabled, "branches");
    read(j["branches"], "hand", c.hand_enabled, "branches");
  }
  if (j.contains("robot")) {
    allow_keys(j["robot"], "robot", {"host", "port"});
    read(j["robot"], "host", c.host, "robot");
    read(j["robot"], "port", c.port, "robot");
  }
  return c;
}

SessionConfig SessionConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

// ------------------------------------------------------------------- engine

namespace {

RedundancyWeights make_weights(const KinematicModel& arm, const SessionConfig& cfg) {
  RedundancyWeights w = RedundancyWeights::defaults(arm);
  w.w_m = cfg.w_m;
  w.w_n = cfg.w_n;
  w.w_c = cfg.w_c;
  return w;
}

// Targets already met this closely by the current command are not re-solved,
// so a motionless operator does not cause null-space drift.
constexpr double kHoldTolerance = 1e-9;

}  // namespace

TeleopEngine::TeleopEngine(const SessionConfig& cfg)
    : cfg_(cfg),
      arm_(KinematicModel::load(cfg.arm_model)),
      hand_(KinematicModel::load(cfg.hand_model)),
      weights_(make_weights(arm_, cfg)),
      arm_neutral_(cfg.arm_neutral.value_or(arm_.mid_range())),
      retarget_(hand_, cfg.retarget) {
  if (arm_neutral_.size() != arm_.dof()) throw Error(ErrorCode::kSchema, "redundancy.q_neutral has wrong length");
  if (!arm_.has_frame(cfg.ik.ee_frame)) throw Error(ErrorCode::kUnknownFrame, "arm model lacks frame " + cfg.ik.ee_frame);
}

void TeleopEngine::start(const JointVector& q_robot) {
  if (q_robot.size() != action_dim())
    throw Error(ErrorCode::kSchema, "robot state has " + std::to_string(q_robot.size()) + " joints, expected " +
                                        std::to_string(action_dim()));
  arm_cmd_ = q_robot.head(arm_.dof());
  hand_cmd_ = q_robot.tail(hand_.dof());
  ee0_ = arm_.evaluate(arm_cmd_).pose(cfg_.ik.ee_frame);
  retarget_.reset();
  started_ = true;
  anchored_ = false;
}

StepResult TeleopEngine::step(const formats::TrackingRecord& rec) {
  if (!started_) throw Error(ErrorCode::kSchema, "engine step before start");
  const auto t0 = Clock::now();
  StepResult out;

  if (!anchored_ || rec.engage) {
    wrist0_ = rec.frame.wrist;
    ee0_ = arm_.evaluate(arm_cmd_).pose(cfg_.ik.ee_frame);
    anchored_ = true;
  }

  if (cfg_.arm_enabled) {
    const DifferentialIntent intent = map_intent(compute_intent(wrist0_, rec.frame.wrist), cfg_.frame_map);
    const Pose target = compose_target(ee0_, intent);
    const IkSolution now = measure(arm_, arm_cmd_, target, cfg_.ik.ee_frame);
    if (now.position_err > kHoldTolerance || now.orientation_err > kHoldTolerance) {
      const ResolveResult r = resolve(arm_, {target, arm_cmd_, arm_neutral_}, weights_, cfg_.ik);
      out.ik_evaluations = r.evaluations;
      if (r.status == IkStatus::kOk) arm_cmd_ = r.solution.q;
      else out.ik_ok = false;
    }
  }

  if (cfg_.hand_enabled) {
    hand_cmd_ = retarget_.step(rec.frame);
    out.hand_iterations = retarget_.last_result().iterations;
    out.hand_converged = retarget_.last_result().status == SolveStatus::kConverged;
  }

  out.action.resize(action_dim());
  out.action << arm_cmd_, hand_cmd_;
  out.compute_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  return out;
}

// ------------------------------------------------------------ frame sources

StreamFileSource::StreamFileSource(const fs::path& path) : in_(path) {
  if (!in_) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  reader_ = std::make_unique<formats::StreamReader>(in_);
}

std::optional<formats::TrackingRecord> StreamFileSource::next() { return reader_->next(); }

void TrackingQueue::push(formats::TrackingRecord rec) {
  {
    std::lock_guard lock(mu_);
    if (closed_) return;
    q_.push_back(std::move(rec));
  }
  cv_.notify_all();
}

void TrackingQueue::close() {
  {
    std::lock_guard lock(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

std::optional<formats::TrackingRecord> TrackingQueue::next() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return !q_.empty() || closed_; });
  if (q_.empty()) return std::nullopt;
  auto r = std::move(q_.front());
  q_.pop_front();
  return r;
}

LiveTrackingSource::LiveTrackingSource(const std::string& host, std::uint16_t ws_port) {
  auto subscribed = std::make_shared<std::promise<void>>();
  auto acked = subscribed->get_future();
  io::WsClient::Handlers h;
  h.on_message = [this, subscribed](const json& j) {
    const std::string type = j.value("type", "");
    if (type == "subscribed") {
      try {
        subscribed->set_value();
      } catch (const std::future_error&) {  // repeated acknowledgement
      }
    } else if (type == "tracking") {
      try {
        auto rec = formats::tracking_from_json(j);
        if (last_t_ && rec.frame.t < *last_t_) return;
        last_t_ = rec.frame.t;
        queue_.push(std::move(rec));
      } catch (const Error&) {
      }
    } else if (type == "end") {
      queue_.close();
    }
  };
  h.on_close = [this] { queue_.close(); };
  client_ = std::make_unique<io::WsClient>(host, ws_port, "/ws", std::move(h));
  client_->send({{"type", "subscribe"}, {"topic", "tracking"}});
  if (acked.wait_for(std::chrono::seconds(2)) != std::future_status::ready)
    throw Error(ErrorCode::kHandshakeTimeout, "no tracking subscription acknowledgement");
}

std::optional<formats::TrackingRecord> LiveTrackingSource::next() { return queue_.next(); }

// -------------------------------------------------------------- robot links

namespace {

Observation to_observation(const wire::State& s) {
  Observation o;
  o.timestamp_us = s.timestamp_us;
  o.q = Eigen::Map<const JointVector>(s.q.data(), static_cast<Eigen::Index>(s.q.size()));
  o.dq = Eigen::Map<const JointVector>(s.dq.data(), static_cast<Eigen::Index>(s.dq.size()));
  return o;
}

io::ClientOptions commander_options(bool deterministic) {
  io::ClientOptions o;
  o.role = wire::Role::kCommander;
  o.state_rate_hz = deterministic ? 0 : 250;
  return o;
}

constexpr auto kStateTimeout = std::chrono::seconds(5);

}  // namespace

ClientLink::ClientLink(const std::string& host, std::uint16_t port, bool deterministic)
    : client_(host, port, commander_options(deterministic)), deterministic_(deterministic) {}

Observation ClientLink::initial() {
  const auto s = client_.next_state(kStateTimeout);
  if (!s) throw Error(ErrorCode::kIo, "no initial state from server");
  last_ = to_observation(*s);
  base_us_ = last_.timestamp_us;
  wall0_ = Clock::now();
  return last_;
}

Observation ClientLink::observe(std::uint64_t offset_us) {
  const std::uint64_t target = base_us_ + offset_us;
  if (deterministic_) {
    if (target > last_.timestamp_us) {
      client_.send_heartbeat(target);
      const auto s = client_.state_at_least(target, kStateTimeout);
      if (!s) throw Error(ErrorCode::kIo, "server did not advance to t=" + std::to_string(target) + " us");
      last_ = to_observation(*s);
    }
    return last_;
  }
  std::this_thread::sleep_until(wall0_ + std::chrono::microseconds(offset_us));
  while (auto s = client_.next_state(std::chrono::microseconds(0))) last_ = to_observation(*s);
  return last_;
}

void ClientLink::send(std::uint64_t offset_us, const JointVector& action) {
  client_.send_command(base_us_ + offset_us, std::vector<double>(action.data(), action.data() + action.size()));
}

// ------------------------------------------------------------------ running

json RunReport::to_json() const {
  return {{"frames", frames},
          {"ik_failures", ik_failures},
          {"ik_evaluations", {{"mean", ik_evaluations_mean}, {"max", ik_evaluations_max}}},
          {"hand_iterations", {{"mean", hand_iterations_mean}, {"max", hand_iterations_max}}},
          {"hand_not_converged", hand_not_converged},
          {"compute_ms", {{"mean", compute_ms_mean}, {"max", compute_ms_max}}},
          {"recorded_steps", recorded_steps},
          {"disconnected", disconnected},
          {"disconnect_reason", disconnect_reason}};
}

RunReport run_teleop(TeleopEngine& engine, FrameSource& source, RobotLink& link, const RunOptions& opts) {
  RunReport report;
  const Observation first = link.initial();
  engine.start(first.q);

  std::unique_ptr<formats::EpisodeWriter> recorder;
  if (opts.record_dir) {
    formats::EpisodeMeta meta;
    meta.episode_id = engine.config().episode_id;
    meta.task = engine.config().task;
    meta.action_dim = engine.action_dim();
    recorder = std::make_unique<formats::EpisodeWriter>(*opts.record_dir, meta);
  }

  std::optional<double> t_first;
  std::uint64_t last_offset = 0;
  double ik_sum = 0.0, hand_sum = 0.0, ms_sum = 0.0;
  try {
    while (auto rec = source.next()) {
      if (!t_first) t_first = rec->frame.t;
      const auto offset =
          std::max(last_offset, static_cast<std::uint64_t>(std::llround((rec->frame.t - *t_first) * 1e6)));
      last_offset = offset;

      const Observation obs = link.observe(offset);
      const StepResult step = engine.step(*rec);
      link.send(offset, step.action);

      ++report.frames;
      if (!step.ik_ok) ++report.ik_failures;
      ik_sum += step.ik_evaluations;
      report.ik_evaluations_max = std::max(report.ik_evaluations_max, step.ik_evaluations);
      hand_sum += step.hand_iterations;
      report.hand_iterations_max = std::max(report.hand_iterations_max, step.hand_iterations);
      if (!step.hand_converged) ++report.hand_not_converged;
      ms_sum += step.compute_ms;
      report.compute_ms_max = std::max(report.compute_ms_max, step.compute_ms);
      if (opts.command_log) opts.command_log->push_back({offset, step.action});
      if (opts.on_step) opts.on_step(step);
      if (recorder) {
        formats::EpisodeStep es;
        es.t = static_cast<double>(obs.timestamp_us) * 1e-6;
        es.q.assign(obs.q.data(), obs.q.data() + obs.q.size());
        es.dq.assign(obs.dq.data(), obs.dq.data() + obs.dq.size());
        es.action.assign(step.action.data(), step.action.data() + step.action.size());
        recorder->append(es);
        ++report.recorded_steps;
      }
    }
  } catch (const io::PeerError& e) {
    report.disconnected = true;
    report.disconnect_reason = e.what();
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kIo) throw;
    report.disconnected = true;
    report.disconnect_reason = e.what();
  }
  if (recorder) recorder->close();
  if (report.frames > 0) {
    const auto n = static_cast<double>(report.frames);
    report.ik_evaluations_mean = ik_sum / n;
    report.hand_iterations_mean = hand_sum / n;
    report.compute_ms_mean = ms_sum / n;
  }
  return report;
}

}  // namespace teleop
