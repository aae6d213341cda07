// teleop: command-line front end.
//
//   serve          robot-io server (and WebSocket bridge) for the composite model
//   retarget       hand retargeting of a stream-v1 file, one line per frame
//   ik             redundancy-resolved arm IK for a file of target poses
//   teleop         full session from a file or live tracking, optionally recorded
//   replay         send a recorded episode's actions to a robot server
//   bench-latency  commander round-trip percentiles
//
// Exit status: 0 success, 2 usage error, 3 runtime error. Each command ends by
// printing one JSON summary line on stdout.

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "teleop/error.hpp"
#include "teleop/pipeline.hpp"

using namespace teleop;
using formats::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::atomic<bool> g_stop{false};

struct Address {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

Address parse_address(const std::string& text, std::uint16_t default_port) {
  Address a;
  a.port = default_port;
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) {
    if (!text.empty()) a.host = text;
    return a;
  }
  if (colon > 0) a.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  try {
    std::size_t used = 0;
    const long p = std::stol(port, &used);
    if (used != port.size() || p < 0 || p > 65535) throw std::invalid_argument(port);
    a.port = static_cast<std::uint16_t>(p);
  } catch (const std::exception&) {
    throw CLI::ValidationError("address", "bad port in \"" + text + "\"");
  }
  return a;
}

json vec_json(const JointVector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

void emit(const json& j) { std::cout << j.dump() << std::endl; }

// ------------------------------------------------------------------ serve

struct ServeArgs {
  std::string model;
  int port = io::kDefaultPort;
  int ws_port = io::kDefaultWsPort;
  bool no_ws = false;
  bool deterministic = false;
  std::string bind = "127.0.0.1";
};

int run_serve(const ServeArgs& a) {
  const auto model = KinematicModel::load(a.model);
  io::ServerConfig cfg;
  cfg.bind_address = a.bind;
  cfg.port = static_cast<std::uint16_t>(a.port);
  cfg.deterministic = a.deterministic;
  io::RobotServer server(model, cfg);
  server.start();

  std::unique_ptr<io::WsBridge> bridge;
  if (!a.no_ws) {
    io::WsBridgeConfig b;
    b.bind_address = a.bind;
    b.port = static_cast<std::uint16_t>(a.ws_port);
    b.robot_port = server.port();
    bridge = std::make_unique<io::WsBridge>(model, b);
    bridge->start();
  }
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  emit({{"event", "ready"},
        {"port", server.port()},
        {"ws_port", bridge ? json(bridge->port()) : json(nullptr)},
        {"dof", model.dof()},
        {"deterministic", a.deterministic}});
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  if (bridge) bridge->stop();
  server.stop();
  const auto st = server.stats();
  emit({{"event", "stopped"},
        {"ticks", st.ticks},
        {"commands", st.commands},
        {"dropped_commands", st.dropped_commands},
        {"slow_disconnects", st.slow_disconnects}});
  return 0;
}

// --------------------------------------------------------------- retarget

struct RetargetArgs {
  std::string hand_model, input, out, config;
};

int run_retarget(const RetargetArgs& a) {
  RetargetConfig rc;
  if (!a.config.empty()) rc = SessionConfig::load(a.config).retarget;
  const auto hand = KinematicModel::load(a.hand_model);
  RetargetSession session(hand, rc);
  std::ifstream in(a.input);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + a.input);
  formats::StreamReader reader(in);
  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + a.out);
  std::size_t frames = 0, not_converged = 0;
  long iterations = 0;
  while (auto rec = reader.next()) {
    const JointVector q = session.step(rec->frame);
    const auto& r = session.last_result();
    out << json{{"t", rec->frame.t}, {"q", vec_json(q)}, {"iterations", r.iterations}}.dump() << "\n";
    ++frames;
    iterations += r.iterations;
    if (r.status != SolveStatus::kConverged) ++not_converged;
  }
  emit({{"command", "retarget"},
        {"frames", frames},
        {"iterations_mean", frames ? static_cast<double>(iterations) / frames : 0.0},
        {"not_converged", not_converged},
        {"out", a.out}});
  return 0;
}

// --------------------------------------------------------------------- ik

struct IkArgs {
  std::string arm_model, targets, out, config;
};

Pose pose_from_json(const json& j, std::size_t line) {
  auto fail = [&](const std::string& what) {
    return Error(ErrorCode::kSchema, "line " + std::to_string(line) + ": " + what);
  };
  if (!j.is_object() || !j.contains("p") || !j["p"].is_array() || j["p"].size() != 3)
    throw fail("p: expected 3 numbers");
  if (!j.contains("q") || !j["q"].is_array() || j["q"].size() != 4) throw fail("q: expected 4 numbers (w, x, y, z)");
  Pose p;
  try {
    p.p = Vec3(j["p"][0].get<double>(), j["p"][1].get<double>(), j["p"][2].get<double>());
    p.q = Quat{j["q"][0].get<double>(), j["q"][1].get<double>(), j["q"][2].get<double>(), j["q"][3].get<double>()};
  } catch (const json::exception&) {
    throw fail("expected numbers");
  }
  if (std::abs(p.q.norm() - 1.0) > 1e-6) throw fail("q: not a unit quaternion");
  return p;
}

int run_ik(const IkArgs& a) {
  SessionConfig sc;
  if (!a.config.empty()) sc = SessionConfig::load(a.config);
  const auto arm = KinematicModel::load(a.arm_model);
  RedundancyWeights w = RedundancyWeights::defaults(arm);
  w.w_m = sc.w_m;
  w.w_n = sc.w_n;
  w.w_c = sc.w_c;
  const JointVector neutral = sc.arm_neutral.value_or(arm.mid_range());
  JointVector q_prev = neutral;

  std::ifstream in(a.targets);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + a.targets);
  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + a.out);
  std::string text;
  std::size_t line = 0, solved = 0, unreachable = 0;
  double worst_p = 0.0, worst_r = 0.0;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty()) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kSchema, "line " + std::to_string(line) + ": " + e.what());
    }
    const Pose target = pose_from_json(j, line);
    const ResolveResult r = resolve(arm, {target, q_prev, neutral}, w, sc.ik);
    json row{{"line", line}};
    if (r.status == IkStatus::kOk) {
      ++solved;
      q_prev = r.solution.q;
      worst_p = std::max(worst_p, r.solution.position_err);
      worst_r = std::max(worst_r, r.solution.orientation_err);
      row["status"] = "ok";
      row["q"] = vec_json(r.solution.q);
      row["position_err"] = r.solution.position_err;
      row["orientation_err"] = r.solution.orientation_err;
      row["objective"] = r.solution.objective;
    } else {
      ++unreachable;
      row["status"] = "unreachable";
    }
    out << row.dump() << "\n";
  }
  emit({{"command", "ik"},
        {"targets", solved + unreachable},
        {"solved", solved},
        {"unreachable", unreachable},
        {"max_position_err", worst_p},
        {"max_orientation_err", worst_r},
        {"out", a.out}});
  return 0;
}

// ----------------------------------------------------------------- teleop

struct TeleopArgs {
  std::string config, input, record, addr, live;
  bool deterministic = false;
};

int run_teleop_cmd(const TeleopArgs& a) {
  const SessionConfig cfg = SessionConfig::load(a.config);
  Address robot{cfg.host, cfg.port};
  if (!a.addr.empty()) robot = parse_address(a.addr, cfg.port);

  std::unique_ptr<FrameSource> source;
  if (!a.live.empty()) {
    const Address ws = parse_address(a.live, io::kDefaultWsPort);
    source = std::make_unique<LiveTrackingSource>(ws.host, ws.port);
  } else {
    source = std::make_unique<StreamFileSource>(a.input);
  }
  TeleopEngine engine(cfg);
  ClientLink link(robot.host, robot.port, a.deterministic);
  RunOptions opts;
  if (!a.record.empty()) opts.record_dir = fs::path(a.record);
  const RunReport report = run_teleop(engine, *source, link, opts);
  json j = report.to_json();
  j["command"] = "teleop";
  if (!a.record.empty()) j["episode"] = a.record;
  emit(j);
  return report.disconnected ? kExitRuntime : 0;
}

// ----------------------------------------------------------------- replay

struct ReplayArgs {
  std::string episode, to;
  bool deterministic = false;
};

int run_replay(const ReplayArgs& a) {
  const formats::Episode ep = formats::read_episode(a.episode);
  const Address robot = parse_address(a.to, io::kDefaultPort);
  ClientLink link(robot.host, robot.port, a.deterministic);
  const Observation start = link.initial();
  if (static_cast<std::size_t>(start.q.size()) != static_cast<std::size_t>(ep.meta.action_dim))
    throw Error(ErrorCode::kSchema, "episode action_dim " + std::to_string(ep.meta.action_dim) +
                                        " does not match the robot's " + std::to_string(start.q.size()) + " joints");
  std::size_t sent = 0;
  double max_tracking_gap = 0.0;
  const double t0 = ep.steps.empty() ? 0.0 : ep.steps.front().t;
  bool disconnected = false;
  std::string reason;
  try {
    for (const auto& step : ep.steps) {
      const auto offset = static_cast<std::uint64_t>(std::llround((step.t - t0) * 1e6));
      const Observation obs = link.observe(offset);
      for (std::size_t i = 0; i < step.q.size(); ++i)
        max_tracking_gap = std::max(max_tracking_gap, std::abs(obs.q[static_cast<Eigen::Index>(i)] - step.q[i]));
      link.send(offset, Eigen::Map<const JointVector>(step.action.data(), static_cast<Eigen::Index>(step.action.size())));
      ++sent;
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kIo && e.code() != ErrorCode::kPeerError) throw;
    disconnected = true;
    reason = e.what();
  }
  emit({{"command", "replay"},
        {"steps", ep.steps.size()},
        {"sent", sent},
        {"max_observation_gap", max_tracking_gap},
        {"disconnected", disconnected},
        {"disconnect_reason", reason}});
  return disconnected ? kExitRuntime : 0;
}

// ---------------------------------------------------------- bench-latency

struct BenchArgs {
  std::string addr = "127.0.0.1";
  std::size_t n = 10000;
};

int run_bench(const BenchArgs& a) {
  const Address robot = parse_address(a.addr, io::kDefaultPort);
  io::ClientOptions opts;
  opts.role = wire::Role::kCommander;
  opts.state_rate_hz = 0;
  io::RobotClient commander(robot.host, robot.port, opts);
  const io::LatencyReport r = io::measure_round_trip(commander, a.n);
  emit({{"command", "bench-latency"},
        {"samples", r.samples},
        {"p50_us", r.p50_us},
        {"p99_us", r.p99_us},
        {"max_us", r.max_us},
        {"mean_us", r.mean_us}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teleoperation toolkit: robot server, retargeting, IK, sessions and recording"};
  app.require_subcommand(1);

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "run the robot-io server and WebSocket bridge");
  s->add_option("--model", serve.model, "composite robot model")->required()->check(CLI::ExistingFile);
  s->add_option("--port", serve.port, "TCP port (0: ephemeral)")->check(CLI::Range(0, 65535));
  s->add_option("--ws-port", serve.ws_port, "WebSocket port (0: ephemeral)")->check(CLI::Range(0, 65535));
  s->add_flag("--no-ws", serve.no_ws, "do not start the WebSocket bridge");
  s->add_flag("--deterministic", serve.deterministic, "virtual clock driven by the commander");
  s->add_option("--bind", serve.bind, "listen address");

  RetargetArgs rt;
  auto* r = app.add_subcommand("retarget", "retarget a stream-v1 file to hand joint angles");
  r->add_option("--hand-model", rt.hand_model, "hand model")->required()->check(CLI::ExistingFile);
  r->add_option("--input", rt.input, "stream-v1 file")->required()->check(CLI::ExistingFile);
  r->add_option("--out", rt.out, "output, one JSON line per frame")->required();
  r->add_option("--config", rt.config, "session-v1 file for retargeting parameters")->check(CLI::ExistingFile);

  IkArgs ik;
  auto* k = app.add_subcommand("ik", "solve arm IK for target poses");
  k->add_option("--arm-model", ik.arm_model, "arm model")->required()->check(CLI::ExistingFile);
  k->add_option("--targets", ik.targets, "JSON lines {\"p\":[3],\"q\":[w,x,y,z]}")->required()->check(
      CLI::ExistingFile);
  k->add_option("--out", ik.out, "output, one JSON line per target")->required();
  k->add_option("--config", ik.config, "session-v1 file for weights and solver settings")->check(CLI::ExistingFile);

  TeleopArgs tp;
  auto* t = app.add_subcommand("teleop", "run a teleoperation session");
  t->add_option("--config", tp.config, "session-v1 file")->required()->check(CLI::ExistingFile);
  auto* in = t->add_option("--input", tp.input, "stream-v1 file")->check(CLI::ExistingFile);
  auto* live = t->add_option("--live", tp.live, "WebSocket bridge host:port for live tracking")
                   ->expected(0, 1)
                   ->default_str("127.0.0.1:" + std::to_string(io::kDefaultWsPort));
  in->excludes(live);
  t->add_option("--record", tp.record, "episode directory to write");
  t->add_option("--addr", tp.addr, "robot server host:port (default from config)");
  t->add_flag("--deterministic", tp.deterministic, "drive a deterministic server's clock");

  ReplayArgs rp;
  auto* p = app.add_subcommand("replay", "send a recorded episode to a robot server");
  p->add_option("--episode", rp.episode, "episode-v1 directory")->required()->check(CLI::ExistingDirectory);
  p->add_option("--to", rp.to, "robot server host:port")->required();
  p->add_flag("--deterministic", rp.deterministic, "drive a deterministic server's clock");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench-latency", "measure command-to-state round trips");
  b->add_option("--addr", bench.addr, "robot server host:port");
  b->add_option("--n", bench.n, "round trips")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
    if (t->parsed() && tp.input.empty() && live->count() == 0)
      throw CLI::RequiredError("--input or --live");
    if (t->parsed() && live->count() > 0 && tp.live.empty()) tp.live = "127.0.0.1:" + std::to_string(io::kDefaultWsPort);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (s->parsed()) return run_serve(serve);
    if (r->parsed()) return run_retarget(rt);
    if (k->parsed()) return run_ik(ik);
    if (t->parsed()) return run_teleop_cmd(tp);
    if (p->parsed()) return run_replay(rp);
    if (b->parsed()) return run_bench(bench);
  } catch (const CLI::ValidationError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    emit({{"error", e.what()}});
    return kExitRuntime;
  }
  return kExitUsage;
}
