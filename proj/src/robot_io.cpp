#include "teleop/robot_io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <boost/asio.hpp>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <thread>

namespace teleop::io {

namespace asio = boost::asio;
using asio::ip::tcp;
using Bytes = std::vector<std::uint8_t>;
using SharedBytes = std::shared_ptr<const Bytes>;
using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// Plant

namespace {

BridgeConfig plant_bridge(const KinematicModel& model, std::vector<Limits> limits, std::int64_t tick_us) {
  BridgeConfig cfg;
  cfg.tick_us = tick_us;
  cfg.limits = limits.empty() ? default_limits(model.dof()) : std::move(limits);
  cfg.lower = model.lower();
  cfg.upper = model.upper();
  return cfg;
}

}  // namespace

std::vector<Limits> default_limits(int dof) { return std::vector<Limits>(static_cast<std::size_t>(dof), Limits{}); }

Plant::Plant(const KinematicModel& model, std::vector<Limits> limits, const JointVector& q0, std::int64_t tick_us)
    : tick_us_(tick_us),
      lower_(model.lower()),
      upper_(model.upper()),
      bridge_(plant_bridge(model, std::move(limits), tick_us), model.clamp(q0)),
      q_(model.clamp(q0)),
      dq_(JointVector::Zero(q0.size())) {
  if (q0.size() != model.dof()) throw Error(ErrorCode::kSchema, "initial configuration has wrong joint count");
}

void Plant::command(std::int64_t t_us, const JointVector& target) {
  if (target.size() != dof()) throw Error(ErrorCode::kSchema, "target has wrong joint count");
  bridge_.command(t_us, target);
}

void Plant::step() {
  const TrajectoryState s = bridge_.tick();
  const double dt = static_cast<double>(tick_us_) * 1e-6;
  dq_ = s.v;
  q_ = (q_ + s.v * dt).cwiseMax(lower_).cwiseMin(upper_);
}

wire::State Plant::state() const {
  wire::State s;
  s.timestamp_us = static_cast<std::uint64_t>(now_us());
  s.q.assign(q_.data(), q_.data() + q_.size());
  s.dq.assign(dq_.data(), dq_.data() + dq_.size());
  return s;
}

// ---------------------------------------------------------------------------
// Server

namespace {

SharedBytes frame(const wire::Message& m) { return std::make_shared<const Bytes>(wire::encode(m)); }

// Whether a client at `rate_hz` is due a state for the tick ending at t_us.
bool rate_due(std::int64_t t_us, std::int64_t tick_us, std::uint16_t rate_hz) {
  if (rate_hz == 0) return false;
  const auto slot = [&](std::int64_t t) { return t * rate_hz / 1000000; };
  return slot(t_us) != slot(t_us - tick_us);
}

}  // namespace

struct RobotServer::Impl {
  struct Session;

  struct Subscriber {
    wire::Role role = wire::Role::kObserver;
    std::uint16_t rate_hz = 30;
    std::int64_t last_sent_us = -1;
    bool reply_due = false;
  };

  using Outbox = std::vector<std::pair<std::uint64_t, SharedBytes>>;

  Impl(KinematicModel m, ServerConfig c)
      : model(std::move(m)),
        cfg(std::move(c)),
        plant(model, cfg.limits, cfg.initial.value_or(model.mid_range()), cfg.tick_us) {}

  // Everything below `mu` is shared between the network and control threads.
  KinematicModel model;
  ServerConfig cfg;
  mutable std::mutex mu;
  Plant plant;
  std::map<std::uint64_t, Subscriber> subs;
  std::optional<std::uint64_t> commander;
  std::deque<std::pair<std::uint64_t, JointVector>> inbox;
  ServerStats stats;

  // Network thread only.
  asio::io_context io;
  tcp::acceptor acceptor{io};
  std::map<std::uint64_t, std::shared_ptr<Session>> sessions;
  std::uint64_t next_id = 1;

  std::thread io_thread;
  std::thread control_thread;
  std::atomic<bool> running{false};
  std::atomic<std::uint16_t> bound_port{0};

  // Advances the plant by one tick and collects the states that are due.
  // Caller holds `mu`.
  Outbox tick_locked() {
    for (auto& [id, target] : inbox) {
      plant.command(plant.now_us(), target);
      if (auto it = subs.find(id); it != subs.end() && it->second.rate_hz == 0) it->second.reply_due = true;
    }
    inbox.clear();
    plant.step();
    ++stats.ticks;
    if (!model.within_limits(plant.q())) ++stats.limit_violations;

    Outbox out;
    SharedBytes bytes;
    const std::int64_t now = plant.now_us();
    for (auto& [id, sub] : subs) {
      if (!(sub.reply_due || rate_due(now, plant.tick_us(), sub.rate_hz)) || now <= sub.last_sent_us) continue;
      if (!bytes) bytes = frame(plant.state());
      out.emplace_back(id, bytes);
      sub.last_sent_us = now;
      sub.reply_due = false;
    }
    return out;
  }

  void deliver(const Outbox& out);
  void accept();
  void control_loop();
  void unregister(std::uint64_t id);
};

struct RobotServer::Impl::Session : std::enable_shared_from_this<Session> {
  Session(Impl& s, tcp::socket sock, std::uint64_t i) : srv(s), socket(std::move(sock)), id(i) {}

  Impl& srv;
  tcp::socket socket;
  std::uint64_t id;
  bool greeted = false;
  bool closing = false;
  wire::FrameDecoder decoder;
  std::array<std::uint8_t, 16384> buf{};
  std::deque<SharedBytes> outq;
  bool writing = false;
  std::optional<Clock::time_point> full_since;

  void start() {
    boost::system::error_code ec;
    socket.set_option(tcp::no_delay(true), ec);
    read();
  }

  void read() {
    socket.async_read_some(asio::buffer(buf), [self = shared_from_this()](boost::system::error_code ec, std::size_t n) {
      if (ec) return self->drop();
      self->decoder.feed(std::span(self->buf.data(), n));
      try {
        while (!self->closing) {
          auto msg = self->decoder.next();
          if (!msg) break;
          self->handle(*msg);
        }
      } catch (const wire::WireError& e) {
        self->fail(kErrMalformed, e.what());
      }
      if (!self->closing) self->read();
    });
  }

  void handle(const wire::Message& msg) {
    if (!greeted) {
      const auto* hello = std::get_if<wire::Hello>(&msg);
      if (!hello) return fail(kErrProtocol, "expected HELLO");
      greet(*hello);
      return;
    }
    std::visit(
        [&](const auto& m) {
          using T = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<T, wire::Command>) on_command(m);
          else if constexpr (std::is_same_v<T, wire::Heartbeat>) on_heartbeat(m);
          else fail(kErrProtocol, "unexpected message type");
        },
        msg);
  }

  void greet(const wire::Hello& hello) {
    const std::uint16_t rate = std::min(hello.state_rate_hz, kMaxStateRateHz);
    SharedBytes initial;
    {
      std::unique_lock lock(srv.mu);
      if (hello.role == wire::Role::kCommander) {
        if (srv.commander) {
          lock.unlock();
          return fail(kErrCommanderTaken, "commander slot occupied");
        }
        srv.commander = id;
      }
      Subscriber sub;
      sub.role = hello.role;
      sub.rate_hz = rate;
      sub.last_sent_us = srv.plant.now_us();
      srv.subs[id] = sub;
      initial = frame(srv.plant.state());
    }
    greeted = true;
    send(frame(wire::Hello{hello.role, rate}), false);
    send(initial, false);
  }

  void on_command(const wire::Command& cmd) {
    std::unique_lock lock(srv.mu);
    if (srv.commander != id) {
      lock.unlock();
      return fail(kErrProtocol, "only the commander may send commands");
    }
    if (static_cast<int>(cmd.targets.size()) != srv.plant.dof()) {
      lock.unlock();
      return fail(kErrMalformed, "expected " + std::to_string(srv.plant.dof()) + " joints");
    }
    const JointVector target = Eigen::Map<const JointVector>(cmd.targets.data(), srv.plant.dof());
    ++srv.stats.commands;
    if (srv.cfg.deterministic) {
      if (cmd.timestamp_us > static_cast<std::uint64_t>(INT64_MAX)) {
        lock.unlock();
        return fail(kErrProtocol, "timestamp out of range");
      }
      try {
        srv.plant.command(static_cast<std::int64_t>(cmd.timestamp_us), target);
      } catch (const Error& e) {
        lock.unlock();
        return fail(kErrProtocol, e.what());
      }
      return;
    }
    if (srv.inbox.size() >= srv.cfg.command_queue) {
      srv.inbox.pop_front();
      ++srv.stats.dropped_commands;
    }
    srv.inbox.emplace_back(id, target);
  }

  void on_heartbeat(const wire::Heartbeat& hb) {
    // Outside deterministic mode, and with a zero stamp, heartbeats are only
    // liveness signals.
    if (!srv.cfg.deterministic || hb.timestamp_us == 0) return;
    Outbox out;
    {
      std::unique_lock lock(srv.mu);
      if (srv.commander != id) return;
      constexpr std::uint64_t kMaxAdvanceUs = 60'000'000;
      const auto now = static_cast<std::uint64_t>(srv.plant.now_us());
      if (hb.timestamp_us > now + kMaxAdvanceUs) {
        lock.unlock();
        return fail(kErrProtocol, "clock advance larger than 60 s");
      }
      while (static_cast<std::uint64_t>(srv.plant.now_us()) < hb.timestamp_us) {
        auto part = srv.tick_locked();
        out.insert(out.end(), part.begin(), part.end());
      }
      auto& me = srv.subs[id];
      if (me.last_sent_us < srv.plant.now_us()) {
        me.last_sent_us = srv.plant.now_us();
        out.emplace_back(id, frame(srv.plant.state()));
      }
    }
    srv.deliver(out);
  }

  void send(SharedBytes bytes, bool droppable) {
    if (closing && droppable) return;
    if (droppable && outq.size() >= srv.cfg.send_queue_frames) {
      const auto now = Clock::now();
      if (!full_since) full_since = now;
      if (now - *full_since >= srv.cfg.slow_client_timeout) {
        {
          std::lock_guard lock(srv.mu);
          ++srv.stats.slow_disconnects;
        }
        drop();
      }
      return;
    }
    full_since.reset();
    outq.push_back(std::move(bytes));
    if (!writing) write();
  }

  void write() {
    writing = true;
    asio::async_write(socket, asio::buffer(*outq.front()),
                      [self = shared_from_this()](boost::system::error_code ec, std::size_t) {
                        self->writing = false;
                        if (ec) return self->drop();
                        self->outq.pop_front();
                        if (!self->outq.empty()) return self->write();
                        if (self->closing) self->drop();
                      });
  }

  // Sends ERROR and closes once it is flushed.
  void fail(std::uint16_t code, const std::string& text) {
    if (closing) return;
    srv.unregister(id);
    // Keep a frame that is mid-write; the error follows it.
    while (outq.size() > (writing ? 1u : 0u)) outq.pop_back();
    closing = true;
    outq.push_back(frame(wire::ErrorMsg{code, text}));
    if (!writing) write();
  }

  void drop() {
    srv.unregister(id);
    boost::system::error_code ec;
    socket.shutdown(tcp::socket::shutdown_both, ec);
    socket.close(ec);
    srv.sessions.erase(id);
  }
};

void RobotServer::Impl::unregister(std::uint64_t id) {
  std::lock_guard lock(mu);
  subs.erase(id);
  if (commander == id) {
    commander.reset();
    std::erase_if(inbox, [&](const auto& e) { return e.first == id; });
  }
}

void RobotServer::Impl::deliver(const Outbox& out) {
  for (const auto& [id, bytes] : out)
    if (auto it = sessions.find(id); it != sessions.end()) {
      const auto keep = it->second;
      keep->send(bytes, true);
    }
}

void RobotServer::Impl::accept() {
  acceptor.async_accept([this](boost::system::error_code ec, tcp::socket socket) {
    if (ec) {
      if (ec == asio::error::operation_aborted) return;
      return accept();
    }
    const std::uint64_t id = next_id++;
    auto s = std::make_shared<Session>(*this, std::move(socket), id);
    sessions[id] = s;
    s->start();
    accept();
  });
}

void RobotServer::Impl::control_loop() {
  const auto period = std::chrono::microseconds(cfg.tick_us);
  auto next = Clock::now();
  while (running) {
    next += period;
    std::this_thread::sleep_until(next);
    // After a long stall, restart the schedule instead of bursting ticks.
    if (Clock::now() - next > 100 * period) next = Clock::now();
    Outbox out;
    {
      std::lock_guard lock(mu);
      out = tick_locked();
    }
    if (!out.empty()) asio::post(io, [this, out = std::move(out)] { deliver(out); });
  }
}

RobotServer::RobotServer(KinematicModel model, ServerConfig cfg)
    : impl_(std::make_unique<Impl>(std::move(model), std::move(cfg))) {}

RobotServer::~RobotServer() { stop(); }

void RobotServer::start() {
  if (impl_->running.exchange(true)) return;
  auto& s = *impl_;
  try {
    const tcp::endpoint ep(asio::ip::make_address(s.cfg.bind_address), s.cfg.port);
    s.acceptor.open(ep.protocol());
    s.acceptor.set_option(tcp::acceptor::reuse_address(true));
    s.acceptor.bind(ep);
    s.acceptor.listen();
  } catch (const boost::system::system_error& e) {
    s.running = false;
    throw Error(ErrorCode::kIo, std::string("cannot listen: ") + e.what());
  }
  s.bound_port = s.acceptor.local_endpoint().port();
  s.accept();
  s.io_thread = std::thread([&s] { s.io.run(); });
  if (!s.cfg.deterministic) s.control_thread = std::thread([&s] { s.control_loop(); });
}

void RobotServer::stop() {
  auto& s = *impl_;
  if (!s.running.exchange(false)) return;
  if (s.control_thread.joinable()) s.control_thread.join();
  asio::post(s.io, [&s] {
    boost::system::error_code ec;
    s.acceptor.close(ec);
    auto sessions = s.sessions;
    for (auto& [id, sess] : sessions) sess->drop();
  });
  asio::post(s.io, [&s] { s.io.stop(); });
  if (s.io_thread.joinable()) s.io_thread.join();
}

std::uint16_t RobotServer::port() const { return impl_->bound_port; }
const KinematicModel& RobotServer::model() const { return impl_->model; }
const ServerConfig& RobotServer::config() const { return impl_->cfg; }

ServerStats RobotServer::stats() const {
  std::lock_guard lock(impl_->mu);
  ServerStats st = impl_->stats;
  st.clients = impl_->subs.size();
  return st;
}

wire::State RobotServer::snapshot() const {
  std::lock_guard lock(impl_->mu);
  return impl_->plant.state();
}

// ---------------------------------------------------------------------------
// Client

struct RobotClient::Impl {
  asio::io_context io;
  tcp::socket socket{io};
  asio::steady_timer heartbeat{io};
  std::thread thread;
  ClientOptions opts;

  // Network thread only.
  wire::FrameDecoder decoder;
  std::array<std::uint8_t, 16384> buf{};
  std::deque<SharedBytes> outq;
  bool writing = false;

  std::mutex mu;
  std::condition_variable cv;
  std::deque<wire::State> states;
  std::optional<wire::ErrorMsg> peer_error;
  std::optional<std::uint16_t> granted_rate;
  bool closed = false;

  static constexpr std::size_t kMaxBufferedStates = 100000;

  void mark_closed() {
    {
      std::lock_guard lock(mu);
      closed = true;
    }
    cv.notify_all();
    boost::system::error_code ec;
    heartbeat.cancel();
    socket.close(ec);
  }

  void read() {
    socket.async_read_some(asio::buffer(buf), [this](boost::system::error_code ec, std::size_t n) {
      if (ec) return mark_closed();
      decoder.feed(std::span(buf.data(), n));
      try {
        while (auto msg = decoder.next()) on_message(*msg);
      } catch (const wire::WireError&) {
        return mark_closed();
      }
      read();
    });
  }

  void on_message(const wire::Message& msg) {
    {
      std::lock_guard lock(mu);
      if (const auto* s = std::get_if<wire::State>(&msg)) {
        if (states.size() >= kMaxBufferedStates) states.pop_front();
        states.push_back(*s);
      } else if (const auto* h = std::get_if<wire::Hello>(&msg)) {
        granted_rate = h->state_rate_hz;
      } else if (const auto* e = std::get_if<wire::ErrorMsg>(&msg)) {
        peer_error = *e;
      }
    }
    cv.notify_all();
  }

  void send(SharedBytes bytes) {
    outq.push_back(std::move(bytes));
    if (!writing) write();
  }

  void write() {
    writing = true;
    asio::async_write(socket, asio::buffer(*outq.front()), [this](boost::system::error_code ec, std::size_t) {
      writing = false;
      if (ec) return mark_closed();
      outq.pop_front();
      if (!outq.empty()) write();
    });
  }

  void schedule_heartbeat() {
    heartbeat.expires_after(opts.heartbeat_period);
    heartbeat.async_wait([this](boost::system::error_code ec) {
      if (ec) return;
      send(frame(wire::Heartbeat{0}));
      schedule_heartbeat();
    });
  }

  void post_send(SharedBytes bytes) {
    {
      std::lock_guard lock(mu);
      if (closed) throw Error(ErrorCode::kIo, "connection closed");
    }
    asio::post(io, [this, b = std::move(bytes)]() mutable { send(std::move(b)); });
  }

  void shutdown() {
    asio::post(io, [this] {
      boost::system::error_code ec;
      heartbeat.cancel();
      socket.shutdown(tcp::socket::shutdown_both, ec);
      socket.close(ec);
      io.stop();
    });
    if (thread.joinable()) thread.join();
    std::lock_guard lock(mu);
    closed = true;
  }
};

RobotClient::RobotClient(const std::string& host, std::uint16_t port, ClientOptions opts)
    : impl_(std::make_unique<Impl>()) {
  auto& c = *impl_;
  c.opts = opts;
  boost::system::error_code ec;
  tcp::resolver resolver(c.io);
  const auto endpoints = resolver.resolve(host, std::to_string(port), ec);
  if (!ec) asio::connect(c.socket, endpoints, ec);
  if (ec) throw Error(ErrorCode::kConnectRefused, host + ":" + std::to_string(port) + ": " + ec.message());
  c.socket.set_option(tcp::no_delay(true), ec);

  c.send(frame(wire::Hello{opts.role, opts.state_rate_hz}));
  c.read();
  c.schedule_heartbeat();
  c.thread = std::thread([&c] { c.io.run(); });

  std::unique_lock lock(c.mu);
  const bool done = c.cv.wait_for(lock, opts.handshake_timeout,
                                  [&] { return c.granted_rate || c.peer_error || c.closed; });
  const auto err = c.peer_error;
  const bool ok = c.granted_rate.has_value();
  lock.unlock();
  if (ok) return;
  c.shutdown();
  if (err) throw PeerError(err->code, err->text);
  if (!done) throw Error(ErrorCode::kHandshakeTimeout, "no HELLO reply within " +
                                                           std::to_string(opts.handshake_timeout.count()) + " ms");
  throw Error(ErrorCode::kHandshakeTimeout, "connection closed during handshake");
}

RobotClient::~RobotClient() { close(); }

void RobotClient::send_command(std::uint64_t timestamp_us, const std::vector<double>& targets) {
  impl_->post_send(frame(wire::Command{timestamp_us, targets}));
}

void RobotClient::send_heartbeat(std::uint64_t timestamp_us) { impl_->post_send(frame(wire::Heartbeat{timestamp_us})); }

std::optional<wire::State> RobotClient::next_state(std::chrono::microseconds timeout) {
  auto& c = *impl_;
  std::unique_lock lock(c.mu);
  c.cv.wait_for(lock, timeout, [&] { return !c.states.empty() || c.peer_error || c.closed; });
  if (!c.states.empty()) {
    wire::State s = std::move(c.states.front());
    c.states.pop_front();
    return s;
  }
  if (c.peer_error) throw PeerError(c.peer_error->code, c.peer_error->text);
  if (c.closed) throw Error(ErrorCode::kIo, "connection closed");
  return std::nullopt;
}

std::optional<wire::State> RobotClient::state_at_least(std::uint64_t timestamp_us, std::chrono::microseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  while (true) {
    const auto left = std::chrono::duration_cast<std::chrono::microseconds>(deadline - Clock::now());
    auto s = next_state(std::max(left, std::chrono::microseconds(0)));
    if (!s) return std::nullopt;
    if (s->timestamp_us >= timestamp_us) return s;
  }
}

std::uint16_t RobotClient::state_rate_hz() const {
  std::lock_guard lock(impl_->mu);
  return impl_->granted_rate.value_or(0);
}

bool RobotClient::connected() const {
  std::lock_guard lock(impl_->mu);
  return !impl_->closed;
}

void RobotClient::close() {
  if (impl_) impl_->shutdown();
}

LatencyReport measure_round_trip(RobotClient& commander, std::size_t n, std::chrono::milliseconds timeout) {
  auto state = commander.next_state(timeout);
  if (!state) throw Error(ErrorCode::kIo, "no initial state from server");
  const std::vector<double> hold = state->q;
  std::vector<double> rtt;
  rtt.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto t0 = Clock::now();
    commander.send_command(i, hold);
    if (!commander.next_state(timeout)) throw Error(ErrorCode::kIo, "no state reply within timeout");
    rtt.push_back(std::chrono::duration<double, std::micro>(Clock::now() - t0).count());
  }
  LatencyReport r;
  r.samples = n;
  if (n == 0) return r;
  for (double x : rtt) r.mean_us += x / static_cast<double>(n);
  std::sort(rtt.begin(), rtt.end());
  const auto rank = [&](double p) { return rtt[std::min(n - 1, static_cast<std::size_t>(std::ceil(p * n)) - 1)]; };
  r.p50_us = rank(0.50);
  r.p99_us = rank(0.99);
  r.max_us = rtt.back();
  return r;
}

}  // namespace teleop::io
