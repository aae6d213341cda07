#include "teleop/ws_bridge.hpp"

#include <atomic>
#include <cmath>
#include <set>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "teleop/error.hpp"
#include "teleop/formats.hpp"
#include "teleop/robot_io.hpp"

namespace teleop::io {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using Text = std::shared_ptr<const std::string>;

// ------------------------------------------------------------- JSON mirrors

json to_json(const wire::State& s) {
  return {{"type", "state"}, {"timestamp_us", s.timestamp_us}, {"n", s.q.size()}, {"q", s.q}, {"dq", s.dq}};
}

json to_json(const wire::Command& c) {
  return {{"type", "command"}, {"timestamp_us", c.timestamp_us}, {"n_joints", c.targets.size()}, {"targets", c.targets}};
}

json to_json(const wire::Hello& h) {
  return {{"type", "hello"},
          {"role", h.role == wire::Role::kCommander ? "commander" : "observer"},
          {"state_rate_hz", h.state_rate_hz}};
}

json to_json(const wire::Heartbeat& h) { return {{"type", "heartbeat"}, {"timestamp_us", h.timestamp_us}}; }

json to_json(const wire::ErrorMsg& e) { return {{"type", "error"}, {"code", e.code}, {"text", e.text}}; }

json link_poses(const KinematicModel& model, const wire::State& s) {
  json frames = json::object();
  if (static_cast<int>(s.q.size()) == model.dof()) {
    const ChainState st =
        model.evaluate(Eigen::Map<const JointVector>(s.q.data(), static_cast<Eigen::Index>(s.q.size())));
    for (const auto& name : model.frame_names()) {
      const Pose p = st.pose(name);
      frames[name] = {{"p", {p.p.x(), p.p.y(), p.p.z()}}, {"q", {p.q.w, p.q.x, p.q.y, p.q.z}}};
    }
  }
  return {{"type", "link_poses"}, {"timestamp_us", s.timestamp_us}, {"frames", std::move(frames)}};
}

std::optional<std::string> command_problem(const json& j, int dof) {
  if (!j.contains("timestamp_us") || !j["timestamp_us"].is_number_unsigned())
    return "timestamp_us: expected an unsigned integer";
  if (!j.contains("targets") || !j["targets"].is_array()) return "targets: expected an array";
  const auto& t = j["targets"];
  if (!j.contains("n_joints") || !j["n_joints"].is_number_integer() || j["n_joints"].get<long>() != static_cast<long>(t.size()))
    return "n_joints: expected the length of targets";
  if (static_cast<int>(t.size()) != dof) return "targets: expected " + std::to_string(dof);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!t[i].is_number() || !std::isfinite(t[i].get<double>()))
      return "targets[" + std::to_string(i) + "]: expected a finite number";
  return std::nullopt;
}

// ------------------------------------------------------------------- bridge

namespace {

Text text(const json& j) { return std::make_shared<const std::string>(j.dump()); }

Text error_text(std::uint16_t code, const std::string& msg) { return text(to_json(wire::ErrorMsg{code, msg})); }

}  // namespace

struct WsBridge::Impl {
  class Session;

  const KinematicModel& model;
  WsBridgeConfig cfg;
  asio::io_context ioc;
  tcp::acceptor acceptor{ioc};
  std::set<std::shared_ptr<Session>> sessions;
  std::atomic<std::size_t> session_count{0};
  std::unique_ptr<RobotClient> observer;
  std::thread io_thread, pump_thread;
  std::atomic<bool> running{false};

  Impl(const KinematicModel& m, WsBridgeConfig c) : model(m), cfg(std::move(c)) {}

  void accept();
  void broadcast(const Text& t);
  void relay_tracking(const Text& t);
  void pump();
};

class WsBridge::Impl::Session : public std::enable_shared_from_this<Session> {
 public:
  Session(Impl& br, tcp::socket sock) : br_(br), ws_(std::move(sock)) {}

  void run() {
    http::async_read(ws_.next_layer(), buf_, req_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_request(ec); });
  }

  void send(const Text& t) {
    if (closed_) return;
    if (outq_.size() >= br_.cfg.send_queue_messages) return drop();
    outq_.push_back(t);
    if (!writing_) write_next();
  }

  void drop() {
    if (closed_) return;
    closed_ = true;
    commander_.reset();
    br_.sessions.erase(shared_from_this());
    br_.session_count = br_.sessions.size();
    beast::error_code ignored;
    beast::get_lowest_layer(ws_).socket().shutdown(tcp::socket::shutdown_both, ignored);
    beast::get_lowest_layer(ws_).close();
  }

  bool tracking() const { return tracking_; }

 private:
  void on_request(beast::error_code ec) {
    if (ec) return;
    if (req_.target() != "/ws" || !websocket::is_upgrade(req_)) {
      auto res = std::make_shared<http::response<http::string_body>>(http::status::not_found, req_.version());
      res->set(http::field::content_type, "text/plain");
      res->body() = "websocket endpoint is /ws\n";
      res->prepare_payload();
      http::async_write(ws_.next_layer(), *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
        beast::error_code ignored;
        beast::get_lowest_layer(self->ws_).socket().shutdown(tcp::socket::shutdown_both, ignored);
      });
      return;
    }
    beast::get_lowest_layer(ws_).expires_never();
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req_, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->br_.sessions.insert(self);
      self->br_.session_count = self->br_.sessions.size();
      self->read();
    });
  }

  void read() {
    ws_.async_read(buf_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->drop();
      std::string msg = beast::buffers_to_string(self->buf_.data());
      self->buf_.consume(self->buf_.size());
      self->handle(msg);
      if (!self->closed_) self->read();
    });
  }

  void write_next() {
    writing_ = true;
    ws_.text(true);
    ws_.async_write(asio::buffer(*outq_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->drop();
      self->outq_.pop_front();
      if (self->outq_.empty()) self->writing_ = false;
      else self->write_next();
    });
  }

  void reply_error(std::uint16_t code, const std::string& msg) { send(error_text(code, msg)); }

  void handle(const std::string& msg) {
    json j;
    try {
      j = json::parse(msg);
    } catch (const json::exception&) {
      return reply_error(kErrMalformed, "invalid JSON");
    }
    if (!j.is_object() || !j.contains("type") || !j["type"].is_string())
      return reply_error(kErrMalformed, "type: expected a string");
    const std::string type = j["type"];
    if (type == "tracking") {
      if (auto p = formats::tracking_problem(j)) return reply_error(kErrMalformed, *p);
      br_.relay_tracking(text(j));
    } else if (type == "end") {
      br_.relay_tracking(text(json{{"type", "end"}}));
    } else if (type == "subscribe") {
      if (j.value("topic", "") != "tracking") return reply_error(kErrMalformed, "topic: expected \"tracking\"");
      tracking_ = true;
      send(text({{"type", "subscribed"}, {"topic", "tracking"}}));
    } else if (type == "hello") {
      on_hello(j);
    } else if (type == "command") {
      on_command(j);
    } else if (type == "heartbeat") {
      if (!j.contains("timestamp_us") || !j["timestamp_us"].is_number_unsigned())
        return reply_error(kErrMalformed, "timestamp_us: expected an unsigned integer");
      if (commander_) commander_->send_heartbeat(j["timestamp_us"].get<std::uint64_t>());
    } else {
      reply_error(kErrProtocol, "type: unknown \"" + type + "\"");
    }
  }

  void on_hello(const json& j) {
    const std::string role = j.value("role", "");
    if (role != "commander" && role != "observer")
      return reply_error(kErrMalformed, "role: expected \"commander\" or \"observer\"");
    if (role == "commander" && !commander_) {
      try {
        ClientOptions opts;
        opts.role = wire::Role::kCommander;
        opts.state_rate_hz = 0;
        commander_ = std::make_unique<RobotClient>(br_.cfg.robot_host, br_.cfg.robot_port, opts);
      } catch (const PeerError& e) {
        return reply_error(e.peer_code(), e.text());
      } catch (const Error& e) {
        return reply_error(kErrProtocol, e.what());
      }
    }
    const auto r = role == "commander" ? wire::Role::kCommander : wire::Role::kObserver;
    send(text(to_json(wire::Hello{r, br_.cfg.state_rate_hz})));
  }

  void on_command(const json& j) {
    if (!commander_) return reply_error(kErrProtocol, "command requires a commander hello");
    if (auto p = command_problem(j, br_.model.dof())) return reply_error(kErrMalformed, *p);
    try {
      commander_->send_command(j["timestamp_us"].get<std::uint64_t>(), j["targets"].get<std::vector<double>>());
      // The commander link carries no periodic states; discard replies.
      while (commander_->next_state(std::chrono::microseconds(0))) {
      }
    } catch (const PeerError& e) {
      commander_.reset();
      reply_error(e.peer_code(), e.text());
    } catch (const Error& e) {
      commander_.reset();
      reply_error(kErrProtocol, std::string("robot connection lost: ") + e.what());
    }
  }

  Impl& br_;
  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buf_;
  http::request<http::string_body> req_;
  std::deque<Text> outq_;
  bool writing_ = false;
  bool closed_ = false;
  bool tracking_ = false;
  std::unique_ptr<RobotClient> commander_;
};

void WsBridge::Impl::accept() {
  acceptor.async_accept([this](beast::error_code ec, tcp::socket sock) {
    if (ec) return;
    std::make_shared<Session>(*this, std::move(sock))->run();
    accept();
  });
}

void WsBridge::Impl::broadcast(const Text& t) {
  // Sessions may drop themselves while sending.
  const auto snapshot = sessions;
  for (const auto& s : snapshot) s->send(t);
}

void WsBridge::Impl::relay_tracking(const Text& t) {
  const auto snapshot = sessions;
  for (const auto& s : snapshot)
    if (s->tracking()) s->send(t);
}

void WsBridge::Impl::pump() {
  while (running) {
    try {
      const auto s = observer->next_state(std::chrono::milliseconds(100));
      if (!s) continue;
      const Text state = text(to_json(*s));
      const Text poses = text(link_poses(model, *s));
      asio::post(ioc, [this, state, poses] {
        broadcast(state);
        broadcast(poses);
      });
    } catch (const Error& e) {
      const Text err = error_text(kErrProtocol, std::string("robot connection lost: ") + e.what());
      asio::post(ioc, [this, err] { broadcast(err); });
      return;
    }
  }
}

WsBridge::WsBridge(const KinematicModel& model, WsBridgeConfig cfg)
    : impl_(std::make_shared<Impl>(model, std::move(cfg))) {}

WsBridge::~WsBridge() { stop(); }

void WsBridge::start() {
  auto& im = *impl_;
  if (im.running) return;
  ClientOptions opts;
  opts.role = wire::Role::kObserver;
  opts.state_rate_hz = im.cfg.state_rate_hz;
  im.observer = std::make_unique<RobotClient>(im.cfg.robot_host, im.cfg.robot_port, opts);

  const tcp::endpoint ep(asio::ip::make_address(im.cfg.bind_address), im.cfg.port);
  im.acceptor.open(ep.protocol());
  im.acceptor.set_option(asio::socket_base::reuse_address(true));
  im.acceptor.bind(ep);
  im.acceptor.listen();
  im.running = true;
  im.accept();
  im.io_thread = std::thread([&im] {
    auto guard = asio::make_work_guard(im.ioc);
    im.ioc.run();
  });
  im.pump_thread = std::thread([&im] { im.pump(); });
}

void WsBridge::stop() {
  auto& im = *impl_;
  if (!im.running.exchange(false)) return;
  if (im.pump_thread.joinable()) im.pump_thread.join();
  asio::post(im.ioc, [&im] {
    beast::error_code ignored;
    im.acceptor.close(ignored);
    const auto snapshot = im.sessions;
    for (const auto& s : snapshot) s->drop();
  });
  asio::post(im.ioc, [&im] { im.ioc.stop(); });
  if (im.io_thread.joinable()) im.io_thread.join();
  im.observer.reset();
}

std::uint16_t WsBridge::port() const { return impl_->acceptor.local_endpoint().port(); }

std::size_t WsBridge::sessions() const { return impl_->session_count; }

// ------------------------------------------------------------------- client

struct WsClient::Impl : std::enable_shared_from_this<WsClient::Impl> {
  asio::io_context ioc;
  websocket::stream<beast::tcp_stream> ws{ioc};
  beast::flat_buffer buf;
  Handlers handlers;
  std::thread thread;

  std::mutex mu;
  std::condition_variable cv;
  std::deque<json> inbox;
  bool closed = false;

  std::deque<Text> outq;  // io thread only
  bool writing = false;

  void read() {
    ws.async_read(buf, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->on_closed();
      json j;
      try {
        j = json::parse(beast::buffers_to_string(self->buf.data()));
      } catch (const json::exception&) {
        j = json{{"type", "error"}, {"code", kErrMalformed}, {"text", "invalid JSON from peer"}};
      }
      self->buf.consume(self->buf.size());
      if (self->handlers.on_message) {
        self->handlers.on_message(j);
      } else {
        std::lock_guard lock(self->mu);
        self->inbox.push_back(std::move(j));
        self->cv.notify_all();
      }
      self->read();
    });
  }

  void on_closed() {
    {
      std::lock_guard lock(mu);
      if (closed) return;
      closed = true;
    }
    cv.notify_all();
    if (handlers.on_close) handlers.on_close();
  }

  void write_next() {
    writing = true;
    ws.text(true);
    ws.async_write(asio::buffer(*outq.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->outq.clear();
        self->writing = false;
        return;
      }
      self->outq.pop_front();
      if (self->outq.empty()) self->writing = false;
      else self->write_next();
    });
  }
};

WsClient::WsClient(const std::string& host, std::uint16_t port, const std::string& path, Handlers handlers)
    : impl_(std::make_shared<Impl>()) {
  impl_->handlers = std::move(handlers);
  try {
    tcp::resolver resolver(impl_->ioc);
    beast::get_lowest_layer(impl_->ws).expires_after(std::chrono::seconds(2));
    beast::get_lowest_layer(impl_->ws).connect(resolver.resolve(host, std::to_string(port)));
    impl_->ws.handshake(host + ":" + std::to_string(port), path);
    beast::get_lowest_layer(impl_->ws).expires_never();
    impl_->ws.set_option(websocket::stream_base::timeout::suggested(beast::role_type::client));
  } catch (const boost::system::system_error& e) {
    throw Error(ErrorCode::kConnectRefused, "ws://" + host + ":" + std::to_string(port) + path + ": " + e.what());
  }
  impl_->read();
  impl_->thread = std::thread([im = impl_] { im->ioc.run(); });
}

WsClient::~WsClient() { close(); }

void WsClient::send(const json& j) { send_text(j.dump()); }

void WsClient::send_text(std::string t) {
  auto msg = std::make_shared<const std::string>(std::move(t));
  asio::post(impl_->ioc, [im = impl_, msg] {
    {
      std::lock_guard lock(im->mu);
      if (im->closed) return;
    }
    im->outq.push_back(msg);
    if (!im->writing) im->write_next();
  });
}

std::optional<json> WsClient::receive(std::chrono::milliseconds timeout) {
  std::unique_lock lock(impl_->mu);
  impl_->cv.wait_for(lock, timeout, [&] { return !impl_->inbox.empty() || impl_->closed; });
  if (impl_->inbox.empty()) return std::nullopt;
  json j = std::move(impl_->inbox.front());
  impl_->inbox.pop_front();
  return j;
}

std::optional<json> WsClient::receive_type(const std::string& type, std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() < 0) return std::nullopt;
    auto j = receive(left);
    if (!j) return std::nullopt;
    if (j->value("type", "") == type) return j;
  }
}

bool WsClient::open() const {
  std::lock_guard lock(impl_->mu);
  return !impl_->closed;
}

void WsClient::close() {
  if (!impl_->thread.joinable()) return;
  asio::post(impl_->ioc, [im = impl_] {
    {
      std::lock_guard lock(im->mu);
      if (im->closed) return;
    }
    beast::get_lowest_layer(im->ws).expires_after(std::chrono::seconds(1));
    im->ws.async_close(websocket::close_code::normal, [im](beast::error_code) {
      beast::get_lowest_layer(im->ws).close();
    });
  });
  impl_->thread.join();
  impl_->on_closed();
}

}  // namespace teleop::io
