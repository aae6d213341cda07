#include "teleop/wire.hpp"

#include <bit>
#include <cmath>
#include <cstring>

namespace teleop::wire {

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::size_t base) : bytes_(bytes), base_(base) {}

  std::size_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  double f64() {
    const std::size_t at = offset();
    const double v = std::bit_cast<double>(le<std::uint64_t>());
    if (!std::isfinite(v)) throw WireError(ErrorCode::kMalformed, at, "non-finite joint value");
    return v;
  }

  std::string rest() {
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), remaining());
    pos_ = bytes_.size();
    return s;
  }

  void need(std::size_t n) const {
    if (remaining() < n) throw WireError(ErrorCode::kMalformed, offset(), "truncated payload");
  }

  void expect_end() const {
    if (remaining() != 0) throw WireError(ErrorCode::kMalformed, offset(), "trailing payload bytes");
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

struct Header {
  MsgType type;
  std::uint32_t length;
};

// Validates the 12-byte header; `bytes` must hold at least kHeaderSize bytes.
Header parse_header(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kMagic[4] = {'L', 'F', 'R', 'X'};
  for (std::size_t i = 0; i < 4; ++i)
    if (bytes[i] != kMagic[i]) throw WireError(ErrorCode::kMalformed, i, "bad magic");
  if (bytes[4] != kVersion)
    throw WireError(ErrorCode::kUnsupportedVersion, 4, "protocol version " + std::to_string(bytes[4]));
  const std::uint8_t t = bytes[5];
  if (t < 0x01 || t > 0x05) throw WireError(ErrorCode::kUnknownType, 5, "message type " + std::to_string(t));
  if (bytes[6] != 0 || bytes[7] != 0) throw WireError(ErrorCode::kMalformed, bytes[6] != 0 ? 6 : 7, "reserved byte set");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[8 + i]) << (8 * i);
  if (len > kMaxPayload) throw WireError(ErrorCode::kMalformed, 8, "payload length " + std::to_string(len));
  return {static_cast<MsgType>(t), len};
}

Message parse_payload(MsgType type, std::span<const std::uint8_t> payload) {
  Reader r(payload, kHeaderSize);
  switch (type) {
    case MsgType::kHello: {
      Hello h;
      const std::size_t at = r.offset();
      const auto role = r.le<std::uint8_t>();
      if (role != 1 && role != 2) throw WireError(ErrorCode::kMalformed, at, "unknown role");
      h.role = static_cast<Role>(role);
      h.state_rate_hz = r.le<std::uint16_t>();
      r.expect_end();
      return h;
    }
    case MsgType::kCommand: {
      Command c;
      c.timestamp_us = r.le<std::uint64_t>();
      const auto n = r.le<std::uint8_t>();
      r.need(8u * n);
      for (int i = 0; i < n; ++i) c.targets.push_back(r.f64());
      r.expect_end();
      return c;
    }
    case MsgType::kState: {
      State s;
      s.timestamp_us = r.le<std::uint64_t>();
      const auto n = r.le<std::uint8_t>();
      r.need(16u * n);
      for (int i = 0; i < n; ++i) s.q.push_back(r.f64());
      for (int i = 0; i < n; ++i) s.dq.push_back(r.f64());
      r.expect_end();
      return s;
    }
    case MsgType::kHeartbeat: {
      Heartbeat h;
      h.timestamp_us = r.le<std::uint64_t>();
      r.expect_end();
      return h;
    }
    case MsgType::kError: {
      ErrorMsg e;
      e.code = r.le<std::uint16_t>();
      e.text = r.rest();
      return e;
    }
  }
  throw WireError(ErrorCode::kUnknownType, 5, "message type");
}

}  // namespace

MsgType type_of(const Message& m) {
  return std::visit(
      [](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Hello>) return MsgType::kHello;
        else if constexpr (std::is_same_v<T, Command>) return MsgType::kCommand;
        else if constexpr (std::is_same_v<T, State>) return MsgType::kState;
        else if constexpr (std::is_same_v<T, Heartbeat>) return MsgType::kHeartbeat;
        else return MsgType::kError;
      },
      m);
}

void encode_into(const Message& m, std::vector<std::uint8_t>& out) {
  const std::size_t start = out.size();
  out.insert(out.end(), {'L', 'F', 'R', 'X', kVersion, static_cast<std::uint8_t>(type_of(m)), 0, 0, 0, 0, 0, 0});
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Hello>) {
          put_u8(out, static_cast<std::uint8_t>(v.role));
          put_le<std::uint16_t>(out, v.state_rate_hz);
        } else if constexpr (std::is_same_v<T, Command>) {
          if (v.targets.size() > 255) throw Error(ErrorCode::kMalformed, "too many joints");
          put_le<std::uint64_t>(out, v.timestamp_us);
          put_u8(out, static_cast<std::uint8_t>(v.targets.size()));
          for (double x : v.targets) put_f64(out, x);
        } else if constexpr (std::is_same_v<T, State>) {
          if (v.q.size() > 255 || v.q.size() != v.dq.size()) throw Error(ErrorCode::kMalformed, "bad state size");
          put_le<std::uint64_t>(out, v.timestamp_us);
          put_u8(out, static_cast<std::uint8_t>(v.q.size()));
          for (double x : v.q) put_f64(out, x);
          for (double x : v.dq) put_f64(out, x);
        } else if constexpr (std::is_same_v<T, Heartbeat>) {
          put_le<std::uint64_t>(out, v.timestamp_us);
        } else {
          put_le<std::uint16_t>(out, v.code);
          out.insert(out.end(), v.text.begin(), v.text.end());
        }
      },
      m);
  const std::size_t len = out.size() - start - kHeaderSize;
  if (len > kMaxPayload) {
    out.resize(start);
    throw Error(ErrorCode::kMalformed, "payload exceeds 65536 bytes");
  }
  for (int i = 0; i < 4; ++i) out[start + 8 + i] = static_cast<std::uint8_t>(len >> (8 * i));
}

std::vector<std::uint8_t> encode(const Message& m) {
  std::vector<std::uint8_t> out;
  encode_into(m, out);
  return out;
}

Message decode(std::span<const std::uint8_t> frame) {
  if (frame.size() < kHeaderSize) {
    // Report the first bad magic byte if there is one, else the truncation.
    static constexpr std::uint8_t kMagic[4] = {'L', 'F', 'R', 'X'};
    for (std::size_t i = 0; i < std::min<std::size_t>(4, frame.size()); ++i)
      if (frame[i] != kMagic[i]) throw WireError(ErrorCode::kMalformed, i, "bad magic");
    throw WireError(ErrorCode::kMalformed, frame.size(), "truncated header");
  }
  const Header h = parse_header(frame);
  if (frame.size() - kHeaderSize < h.length)
    throw WireError(ErrorCode::kMalformed, frame.size(), "truncated payload");
  if (frame.size() - kHeaderSize > h.length)
    throw WireError(ErrorCode::kMalformed, kHeaderSize + h.length, "bytes after frame");
  return parse_payload(h.type, frame.subspan(kHeaderSize));
}

void FrameDecoder::feed(std::span<const std::uint8_t> bytes) {
  if (pos_ > 0 && pos_ >= buf_.size() / 2) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ = 0;
  }
  buf_.insert(buf_.end(), bytes.begin(), bytes.end());
}

std::optional<Message> FrameDecoder::next() {
  const std::span<const std::uint8_t> avail(buf_.data() + pos_, buf_.size() - pos_);
  // Validate magic bytes as soon as they arrive so garbage fails fast.
  static constexpr std::uint8_t kMagic[4] = {'L', 'F', 'R', 'X'};
  for (std::size_t i = 0; i < std::min<std::size_t>(4, avail.size()); ++i)
    if (avail[i] != kMagic[i]) throw WireError(ErrorCode::kMalformed, i, "bad magic");
  if (avail.size() < kHeaderSize) return std::nullopt;
  const Header h = parse_header(avail);
  if (avail.size() < kHeaderSize + h.length) return std::nullopt;
  Message m = parse_payload(h.type, avail.subspan(kHeaderSize, h.length));
  pos_ += kHeaderSize + h.length;
  return m;
}

}  // namespace teleop::wire
