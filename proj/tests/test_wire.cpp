#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "teleop/wire.hpp"

using namespace teleop;
using namespace teleop::wire;

namespace {

using Bytes = std::vector<std::uint8_t>;

// Independent encoder: lays fields out with memcpy on a little-endian host.
Bytes reference_heartbeat(std::uint64_t ts) {
  static_assert(std::endian::native == std::endian::little);
  Bytes out(20);
  std::memcpy(out.data(), "LFRX", 4);
  out[4] = 1;
  out[5] = 4;
  const std::uint32_t len = 8;
  std::memcpy(out.data() + 8, &len, 4);
  std::memcpy(out.data() + 12, &ts, 8);
  return out;
}

Bytes reference_command(std::uint64_t ts, const std::vector<double>& targets) {
  Bytes out(12 + 9 + 8 * targets.size());
  std::memcpy(out.data(), "LFRX", 4);
  out[4] = 1;
  out[5] = 2;
  const auto len = static_cast<std::uint32_t>(9 + 8 * targets.size());
  std::memcpy(out.data() + 8, &len, 4);
  std::memcpy(out.data() + 12, &ts, 8);
  out[20] = static_cast<std::uint8_t>(targets.size());
  std::memcpy(out.data() + 21, targets.data(), 8 * targets.size());
  return out;
}

Message random_message(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> kind(0, 4);
  std::uniform_int_distribution<int> n(0, 40);
  std::uniform_real_distribution<double> val(-1e3, 1e3);
  std::uniform_int_distribution<std::uint64_t> ts;
  auto doubles = [&](int k) {
    std::vector<double> v(k);
    for (double& x : v) x = val(rng);
    return v;
  };
  switch (kind(rng)) {
    case 0:
      return Hello{rng() % 2 ? Role::kCommander : Role::kObserver, static_cast<std::uint16_t>(rng())};
    case 1:
      return Command{ts(rng), doubles(n(rng))};
    case 2: {
      const int k = n(rng);
      return State{ts(rng), doubles(k), doubles(k)};
    }
    case 3:
      return Heartbeat{ts(rng)};
    default: {
      std::string text(static_cast<std::size_t>(n(rng)), ' ');
      for (char& c : text) c = static_cast<char>(rng());
      return ErrorMsg{static_cast<std::uint16_t>(rng()), text};
    }
  }
}

ErrorCode decode_error(const Bytes& b, std::size_t* offset = nullptr) {
  try {
    decode(b);
  } catch (const WireError& e) {
    if (offset) *offset = e.offset();
    return e.code();
  }
  FAIL("decode accepted an invalid frame");
  return ErrorCode::kIo;
}

}  // namespace

TEST_CASE("heartbeat golden bytes") {
  const Bytes golden = {0x4C, 0x46, 0x52, 0x58, 0x01, 0x04, 0x00, 0x00, 0x08, 0x00,
                        0x00, 0x00, 0, 0, 0, 0, 0, 0, 0, 0};
  CHECK(encode(Heartbeat{0}) == golden);
  CHECK(reference_heartbeat(0) == golden);
  for (std::uint64_t ts : {1ull, 0x0102030405060708ull, ~0ull}) CHECK(encode(Heartbeat{ts}) == reference_heartbeat(ts));
}

TEST_CASE("command bytes match the reference encoder") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-4, 4);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> q(19);
    for (double& x : q) x = u(rng);
    const std::uint64_t ts = rng();
    CHECK(encode(Command{ts, q}) == reference_command(ts, q));
  }
}

TEST_CASE("decode rejects bad frames with the right code and offset") {
  const Bytes good = encode(Command{5, std::vector<double>(19, 0.25)});
  std::size_t off = 99;

  Bytes b = good;
  std::memcpy(b.data(), "XXXX", 4);
  CHECK(decode_error(b, &off) == ErrorCode::kMalformed);
  CHECK(off == 0);

  b = good;
  b[4] = 2;
  CHECK(decode_error(b, &off) == ErrorCode::kUnsupportedVersion);

  b = good;
  b[5] = 0x09;
  CHECK(decode_error(b, &off) == ErrorCode::kUnknownType);

  b = good;
  b[7] = 1;
  CHECK(decode_error(b, &off) == ErrorCode::kMalformed);
  CHECK(off == 7);

  b = good;
  b.pop_back();
  CHECK(decode_error(b) == ErrorCode::kMalformed);

  b = good;
  b.resize(6);
  CHECK(decode_error(b) == ErrorCode::kMalformed);

  b = good;
  b[20] = 20;  // claims one more joint than the payload carries
  CHECK(decode_error(b) == ErrorCode::kMalformed);

  b = good;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::memcpy(b.data() + 21 + 8 * 3, &nan, 8);
  CHECK(decode_error(b, &off) == ErrorCode::kMalformed);
  CHECK(off == 21 + 8 * 3);

  b = encode(Heartbeat{1});
  const std::uint32_t big = kMaxPayload + 1;
  std::memcpy(b.data() + 8, &big, 4);
  CHECK(decode_error(b, &off) == ErrorCode::kMalformed);
  CHECK(off == 8);

  b = encode(Hello{Role::kCommander, 30});
  b[12] = 3;
  CHECK(decode_error(b) == ErrorCode::kMalformed);
}

TEST_CASE("error text survives a round trip") {
  const ErrorMsg e{1, "commander slot occupied"};
  CHECK(std::get<ErrorMsg>(decode(encode(e))) == e);
}

TEST_CASE("fuzzed round trip with random chunk boundaries") {
  std::mt19937_64 rng(11);
  std::vector<Message> sent;
  Bytes stream;
  for (int i = 0; i < 10000; ++i) {
    sent.push_back(random_message(rng));
    const Bytes one = encode(sent.back());
    if (!(decode(one) == sent.back())) FAIL("single-frame round trip failed at " << i);
    stream.insert(stream.end(), one.begin(), one.end());
  }
  FrameDecoder dec;
  std::vector<Message> got;
  std::uniform_int_distribution<std::size_t> chunk(1, 700);
  std::size_t pos = 0;
  while (pos < stream.size()) {
    const std::size_t n = std::min(chunk(rng), stream.size() - pos);
    dec.feed(std::span(stream).subspan(pos, n));
    pos += n;
    while (auto m = dec.next()) got.push_back(std::move(*m));
  }
  CHECK(dec.buffered() == 0);
  REQUIRE(got.size() == sent.size());
  int failures = 0;
  for (std::size_t i = 0; i < sent.size(); ++i) failures += got[i] == sent[i] ? 0 : 1;
  CHECK(failures == 0);
}

TEST_CASE("stream decoder keeps one trailing partial frame") {
  const Bytes a = encode(Heartbeat{3});
  const Bytes b = encode(Command{4, {1.0, 2.0}});
  Bytes s = a;
  s.insert(s.end(), b.begin(), b.end() - 5);
  FrameDecoder dec;
  dec.feed(s);
  CHECK(dec.next().has_value());
  CHECK_FALSE(dec.next().has_value());
  CHECK(dec.buffered() == b.size() - 5);
  dec.feed(std::span(b).last(5));
  auto m = dec.next();
  REQUIRE(m.has_value());
  CHECK(std::get<Command>(*m).targets[1] == 2.0);
}

TEST_CASE("stream decoder fails fast on garbage") {
  FrameDecoder dec;
  const Bytes junk = {'L', 'F', 'Q'};
  dec.feed(junk);
  CHECK_THROWS_AS(dec.next(), WireError);
}
