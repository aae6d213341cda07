#include "teleop/formats.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "teleop/error.hpp"

namespace teleop::formats {

namespace fs = std::filesystem;

namespace {

bool finite_numbers(const json& j, std::size_t n) {
  if (!j.is_array() || j.size() != n) return false;
  for (const auto& x : j)
    if (!x.is_number() || !std::isfinite(x.get<double>())) return false;
  return true;
}

Vec3 vec3(const json& j) { return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()}; }

json array(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

std::string strip_code(const Error& e) {
  const std::string what = e.what();
  const auto colon = what.find(": ");
  return colon == std::string::npos ? what : what.substr(colon + 2);
}

// Structural checks; the geometric ones live in validate(HandFrame).
std::optional<std::string> structure_problem(const json& j) {
  if (!j.is_object()) return "record: expected an object";
  if (!j.contains("t") || !j["t"].is_number() || !std::isfinite(j["t"].get<double>()))
    return "t: expected a finite number";
  if (!j.contains("wrist") || !j["wrist"].is_object()) return "wrist: expected an object";
  const json& w = j["wrist"];
  if (!w.contains("p") || !finite_numbers(w["p"], 3)) return "wrist.p: expected 3 numbers";
  if (!w.contains("q") || !finite_numbers(w["q"], 4)) return "wrist.q: expected 4 numbers";
  double n2 = 0.0;
  for (const auto& x : w["q"]) n2 += x.get<double>() * x.get<double>();
  if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) return "wrist.q: not a unit quaternion";
  if (!j.contains("landmarks") || !j["landmarks"].is_array()) return "landmarks: expected an array";
  if (j["landmarks"].size() != kLandmarkCount) return "landmarks: expected 21";
  for (std::size_t i = 0; i < kLandmarkCount; ++i)
    if (!finite_numbers(j["landmarks"][i], 3)) return "landmarks[" + std::to_string(i) + "]: expected 3 numbers";
  if (j.contains("engage") && !j["engage"].is_boolean()) return "engage: expected a boolean";
  return std::nullopt;
}

TrackingRecord build(const json& j) {
  TrackingRecord r;
  r.frame.t = j["t"].get<double>();
  const json& w = j["wrist"];
  r.frame.wrist.p = vec3(w["p"]);
  r.frame.wrist.q = {w["q"][0].get<double>(), w["q"][1].get<double>(), w["q"][2].get<double>(),
                     w["q"][3].get<double>()};
  for (int i = 0; i < kLandmarkCount; ++i) r.frame.landmarks[i] = vec3(j["landmarks"][i]);
  r.engage = j.value("engage", false);
  return r;
}

}  // namespace

std::optional<std::string> tracking_problem(const json& j) {
  if (auto p = structure_problem(j)) return p;
  try {
    validate(build(j).frame);
  } catch (const Error& e) {
    return strip_code(e);
  }
  return std::nullopt;
}

TrackingRecord tracking_from_json(const json& j) {
  if (auto p = tracking_problem(j)) throw Error(ErrorCode::kSchema, *p);
  return build(j);
}

json to_json(const TrackingRecord& r) {
  json j;
  j["t"] = r.frame.t;
  const Quat& q = r.frame.wrist.q;
  j["wrist"] = {{"p", array(r.frame.wrist.p)}, {"q", json::array({q.w, q.x, q.y, q.z})}};
  json lm = json::array();
  for (const Vec3& v : r.frame.landmarks) lm.push_back(array(v));
  j["landmarks"] = std::move(lm);
  if (r.engage) j["engage"] = true;
  return j;
}

json header_to_json(const StreamHeader& h) {
  return {{"format", "stream-v1"}, {"rate_hz", h.rate_hz}, {"landmark_convention", h.landmark_convention}};
}

StreamHeader header_from_json(const json& j) {
  if (!j.is_object() || j.value("format", "") != "stream-v1")
    throw Error(ErrorCode::kSchema, "header: expected format \"stream-v1\"");
  StreamHeader h;
  if (!j.contains("rate_hz") || !j["rate_hz"].is_number_integer() || j["rate_hz"].get<int>() <= 0)
    throw Error(ErrorCode::kSchema, "header: rate_hz must be a positive integer");
  h.rate_hz = j["rate_hz"].get<int>();
  h.landmark_convention = j.value("landmark_convention", "mediapipe-21");
  if (h.landmark_convention != "mediapipe-21")
    throw Error(ErrorCode::kSchema, "header: unsupported landmark_convention " + h.landmark_convention);
  return h;
}

StreamReader::StreamReader(std::istream& in) : in_(&in) {
  std::string text;
  while (text.empty()) {
    if (!std::getline(*in_, text)) throw Error(ErrorCode::kSchema, "line 1: missing stream-v1 header");
    ++line_;
  }
  try {
    header_ = header_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, "line " + std::to_string(line_) + ": " + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::kSchema, "line " + std::to_string(line_) + ": " + strip_code(e));
  }
}

std::optional<TrackingRecord> StreamReader::next() {
  std::string text;
  do {
    if (!std::getline(*in_, text)) return std::nullopt;
    ++line_;
  } while (text.find_first_not_of(" \t\r") == std::string::npos);
  const std::string where = "line " + std::to_string(line_) + ": ";
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, where + "invalid JSON (" + e.what() + ")");
  }
  if (auto p = tracking_problem(j)) throw Error(ErrorCode::kSchema, where + *p);
  TrackingRecord r = build(j);
  if (last_t_ && r.frame.t < *last_t_) throw Error(ErrorCode::kNonMonotoneTime, where + "t decreased");
  last_t_ = r.frame.t;
  return r;
}

std::vector<TrackingRecord> read_stream(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  StreamReader reader(in);
  std::vector<TrackingRecord> out;
  while (auto r = reader.next()) out.push_back(std::move(*r));
  return out;
}

void write_stream(const fs::path& path, const StreamHeader& header, const std::vector<TrackingRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << header_to_json(header).dump() << '\n';
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

// ---------------------------------------------------------------- episode-v1

namespace {

constexpr const char* kStepsFile = "steps.jsonl";
constexpr const char* kMetaFile = "meta.json";

json hex_array(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(hex_double(x));
  return a;
}

std::vector<double> parse_hex_array(const json& j, std::size_t n, const char* field) {
  if (!j.is_array() || j.size() != n)
    throw Error(ErrorCode::kCorrupt, std::string(field) + ": expected " + std::to_string(n) + " values");
  std::vector<double> v;
  v.reserve(n);
  for (const auto& x : j) {
    if (!x.is_string()) throw Error(ErrorCode::kCorrupt, std::string(field) + ": expected hex strings");
    v.push_back(parse_hex_double(x.get<std::string>()));
  }
  return v;
}

json meta_json(const EpisodeMeta& m) {
  return {{"format", "episode-v1"},
          {"schema_version", kEpisodeSchemaVersion},
          {"episode_id", m.episode_id},
          {"task", m.task},
          {"rate_hz", m.rate_hz},
          {"action_dim", m.action_dim},
          {"n_steps", m.n_steps},
          {"duration", m.duration},
          {"attachments", m.attachments},
          {"records", kStepsFile},
          {"float_encoding", "ieee754-binary64-hex"}};
}

std::string step_line(const EpisodeStep& s) {
  const json j = {{"t", hex_double(s.t)},
                  {"observation", {{"q", hex_array(s.q)}, {"dq", hex_array(s.dq)}}},
                  {"action", {{"targets", hex_array(s.action)}}}};
  return j.dump();
}

}  // namespace

std::string hex_double(double x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(x)));
  return buf;
}

double parse_hex_double(const std::string& s) {
  std::uint64_t bits = 0;
  if (s.size() != 16) throw Error(ErrorCode::kCorrupt, "hex double must have 16 digits: \"" + s + "\"");
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), bits, 16);
  if (ec != std::errc() || end != s.data() + s.size())
    throw Error(ErrorCode::kCorrupt, "bad hex double \"" + s + "\"");
  return std::bit_cast<double>(bits);
}

EpisodeWriter::EpisodeWriter(const fs::path& dir, EpisodeMeta meta) : dir_(dir), meta_(std::move(meta)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir_.string() + ": " + ec.message());
  meta_.n_steps = 0;
  meta_.duration = 0.0;
  steps_.open(dir_ / kStepsFile, std::ios::binary | std::ios::trunc);
  if (!steps_) throw Error(ErrorCode::kIo, "cannot write " + (dir_ / kStepsFile).string());
  write_meta();
}

EpisodeWriter::~EpisodeWriter() {
  try {
    close();
  } catch (...) {
  }
}

void EpisodeWriter::append(const EpisodeStep& step) {
  if (closed_) throw Error(ErrorCode::kIo, "episode already closed");
  const auto dim = static_cast<std::size_t>(meta_.action_dim);
  if (step.action.size() != dim || step.q.size() != dim || step.dq.size() != dim)
    throw Error(ErrorCode::kSchema, "episode step must have " + std::to_string(dim) + " values per field");
  steps_ << step_line(step) << '\n';
  steps_.flush();
  if (!steps_) throw Error(ErrorCode::kIo, "write failed: " + (dir_ / kStepsFile).string());
  if (!first_t_) first_t_ = step.t;
  ++meta_.n_steps;
  meta_.duration = step.t - *first_t_;
}

void EpisodeWriter::close() {
  if (closed_) return;
  closed_ = true;
  steps_.close();
  write_meta();
}

void EpisodeWriter::write_meta() const {
  std::ofstream out(dir_ / kMetaFile, std::ios::binary | std::ios::trunc);
  out << meta_json(meta_).dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + (dir_ / kMetaFile).string());
}

void write_episode(const fs::path& dir, const Episode& ep) {
  EpisodeWriter w(dir, ep.meta);
  for (const auto& s : ep.steps) w.append(s);
  w.close();
}

Episode read_episode(const fs::path& dir) {
  std::ifstream meta_in(dir / kMetaFile);
  if (!meta_in) throw Error(ErrorCode::kIo, "cannot open " + (dir / kMetaFile).string());
  json m;
  try {
    m = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("meta.json: ") + e.what());
  }
  if (!m.is_object() || m.value("format", "") != "episode-v1")
    throw Error(ErrorCode::kVersionMismatch, "meta.json: format is not episode-v1");
  if (!m.contains("schema_version") || m["schema_version"] != kEpisodeSchemaVersion)
    throw Error(ErrorCode::kVersionMismatch, "meta.json: unsupported schema_version");

  Episode ep;
  try {
    ep.meta.episode_id = m.at("episode_id").get<std::string>();
    ep.meta.task = m.at("task").get<std::string>();
    ep.meta.rate_hz = m.at("rate_hz").get<int>();
    ep.meta.action_dim = m.at("action_dim").get<int>();
    ep.meta.n_steps = m.at("n_steps").get<std::size_t>();
    ep.meta.duration = m.at("duration").get<double>();
    ep.meta.attachments = m.at("attachments").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("meta.json: ") + e.what());
  }
  if (ep.meta.action_dim <= 0) throw Error(ErrorCode::kCorrupt, "meta.json: action_dim must be positive");

  std::ifstream in(dir / kStepsFile, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + (dir / kStepsFile).string());
  const auto dim = static_cast<std::size_t>(ep.meta.action_dim);
  std::string text;
  int line = 0;
  while (std::getline(in, text)) {
    ++line;
    const std::string where = std::string(kStepsFile) + " line " + std::to_string(line) + ": ";
    // A writer always terminates lines; a missing newline means a cut-off write.
    if (in.eof()) throw Error(ErrorCode::kCorrupt, where + "truncated record");
    try {
      const json j = json::parse(text);
      EpisodeStep s;
      if (!j.contains("t") || !j["t"].is_string()) throw Error(ErrorCode::kCorrupt, "t: expected a hex string");
      s.t = parse_hex_double(j["t"].get<std::string>());
      s.q = parse_hex_array(j.at("observation").at("q"), dim, "observation.q");
      s.dq = parse_hex_array(j.at("observation").at("dq"), dim, "observation.dq");
      s.action = parse_hex_array(j.at("action").at("targets"), dim, "action.targets");
      ep.steps.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kCorrupt, where + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::kCorrupt, where + strip_code(e));
    }
  }
  if (ep.steps.size() != ep.meta.n_steps)
    throw Error(ErrorCode::kCorrupt, std::string(kStepsFile) + " line " + std::to_string(line + 1) + ": expected " +
                                         std::to_string(ep.meta.n_steps) + " steps, found " +
                                         std::to_string(ep.steps.size()));
  return ep;
}

// ------------------------------------------------------------------- openxr

OpenXrMap OpenXrMap::from_json(const json& j) {
  if (!j.is_object() || j.value("format", "") != "openxr-map-v1")
    throw Error(ErrorCode::kSchema, "openxr map: expected format \"openxr-map-v1\"");
  OpenXrMap m;
  m.wrist_joint = j.value("wrist_joint", "wrist");
  if (!j.contains("landmarks") || !j["landmarks"].is_array() || j["landmarks"].size() != kLandmarkCount)
    throw Error(ErrorCode::kSchema, "openxr map: landmarks must list 21 joint names");
  for (int i = 0; i < kLandmarkCount; ++i) {
    if (!j["landmarks"][i].is_string()) throw Error(ErrorCode::kSchema, "openxr map: landmark names must be strings");
    m.landmarks[i] = j["landmarks"][i].get<std::string>();
  }
  return m;
}

OpenXrMap OpenXrMap::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, path.string() + ": " + e.what());
  }
}

HandFrame convert_openxr(const json& raw, const OpenXrMap& map) {
  if (!raw.is_object() || !raw.contains("joints") || !raw["joints"].is_array())
    throw Error(ErrorCode::kSchema, "openxr record: expected an object with a joints array");
  std::map<std::string, const json*> by_name;
  for (const auto& jt : raw["joints"]) {
    if (!jt.is_object() || !jt.contains("name") || !jt["name"].is_string())
      throw Error(ErrorCode::kSchema, "openxr record: every joint needs a name");
    const auto name = jt["name"].get<std::string>();
    if (!jt.contains("p") || !finite_numbers(jt["p"], 3))
      throw Error(ErrorCode::kSchema, "openxr joint " + name + ": p must be 3 numbers");
    if (!by_name.emplace(name, &jt).second) throw Error(ErrorCode::kSchema, "openxr record: duplicate joint " + name);
  }
  auto joint = [&](const std::string& name) -> const json& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw Error(ErrorCode::kMissingJoint, name);
    return *it->second;
  };

  HandFrame f;
  f.t = raw.value("t", 0.0);
  const json& w = joint(map.wrist_joint);
  if (!w.contains("q") || !finite_numbers(w["q"], 4))
    throw Error(ErrorCode::kSchema, "openxr joint " + map.wrist_joint + ": q must be 4 numbers");
  f.wrist.p = vec3(w["p"]);
  f.wrist.q = Quat{w["q"][0].get<double>(), w["q"][1].get<double>(), w["q"][2].get<double>(), w["q"][3].get<double>()}
                  .normalized();
  for (int i = 0; i < kLandmarkCount; ++i) f.landmarks[i] = vec3(joint(map.landmarks[i])["p"]);
  return f;
}

}  // namespace teleop::formats
