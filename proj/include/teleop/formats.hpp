#pragma once

// On-disk and on-wire text formats.
//
// stream-v1   newline-delimited JSON tracking records after a header line.
// episode-v1  a directory with meta.json and steps.jsonl; every double in the
//             step records is written as the 16 hex digits of its IEEE-754 bit
//             pattern so a read/write round trip is exact on any platform.
// openxr      26-joint (or any named-joint) skeletons mapped to 21 landmarks
//             through a JSON table.

#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "teleop/hand_retarget.hpp"

namespace teleop::formats {

using json = nlohmann::json;

// ---------------------------------------------------------------- stream-v1

struct StreamHeader {
  int rate_hz = 30;
  std::string landmark_convention = "mediapipe-21";
};

struct TrackingRecord {
  HandFrame frame;
  bool engage = false;
};

/// Field-level validation message for a tracking record ("landmarks:
/// expected 21"), or nullopt if it is valid.
std::optional<std::string> tracking_problem(const json& j);

/// Parses one record; throws Error(kSchema) with the field-level message.
TrackingRecord tracking_from_json(const json& j);
json to_json(const TrackingRecord& r);

json header_to_json(const StreamHeader& h);
StreamHeader header_from_json(const json& j);

/// Streaming reader. Errors carry the 1-based line number:
/// Error(kSchema, "line N: ...") and Error(kNonMonotoneTime, "line N: ...").
class StreamReader {
 public:
  explicit StreamReader(std::istream& in);
  const StreamHeader& header() const { return header_; }
  std::optional<TrackingRecord> next();
  int line() const { return line_; }

 private:
  std::istream* in_;
  StreamHeader header_;
  int line_ = 0;
  std::optional<double> last_t_;
};

std::vector<TrackingRecord> read_stream(const std::filesystem::path& path);
void write_stream(const std::filesystem::path& path, const StreamHeader& header,
                  const std::vector<TrackingRecord>& records);

// --------------------------------------------------------------- episode-v1

constexpr int kEpisodeSchemaVersion = 1;

struct EpisodeMeta {
  std::string episode_id;
  std::string task;
  int rate_hz = 30;
  int action_dim = 19;
  std::size_t n_steps = 0;
  double duration = 0.0;  // t of last step minus t of first step, seconds
  std::vector<std::string> attachments;  // reserved for camera sidecars

  bool operator==(const EpisodeMeta&) const = default;
};

struct EpisodeStep {
  double t = 0.0;
  std::vector<double> q;
  std::vector<double> dq;
  std::vector<double> action;

  bool operator==(const EpisodeStep&) const = default;
};

struct Episode {
  EpisodeMeta meta;
  std::vector<EpisodeStep> steps;

  bool operator==(const Episode&) const = default;
};

std::string hex_double(double x);
/// Throws Error(kCorrupt) on anything but exactly 16 hex digits.
double parse_hex_double(const std::string& s);

/// Appends steps as they happen; meta.json is rewritten on close() (and by
/// the destructor) so an interrupted session still leaves a readable episode.
class EpisodeWriter {
 public:
  EpisodeWriter(const std::filesystem::path& dir, EpisodeMeta meta);
  ~EpisodeWriter();
  EpisodeWriter(const EpisodeWriter&) = delete;
  EpisodeWriter& operator=(const EpisodeWriter&) = delete;

  /// Throws Error(kSchema) if the action or observation size is not action_dim.
  void append(const EpisodeStep& step);
  void close();
  const EpisodeMeta& meta() const { return meta_; }

 private:
  void write_meta() const;

  std::filesystem::path dir_;
  EpisodeMeta meta_;
  std::ofstream steps_;
  std::optional<double> first_t_;
  bool closed_ = false;
};

void write_episode(const std::filesystem::path& dir, const Episode& ep);
/// Throws Error(kVersionMismatch) for an unknown format or schema version and
/// Error(kCorrupt, "steps.jsonl line N: ...") for damaged step records.
Episode read_episode(const std::filesystem::path& dir);

// ------------------------------------------------------------------- openxr

struct OpenXrMap {
  std::string wrist_joint = "wrist";  // joint whose pose becomes the wrist pose
  std::array<std::string, kLandmarkCount> landmarks;  // source joint per landmark

  static OpenXrMap from_json(const json& j);
  static OpenXrMap load(const std::filesystem::path& path);
};

/// Raw record: {"t": s, "joints": [{"name": ..., "p": [3], "q": [4]?}, ...]}.
/// Throws Error(kMissingJoint, name) if a joint named by the map is absent.
HandFrame convert_openxr(const json& raw, const OpenXrMap& map);

}  // namespace teleop::formats
