#pragma once

// Pose-estimator ingestion: parse per-frame JSON, repair split detections,
// interpolate gaps and move coordinates into the nose-origin frame.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "attn/error.hpp"
#include "attn/keypoints.hpp"

namespace attn::pose {

struct RawPoint {
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;

  friend bool operator==(const RawPoint&, const RawPoint&) = default;
};

/// One person entry of one frame; absent points are std::nullopt.
struct RawDetection {
  std::int64_t frame_index = 0;
  std::array<std::optional<RawPoint>, kNumKeypoints> points{};

  std::size_t present_count() const {
    return static_cast<std::size_t>(
        std::count_if(points.begin(), points.end(), [](const auto& p) { return p.has_value(); }));
  }

  double summed_confidence() const {
    double s = 0.0;
    for (const auto& p : points) {
      if (p) s += p->confidence;
    }
    return s;
  }

  friend bool operator==(const RawDetection&, const RawDetection&) = default;
};

enum class FrameSpace { Pixel, NoseOrigin };

struct KeypointFrame {
  std::int64_t frame_index = 0;
  std::array<Point2, kNumKeypoints> coords{};
  FrameSpace space = FrameSpace::Pixel;

  Point2& operator[](KeypointId id) { return coords[index_of(id)]; }
  const Point2& operator[](KeypointId id) const { return coords[index_of(id)]; }

  friend bool operator==(const KeypointFrame&, const KeypointFrame&) = default;
};

// ---------------------------------------------------------------------------
// Adapter config

/// Where a keypoint lives in the pose document: `people[i][array][3*index..3*index+2]`.
struct SourceIndex {
  std::string array;
  int index = 0;

  friend bool operator==(const SourceIndex&, const SourceIndex&) = default;
};

using IndexMap = std::array<SourceIndex, kNumKeypoints>;

/// Layout of the common 25-point body + 70-point face estimator output.
/// Face points 36-41 are the subject's right eye, 42-47 the left eye, 68/69
/// the right/left pupils.
inline IndexMap default_index_map() {
  IndexMap m;
  const std::string body = "pose_keypoints_2d";
  const std::string face = "face_keypoints_2d";
  m[index_of(KeypointId::Nose)] = {body, 0};
  m[index_of(KeypointId::Neck)] = {body, 1};
  m[index_of(KeypointId::RShoulder)] = {body, 2};
  m[index_of(KeypointId::LShoulder)] = {body, 5};
  m[index_of(KeypointId::REyeCenter)] = {face, 68};
  m[index_of(KeypointId::LEyeCenter)] = {face, 69};
  for (int i = 0; i < 6; ++i) {
    m[index_of(kRightEyeContour[i])] = {face, 36 + i};
    m[index_of(kLeftEyeContour[i])] = {face, 42 + i};
  }
  return m;
}

/// Reads `{"<keypoint name>": {"array": "...", "index": N}, ...}`. Every one of
/// the 18 keypoints must be mapped.
inline IndexMap index_map_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("index map: expected a JSON object");
  IndexMap m;
  std::array<bool, kNumKeypoints> seen{};
  for (const auto& [key, value] : j.items()) {
    auto id = keypoint_from_name(key);
    if (!id) throw ConfigError("index map: unknown keypoint '" + key + "'");
    if (!value.is_object() || !value.contains("array") || !value.contains("index") ||
        !value["array"].is_string() || !value["index"].is_number_integer()) {
      throw ConfigError("index map: entry '" + key + "' needs string 'array' and integer 'index'");
    }
    int idx = value["index"].get<int>();
    if (idx < 0) throw ConfigError("index map: negative index for '" + key + "'");
    m[index_of(*id)] = {value["array"].get<std::string>(), idx};
    seen[index_of(*id)] = true;
  }
  for (std::size_t i = 0; i < kNumKeypoints; ++i) {
    if (!seen[i]) {
      throw ConfigError("index map: keypoint '" + std::string(kKeypointNames[i]) + "' not mapped");
    }
  }
  return m;
}

inline nlohmann::json index_map_to_json(const IndexMap& m) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < kNumKeypoints; ++i) {
    j[std::string(kKeypointNames[i])] = {{"array", m[i].array}, {"index", m[i].index}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// parse_pose_frame

struct ParseOptions {
  double confidence_threshold = 0.1;  // below this a point counts as missing
  // Points outside [0, width) x [0, height) are dropped; 0 disables the check.
  int image_width = 1920;
  int image_height = 1080;
};

/// Parses one pose document into one RawDetection per person entry.
/// Throws ParseError (with byte offset) on malformed JSON and ConfigError when
/// the index map points past the end of a non-empty keypoint array.
inline std::vector<RawDetection> parse_pose_frame(std::string_view blob, std::int64_t frame_index,
                                                  const IndexMap& index_map,
                                                  const ParseOptions& opts = {}) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(blob.begin(), blob.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("pose JSON malformed at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  std::vector<RawDetection> out;
  if (!doc.is_object() || !doc.contains("people")) return out;
  const auto& people = doc["people"];
  if (!people.is_array()) throw ParseError("pose JSON: 'people' is not an array");

  for (const auto& person : people) {
    RawDetection det;
    det.frame_index = frame_index;
    for (std::size_t k = 0; k < kNumKeypoints; ++k) {
      const SourceIndex& src = index_map[k];
      if (!person.contains(src.array)) continue;
      const auto& arr = person[src.array];
      if (!arr.is_array()) throw ParseError("pose JSON: '" + src.array + "' is not an array");
      if (arr.empty()) continue;  // part detector disabled for this person
      const std::size_t base = static_cast<std::size_t>(src.index) * 3;
      if (base + 2 >= arr.size()) {
        throw ConfigError("index map: " + std::string(kKeypointNames[k]) + " -> " + src.array +
                          "[" + std::to_string(src.index) + "] out of range (array holds " +
                          std::to_string(arr.size() / 3) + " triples)");
      }
      const double x = arr[base].get<double>();
      const double y = arr[base + 1].get<double>();
      const double c = arr[base + 2].get<double>();
      if (x == 0.0 && y == 0.0 && c == 0.0) continue;
      if (c < opts.confidence_threshold) continue;
      if (opts.image_width > 0 && (x < 0.0 || x >= opts.image_width)) continue;
      if (opts.image_height > 0 && (y < 0.0 || y >= opts.image_height)) continue;
      det.points[k] = RawPoint{x, y, std::min(c, 1.0)};
    }
    out.push_back(det);
  }
  return out;
}

// ---------------------------------------------------------------------------
// merge_split_detections

struct MergeOptions {
  double max_overlap = 0.0;      // Jaccard overlap of present-keypoint sets
  double max_distance_px = 10.0; // mean distance over shared keypoints
};

namespace detail {

// Strict total order used for symmetric tie-breaking.
inline bool point_less(const RawPoint& a, const RawPoint& b) {
  if (a.confidence != b.confidence) return a.confidence < b.confidence;
  if (a.x != b.x) return a.x < b.x;
  return a.y < b.y;
}

inline bool detection_less(const RawDetection& a, const RawDetection& b) {
  const double ca = a.summed_confidence();
  const double cb = b.summed_confidence();
  if (ca != cb) return ca < cb;
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    const auto& pa = a.points[k];
    const auto& pb = b.points[k];
    if (pa.has_value() != pb.has_value()) return !pa.has_value();
    if (pa && *pa != *pb) return point_less(*pa, *pb);
  }
  return false;
}

}  // namespace detail

/// Jaccard overlap of the two present-keypoint sets (0 when both are empty).
inline double keypoint_overlap(const RawDetection& a, const RawDetection& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    const bool pa = a.points[k].has_value();
    const bool pb = b.points[k].has_value();
    inter += (pa && pb);
    uni += (pa || pb);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Mean pixel distance over keypoints present in both; nullopt when none are shared.
inline std::optional<double> shared_distance(const RawDetection& a, const RawDetection& b) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    if (a.points[k] && b.points[k]) {
      sum += std::hypot(a.points[k]->x - b.points[k]->x, a.points[k]->y - b.points[k]->y);
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

inline bool mergeable(const RawDetection& a, const RawDetection& b, const MergeOptions& opts) {
  if (keypoint_overlap(a, b) > opts.max_overlap) return false;
  auto d = shared_distance(a, b);
  return !d || *d <= opts.max_distance_px;
}

inline RawDetection union_detections(const RawDetection& a, const RawDetection& b) {
  RawDetection out;
  out.frame_index = a.frame_index;
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    const auto& pa = a.points[k];
    const auto& pb = b.points[k];
    if (pa && pb) {
      out.points[k] = detail::point_less(*pa, *pb) ? pb : pa;
    } else {
      out.points[k] = pa ? pa : pb;
    }
  }
  return out;
}

/// Reduces all detections of one frame to one subject. Detections are visited
/// from highest to lowest summed confidence; each is unioned into the running
/// result when mergeable and dropped otherwise. Empty input yields an
/// all-absent detection.
inline RawDetection merge_split_detections(std::span<const RawDetection> detections,
                                           std::int64_t frame_index,
                                           const MergeOptions& opts = {}) {
  if (detections.empty()) {
    RawDetection none;
    none.frame_index = frame_index;
    return none;
  }
  for (const auto& d : detections) {
    if (d.frame_index != frame_index) {
      throw ContractError("merge_split_detections: detections from frame " +
                          std::to_string(d.frame_index) + " mixed into frame " +
                          std::to_string(frame_index));
    }
  }
  std::vector<RawDetection> order(detections.begin(), detections.end());
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return detail::detection_less(b, a); });
  RawDetection acc = order.front();
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (mergeable(acc, order[i], opts)) acc = union_detections(acc, order[i]);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// interpolate_track

/// Completes a contiguous track: interior gaps are linearly interpolated per
/// coordinate, leading/trailing gaps hold the first/last observation.
inline std::vector<KeypointFrame> interpolate_track(std::span<const RawDetection> track) {
  std::vector<KeypointFrame> out(track.size());
  if (track.empty()) return out;
  for (std::size_t i = 0; i < track.size(); ++i) {
    out[i].frame_index = track[i].frame_index;
    out[i].space = FrameSpace::Pixel;
    if (i > 0 && track[i].frame_index != track[i - 1].frame_index + 1) {
      throw TrackError("track not contiguous between frames " +
                       std::to_string(track[i - 1].frame_index) + " and " +
                       std::to_string(track[i].frame_index));
    }
  }
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    std::vector<std::size_t> seen;
    for (std::size_t i = 0; i < track.size(); ++i) {
      if (track[i].points[k]) seen.push_back(i);
    }
    if (seen.empty()) {
      throw TrackError("keypoint '" + std::string(kKeypointNames[k]) +
                       "' never observed in track starting at frame " +
                       std::to_string(track.front().frame_index));
    }
    auto at = [&](std::size_t i) { return Point2{track[i].points[k]->x, track[i].points[k]->y}; };
    for (std::size_t i = 0; i < seen.front(); ++i) out[i].coords[k] = at(seen.front());
    for (std::size_t i = seen.back(); i < track.size(); ++i) out[i].coords[k] = at(seen.back());
    for (std::size_t s = 0; s + 1 < seen.size(); ++s) {
      const std::size_t lo = seen[s], hi = seen[s + 1];
      const Point2 a = at(lo), b = at(hi);
      out[lo].coords[k] = a;
      for (std::size_t i = lo + 1; i < hi; ++i) {
        const double t = static_cast<double>(i - lo) / static_cast<double>(hi - lo);
        out[i].coords[k] = {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
      }
    }
  }
  return out;
}

/// Builds a dense track from per-frame detection lists covering
/// [first, last]; frames without any entry become all-absent detections.
inline std::vector<RawDetection> build_track(
    const std::map<std::int64_t, std::vector<RawDetection>>& per_frame, const MergeOptions& opts = {}) {
  std::vector<RawDetection> track;
  if (per_frame.empty()) return track;
  const std::int64_t first = per_frame.begin()->first;
  const std::int64_t last = per_frame.rbegin()->first;
  track.reserve(static_cast<std::size_t>(last - first + 1));
  for (std::int64_t f = first; f <= last; ++f) {
    auto it = per_frame.find(f);
    if (it == per_frame.end()) {
      track.push_back(merge_split_detections({}, f, opts));
    } else {
      track.push_back(merge_split_detections(it->second, f, opts));
    }
  }
  return track;
}

// ---------------------------------------------------------------------------
// to_nose_origin

inline KeypointFrame to_nose_origin(const KeypointFrame& frame) {
  KeypointFrame out = frame;
  const Point2 nose = frame[KeypointId::Nose];
  for (auto& p : out.coords) p = p - nose;
  out[KeypointId::Nose] = {0.0, 0.0};
  out.space = FrameSpace::NoseOrigin;
  return out;
}

// ---------------------------------------------------------------------------
// Canonical keypoint CSV

inline void write_keypoint_csv_header(std::ostream& os) {
  os << "set_id,frame_index";
  for (auto name : kKeypointNames) os << ',' << name << "_x," << name << "_y";
  os << '\n';
}

inline void write_keypoint_csv_row(std::ostream& os, std::string_view set_id,
                                   const KeypointFrame& frame) {
  char buf[64];
  os << set_id << ',' << frame.frame_index;
  for (const auto& p : frame.coords) {
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g", p.x, p.y);
    os << buf;
  }
  os << '\n';
}

}  // namespace attn::pose
