#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace attn {

// Canonical keypoint order. It defines the layout of every keypoint-derived
// vector (KP, depth) and must never be reordered.
//
//   index  id           set
//   0      Nose         F
//   1      LEyeCenter   F
//   2      REyeCenter   F
//   3      Neck         B
//   4      LShoulder    B
//   5      RShoulder    B
//   6-11   LE1..LE6     LE (left eye contour)
//   12-17  RE1..RE6     RE (right eye contour)
enum class KeypointId : std::uint8_t {
  Nose,
  LEyeCenter,
  REyeCenter,
  Neck,
  LShoulder,
  RShoulder,
  LE1,
  LE2,
  LE3,
  LE4,
  LE5,
  LE6,
  RE1,
  RE2,
  RE3,
  RE4,
  RE5,
  RE6,
};

inline constexpr std::size_t kNumKeypoints = 18;

constexpr std::size_t index_of(KeypointId id) { return static_cast<std::size_t>(id); }

constexpr KeypointId keypoint_at(std::size_t i) { return static_cast<KeypointId>(i); }

inline constexpr std::array<std::string_view, kNumKeypoints> kKeypointNames = {
    "nose", "l_eye", "r_eye", "neck", "l_shoulder", "r_shoulder",
    "le1",  "le2",   "le3",   "le4",  "le5",        "le6",
    "re1",  "re2",   "re3",   "re4",  "re5",        "re6",
};

constexpr std::string_view name_of(KeypointId id) { return kKeypointNames[index_of(id)]; }

inline std::optional<KeypointId> keypoint_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumKeypoints; ++i) {
    if (kKeypointNames[i] == name) return keypoint_at(i);
  }
  return std::nullopt;
}

inline constexpr std::array<KeypointId, 3> kFaceSet = {KeypointId::Nose, KeypointId::LEyeCenter,
                                                       KeypointId::REyeCenter};
inline constexpr std::array<KeypointId, 3> kBodySet = {KeypointId::Neck, KeypointId::LShoulder,
                                                       KeypointId::RShoulder};
inline constexpr std::array<KeypointId, 6> kLeftEyeContour = {
    KeypointId::LE1, KeypointId::LE2, KeypointId::LE3,
    KeypointId::LE4, KeypointId::LE5, KeypointId::LE6};
inline constexpr std::array<KeypointId, 6> kRightEyeContour = {
    KeypointId::RE1, KeypointId::RE2, KeypointId::RE3,
    KeypointId::RE4, KeypointId::RE5, KeypointId::RE6};

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }

}  // namespace attn
