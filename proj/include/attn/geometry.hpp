#pragma once

// Geometric features over a nose-origin keypoint frame.
//
// Layout of the 26-dim GF vector (frozen; models depend on it):
//
//   [0..3)   D_F   Nose-LEye, Nose-REye, LEye-REye
//   [3..12)  D_BF  body outer (Neck, LShoulder, RShoulder) x face inner (Nose, LEye, REye)
//   [12..18) D_LE  LE1..LE6 to left eye center
//   [18..24) D_RE  RE1..RE6 to right eye center
//   [24..26) A     angle(neck->nose, neck->lshoulder), angle(neck->nose, neck->rshoulder)

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "attn/error.hpp"
#include "attn/keypoints.hpp"
#include "attn/pose_ingest.hpp"

namespace attn::geometry {

inline constexpr std::size_t kFaceDistances = 3;
inline constexpr std::size_t kBodyFaceDistances = 9;
inline constexpr std::size_t kEyeDistances = 6;
inline constexpr std::size_t kAngles = 2;
inline constexpr std::size_t kGeometricDims =
    kFaceDistances + kBodyFaceDistances + 2 * kEyeDistances + kAngles;
static_assert(kGeometricDims == 26);

enum class Eye { Left, Right };

struct UnitVectors {
  Point2 v1;  // neck -> nose
  Point2 v2;  // neck -> left shoulder
  Point2 v3;  // neck -> right shoulder
};

struct GeometricFeatures {
  std::array<double, kFaceDistances> d_f{};
  std::array<double, kBodyFaceDistances> d_bf{};
  std::array<double, kEyeDistances> d_le{};
  std::array<double, kEyeDistances> d_re{};
  std::array<double, kAngles> a{};

  std::array<double, kGeometricDims> to_vector() const {
    std::array<double, kGeometricDims> v{};
    auto it = std::copy(d_f.begin(), d_f.end(), v.begin());
    it = std::copy(d_bf.begin(), d_bf.end(), it);
    it = std::copy(d_le.begin(), d_le.end(), it);
    it = std::copy(d_re.begin(), d_re.end(), it);
    std::copy(a.begin(), a.end(), it);
    return v;
  }
};

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline std::array<double, kFaceDistances> face_distances(const pose::KeypointFrame& f) {
  std::array<double, kFaceDistances> out{};
  std::size_t n = 0;
  for (std::size_t i = 0; i < kFaceSet.size(); ++i) {
    for (std::size_t j = i + 1; j < kFaceSet.size(); ++j) {
      out[n++] = distance(f[kFaceSet[j]], f[kFaceSet[i]]);
    }
  }
  return out;
}

inline std::array<double, kBodyFaceDistances> body_face_distances(const pose::KeypointFrame& f) {
  std::array<double, kBodyFaceDistances> out{};
  std::size_t n = 0;
  for (KeypointId b : kBodySet) {
    for (KeypointId face : kFaceSet) out[n++] = distance(f[face], f[b]);
  }
  return out;
}

inline std::array<double, kEyeDistances> eye_contour_distances(const pose::KeypointFrame& f, Eye eye) {
  const auto& contour = eye == Eye::Left ? kLeftEyeContour : kRightEyeContour;
  const Point2 center = f[eye == Eye::Left ? KeypointId::LEyeCenter : KeypointId::REyeCenter];
  std::array<double, kEyeDistances> out{};
  for (std::size_t i = 0; i < contour.size(); ++i) out[i] = distance(f[contour[i]], center);
  return out;
}

namespace detail {

inline Point2 unit(Point2 from, Point2 to, KeypointId from_id, KeypointId to_id) {
  const Point2 d = to - from;
  const double n = std::hypot(d.x, d.y);
  if (n == 0.0) {
    throw DegenerateGeometryError("zero-length vector between " + std::string(name_of(from_id)) +
                                  " and " + std::string(name_of(to_id)));
  }
  return {d.x / n, d.y / n};
}

// a*b - c*d with one rounding (Kahan's FMA scheme).
inline double diff_of_products(double a, double b, double c, double d) {
  const double cd = c * d;
  const double err = std::fma(-c, d, cd);
  return std::fma(a, b, -cd) + err;
}

// a - b as an unevaluated pair hi + lo with no rounding error (TwoSum).
struct Exact {
  double hi, lo;
};

inline Exact two_diff(double a, double b) {
  const double s = a - b;
  const double bb = s - a;
  return {s, (a - (s - bb)) - (b + bb)};
}

// Angle at `o` between the rays to `a` and `b`: arccos of the normalized dot
// product, evaluated as atan2(|u x v|, u.v). The ray vectors are kept exact
// so nearly collinear rays (angles near 0 or pi) keep full relative precision.
inline double angle_at(Point2 o, Point2 a, Point2 b) {
  const Exact ux = two_diff(a.x, o.x), uy = two_diff(a.y, o.y);
  const Exact vx = two_diff(b.x, o.x), vy = two_diff(b.y, o.y);
  const double cross = diff_of_products(ux.hi, vy.hi, uy.hi, vx.hi) +
                       ((ux.hi * vy.lo + ux.lo * vy.hi) - (uy.hi * vx.lo + uy.lo * vx.hi));
  const double dot = -diff_of_products(-ux.hi, vx.hi, uy.hi, vy.hi) +
                     ((ux.hi * vx.lo + ux.lo * vx.hi) + (uy.hi * vy.lo + uy.lo * vy.hi));
  return std::atan2(std::abs(cross), dot);
}

}  // namespace detail

struct AngleResult {
  UnitVectors vectors;
  std::array<double, kAngles> angles{};
};

inline AngleResult shoulder_nose_angles(const pose::KeypointFrame& f) {
  const Point2 neck = f[KeypointId::Neck];
  AngleResult r;
  r.vectors.v1 = detail::unit(neck, f[KeypointId::Nose], KeypointId::Neck, KeypointId::Nose);
  r.vectors.v2 = detail::unit(neck, f[KeypointId::LShoulder], KeypointId::Neck, KeypointId::LShoulder);
  r.vectors.v3 = detail::unit(neck, f[KeypointId::RShoulder], KeypointId::Neck, KeypointId::RShoulder);
  r.angles = {detail::angle_at(neck, f[KeypointId::Nose], f[KeypointId::LShoulder]),
              detail::angle_at(neck, f[KeypointId::Nose], f[KeypointId::RShoulder])};
  return r;
}

/// Requires a nose-origin frame. Propagates DegenerateGeometryError.
inline GeometricFeatures geometric_feature_vector(const pose::KeypointFrame& f) {
  if (f.space != pose::FrameSpace::NoseOrigin) {
    throw ContractError("geometric_feature_vector: frame " + std::to_string(f.frame_index) +
                        " is not in nose-origin space");
  }
  GeometricFeatures g;
  g.d_f = face_distances(f);
  g.d_bf = body_face_distances(f);
  g.d_le = eye_contour_distances(f, Eye::Left);
  g.d_re = eye_contour_distances(f, Eye::Right);
  g.a = shoulder_nose_angles(f).angles;
  return g;
}

/// Streaming extractor: with carry_forward set, a degenerate frame reuses the
/// previous frame's angles instead of throwing (the first frame still throws).
class FeatureStream {
 public:
  explicit FeatureStream(bool carry_forward) : carry_forward_(carry_forward) {}

  GeometricFeatures next(const pose::KeypointFrame& f) {
    if (!carry_forward_) return geometric_feature_vector(f);
    if (f.space != pose::FrameSpace::NoseOrigin) {
      throw ContractError("FeatureStream: frame is not in nose-origin space");
    }
    GeometricFeatures g;
    g.d_f = face_distances(f);
    g.d_bf = body_face_distances(f);
    g.d_le = eye_contour_distances(f, Eye::Left);
    g.d_re = eye_contour_distances(f, Eye::Right);
    try {
      g.a = shoulder_nose_angles(f).angles;
    } catch (const DegenerateGeometryError&) {
      if (!have_last_) throw;
      g.a = last_angles_;
      ++carried_;
    }
    last_angles_ = g.a;
    have_last_ = true;
    return g;
  }

  std::size_t carried_count() const { return carried_; }

 private:
  bool carry_forward_;
  std::array<double, kAngles> last_angles_{};
  bool have_last_ = false;
  std::size_t carried_ = 0;
};

}  // namespace attn::geometry
