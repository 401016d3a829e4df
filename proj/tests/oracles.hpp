#pragma once

// Independent oracles shared by the unit suites and the acceptance driver.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>

#include <quadmath.h>

#include "attn/keypoints.hpp"
#include "attn/pose_ingest.hpp"

namespace attn::testutil {

// Straight-line recomputation of every entry, written without the library's helpers.
inline std::array<double, 26> geometry_oracle(const pose::KeypointFrame& f) {
  using K = KeypointId;
  auto P = [&](K id) { return f.coords[static_cast<std::size_t>(id)]; };
  auto d = [](Point2 a, Point2 b) { return std::sqrt((b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y)); };
  std::array<double, 26> o{};
  o[0] = d(P(K::Nose), P(K::LEyeCenter));
  o[1] = d(P(K::Nose), P(K::REyeCenter));
  o[2] = d(P(K::LEyeCenter), P(K::REyeCenter));
  const K body[3] = {K::Neck, K::LShoulder, K::RShoulder};
  const K face[3] = {K::Nose, K::LEyeCenter, K::REyeCenter};
  for (int b = 0; b < 3; ++b)
    for (int j = 0; j < 3; ++j) o[3 + 3 * b + j] = d(P(body[b]), P(face[j]));
  for (int k = 0; k < 6; ++k) {
    o[12 + k] = d(P(static_cast<K>(6 + k)), P(K::LEyeCenter));
    o[18 + k] = d(P(static_cast<K>(12 + k)), P(K::REyeCenter));
  }
  // Quad precision keeps acos accurate for angles near 0 and pi, where the
  // cosine carries only the square of the angle.
  using Q = __float128;
  struct V {
    Q x, y;
  };
  auto unit = [&](K to) {
    const Q dx = Q(P(to).x) - Q(P(K::Neck).x), dy = Q(P(to).y) - Q(P(K::Neck).y);
    const Q n = sqrtq(dx * dx + dy * dy);
    return V{dx / n, dy / n};
  };
  auto arccos = [](Q c) { return static_cast<double>(acosq(std::clamp(c, Q(-1), Q(1)))); };
  const V v1 = unit(K::Nose), v2 = unit(K::LShoulder), v3 = unit(K::RShoulder);
  o[24] = arccos(v1.x * v2.x + v1.y * v2.y);
  o[25] = arccos(v1.x * v3.x + v1.y * v3.y);
  return o;
}

/// Brute-force strict majority: the level holding at least `quorum` votes.
inline std::optional<int> count_majority(std::span<const int> votes, std::size_t quorum) {
  std::array<std::size_t, 3> c{};
  for (int v : votes) ++c[static_cast<std::size_t>(v)];
  for (int l = 0; l < 3; ++l) {
    if (c[static_cast<std::size_t>(l)] >= quorum) return l;
  }
  return std::nullopt;
}

}  // namespace attn::testutil
