#pragma once

// Seeded synthetic data: Gaussian feature clusters for model tests, and
// pose-JSON / depth fixtures for exercising the extraction pipeline.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "attn/annotation.hpp"
#include "attn/depth_sampler.hpp"
#include "attn/feature_store.hpp"
#include "attn/keypoints.hpp"
#include "attn/labels.hpp"

namespace attn::synthetic {

struct ClusterOptions {
  std::size_t frames = 3000;
  std::size_t sets = 8;
  std::uint64_t seed = 7;
  std::array<double, kNumClasses> class_prior = {0.5, 0.3, 0.2};
  // Per-dimension spread of the class means, in units of the noise std.
  std::array<double, 3> separation = {1.0, 0.8, 0.35};  // KP, GF, Depth
  // Raw-scale distortion so standardization has work to do.
  std::array<double, 3> scale = {120.0, 40.0, 900.0};
  std::array<double, 3> offset = {300.0, -15.0, 1800.0};
};

/// Class c, modality m: x = offset + scale * (mu[c][m] + N(0, 1)).
inline std::vector<features::FeatureRecord> gaussian_clusters(const ClusterOptions& o) {
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::array<std::array<std::vector<double>, 3>, kNumClasses> mu;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (auto m : features::kAllModalities) {
      const auto mi = static_cast<std::size_t>(m);
      auto& v = mu[c][mi];
      v.resize(features::dims_of(m));
      for (double& x : v) x = o.separation[mi] * gauss(rng);
    }
  }
  std::discrete_distribution<int> pick(o.class_prior.begin(), o.class_prior.end());
  std::vector<features::FeatureRecord> out;
  out.reserve(o.frames);
  const std::size_t per_set = (o.frames + o.sets - 1) / o.sets;
  for (std::size_t i = 0; i < o.frames; ++i) {
    features::FeatureRecord r;
    r.set_id = "syn" + std::to_string(i / per_set);
    r.frame_index = static_cast<std::int64_t>(i % per_set);
    const int c = pick(rng);
    r.label = level_from_int(c);
    for (auto m : features::kAllModalities) {
      const auto mi = static_cast<std::size_t>(m);
      auto v = r.modality(m);
      for (std::size_t d = 0; d < v.size(); ++d) {
        v[d] = o.offset[mi] + o.scale[mi] * (mu[static_cast<std::size_t>(c)][mi][d] + gauss(rng));
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pose fixtures

/// A head-and-shoulders skeleton in RGB pixel space that drifts smoothly.
inline std::array<Point2, kNumKeypoints> skeleton_at(std::int64_t t, std::uint64_t seed) {
  const double phase = static_cast<double>(seed % 97) * 0.1;
  const double tt = static_cast<double>(t);
  const Point2 nose{960.0 + 40.0 * std::sin(0.07 * tt + phase), 420.0 + 15.0 * std::cos(0.05 * tt + phase)};
  const double yaw = 12.0 * std::sin(0.11 * tt + phase);
  std::array<Point2, kNumKeypoints> p{};
  auto set = [&](KeypointId id, double dx, double dy) { p[index_of(id)] = {nose.x + dx, nose.y + dy}; };
  set(KeypointId::Nose, 0, 0);
  set(KeypointId::LEyeCenter, 38 + yaw, -42);
  set(KeypointId::REyeCenter, -38 + yaw, -42);
  set(KeypointId::Neck, -0.3 * yaw, 190);
  set(KeypointId::LShoulder, 170, 215 + 0.2 * yaw);
  set(KeypointId::RShoulder, -170, 215 - 0.2 * yaw);
  const std::array<KeypointId, 6> le = {KeypointId::LE1, KeypointId::LE2, KeypointId::LE3,
                                        KeypointId::LE4, KeypointId::LE5, KeypointId::LE6};
  const std::array<KeypointId, 6> re = {KeypointId::RE1, KeypointId::RE2, KeypointId::RE3,
                                        KeypointId::RE4, KeypointId::RE5, KeypointId::RE6};
  const double pi = std::acos(-1.0);
  for (std::size_t k = 0; k < 6; ++k) {
    const double a = 2.0 * pi * static_cast<double>(k) / 6.0;
    const double open = 7.0 + 2.0 * std::sin(0.3 * tt + static_cast<double>(k));
    set(le[k], 38 + yaw + 16 * std::cos(a), -42 + open * std::sin(a));
    set(re[k], -38 + yaw + 16 * std::cos(a), -42 + open * std::sin(a));
  }
  return p;
}

/// OpenPose-style document for one person using the default index layout.
inline nlohmann::json pose_document(const std::array<Point2, kNumKeypoints>& pts, double confidence = 0.9) {
  std::vector<double> body(25 * 3, 0.0), face(70 * 3, 0.0);
  auto put = [&](std::vector<double>& arr, int idx, KeypointId id) {
    const auto& q = pts[index_of(id)];
    arr[3 * idx] = q.x;
    arr[3 * idx + 1] = q.y;
    arr[3 * idx + 2] = confidence;
  };
  put(body, 0, KeypointId::Nose);
  put(body, 1, KeypointId::Neck);
  put(body, 2, KeypointId::RShoulder);
  put(body, 5, KeypointId::LShoulder);
  put(face, 68, KeypointId::REyeCenter);
  put(face, 69, KeypointId::LEyeCenter);
  const std::array<KeypointId, 6> re = {KeypointId::RE1, KeypointId::RE2, KeypointId::RE3,
                                        KeypointId::RE4, KeypointId::RE5, KeypointId::RE6};
  const std::array<KeypointId, 6> le = {KeypointId::LE1, KeypointId::LE2, KeypointId::LE3,
                                        KeypointId::LE4, KeypointId::LE5, KeypointId::LE6};
  for (int k = 0; k < 6; ++k) {
    put(face, 36 + k, re[static_cast<std::size_t>(k)]);
    put(face, 42 + k, le[static_cast<std::size_t>(k)]);
  }
  nlohmann::json person = {{"pose_keypoints_2d", body}, {"face_keypoints_2d", face}};
  return {{"version", 1.3}, {"people", nlohmann::json::array({person})}};
}

/// Smooth depth ramp (mm) with a few dropout pixels.
inline depth::DepthImage depth_frame(std::int64_t t, std::uint64_t seed, int width = 512, int height = 424) {
  depth::DepthImage img;
  img.width = width;
  img.height = height;
  img.values.resize(static_cast<std::size_t>(width) * static_cast<std::size_t>(height));
  std::mt19937_64 rng(seed * 1315423911ULL + static_cast<std::uint64_t>(t));
  std::uniform_int_distribution<int> drop(0, 199);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double v = 900.0 + 0.8 * x + 1.5 * y + 20.0 * std::sin(0.05 * static_cast<double>(t));
      img.values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)] =
          drop(rng) == 0 ? 0 : static_cast<std::uint16_t>(v);
    }
  }
  return img;
}

/// Label for frame t of a fixture sequence; driven by the skeleton's yaw.
inline AttentionLevel fixture_label(std::int64_t t, std::uint64_t seed) {
  const double phase = static_cast<double>(seed % 97) * 0.1;
  const double yaw = 12.0 * std::sin(0.11 * static_cast<double>(t) + phase);
  return std::abs(yaw) < 4.0 ? AttentionLevel::High : std::abs(yaw) < 9.0 ? AttentionLevel::Mid : AttentionLevel::Low;
}

struct VoteFixture {
  std::vector<annotation::AnnotatorLabels> annotators;  // four labelers
  annotation::LabelMap checker;                         // stage-1-unresolved frames only
};

/// Each labeler reports the truth with probability `p_correct`, otherwise a
/// uniformly chosen other level; the checker votes only where the four
/// labelers lack a strict majority.
inline VoteFixture noisy_votes(const annotation::LabelMap& truth, std::uint64_t seed, double p_correct = 0.8,
                               double checker_correct = 0.85) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> other(1, 2);
  auto vote = [&](AttentionLevel t, double p) {
    if (u(rng) < p) return t;
    return static_cast<AttentionLevel>((to_int(t) + other(rng)) % 3);
  };
  VoteFixture fx;
  for (int a = 0; a < 4; ++a) fx.annotators.push_back({"a" + std::to_string(a + 1), {}});
  for (const auto& [k, t] : truth) {
    std::array<AttentionLevel, annotation::kAnnotators> v{};
    for (std::size_t a = 0; a < annotation::kAnnotators; ++a) {
      v[a] = vote(t, p_correct);
      fx.annotators[a].labels[k] = v[a];
    }
    if (!annotation::majority_vote(v, annotation::kStageQuorum)) fx.checker[k] = vote(t, checker_correct);
  }
  return fx;
}

}  // namespace attn::synthetic
