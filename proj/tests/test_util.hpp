#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "attn/pose_ingest.hpp"

namespace attn::testutil {

inline pose::KeypointFrame random_frame(std::mt19937_64& rng, double lo = -300.0, double hi = 300.0,
                                        pose::FrameSpace space = pose::FrameSpace::NoseOrigin) {
  std::uniform_real_distribution<double> u(lo, hi);
  pose::KeypointFrame f;
  f.space = space;
  for (auto& p : f.coords) p = {u(rng), u(rng)};
  if (space == pose::FrameSpace::NoseOrigin) f[KeypointId::Nose] = {0.0, 0.0};
  return f;
}

inline pose::RawDetection full_detection(std::int64_t frame, double x0, double y0, double conf = 0.9) {
  pose::RawDetection d;
  d.frame_index = frame;
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    d.points[k] = pose::RawPoint{x0 + 7.0 * static_cast<double>(k), y0 + 3.0 * static_cast<double>(k), conf};
  }
  return d;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("attn_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace attn::testutil
