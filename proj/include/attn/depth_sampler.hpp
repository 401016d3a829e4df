#pragma once

// Per-keypoint depth sampling: RGB pixel -> depth pixel, then a 3x3 mean
// that skips zero (dropout) pixels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attn/error.hpp"
#include "attn/keypoints.hpp"
#include "attn/png_io.hpp"
#include "attn/pose_ingest.hpp"

namespace attn::depth {

inline constexpr int kDefaultWidth = 512;
inline constexpr int kDefaultHeight = 424;

struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> values;  // row-major, millimetres; 0 = invalid

  DepthImage() = default;
  DepthImage(int w, int h, std::uint16_t fill = 0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  std::uint16_t at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint16_t& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }

  void validate() const {
    if (width <= 0 || height <= 0 ||
        values.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
      throw ShapeError("depth image: " + std::to_string(values.size()) + " values for " +
                       std::to_string(width) + "x" + std::to_string(height));
    }
  }
};

/// depth = round(rgb * scale + offset). Default is proportional
/// 1920x1080 -> 512x424 scaling.
struct CoordinateMapping {
  double scale_x = 512.0 / 1920.0;
  double scale_y = 424.0 / 1080.0;
  double offset_x = 0.0;
  double offset_y = 0.0;

  static CoordinateMapping identity() { return {1.0, 1.0, 0.0, 0.0}; }

  void validate() const {
    if (!(scale_x > 0.0) || !(scale_y > 0.0)) throw ConfigError("coordinate mapping: scales must be > 0");
  }
};

inline CoordinateMapping mapping_from_json(const nlohmann::json& j) {
  CoordinateMapping m;
  m.scale_x = j.value("scale_x", m.scale_x);
  m.scale_y = j.value("scale_y", m.scale_y);
  m.offset_x = j.value("offset_x", m.offset_x);
  m.offset_y = j.value("offset_y", m.offset_y);
  m.validate();
  return m;
}

struct PixelCoord {
  int x = 0;
  int y = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

inline PixelCoord map_rgb_to_depth(Point2 p, const CoordinateMapping& m, int depth_width = kDefaultWidth,
                                   int depth_height = kDefaultHeight) {
  const long x = std::lround(p.x * m.scale_x + m.offset_x);
  const long y = std::lround(p.y * m.scale_y + m.offset_y);
  return {static_cast<int>(std::clamp<long>(x, 0, depth_width - 1)),
          static_cast<int>(std::clamp<long>(y, 0, depth_height - 1))};
}

struct SampleOptions {
  bool exclude_dropout = true;
};

/// Mean of the in-bounds 3x3 neighbourhood around p.
inline double sample_depth(const DepthImage& img, PixelCoord p, const SampleOptions& opts = {}) {
  if (p.x < 0 || p.y < 0 || p.x >= img.width || p.y >= img.height) {
    throw ContractError("sample_depth: (" + std::to_string(p.x) + "," + std::to_string(p.y) +
                        ") outside " + std::to_string(img.width) + "x" + std::to_string(img.height));
  }
  double sum = 0.0;
  int n = 0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const int x = p.x + dx, y = p.y + dy;
      if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
      const std::uint16_t v = img.at(x, y);
      if (opts.exclude_dropout && v == 0) continue;
      sum += v;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

/// Must run on pixel-space keypoints (after interpolation, before the
/// nose-origin shift).
inline std::array<double, kNumKeypoints> depth_vector(const pose::KeypointFrame& frame,
                                                      const DepthImage& img,
                                                      const CoordinateMapping& m,
                                                      const SampleOptions& opts = {}) {
  if (frame.space != pose::FrameSpace::Pixel) {
    throw ContractError("depth_vector: frame " + std::to_string(frame.frame_index) +
                        " must be in pixel space");
  }
  img.validate();
  std::array<double, kNumKeypoints> out{};
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    out[k] = sample_depth(img, map_rgb_to_depth(frame.coords[k], m, img.width, img.height), opts);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loading

inline DepthImage load_png(const std::string& path) {
  auto g = png::read_gray16(path);
  DepthImage img;
  img.width = g.width;
  img.height = g.height;
  img.values = std::move(g.pixels);
  return img;
}

/// Raw little-endian uint16 with a sidecar `<stem>.json` holding {width, height}.
inline DepthImage load_raw(const std::filesystem::path& path) {
  auto sidecar = path;
  sidecar.replace_extension(".json");
  std::ifstream hs(sidecar);
  if (!hs) throw ParseError("missing depth sidecar header " + sidecar.string());
  nlohmann::json h;
  try {
    hs >> h;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(sidecar.string() + ": malformed JSON at byte " + std::to_string(e.byte));
  }
  if (!h.contains("width") || !h.contains("height")) {
    throw ParseError(sidecar.string() + ": needs width and height");
  }
  DepthImage img(h["width"].get<int>(), h["height"].get<int>());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != img.values.size() * 2) {
    throw ParseError(path.string() + ": expected " + std::to_string(img.values.size() * 2) +
                     " bytes, found " + std::to_string(bytes.size()));
  }
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    img.values[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
  }
  return img;
}

inline void save_raw(const std::filesystem::path& path, const DepthImage& img) {
  img.validate();
  std::ofstream out(path, std::ios::binary);
  for (auto v : img.values) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
  }
  auto sidecar = path;
  sidecar.replace_extension(".json");
  std::ofstream(sidecar) << nlohmann::json{{"width", img.width}, {"height", img.height}}.dump() << '\n';
}

inline DepthImage load_depth(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png") return load_png(path.string());
  if (ext == ".raw") return load_raw(path);
  throw ConfigError("unsupported depth file " + path.string() + " (expected .png or .raw)");
}

}  // namespace attn::depth
