#pragma once

// Debug render of one frame's keypoints and the segments behind its
// geometric features.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <string>

#include "attn/keypoints.hpp"
#include "attn/png_io.hpp"
#include "attn/pose_ingest.hpp"

namespace attn::overlay {

struct Color {
  std::uint8_t r, g, b;
};

inline void line(png::Rgb8& img, Point2 a, Point2 b, Color c) {
  int x0 = static_cast<int>(std::lround(a.x)), y0 = static_cast<int>(std::lround(a.y));
  const int x1 = static_cast<int>(std::lround(b.x)), y1 = static_cast<int>(std::lround(b.y));
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    img.set(x0, y0, c.r, c.g, c.b);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

inline void dot(png::Rgb8& img, Point2 p, int radius, Color c) {
  const int cx = static_cast<int>(std::lround(p.x)), cy = static_cast<int>(std::lround(p.y));
  for (int y = -radius; y <= radius; ++y) {
    for (int x = -radius; x <= radius; ++x) {
      if (x * x + y * y <= radius * radius) img.set(cx + x, cy + y, c.r, c.g, c.b);
    }
  }
}

/// Face distances in red, body-face in green, eye contours in blue, the three
/// neck-rooted angle vectors in orange.
inline png::Rgb8 render(const pose::KeypointFrame& pixel_frame, int width = 1920, int height = 1080) {
  png::Rgb8 img(width, height, 255);
  const auto& f = pixel_frame;
  const Color red{220, 40, 40}, green{40, 170, 60}, blue{40, 80, 220}, orange{240, 150, 20}, black{0, 0, 0};
  line(img, f[KeypointId::Nose], f[KeypointId::LEyeCenter], red);
  line(img, f[KeypointId::Nose], f[KeypointId::REyeCenter], red);
  line(img, f[KeypointId::LEyeCenter], f[KeypointId::REyeCenter], red);
  for (auto b : kBodySet) {
    for (auto fa : kFaceSet) line(img, f[b], f[fa], green);
  }
  for (auto k : kLeftEyeContour) line(img, f[k], f[KeypointId::LEyeCenter], blue);
  for (auto k : kRightEyeContour) line(img, f[k], f[KeypointId::REyeCenter], blue);
  line(img, f[KeypointId::Neck], f[KeypointId::Nose], orange);
  line(img, f[KeypointId::Neck], f[KeypointId::LShoulder], orange);
  line(img, f[KeypointId::Neck], f[KeypointId::RShoulder], orange);
  for (std::size_t i = 0; i < kNumKeypoints; ++i) dot(img, f.coords[i], 4, black);
  return img;
}

inline void render_to(const pose::KeypointFrame& pixel_frame, const std::string& path, int width = 1920,
                      int height = 1080) {
  png::write_rgb8(path, render(pixel_frame, width, height));
}

}  // namespace attn::overlay
