#pragma once

// Thin libpng wrappers: 16-bit grayscale read/write (depth maps) and 8-bit
// RGB write (debug renders).

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "attn/error.hpp"

namespace attn::png {

struct Gray16 {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> pixels;  // row-major
};

struct Rgb8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB triples

  Rgb8() = default;
  Rgb8(int w, int h, std::uint8_t fill = 255)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    auto* p = &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw ParseError("cannot open " + path);
  return f;
}

inline void write_rows(const std::string& path, int width, int height, int bit_depth, int color_type,
                       const std::vector<png_bytep>& rows) {
  auto f = open(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng: allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng: failed writing " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);  // host little-endian -> PNG big-endian
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Reads a single-channel PNG. 8-bit files are widened to 16 bits unchanged
/// in value.
inline Gray16 read_gray16(const std::string& path) {
  auto f = detail::open(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ParseError(path + ": not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng: allocation failed");
  }
  Gray16 img;
  std::vector<png_bytep> rows;
  std::vector<png_byte> raw;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError(path + ": corrupt PNG");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError(path + ": expected single-channel grayscale PNG");
  }
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  raw.resize(stride * img.height);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = raw.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      std::uint16_t v;
      if (depth == 16) {
        const png_byte* p = rows[y] + 2 * x;
        v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
      } else {
        v = rows[y][x];
      }
      img.pixels[static_cast<std::size_t>(y) * img.width + x] = v;
    }
  }
  return img;
}

inline void write_gray16(const std::string& path, const Gray16& img) {
  std::vector<std::uint16_t> copy = img.pixels;
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) {
    rows[y] = reinterpret_cast<png_bytep>(copy.data() + static_cast<std::size_t>(y) * img.width);
  }
  detail::write_rows(path, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY, rows);
}

inline void write_rgb8(const std::string& path, const Rgb8& img) {
  std::vector<std::uint8_t> copy = img.pixels;
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) {
    rows[y] = copy.data() + static_cast<std::size_t>(y) * img.width * 3;
  }
  detail::write_rows(path, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, rows);
}

}  // namespace attn::png
