#pragma once

// Minimal CSV helpers for the toolkit's own flat files (no quoting; fields
// never contain commas).

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <string_view>
#include <vector>

#include "attn/error.hpp"

namespace attn::csv {

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

inline std::int64_t parse_int(std::string_view s, std::string_view what, std::size_t line_no) {
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": bad " + std::string(what) + " '" +
                     std::string(s) + "'");
  }
  return v;
}

inline double parse_double(std::string_view s, std::string_view what, std::size_t line_no) {
  // strtod handles every form printf emits; from_chars<double> is missing on older toolchains.
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": bad " + std::string(what) + " '" + tmp + "'");
  }
  return v;
}

}  // namespace attn::csv
