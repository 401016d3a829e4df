#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace attn {

/// Ordinal three-level attention judgment.
enum class AttentionLevel : std::uint8_t { Low = 0, Mid = 1, High = 2 };

inline constexpr std::size_t kNumClasses = 3;

constexpr int to_int(AttentionLevel l) { return static_cast<int>(l); }

inline std::optional<AttentionLevel> level_from_int(long v) {
  if (v < 0 || v > 2) return std::nullopt;
  return static_cast<AttentionLevel>(v);
}

inline std::optional<AttentionLevel> level_from_string(std::string_view s) {
  if (s == "0") return AttentionLevel::Low;
  if (s == "1") return AttentionLevel::Mid;
  if (s == "2") return AttentionLevel::High;
  return std::nullopt;
}

inline constexpr std::array<std::string_view, kNumClasses> kLevelNames = {"low", "mid", "high"};

/// Frame identity shared by every per-frame artifact.
struct FrameKey {
  std::string set_id;
  std::int64_t frame_index = 0;

  friend auto operator<=>(const FrameKey&, const FrameKey&) = default;
  friend bool operator==(const FrameKey&, const FrameKey&) = default;
};

inline std::string to_string(const FrameKey& k) { return k.set_id + "#" + std::to_string(k.frame_index); }

}  // namespace attn
