#pragma once

// Directory-level extraction: pose JSON + depth maps -> feature records.
//
//   poses/<set>_<index>[_keypoints].json
//   depth/<set>_<index>_depth.png | _depth.raw (+ .json sidecar); the
//         `_depth` suffix is optional

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "attn/annotation.hpp"
#include "attn/depth_sampler.hpp"
#include "attn/feature_store.hpp"
#include "attn/geometry.hpp"
#include "attn/overlay.hpp"
#include "attn/pose_ingest.hpp"

namespace attn::pipeline {

namespace fs = std::filesystem;

struct ExtractOptions {
  pose::IndexMap index_map = pose::default_index_map();
  pose::ParseOptions parse;
  pose::MergeOptions merge;
  depth::CoordinateMapping mapping;
  depth::SampleOptions sample;
  bool carry_forward = false;           // reuse previous angles on degenerate frames
  std::optional<fs::path> overlay_dir;  // debug renders, one PNG per frame
};

struct ExtractStats {
  std::size_t sets = 0;
  std::size_t frames = 0;
  std::size_t frames_without_detection = 0;
  std::size_t carried_angles = 0;
};

struct PoseFile {
  std::string set_id;
  std::int64_t frame_index = 0;
  fs::path path;
};

inline std::vector<PoseFile> scan_pose_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("pose directory not found: " + dir.string());
  static const std::regex pattern(R"(^(.+)_(\d+)(_keypoints)?\.json$)");
  std::vector<PoseFile> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    std::smatch m;
    if (std::regex_match(name, m, pattern)) out.push_back({m[1].str(), std::stoll(m[2].str()), e.path()});
  }
  if (out.empty()) throw ConfigError("no <set>_<index>.json pose files in " + dir.string());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::tie(a.set_id, a.frame_index) < std::tie(b.set_id, b.frame_index);
  });
  return out;
}

inline fs::path depth_path(const fs::path& dir, const std::string& set_id, std::int64_t idx) {
  const auto stem = set_id + "_" + std::to_string(idx);
  for (const char* suffix : {"_depth.png", "_depth.raw", ".png", ".raw"}) {
    auto p = dir / (stem + suffix);
    if (fs::exists(p)) return p;
  }
  throw ConfigError("missing depth map for " + set_id + "#" + std::to_string(idx) + " in " + dir.string() +
                    " (expected " + stem + "_depth.png or _depth.raw)");
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ParseError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Runs ingest -> merge -> interpolate -> geometry -> depth sampling for
/// every set. Depth is sampled in pixel space, before the nose-origin shift.
inline std::vector<features::FeatureRecord> extract(const fs::path& poses_dir, const fs::path& depth_dir,
                                                    const ExtractOptions& opts = {}, ExtractStats* stats = nullptr) {
  opts.mapping.validate();
  const auto files = scan_pose_files(poses_dir);
  std::map<std::string, std::map<std::int64_t, std::vector<pose::RawDetection>>> by_set;
  for (const auto& f : files) {
    try {
      by_set[f.set_id][f.frame_index] =
          pose::parse_pose_frame(read_file(f.path), f.frame_index, opts.index_map, opts.parse);
    } catch (const Error& e) {
      throw ParseError(f.path.string() + ": " + e.what());
    }
  }
  if (opts.overlay_dir) fs::create_directories(*opts.overlay_dir);
  ExtractStats st;
  std::vector<features::FeatureRecord> out;
  for (const auto& [set_id, frames] : by_set) {
    ++st.sets;
    const auto track = pose::build_track(frames, opts.merge);
    for (const auto& d : track) st.frames_without_detection += d.present_count() == 0;
    std::vector<pose::KeypointFrame> pixel;
    try {
      pixel = pose::interpolate_track(track);
    } catch (const TrackError& e) {
      throw TrackError("set " + set_id + ": " + e.what());
    }
    geometry::FeatureStream stream(opts.carry_forward);
    for (const auto& kf : pixel) {
      const auto origin = pose::to_nose_origin(kf);
      geometry::GeometricFeatures gf;
      try {
        gf = stream.next(origin);
      } catch (const DegenerateGeometryError& e) {
        throw DegenerateGeometryError("set " + set_id + " frame " + std::to_string(kf.frame_index) + ": " + e.what() +
                                      " (use --carry-forward to reuse the previous angles)");
      }
      const auto img = depth::load_depth(depth_path(depth_dir, set_id, kf.frame_index));
      const auto dv = depth::depth_vector(kf, img, opts.mapping, opts.sample);
      out.push_back(features::assemble_frame_features(set_id, kf, origin, gf, dv));
      if (opts.overlay_dir) {
        overlay::render_to(kf, (*opts.overlay_dir / (set_id + "_" + std::to_string(kf.frame_index) + "_overlay.png")).string(),
                           opts.parse.image_width, opts.parse.image_height);
      }
    }
    st.carried_angles += stream.carried_count();
    st.frames += pixel.size();
  }
  if (stats) *stats = st;
  return out;
}

struct JoinStats {
  std::size_t labeled = 0;
  std::size_t features_without_label = 0;
  std::size_t labels_without_features = 0;
};

/// Attaches labels by (set_id, frame_index); records without a label are
/// dropped and counted.
inline std::vector<features::FeatureRecord> attach_labels(std::vector<features::FeatureRecord> records,
                                                          const annotation::LabelMap& labels,
                                                          JoinStats* stats = nullptr) {
  JoinStats st;
  std::vector<features::FeatureRecord> out;
  std::size_t matched = 0;
  for (auto& r : records) {
    auto it = labels.find(r.key());
    if (it == labels.end()) {
      ++st.features_without_label;
      continue;
    }
    r.label = it->second;
    ++matched;
    out.push_back(std::move(r));
  }
  st.labeled = matched;
  st.labels_without_features = labels.size() - matched;
  if (out.empty()) throw ContractError("no feature rows match any label row");
  if (stats) *stats = st;
  return out;
}

}  // namespace attn::pipeline
