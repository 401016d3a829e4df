#pragma once

// Per-frame modality vectors (KP, GF, depth), standardization, and the
// feature CSV / standardizer JSON formats.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "attn/csv.hpp"
#include "attn/error.hpp"
#include "attn/geometry.hpp"
#include "attn/keypoints.hpp"
#include "attn/labels.hpp"
#include "attn/pose_ingest.hpp"

namespace attn::features {

inline constexpr int kLayoutVersion = 1;

inline constexpr std::size_t kKpDims = 2 * kNumKeypoints;            // 36
inline constexpr std::size_t kGfDims = geometry::kGeometricDims;     // 26
inline constexpr std::size_t kDepthDims = kNumKeypoints;             // 18
inline constexpr std::size_t kTotalDims = kKpDims + kGfDims + kDepthDims;  // 80
inline constexpr std::size_t kMetaColumns = 3;                       // set_id, frame_index, label
static_assert(kTotalDims == 80);

enum class Modality : std::uint8_t { KP = 0, GF = 1, Depth = 2 };

inline constexpr std::array<Modality, 3> kAllModalities = {Modality::KP, Modality::GF, Modality::Depth};

constexpr std::size_t dims_of(Modality m) {
  switch (m) {
    case Modality::KP: return kKpDims;
    case Modality::GF: return kGfDims;
    case Modality::Depth: return kDepthDims;
  }
  return 0;
}

constexpr std::size_t offset_of(Modality m) {
  switch (m) {
    case Modality::KP: return 0;
    case Modality::GF: return kKpDims;
    case Modality::Depth: return kKpDims + kGfDims;
  }
  return 0;
}

constexpr std::string_view name_of(Modality m) {
  switch (m) {
    case Modality::KP: return "kp";
    case Modality::GF: return "gf";
    case Modality::Depth: return "depth";
  }
  return "";
}

inline std::optional<Modality> modality_from_name(std::string_view s) {
  for (auto m : kAllModalities) {
    if (name_of(m) == s) return m;
  }
  return std::nullopt;
}

/// Sum of the modality dimensions (the early-fusion input width).
inline std::size_t concat_dims(std::span<const Modality> ms) {
  std::size_t n = 0;
  for (auto m : ms) n += dims_of(m);
  return n;
}

struct FeatureRecord {
  std::string set_id;
  std::int64_t frame_index = 0;
  std::array<double, kKpDims> kp{};
  std::array<double, kGfDims> gf{};
  std::array<double, kDepthDims> depth{};
  std::optional<AttentionLevel> label;

  FrameKey key() const { return {set_id, frame_index}; }

  std::span<const double> modality(Modality m) const {
    switch (m) {
      case Modality::KP: return kp;
      case Modality::GF: return gf;
      case Modality::Depth: return depth;
    }
    return {};
  }

  std::span<double> modality(Modality m) {
    switch (m) {
      case Modality::KP: return kp;
      case Modality::GF: return gf;
      case Modality::Depth: return depth;
    }
    return {};
  }

  std::array<double, kTotalDims> flat() const {
    std::array<double, kTotalDims> v{};
    auto it = std::copy(kp.begin(), kp.end(), v.begin());
    it = std::copy(gf.begin(), gf.end(), it);
    std::copy(depth.begin(), depth.end(), it);
    return v;
  }

  void set_flat(std::span<const double> v) {
    if (v.size() != kTotalDims) throw ShapeError("feature record: expected 80 values");
    std::copy_n(v.begin(), kKpDims, kp.begin());
    std::copy_n(v.begin() + kKpDims, kGfDims, gf.begin());
    std::copy_n(v.begin() + kKpDims + kGfDims, kDepthDims, depth.begin());
  }

  /// Concatenation in the fixed KP | GF | Depth order restricted to `ms`.
  std::vector<double> concat(std::span<const Modality> ms) const {
    std::vector<double> v;
    v.reserve(concat_dims(ms));
    for (auto m : kAllModalities) {
      if (std::find(ms.begin(), ms.end(), m) == ms.end()) continue;
      auto s = modality(m);
      v.insert(v.end(), s.begin(), s.end());
    }
    return v;
  }

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

/// Builds a record from the pixel-space frame (unused except for identity),
/// its nose-origin counterpart, the geometric features and the depth vector.
inline FeatureRecord assemble_frame_features(std::string set_id, const pose::KeypointFrame& kf_pixel,
                                             const pose::KeypointFrame& kf_origin,
                                             const geometry::GeometricFeatures& gf,
                                             std::span<const double> depth_values) {
  if (kf_pixel.frame_index != kf_origin.frame_index) {
    throw ContractError("assemble_frame_features: frame " + std::to_string(kf_pixel.frame_index) +
                        " paired with frame " + std::to_string(kf_origin.frame_index));
  }
  if (kf_origin.space != pose::FrameSpace::NoseOrigin || kf_pixel.space != pose::FrameSpace::Pixel) {
    throw ContractError("assemble_frame_features: expected one pixel and one nose-origin frame");
  }
  if (depth_values.size() != kDepthDims) {
    throw ShapeError("assemble_frame_features: depth vector has " +
                     std::to_string(depth_values.size()) + " values, expected 18");
  }
  FeatureRecord r;
  r.set_id = std::move(set_id);
  r.frame_index = kf_origin.frame_index;
  for (std::size_t k = 0; k < kNumKeypoints; ++k) {
    r.kp[2 * k] = kf_origin.coords[k].x;
    r.kp[2 * k + 1] = kf_origin.coords[k].y;
  }
  r.gf = gf.to_vector();
  std::copy(depth_values.begin(), depth_values.end(), r.depth.begin());
  return r;
}

// ---------------------------------------------------------------------------
// Standardizer

class Standardizer {
 public:
  static constexpr double kConstantEpsilon = 1e-9;

  Standardizer() = default;

  /// Per-dimension mean and population std over `train`. The keys of every
  /// fitted record are kept so callers can prove a split never leaked.
  static Standardizer fit(std::span<const FeatureRecord> train, std::string provenance = {}) {
    if (train.empty()) throw ContractError("fit_standardizer: empty training set");
    Standardizer s;
    s.provenance_ = std::move(provenance);
    const double n = static_cast<double>(train.size());
    for (const auto& r : train) {
      const auto v = r.flat();
      for (std::size_t d = 0; d < kTotalDims; ++d) s.mean_[d] += v[d];
    }
    for (auto& m : s.mean_) m /= n;
    std::array<double, kTotalDims> ss{};
    for (const auto& r : train) {
      const auto v = r.flat();
      for (std::size_t d = 0; d < kTotalDims; ++d) {
        const double c = v[d] - s.mean_[d];
        ss[d] += c * c;
      }
    }
    for (std::size_t d = 0; d < kTotalDims; ++d) {
      s.std_[d] = std::sqrt(ss[d] / n);
      s.constant_[d] = s.std_[d] < kConstantEpsilon;
    }
    s.fitted_keys_.reserve(train.size());
    for (const auto& r : train) s.fitted_keys_.push_back(r.key());
    std::sort(s.fitted_keys_.begin(), s.fitted_keys_.end());
    s.fitted_ = true;
    return s;
  }

  bool fitted() const { return fitted_; }

  FeatureRecord apply(const FeatureRecord& r) const {
    require_fitted();
    FeatureRecord out = r;
    auto v = r.flat();
    for (std::size_t d = 0; d < kTotalDims; ++d) {
      v[d] = constant_[d] ? 0.0 : (v[d] - mean_[d]) / std_[d];
    }
    out.set_flat(v);
    return out;
  }

  std::vector<FeatureRecord> apply(std::span<const FeatureRecord> rs) const {
    std::vector<FeatureRecord> out;
    out.reserve(rs.size());
    for (const auto& r : rs) out.push_back(apply(r));
    return out;
  }

  /// Inverse transform; constant dimensions return their mean.
  FeatureRecord invert(const FeatureRecord& z) const {
    require_fitted();
    FeatureRecord out = z;
    auto v = z.flat();
    for (std::size_t d = 0; d < kTotalDims; ++d) {
      v[d] = constant_[d] ? mean_[d] : v[d] * std_[d] + mean_[d];
    }
    out.set_flat(v);
    return out;
  }

  /// Applies to a flat vector of full width.
  void apply_in_place(std::span<double> v) const {
    require_fitted();
    if (v.size() != kTotalDims) {
      throw ShapeError("apply_standardizer: got " + std::to_string(v.size()) + " dims, fitted on 80");
    }
    for (std::size_t d = 0; d < kTotalDims; ++d) {
      v[d] = constant_[d] ? 0.0 : (v[d] - mean_[d]) / std_[d];
    }
  }

  bool was_fitted_on(const FrameKey& k) const {
    return std::binary_search(fitted_keys_.begin(), fitted_keys_.end(), k);
  }

  std::size_t fitted_count() const { return fitted_keys_.size(); }
  const std::string& provenance() const { return provenance_; }
  const std::array<double, kTotalDims>& means() const { return mean_; }
  const std::array<double, kTotalDims>& stds() const { return std_; }
  const std::array<bool, kTotalDims>& constant_flags() const { return constant_; }

  nlohmann::json to_json() const {
    require_fitted();
    nlohmann::json j;
    j["layout_version"] = kLayoutVersion;
    j["means"] = mean_;
    j["stds"] = std_;
    j["constant_flags"] = constant_;
    if (!provenance_.empty()) j["provenance"] = provenance_;
    return j;
  }

  static Standardizer from_json(const nlohmann::json& j) {
    const int version = j.value("layout_version", -1);
    if (version != kLayoutVersion) {
      throw ParseError("standardizer: layout_version " + std::to_string(version) + ", expected " +
                       std::to_string(kLayoutVersion));
    }
    Standardizer s;
    auto read = [&](const char* key, auto& dst) {
      if (!j.contains(key) || !j[key].is_array() || j[key].size() != kTotalDims) {
        throw ParseError(std::string("standardizer: '") + key + "' must hold 80 entries");
      }
      for (std::size_t d = 0; d < kTotalDims; ++d) j[key][d].get_to(dst[d]);
    };
    read("means", s.mean_);
    read("stds", s.std_);
    read("constant_flags", s.constant_);
    s.provenance_ = j.value("provenance", std::string{});
    s.fitted_ = true;
    return s;
  }

 private:
  void require_fitted() const {
    if (!fitted_) throw ContractError("standardizer used before fitting");
  }

  std::array<double, kTotalDims> mean_{};
  std::array<double, kTotalDims> std_{};
  std::array<bool, kTotalDims> constant_{};
  std::vector<FrameKey> fitted_keys_;
  std::string provenance_;
  bool fitted_ = false;
};

// ---------------------------------------------------------------------------
// Feature CSV

inline std::vector<std::string> feature_column_names() {
  std::vector<std::string> cols;
  cols.reserve(kTotalDims);
  for (auto n : kKeypointNames) {
    cols.push_back("kp_" + std::string(n) + "_x");
    cols.push_back("kp_" + std::string(n) + "_y");
  }
  const char* face[] = {"nose", "leye", "reye"};
  cols.push_back("gf_df_nose_leye");
  cols.push_back("gf_df_nose_reye");
  cols.push_back("gf_df_leye_reye");
  for (const char* b : {"neck", "lshoulder", "rshoulder"}) {
    for (const char* f : face) cols.push_back(std::string("gf_dbf_") + b + "_" + f);
  }
  for (int i = 1; i <= 6; ++i) cols.push_back("gf_dle_" + std::to_string(i));
  for (int i = 1; i <= 6; ++i) cols.push_back("gf_dre_" + std::to_string(i));
  cols.push_back("gf_a_lshoulder");
  cols.push_back("gf_a_rshoulder");
  for (auto n : kKeypointNames) cols.push_back("depth_" + std::string(n));
  return cols;
}

inline std::string feature_csv_header() {
  std::string h = "set_id,frame_index,label";
  for (const auto& c : feature_column_names()) h += "," + c;
  return h;
}

inline std::string version_line() {
  return "# attn-features layout_version=" + std::to_string(kLayoutVersion);
}

inline void write_features(std::ostream& os, std::span<const FeatureRecord> records) {
  os << version_line() << '\n' << feature_csv_header() << '\n';
  char buf[32];
  for (const auto& r : records) {
    os << r.set_id << ',' << r.frame_index << ',';
    if (r.label) os << to_int(*r.label);
    for (double v : r.flat()) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      os << buf;
    }
    os << '\n';
  }
}

inline std::vector<FeatureRecord> read_features(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("line 1: empty feature file");
  if (std::string(csv::trim_cr(line)) != version_line()) {
    throw ParseError("line 1: feature layout mismatch: expected '" + version_line() + "', found '" +
                     std::string(csv::trim_cr(line)) + "'");
  }
  if (!std::getline(is, line) || std::string(csv::trim_cr(line)) != feature_csv_header()) {
    throw ParseError("line 2: feature header does not match layout version " +
                     std::to_string(kLayoutVersion));
  }
  constexpr std::size_t expected = kKpDims + kGfDims + kDepthDims + kMetaColumns;
  std::vector<FeatureRecord> out;
  std::size_t line_no = 2;
  while (std::getline(is, line)) {
    ++line_no;
    auto l = csv::trim_cr(line);
    if (l.empty()) continue;
    auto f = csv::split(l);
    if (f.size() != expected) {
      throw ParseError("line " + std::to_string(line_no) + ": " + std::to_string(f.size()) +
                       " columns, expected 36+26+18+3 = " + std::to_string(expected));
    }
    FeatureRecord r;
    r.set_id = std::string(f[0]);
    r.frame_index = csv::parse_int(f[1], "frame_index", line_no);
    if (!f[2].empty()) {
      r.label = level_from_string(f[2]);
      if (!r.label) throw ParseError("line " + std::to_string(line_no) + ": bad label '" + std::string(f[2]) + "'");
    }
    std::array<double, kTotalDims> v{};
    for (std::size_t d = 0; d < kTotalDims; ++d) v[d] = csv::parse_double(f[kMetaColumns + d], "feature", line_no);
    r.set_flat(v);
    out.push_back(std::move(r));
  }
  return out;
}

inline void persist_features(std::span<const FeatureRecord> records, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  write_features(os, records);
}

inline std::vector<FeatureRecord> load_features(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path);
  try {
    return read_features(is);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace attn::features
