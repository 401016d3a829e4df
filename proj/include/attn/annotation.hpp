#pragma once

// Subjective-annotation resolution: four labelers, strict-majority rule,
// blind checker escalation for unsettled frames, then a nearest-neighbour
// lower-median over the timeline for whatever is still open.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attn/csv.hpp"
#include "attn/error.hpp"
#include "attn/labels.hpp"

namespace attn::annotation {

inline constexpr std::size_t kAnnotators = 4;
inline constexpr std::size_t kStageQuorum = 3;

enum class Resolution { MajorityOfFour, MajorityWithChecker, MedianFilter };

inline std::string_view name_of(Resolution r) {
  switch (r) {
    case Resolution::MajorityOfFour: return "majority_of_four";
    case Resolution::MajorityWithChecker: return "majority_with_checker";
    case Resolution::MedianFilter: return "median_filter";
  }
  return "";
}

inline std::optional<Resolution> resolution_from_name(std::string_view s) {
  for (auto r : {Resolution::MajorityOfFour, Resolution::MajorityWithChecker, Resolution::MedianFilter}) {
    if (name_of(r) == s) return r;
  }
  return std::nullopt;
}

inline std::size_t strict_majority_quorum(std::size_t votes) { return votes / 2 + 1; }

/// The label whose count reaches `quorum` (default: strict majority), if any.
inline std::optional<AttentionLevel> majority_vote(std::span<const AttentionLevel> votes,
                                                   std::optional<std::size_t> quorum = std::nullopt) {
  if (votes.empty()) throw ContractError("majority_vote: empty vote set");
  const std::size_t q = quorum.value_or(strict_majority_quorum(votes.size()));
  std::array<std::size_t, kNumClasses> counts{};
  for (auto v : votes) ++counts[to_int(v)];
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (counts[c] >= q) return static_cast<AttentionLevel>(c);
  }
  return std::nullopt;
}

struct AnnotatorVote {
  std::string annotator;
  AttentionLevel label = AttentionLevel::Low;
};

struct VoteSheet {
  std::string set_id;
  std::int64_t frame_index = 0;
  std::array<AnnotatorVote, kAnnotators> votes{};
  std::optional<AttentionLevel> checker_vote;
  std::optional<Resolution> resolution;
  std::optional<AttentionLevel> final_label;

  FrameKey key() const { return {set_id, frame_index}; }

  std::array<AttentionLevel, kAnnotators> labels() const {
    std::array<AttentionLevel, kAnnotators> l{};
    for (std::size_t i = 0; i < kAnnotators; ++i) l[i] = votes[i].label;
    return l;
  }
};

/// Stage-1 outcome only (no checker, no mutation).
inline std::optional<AttentionLevel> stage_one(const VoteSheet& s) {
  const auto l = s.labels();
  return majority_vote(l, kStageQuorum);
}

/// Stage 1 over the four votes; if unsettled and a checker vote exists,
/// stage 2 over all five (quorum 3). Leaves `final_label` empty when both
/// stages fail.
inline VoteSheet resolve_with_checker(VoteSheet sheet) {
  if (auto first = stage_one(sheet)) {
    if (sheet.checker_vote) {
      throw InvariantViolation("frame " + to_string(sheet.key()) +
                               ": checker vote present although the four labelers settled it");
    }
    sheet.final_label = first;
    sheet.resolution = Resolution::MajorityOfFour;
    return sheet;
  }
  sheet.final_label.reset();
  sheet.resolution.reset();
  if (!sheet.checker_vote) return sheet;
  std::array<AttentionLevel, kAnnotators + 1> five{};
  const auto l = sheet.labels();
  std::copy(l.begin(), l.end(), five.begin());
  five.back() = *sheet.checker_vote;
  if (auto second = majority_vote(five, kStageQuorum)) {
    sheet.final_label = second;
    sheet.resolution = Resolution::MajorityWithChecker;
  }
  return sheet;
}

/// Fills unresolved entries with the lower median of the `window` nearest
/// resolved entries (distance ties go to the earlier frame). Only entries
/// resolved on input are consulted.
inline std::vector<AttentionLevel> median_filter_resolve(std::span<const std::optional<AttentionLevel>> timeline,
                                                         std::size_t window = 5) {
  if (window == 0 || window % 2 == 0) {
    throw ConfigError("median filter window must be a positive odd integer, got " + std::to_string(window));
  }
  const bool any = std::any_of(timeline.begin(), timeline.end(), [](const auto& v) { return v.has_value(); });
  if (!timeline.empty() && !any) throw ContractError("median_filter_resolve: no resolved frame in timeline");

  std::vector<AttentionLevel> out(timeline.size());
  std::vector<int> neighbourhood;
  const auto n = static_cast<std::ptrdiff_t>(timeline.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    if (timeline[i]) {
      out[i] = *timeline[i];
      continue;
    }
    neighbourhood.clear();
    std::ptrdiff_t left = i - 1, right = i + 1;
    while (neighbourhood.size() < window && (left >= 0 || right < n)) {
      while (left >= 0 && !timeline[left]) --left;
      while (right < n && !timeline[right]) ++right;
      const bool has_left = left >= 0, has_right = right < n;
      if (!has_left && !has_right) break;
      if (has_left && (!has_right || i - left <= right - i)) {
        neighbourhood.push_back(to_int(*timeline[left--]));
      } else {
        neighbourhood.push_back(to_int(*timeline[right++]));
      }
    }
    std::sort(neighbourhood.begin(), neighbourhood.end());
    out[i] = static_cast<AttentionLevel>(neighbourhood[(neighbourhood.size() - 1) / 2]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Label files

using LabelMap = std::map<FrameKey, AttentionLevel>;

/// Reads `set_id,frame_index,label` (header optional). Duplicate keys keep
/// the last row.
inline LabelMap read_label_csv(std::istream& is, const std::string& source = "labels") {
  LabelMap out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    auto l = csv::trim_cr(line);
    if (l.empty()) continue;
    auto f = csv::split(l);
    if (line_no == 1 && f.size() >= 1 && f[0] == "set_id") continue;
    if (f.size() < 3) {
      throw ParseError(source + " line " + std::to_string(line_no) + ": expected set_id,frame_index,label");
    }
    auto label = level_from_string(f[2]);
    if (!label) {
      throw ParseError(source + " line " + std::to_string(line_no) + ": label must be 0, 1 or 2, got '" +
                       std::string(f[2]) + "'");
    }
    out[{std::string(f[0]), csv::parse_int(f[1], "frame_index", line_no)}] = *label;
  }
  return out;
}

inline LabelMap load_label_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path);
  return read_label_csv(is, path);
}

inline void write_label_csv(std::ostream& os, const LabelMap& labels) {
  os << "set_id,frame_index,label\n";
  for (const auto& [k, v] : labels) os << k.set_id << ',' << k.frame_index << ',' << to_int(v) << '\n';
}

// ---------------------------------------------------------------------------
// Agreement report

struct SetAgreement {
  std::string set_id;
  std::size_t frames = 0;
  std::size_t settled_annotators = 0;
  std::size_t settled_with_checker = 0;

  double pct_annotators() const { return frames ? 100.0 * settled_annotators / frames : 0.0; }
  double pct_with_checker() const { return frames ? 100.0 * settled_with_checker / frames : 0.0; }
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample (n-1) standard deviation; 0 for fewer than two values
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return r;
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return r;
}

struct AgreementReport {
  std::vector<SetAgreement> sets;
  MeanStd annotators;     // across sets
  MeanStd with_checker;   // across sets
  double global_pct_annotators = 0.0;    // frame-weighted
  double global_pct_with_checker = 0.0;  // frame-weighted
  std::array<std::size_t, kNumClasses> class_counts{};
  std::array<std::size_t, 3> resolution_counts{};  // indexed by Resolution
  std::size_t checker_rows_consumed = 0;
  std::size_t checker_rows_ignored = 0;

  std::size_t total_frames() const {
    std::size_t n = 0;
    for (const auto& s : sets) n += s.frames;
    return n;
  }

  double class_pct(AttentionLevel l) const {
    const auto n = total_frames();
    return n ? 100.0 * class_counts[to_int(l)] / n : 0.0;
  }
};

inline AgreementReport summarize(std::vector<SetAgreement> sets) {
  AgreementReport r;
  r.sets = std::move(sets);
  std::vector<double> a, c;
  std::size_t frames = 0, sa = 0, sc = 0;
  for (const auto& s : r.sets) {
    a.push_back(s.pct_annotators());
    c.push_back(s.pct_with_checker());
    frames += s.frames;
    sa += s.settled_annotators;
    sc += s.settled_with_checker;
  }
  r.annotators = mean_std(a);
  r.with_checker = mean_std(c);
  r.global_pct_annotators = frames ? 100.0 * sa / frames : 0.0;
  r.global_pct_with_checker = frames ? 100.0 * sc / frames : 0.0;
  return r;
}

inline nlohmann::json to_json(const AgreementReport& r) {
  nlohmann::json j;
  j["sets"] = nlohmann::json::array();
  for (const auto& s : r.sets) {
    j["sets"].push_back({{"set_id", s.set_id},
                         {"frames", s.frames},
                         {"settled_annotators", s.settled_annotators},
                         {"settled_with_checker", s.settled_with_checker},
                         {"pct_settled_annotators", s.pct_annotators()},
                         {"pct_settled_with_checker", s.pct_with_checker()}});
  }
  j["mean_pct_settled_annotators"] = r.annotators.mean;
  j["std_pct_settled_annotators"] = r.annotators.std;
  j["mean_pct_settled_with_checker"] = r.with_checker.mean;
  j["std_pct_settled_with_checker"] = r.with_checker.std;
  j["global_pct_settled_annotators"] = r.global_pct_annotators;
  j["global_pct_settled_with_checker"] = r.global_pct_with_checker;
  j["total_frames"] = r.total_frames();
  nlohmann::json dist;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    dist[std::string(kLevelNames[c])] = {{"count", r.class_counts[c]},
                                         {"pct", r.class_pct(static_cast<AttentionLevel>(c))}};
  }
  j["class_distribution"] = dist;
  j["resolutions"] = {{std::string(name_of(Resolution::MajorityOfFour)), r.resolution_counts[0]},
                      {std::string(name_of(Resolution::MajorityWithChecker)), r.resolution_counts[1]},
                      {std::string(name_of(Resolution::MedianFilter)), r.resolution_counts[2]}};
  j["checker_rows_consumed"] = r.checker_rows_consumed;
  j["checker_rows_ignored"] = r.checker_rows_ignored;
  return j;
}

/// Set-per-column table: frames, % settled among annotators, % settled with
/// checker, then mean and std.
inline std::string render_table(const AgreementReport& r) {
  std::ostringstream os;
  char buf[64];
  auto row = [&](const std::string& title, auto cell, const std::string& mean, const std::string& std) {
    std::snprintf(buf, sizeof buf, "%-28s", title.c_str());
    os << buf;
    for (const auto& s : r.sets) {
      std::snprintf(buf, sizeof buf, " %9s", cell(s).c_str());
      os << buf;
    }
    std::snprintf(buf, sizeof buf, " %9s %9s\n", mean.c_str(), std.c_str());
    os << buf;
  };
  auto fmt = [](double v, int prec) {
    char b[32];
    std::snprintf(b, sizeof b, "%.*f", prec, v);
    return std::string(b);
  };
  row("Set", [](const SetAgreement& s) { return s.set_id; }, "Mean", "Std");
  row("# Frames", [](const SetAgreement& s) { return std::to_string(s.frames); }, "-", "-");
  row("% settled (annotators)", [&](const SetAgreement& s) { return fmt(s.pct_annotators(), 2); },
      fmt(r.annotators.mean, 2), fmt(r.annotators.std, 4));
  row("% settled (with checker)", [&](const SetAgreement& s) { return fmt(s.pct_with_checker(), 2); },
      fmt(r.with_checker.mean, 2), fmt(r.with_checker.std, 4));
  os << "frame-weighted: " << fmt(r.global_pct_annotators, 2) << "% annotators, "
     << fmt(r.global_pct_with_checker, 2) << "% with checker\n";
  os << "final distribution: low " << fmt(r.class_pct(AttentionLevel::Low), 1) << "%, mid "
     << fmt(r.class_pct(AttentionLevel::Mid), 1) << "%, high " << fmt(r.class_pct(AttentionLevel::High), 1)
     << "%\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// aggregate_dataset

struct AnnotatorLabels {
  std::string annotator;
  LabelMap labels;
};

struct AggregateResult {
  std::vector<VoteSheet> sheets;  // sorted by (set_id, frame_index), all resolved
  AgreementReport report;
};

struct AggregateOptions {
  std::size_t median_window = 5;
};

/// Builds vote sheets for frames where all four labelers voted, without
/// coverage checks. Used by the live service, where campaigns are partial.
inline std::vector<VoteSheet> build_sheets(std::span<const AnnotatorLabels> annotators) {
  if (annotators.size() != kAnnotators) {
    throw ContractError("expected exactly 4 annotators, got " + std::to_string(annotators.size()));
  }
  std::vector<VoteSheet> sheets;
  for (const auto& [key, first] : annotators[0].labels) {
    VoteSheet s;
    s.set_id = key.set_id;
    s.frame_index = key.frame_index;
    bool complete = true;
    for (std::size_t a = 0; a < kAnnotators && complete; ++a) {
      auto it = annotators[a].labels.find(key);
      if (it == annotators[a].labels.end()) {
        complete = false;
      } else {
        s.votes[a] = {annotators[a].annotator, it->second};
      }
    }
    if (complete) sheets.push_back(std::move(s));
  }
  return sheets;
}

/// Runs the three resolution stages over complete sheets and fills in the
/// agreement report. Checker rows for frames settled at stage 1 are ignored
/// (the checker only ever sees unsettled frames).
inline AggregateResult resolve_dataset(std::vector<VoteSheet> sheets, const LabelMap& checker,
                                       const AggregateOptions& opts = {}) {
  AggregateResult out;
  std::size_t consumed = 0;
  for (auto& s : sheets) {
    s.checker_vote.reset();
    if (!stage_one(s)) {
      auto it = checker.find(s.key());
      if (it != checker.end()) {
        s.checker_vote = it->second;
        ++consumed;
      }
    }
    s = resolve_with_checker(std::move(s));
  }
  std::sort(sheets.begin(), sheets.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });

  std::vector<SetAgreement> per_set;
  for (std::size_t begin = 0; begin < sheets.size();) {
    std::size_t end = begin;
    while (end < sheets.size() && sheets[end].set_id == sheets[begin].set_id) ++end;
    SetAgreement sa;
    sa.set_id = sheets[begin].set_id;
    sa.frames = end - begin;
    std::vector<std::optional<AttentionLevel>> timeline;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& s = sheets[i];
      if (s.resolution == Resolution::MajorityOfFour) ++sa.settled_annotators;
      if (s.final_label) ++sa.settled_with_checker;
      timeline.push_back(s.final_label);
    }
    if (sa.settled_with_checker < sa.frames) {
      if (sa.settled_with_checker == 0) {
        throw ContractError("set " + sa.set_id + ": no frame settled by majority; median filter has no anchor");
      }
      const auto filled = median_filter_resolve(timeline, opts.median_window);
      for (std::size_t i = begin; i < end; ++i) {
        if (!sheets[i].final_label) {
          sheets[i].final_label = filled[i - begin];
          sheets[i].resolution = Resolution::MedianFilter;
        }
      }
    }
    per_set.push_back(sa);
    begin = end;
  }
  out.report = summarize(std::move(per_set));
  for (const auto& s : sheets) {
    ++out.report.class_counts[to_int(*s.final_label)];
    ++out.report.resolution_counts[static_cast<std::size_t>(*s.resolution)];
  }
  out.report.checker_rows_consumed = consumed;
  out.report.checker_rows_ignored = checker.size() - consumed;
  out.sheets = std::move(sheets);
  return out;
}

/// Full offline pipeline. All four annotator files must cover the same frames.
inline AggregateResult aggregate_dataset(std::span<const AnnotatorLabels> annotators, const LabelMap& checker,
                                         const AggregateOptions& opts = {}) {
  if (annotators.size() != kAnnotators) {
    throw ContractError("aggregate: expected exactly 4 annotator label files, got " +
                        std::to_string(annotators.size()));
  }
  std::map<FrameKey, std::size_t> coverage;
  for (const auto& a : annotators) {
    for (const auto& [k, v] : a.labels) ++coverage[k];
  }
  std::vector<std::string> missing;
  for (const auto& [k, n] : coverage) {
    if (n == kAnnotators) continue;
    for (const auto& a : annotators) {
      if (!a.labels.count(k)) missing.push_back(a.annotator + ":" + to_string(k));
    }
  }
  if (!missing.empty()) {
    std::string msg = "frame coverage mismatch; missing " + std::to_string(missing.size()) + " votes:";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ...";
    throw ContractError(msg);
  }
  return resolve_dataset(build_sheets(annotators), checker, opts);
}

inline void write_final_csv(std::ostream& os, std::span<const VoteSheet> sheets) {
  os << "set_id,frame_index,label,resolution\n";
  for (const auto& s : sheets) {
    if (!s.final_label || !s.resolution) {
      throw InvariantViolation("frame " + to_string(s.key()) + " left without a final label");
    }
    os << s.set_id << ',' << s.frame_index << ',' << to_int(*s.final_label) << ',' << name_of(*s.resolution)
       << '\n';
  }
}

}  // namespace attn::annotation
