#pragma once

// Labeling backend: an append-only JSONL event log, per-annotator undo,
// CSV compaction, and the HTTP handlers the annotation UI talks to.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "attn/annotation.hpp"
#include "attn/error.hpp"
#include "attn/labels.hpp"

namespace attn::service {

namespace fs = std::filesystem;

enum class Role { Labeler, Checker };
enum class Action { Set, Undo };

struct LabelEvent {
  std::string timestamp;
  std::string annotator;
  Role role = Role::Labeler;
  std::string set_id;
  std::int64_t frame_index = 0;
  AttentionLevel label = AttentionLevel::Low;  // Undo: the label being reverted
  Action action = Action::Set;

  FrameKey key() const { return {set_id, frame_index}; }
};

inline nlohmann::json to_json(const LabelEvent& e) {
  return {{"ts", e.timestamp},
          {"annotator", e.annotator},
          {"role", e.role == Role::Labeler ? "labeler" : "checker"},
          {"set_id", e.set_id},
          {"frame_index", e.frame_index},
          {"label", to_int(e.label)},
          {"action", e.action == Action::Set ? "set" : "undo"}};
}

inline LabelEvent event_from_json(const nlohmann::json& j) {
  LabelEvent e;
  e.timestamp = j.at("ts").get<std::string>();
  e.annotator = j.at("annotator").get<std::string>();
  const auto role = j.at("role").get<std::string>();
  if (role != "labeler" && role != "checker") throw ParseError("label event: bad role '" + role + "'");
  e.role = role == "labeler" ? Role::Labeler : Role::Checker;
  e.set_id = j.at("set_id").get<std::string>();
  e.frame_index = j.at("frame_index").get<std::int64_t>();
  auto l = level_from_int(j.at("label").get<long>());
  if (!l) throw ParseError("label event: label outside {0,1,2}");
  e.label = *l;
  const auto action = j.at("action").get<std::string>();
  if (action != "set" && action != "undo") throw ParseError("label event: bad action '" + action + "'");
  e.action = action == "set" ? Action::Set : Action::Undo;
  return e;
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

/// Replayed state. Each annotator keeps a stack of live Set events; the
/// current label of a frame is the newest live Set for it.
class LabelState {
 public:
  void apply(const LabelEvent& e) {
    auto& st = stacks_[e.annotator];
    if (e.action == Action::Set) {
      st.push_back(e);
      per_frame_[e.annotator][e.key()].push_back(e.label);
      return;
    }
    if (st.empty()) {
      throw InvariantViolation("undo by '" + e.annotator + "' with no prior set");
    }
    const auto& top = st.back();
    if (top.key() != e.key() || top.label != e.label) {
      throw InvariantViolation("undo by '" + e.annotator + "' for " + to_string(e.key()) +
                               " does not match their latest set " + to_string(top.key()));
    }
    auto& frames = per_frame_[e.annotator];
    auto it = frames.find(e.key());
    it->second.pop_back();
    if (it->second.empty()) frames.erase(it);
    st.pop_back();
  }

  std::optional<LabelEvent> last_set(const std::string& annotator) const {
    auto it = stacks_.find(annotator);
    if (it == stacks_.end() || it->second.empty()) return std::nullopt;
    return it->second.back();
  }

  annotation::LabelMap labels(const std::string& annotator) const {
    annotation::LabelMap out;
    auto it = per_frame_.find(annotator);
    if (it == per_frame_.end()) return out;
    for (const auto& [k, v] : it->second) out[k] = v.back();
    return out;
  }

  std::optional<AttentionLevel> label(const std::string& annotator, const FrameKey& k) const {
    auto it = per_frame_.find(annotator);
    if (it == per_frame_.end()) return std::nullopt;
    auto jt = it->second.find(k);
    if (jt == it->second.end()) return std::nullopt;
    return jt->second.back();
  }

 private:
  std::map<std::string, std::vector<LabelEvent>> stacks_;
  std::map<std::string, std::map<FrameKey, std::vector<AttentionLevel>>> per_frame_;
};

/// Append-only JSONL log. Every append is a single O_APPEND write of one
/// complete line, so concurrent writers never interleave inside a record.
class LabelLog {
 public:
  explicit LabelLog(fs::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw ConfigError("cannot open label store " + path_.string());
  }
  ~LabelLog() {
    if (fd_ >= 0) ::close(fd_);
  }
  LabelLog(const LabelLog&) = delete;
  LabelLog& operator=(const LabelLog&) = delete;

  const fs::path& path() const { return path_; }

  void append(const LabelEvent& e) {
    const std::string line = to_json(e).dump() + "\n";
    const auto n = ::write(fd_, line.data(), line.size());
    if (n != static_cast<ssize_t>(line.size())) throw Error("label store: short write to " + path_.string());
  }

  static std::vector<LabelEvent> read(const fs::path& path) {
    std::vector<LabelEvent> out;
    std::ifstream is(path);
    if (!is) return out;
    std::string line;
    std::size_t no = 0;
    while (std::getline(is, line)) {
      ++no;
      if (line.empty()) continue;
      try {
        out.push_back(event_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& ex) {
        throw ParseError(path.string() + ":" + std::to_string(no) + ": " + ex.what());
      } catch (const ParseError& ex) {
        throw ParseError(path.string() + ":" + std::to_string(no) + ": " + ex.what());
      }
    }
    return out;
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

inline LabelState replay(std::span<const LabelEvent> events) {
  LabelState s;
  for (const auto& e : events) s.apply(e);
  return s;
}

namespace detail {

inline void write_atomically(const fs::path& path, const annotation::LabelMap& labels) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    annotation::write_label_csv(os, labels);
  }
  fs::rename(tmp, path);
}

}  // namespace detail

/// Writes `<labels_dir>/<id>.csv` per labeler and the checker's file, in the
/// aggregate input schema. Whole files are rewritten, so repeating it is a
/// no-op.
inline void compact_state(const LabelState& state, std::span<const std::string> annotators, const std::string& checker,
                          const fs::path& labels_dir, const std::optional<fs::path>& checker_file) {
  fs::create_directories(labels_dir);
  for (const auto& a : annotators) detail::write_atomically(labels_dir / (a + ".csv"), state.labels(a));
  if (checker_file) detail::write_atomically(*checker_file, state.labels(checker));
}

struct FrameRef {
  FrameKey key;
  fs::path file;
};

/// Frames are `<set_id>_<frame_index>.(png|jpg|jpeg)`; set ids may contain
/// underscores (the last one separates the index).
inline std::vector<FrameRef> scan_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("frames directory not found: " + dir.string());
  static const std::regex pattern(R"(^(.+)_(\d+)\.(png|jpg|jpeg)$)", std::regex::icase);
  std::vector<FrameRef> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename().string();
    std::smatch m;
    if (!std::regex_match(name, m, pattern)) continue;
    out.push_back({{m[1].str(), std::stoll(m[2].str())}, entry.path()});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.key < b.key; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].key == out[i - 1].key) throw ConfigError("duplicate frame " + to_string(out[i].key));
  }
  if (out.empty()) throw ConfigError("no frames matching <set>_<index>.png|jpg in " + dir.string());
  return out;
}

struct ServiceConfig {
  fs::path frames_dir;
  fs::path store;
  std::vector<std::string> annotators;  // exactly four labelers
  std::string checker = "checker";
  bool checker_mode = false;
  std::function<std::string()> clock = utc_now;
};

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

class LabelService {
 public:
  explicit LabelService(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.annotators.size() != annotation::kAnnotators) {
      throw ConfigError("service: exactly 4 labeler ids required, got " + std::to_string(cfg_.annotators.size()));
    }
    std::set<std::string> ids(cfg_.annotators.begin(), cfg_.annotators.end());
    if (ids.size() != cfg_.annotators.size() || ids.count(cfg_.checker)) {
      throw ConfigError("service: annotator and checker ids must be distinct");
    }
    frames_ = scan_frames(cfg_.frames_dir);
    for (std::size_t i = 0; i < frames_.size(); ++i) frame_index_[frames_[i].key] = i;
    const auto events = LabelLog::read(cfg_.store);
    state_ = replay(events);
    log_ = std::make_unique<LabelLog>(cfg_.store);
  }

  const ServiceConfig& config() const { return cfg_; }
  std::size_t frame_count() const { return frames_.size(); }

  Response get_task(const std::string& annotator) {
    std::lock_guard lock(mu_);
    auto role = role_of(annotator);
    if (!role) return error(404, "unknown annotator '" + annotator + "'");
    for (const auto& f : frames_) {
      if (state_.label(annotator, f.key)) continue;
      if (*role == Role::Checker && !checker_eligible(f.key)) continue;
      return ok({{"done", false}, {"task", task_json(f.key)}});
    }
    return ok({{"done", true}, {"task", nullptr}});
  }

  Response get_frame(const std::string& set_id, std::int64_t idx) const {
    auto it = frame_index_.find({set_id, idx});
    if (it == frame_index_.end()) return error(404, "unknown frame " + to_string(FrameKey{set_id, idx}));
    const auto& path = frames_[it->second].file;
    std::ifstream is(path, std::ios::binary);
    if (!is) return error(500, "cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return {200, ss.str(), ext == ".png" ? "image/png" : "image/jpeg"};
  }

  Response post_label(const std::string& body) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return error(400, "body is not valid JSON");
    }
    if (!j.is_object() || !j.contains("annotator") || !j["annotator"].is_string() || !j.contains("set_id") ||
        !j["set_id"].is_string() || !j.contains("frame_index") || !j["frame_index"].is_number_integer() ||
        !j.contains("label")) {
      return error(400, "expected {annotator, set_id, frame_index, label}");
    }
    if (!j["label"].is_number_integer()) return error(400, "label must be 0, 1 or 2");
    const auto level = level_from_int(j["label"].get<long>());
    if (!level) return error(400, "label must be 0, 1 or 2");
    const auto annotator = j["annotator"].get<std::string>();
    const FrameKey key{j["set_id"].get<std::string>(), j["frame_index"].get<std::int64_t>()};

    std::lock_guard lock(mu_);
    auto role = role_of(annotator);
    if (!role) return error(404, "unknown annotator '" + annotator + "'");
    if (!frame_index_.count(key)) return error(404, "unknown frame " + to_string(key));
    if (*role == Role::Checker && !checker_eligible(key)) {
      return error(409, "frame " + to_string(key) + " is not awaiting the checker");
    }
    LabelEvent e{cfg_.clock(), annotator, *role, key.set_id, key.frame_index, *level, Action::Set};
    log_->append(e);
    state_.apply(e);
    return ok({{"ok", true}});
  }

  Response post_undo(const std::string& body) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return error(400, "body is not valid JSON");
    }
    if (!j.is_object() || !j.contains("annotator") || !j["annotator"].is_string()) {
      return error(400, "expected {annotator}");
    }
    const auto annotator = j["annotator"].get<std::string>();
    std::lock_guard lock(mu_);
    auto role = role_of(annotator);
    if (!role) return error(404, "unknown annotator '" + annotator + "'");
    auto last = state_.last_set(annotator);
    if (!last) return error(409, "nothing to undo");
    LabelEvent e = *last;
    e.timestamp = cfg_.clock();
    e.action = Action::Undo;
    log_->append(e);
    state_.apply(e);
    return ok({{"ok", true}, {"task", task_json(e.key())}});
  }

  Response get_progress(const std::string& annotator) {
    std::lock_guard lock(mu_);
    auto role = role_of(annotator);
    if (!role) return error(404, "unknown annotator '" + annotator + "'");
    std::size_t done = 0, total = 0;
    for (const auto& f : frames_) {
      const bool labeled = state_.label(annotator, f.key).has_value();
      if (*role == Role::Checker && !checker_eligible(f.key)) continue;
      ++total;
      done += labeled;
    }
    return ok({{"done", done}, {"total", total}});
  }

  /// Stage-1 and checker agreement over frames all four labelers have voted.
  /// The median-filter stage is left to the offline aggregate.
  Response get_agreement() {
    std::lock_guard lock(mu_);
    return ok(annotation::to_json(agreement_locked()));
  }

  annotation::AgreementReport agreement() {
    std::lock_guard lock(mu_);
    return agreement_locked();
  }

  /// Stage-1-unresolved frames (complete four-way votes, no strict majority).
  std::vector<FrameKey> checker_queue() {
    std::lock_guard lock(mu_);
    std::vector<FrameKey> out;
    for (const auto& f : frames_) {
      if (checker_eligible(f.key)) out.push_back(f.key);
    }
    return out;
  }

  /// See compact_state.
  void compact(const fs::path& labels_dir, const std::optional<fs::path>& checker_file = std::nullopt) {
    std::lock_guard lock(mu_);
    compact_state(state_, cfg_.annotators, cfg_.checker, labels_dir, checker_file);
  }

 private:
  std::optional<Role> role_of(const std::string& annotator) const {
    if (std::find(cfg_.annotators.begin(), cfg_.annotators.end(), annotator) != cfg_.annotators.end()) {
      return Role::Labeler;
    }
    if (cfg_.checker_mode && annotator == cfg_.checker) return Role::Checker;
    return std::nullopt;
  }

  std::optional<annotation::VoteSheet> sheet(const FrameKey& k) const {
    annotation::VoteSheet s;
    s.set_id = k.set_id;
    s.frame_index = k.frame_index;
    for (std::size_t a = 0; a < annotation::kAnnotators; ++a) {
      auto l = state_.label(cfg_.annotators[a], k);
      if (!l) return std::nullopt;
      s.votes[a] = {cfg_.annotators[a], *l};
    }
    return s;
  }

  bool checker_eligible(const FrameKey& k) const {
    auto s = sheet(k);
    return s && !annotation::stage_one(*s);
  }

  annotation::AgreementReport agreement_locked() const {
    std::map<std::string, annotation::SetAgreement> per_set;
    std::array<std::size_t, kNumClasses> classes{};
    std::array<std::size_t, 3> resolutions{};
    std::size_t consumed = 0;
    for (const auto& f : frames_) {
      auto s = sheet(f.key);
      if (!s) continue;
      if (!annotation::stage_one(*s)) {
        if (auto c = state_.label(cfg_.checker, f.key)) {
          s->checker_vote = *c;
          ++consumed;
        }
      }
      const auto resolved = annotation::resolve_with_checker(*s);
      auto& sa = per_set[f.key.set_id];
      sa.set_id = f.key.set_id;
      ++sa.frames;
      if (resolved.resolution == annotation::Resolution::MajorityOfFour) ++sa.settled_annotators;
      if (resolved.final_label) {
        ++sa.settled_with_checker;
        ++classes[to_int(*resolved.final_label)];
        ++resolutions[static_cast<std::size_t>(*resolved.resolution)];
      }
    }
    std::vector<annotation::SetAgreement> sets;
    for (auto& [_, sa] : per_set) sets.push_back(sa);
    auto report = annotation::summarize(std::move(sets));
    report.class_counts = classes;
    report.resolution_counts = resolutions;
    report.checker_rows_consumed = consumed;
    report.checker_rows_ignored = state_.labels(cfg_.checker).size() - consumed;
    return report;
  }

  static nlohmann::json task_json(const FrameKey& k) {
    return {{"set_id", k.set_id},
            {"frame_index", k.frame_index},
            {"image_url", "/api/frame/" + k.set_id + "/" + std::to_string(k.frame_index)}};
  }

  static Response ok(const nlohmann::json& j) { return {200, j.dump(), "application/json"}; }
  static Response error(int status, const std::string& msg) {
    return {status, nlohmann::json{{"error", msg}}.dump(), "application/json"};
  }

  ServiceConfig cfg_;
  std::vector<FrameRef> frames_;
  std::map<FrameKey, std::size_t> frame_index_;
  LabelState state_;
  std::unique_ptr<LabelLog> log_;
  mutable std::mutex mu_;
};

/// Registers the HTTP routes on `server`.
inline void mount(httplib::Server& server, LabelService& svc) {
  auto send = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get("/api/task", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.get_task(req.get_param_value("annotator")));
  });
  server.Get(R"(/api/frame/([^/]+)/(\d+))", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.get_frame(req.matches[1].str(), std::stoll(req.matches[2].str())));
  });
  server.Post("/api/label", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.post_label(req.body));
  });
  server.Post("/api/undo", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.post_undo(req.body));
  });
  server.Get("/api/progress", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.get_progress(req.get_param_value("annotator")));
  });
  server.Get("/api/agreement", [&svc, send](const httplib::Request&, httplib::Response& res) {
    send(res, svc.get_agreement());
  });
}

}  // namespace attn::service
