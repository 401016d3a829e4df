#pragma once

// k-fold cross-validation, confusion matrices and per-class accuracy tables.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "attn/annotation.hpp"
#include "attn/error.hpp"
#include "attn/feature_store.hpp"
#include "attn/labels.hpp"
#include "attn/models.hpp"
#include "attn/png_io.hpp"

namespace attn::eval {

using features::FeatureRecord;

enum class FoldStrategy { StratifiedFrame, BySubject };

inline std::string_view name_of(FoldStrategy s) {
  return s == FoldStrategy::StratifiedFrame ? "stratified" : "subject";
}

inline FoldStrategy strategy_from_name(std::string_view s) {
  if (s == "stratified") return FoldStrategy::StratifiedFrame;
  if (s == "subject") return FoldStrategy::BySubject;
  throw ConfigError("unknown fold strategy '" + std::string(s) + "' (expected stratified or subject)");
}

struct FoldPlan {
  FoldStrategy strategy = FoldStrategy::StratifiedFrame;
  std::size_t k = 4;
  std::uint64_t seed = 0;
  std::vector<int> fold_of;  // per record

  std::vector<std::size_t> test_indices(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      if (fold_of[i] == static_cast<int>(f)) out.push_back(i);
    }
    return out;
  }

  std::vector<std::size_t> train_indices(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      if (fold_of[i] != static_cast<int>(f)) out.push_back(i);
    }
    return out;
  }

  std::vector<std::size_t> fold_sizes() const {
    std::vector<std::size_t> s(k, 0);
    for (int f : fold_of) ++s[static_cast<std::size_t>(f)];
    return s;
  }
};

/// Subject of a record: the set id (one recording session per subject).
inline const std::string& subject_of(const FeatureRecord& r) { return r.set_id; }

/// StratifiedFrame: each class is shuffled and dealt round-robin, the dealer
/// position carrying over between classes, so per-class fold counts differ by
/// at most one. BySubject: subjects sorted by size (descending) go greedily to
/// the currently smallest fold.
inline FoldPlan make_folds(std::span<const FeatureRecord> records, FoldStrategy strategy = FoldStrategy::StratifiedFrame,
                           std::uint64_t seed = 0, std::size_t k = 4) {
  if (k < 2) throw ConfigError("make_folds: need at least 2 folds");
  if (records.size() < k) throw ContractError("make_folds: fewer records than folds");
  for (const auto& r : records) {
    if (!r.label) throw ContractError("make_folds: unlabeled record " + to_string(r.key()));
  }
  FoldPlan plan;
  plan.strategy = strategy;
  plan.k = k;
  plan.seed = seed;
  plan.fold_of.assign(records.size(), -1);
  std::mt19937_64 rng(seed);
  if (strategy == FoldStrategy::StratifiedFrame) {
    std::size_t dealer = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (to_int(*records[i].label) == static_cast<int>(c)) idx.push_back(i);
      }
      std::shuffle(idx.begin(), idx.end(), rng);
      for (auto i : idx) {
        plan.fold_of[i] = static_cast<int>(dealer % k);
        ++dealer;
      }
    }
  } else {
    std::map<std::string, std::vector<std::size_t>> by_subject;
    for (std::size_t i = 0; i < records.size(); ++i) by_subject[subject_of(records[i])].push_back(i);
    if (by_subject.size() < k) {
      throw ConfigError("make_folds: subject strategy needs at least " + std::to_string(k) + " subjects, got " +
                        std::to_string(by_subject.size()));
    }
    std::vector<std::string> subjects;
    for (const auto& [s, _] : by_subject) subjects.push_back(s);
    // Seeded shuffle first so equal-size subjects land differently per seed.
    std::shuffle(subjects.begin(), subjects.end(), rng);
    std::stable_sort(subjects.begin(), subjects.end(), [&](const auto& a, const auto& b) {
      return by_subject[a].size() > by_subject[b].size();
    });
    std::vector<std::size_t> load(k, 0);
    for (const auto& s : subjects) {
      const auto f = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
      for (auto i : by_subject[s]) plan.fold_of[i] = static_cast<int>(f);
      load[f] += by_subject[s].size();
    }
  }
  return plan;
}

inline nlohmann::json to_json(const FoldPlan& p) {
  return {{"strategy", std::string(name_of(p.strategy))}, {"k", p.k}, {"seed", p.seed}, {"fold_sizes", p.fold_sizes()}};
}

// ---------------------------------------------------------------------------
// Confusion matrix

struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> counts{};  // [truth][prediction]

  void add(AttentionLevel truth, AttentionLevel pred) { ++counts[to_int(truth)][to_int(pred)]; }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (std::size_t t = 0; t < kNumClasses; ++t) {
      for (std::size_t p = 0; p < kNumClasses; ++p) counts[t][p] += o.counts[t][p];
    }
    return *this;
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : counts) n += std::accumulate(row.begin(), row.end(), std::size_t{0});
    return n;
  }

  std::size_t correct() const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) n += counts[c][c];
    return n;
  }

  std::size_t row_total(std::size_t t) const {
    return std::accumulate(counts[t].begin(), counts[t].end(), std::size_t{0});
  }

  double accuracy() const {
    const auto n = total();
    return n == 0 ? 0.0 : static_cast<double>(correct()) / static_cast<double>(n);
  }

  /// Per-class recall; nullopt when the class never occurs as truth.
  std::optional<double> class_accuracy(std::size_t c) const {
    const auto n = row_total(c);
    if (n == 0) return std::nullopt;
    return static_cast<double>(counts[c][c]) / static_cast<double>(n);
  }

  /// Share of misclassifications whose truth or prediction is Mid.
  std::optional<double> mid_error_share() const {
    const std::size_t mid = to_int(AttentionLevel::Mid);
    std::size_t errors = 0, involving = 0;
    for (std::size_t t = 0; t < kNumClasses; ++t) {
      for (std::size_t p = 0; p < kNumClasses; ++p) {
        if (t == p) continue;
        errors += counts[t][p];
        if (t == mid || p == mid) involving += counts[t][p];
      }
    }
    if (errors == 0) return std::nullopt;
    return static_cast<double>(involving) / static_cast<double>(errors);
  }
};

inline ConfusionMatrix confusion_matrix(std::span<const AttentionLevel> truths, std::span<const AttentionLevel> preds) {
  if (truths.size() != preds.size()) {
    throw ContractError("confusion_matrix: " + std::to_string(truths.size()) + " truths vs " +
                        std::to_string(preds.size()) + " predictions");
  }
  ConfusionMatrix m;
  for (std::size_t i = 0; i < truths.size(); ++i) m.add(truths[i], preds[i]);
  return m;
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const ConfusionMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : m.counts) rows.push_back(r);
  return rows;
}

inline ConfusionMatrix confusion_from_json(const nlohmann::json& j) {
  ConfusionMatrix m;
  if (!j.is_array() || j.size() != kNumClasses) throw ParseError("confusion matrix: expected 3 rows");
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    if (!j[t].is_array() || j[t].size() != kNumClasses) throw ParseError("confusion matrix: expected 3 columns");
    for (std::size_t p = 0; p < kNumClasses; ++p) m.counts[t][p] = j[t][p].get<std::size_t>();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldResult {
  std::size_t fold = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::string standardizer_provenance;
};

struct EvalReport {
  std::string spec;
  FoldPlan plan;
  models::TrainConfig config;
  std::vector<FoldResult> folds;

  std::vector<double> fold_accuracies() const {
    std::vector<double> a;
    for (const auto& f : folds) a.push_back(f.accuracy);
    return a;
  }

  /// Mean of the per-fold accuracies and their sample std.
  annotation::MeanStd accuracy() const { return annotation::mean_std(fold_accuracies()); }

  ConfusionMatrix confusion() const {
    ConfusionMatrix m;
    for (const auto& f : folds) m += f.confusion;
    return m;
  }
};

inline nlohmann::json to_json(const EvalReport& r) {
  const auto cm = r.confusion();
  const auto acc = r.accuracy();
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) per_class[std::string(kLevelNames[c])] = optional_json(cm.class_accuracy(c));
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"fold", f.fold},
                     {"train_size", f.train_size},
                     {"test_size", f.test_size},
                     {"accuracy", f.accuracy},
                     {"confusion", to_json(f.confusion)},
                     {"standardizer_provenance", f.standardizer_provenance}});
  }
  // Sizes come from the folds so a report read back from JSON (which has no
  // per-record assignment) serializes identically.
  auto plan = to_json(r.plan);
  std::vector<std::size_t> sizes;
  for (const auto& f : r.folds) sizes.push_back(f.test_size);
  plan["fold_sizes"] = sizes;
  return {{"spec", r.spec},
          {"plan", plan},
          {"train_config", models::to_json(r.config)},
          {"fold_accuracies", r.fold_accuracies()},
          {"mean_accuracy", acc.mean},
          {"std_accuracy", acc.std},
          {"confusion", to_json(cm)},
          {"per_class_accuracy", per_class},
          {"mid_error_share", optional_json(cm.mid_error_share())},
          {"folds", folds}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.spec = j.at("spec").get<std::string>();
  const auto& p = j.at("plan");
  r.plan.strategy = strategy_from_name(p.at("strategy").get<std::string>());
  r.plan.k = p.at("k").get<std::size_t>();
  r.plan.seed = p.at("seed").get<std::uint64_t>();
  if (j.contains("train_config")) r.config = models::train_config_from_json(j["train_config"]);
  for (const auto& fj : j.at("folds")) {
    FoldResult f;
    f.fold = fj.at("fold").get<std::size_t>();
    f.train_size = fj.at("train_size").get<std::size_t>();
    f.test_size = fj.at("test_size").get<std::size_t>();
    f.accuracy = fj.at("accuracy").get<double>();
    f.confusion = confusion_from_json(fj.at("confusion"));
    f.standardizer_provenance = fj.value("standardizer_provenance", "");
    r.folds.push_back(std::move(f));
  }
  return r;
}

namespace detail {

inline std::vector<FeatureRecord> pick(std::span<const FeatureRecord> rs, std::span<const std::size_t> idx) {
  std::vector<FeatureRecord> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(rs[i]);
  return out;
}

inline std::string provenance_tag(const FoldPlan& plan, std::size_t f) {
  return "fold " + std::to_string(f) + "/" + std::to_string(plan.k) + " train split (" +
         std::string(name_of(plan.strategy)) + ", seed " + std::to_string(plan.seed) + ")";
}

}  // namespace detail

/// One fold's standardized data, with the standardizer proven leak-free.
struct FoldData {
  features::Standardizer standardizer;
  std::vector<FeatureRecord> train;  // standardized
  std::vector<FeatureRecord> test;   // standardized with the train statistics
  models::Dataset train_set;
  models::Dataset test_set;
};

inline FoldData prepare_fold(std::span<const FeatureRecord> records, const FoldPlan& plan, std::size_t f) {
  if (plan.fold_of.size() != records.size()) throw ContractError("fold plan does not cover the dataset");
  const auto tr = plan.train_indices(f);
  const auto te = plan.test_indices(f);
  const auto raw_train = detail::pick(records, tr);
  const auto raw_test = detail::pick(records, te);
  FoldData d;
  d.standardizer = features::Standardizer::fit(raw_train, detail::provenance_tag(plan, f));
  for (const auto& r : raw_test) {
    if (d.standardizer.was_fitted_on(r.key())) {
      throw InvariantViolation("leakage: test record " + to_string(r.key()) + " entered standardizer fitting for " +
                               d.standardizer.provenance());
    }
  }
  d.train = d.standardizer.apply(raw_train);
  d.test = d.standardizer.apply(raw_test);
  d.train_set = models::make_dataset(d.train);
  d.test_set = models::make_dataset(d.test);
  return d;
}

/// Per-fold training seed; shared by every configuration in the fold so the
/// stream cache yields exactly what a fresh run would.
inline models::TrainConfig fold_config(const models::TrainConfig& cfg, std::size_t f) {
  auto c = cfg;
  c.seed = models::detail::mix_seed(cfg.seed, 1000 + f);
  return c;
}

inline FoldResult evaluate_fold(const models::ModelSpec& spec, const FoldData& d, std::size_t f,
                                const models::TrainConfig& cfg, models::StreamCache* cache = nullptr) {
  const auto model = models::train_on_dataset(spec, d.train_set, cfg, cache);
  const auto proba = models::predict_proba(model, d.test_set);
  FoldResult r;
  r.fold = f;
  r.train_size = d.train.size();
  r.test_size = d.test.size();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    const auto pred = static_cast<AttentionLevel>(models::argmax(proba.row(i)));
    r.confusion.add(*d.test[i].label, pred);
    hits += pred == *d.test[i].label;
  }
  r.accuracy = d.test.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(d.test.size());
  r.standardizer_provenance = d.standardizer.provenance();
  return r;
}

struct EvalOptions {
  bool parallel = false;  // one thread per fold
};

/// Evaluates several configurations over one plan. Folds are the outer loop
/// so per-modality streams are trained once per fold and shared.
inline std::vector<EvalReport> cross_validate_many(std::span<const models::ModelSpec> specs,
                                                   std::span<const FeatureRecord> records, const FoldPlan& plan,
                                                   const models::TrainConfig& cfg, EvalOptions opts = {}) {
  cfg.validate();
  std::vector<std::vector<FoldResult>> per_fold(plan.k);
  auto run = [&](std::size_t f) {
    const auto d = prepare_fold(records, plan, f);
    const auto fcfg = fold_config(cfg, f);
    models::StreamCache cache{&d.train_set, fcfg.seed, {}};
    for (const auto& spec : specs) per_fold[f].push_back(evaluate_fold(spec, d, f, fcfg, &cache));
  };
  if (opts.parallel && plan.k > 1) {
    std::vector<std::exception_ptr> errors(plan.k);
    std::vector<std::thread> pool;
    for (std::size_t f = 0; f < plan.k; ++f) {
      pool.emplace_back([&, f] {
        try {
          run(f);
        } catch (...) {
          errors[f] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    for (std::size_t f = 0; f < plan.k; ++f) run(f);
  }
  std::vector<EvalReport> out;
  for (std::size_t s = 0; s < specs.size(); ++s) {
    EvalReport r;
    r.spec = specs[s].name;
    r.plan = plan;
    r.config = cfg;
    for (std::size_t f = 0; f < plan.k; ++f) r.folds.push_back(per_fold[f][s]);
    out.push_back(std::move(r));
  }
  return out;
}

inline EvalReport cross_validate(const models::ModelSpec& spec, std::span<const FeatureRecord> records,
                                 const models::TrainConfig& cfg, const FoldPlan& plan, EvalOptions opts = {}) {
  return cross_validate_many(std::span<const models::ModelSpec>(&spec, 1), records, plan, cfg, opts).front();
}

// ---------------------------------------------------------------------------
// Per-stream per-class table

struct StreamClassRow {
  features::Modality modality = features::Modality::KP;
  std::array<std::optional<double>, kNumClasses> class_accuracy{};
  double overall = 0.0;
};

/// Standalone single-modality streams, pooled over all folds.
inline std::vector<StreamClassRow> per_stream_class_accuracy(std::span<const FeatureRecord> records,
                                                             const FoldPlan& plan, const models::TrainConfig& cfg,
                                                             EvalOptions opts = {}) {
  std::vector<models::ModelSpec> specs;
  for (auto m : features::kAllModalities) specs.push_back(models::spec_by_name("stream-" + std::string(features::name_of(m))));
  const auto reports = cross_validate_many(specs, records, plan, cfg, opts);
  std::vector<StreamClassRow> rows;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    StreamClassRow row;
    row.modality = features::kAllModalities[i];
    const auto cm = reports[i].confusion();
    for (std::size_t c = 0; c < kNumClasses; ++c) row.class_accuracy[c] = cm.class_accuracy(c);
    row.overall = cm.accuracy();
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json to_json(const std::vector<StreamClassRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json pc = nlohmann::json::object();
    for (std::size_t c = 0; c < kNumClasses; ++c) pc[std::string(kLevelNames[c])] = optional_json(r.class_accuracy[c]);
    j.push_back({{"stream", std::string(features::name_of(r.modality))}, {"per_class", pc}, {"overall", r.overall}});
  }
  return j;
}

// ---------------------------------------------------------------------------
// Rendering

inline std::string render_accuracy_table(std::span<const EvalReport> reports) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-24s %9s %8s  %s\n", "Model", "Accuracy", "Std", "Folds");
  os << buf;
  for (const auto& r : reports) {
    const auto a = r.accuracy();
    std::snprintf(buf, sizeof buf, "%-24s %9.4f %8.4f ", r.spec.c_str(), a.mean, a.std);
    os << buf;
    for (double f : r.fold_accuracies()) {
      std::snprintf(buf, sizeof buf, " %.4f", f);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

inline std::string render_confusion(const ConfusionMatrix& m) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s %8s %8s %8s\n", "truth\\pred", "low", "mid", "high");
  os << buf;
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    std::snprintf(buf, sizeof buf, "%-12s %8zu %8zu %8zu\n", std::string(kLevelNames[t]).c_str(), m.counts[t][0],
                  m.counts[t][1], m.counts[t][2]);
    os << buf;
  }
  if (auto s = m.mid_error_share()) {
    std::snprintf(buf, sizeof buf, "errors involving mid: %.1f%%\n", 100.0 * *s);
    os << buf;
  }
  return os.str();
}

inline std::string render_stream_table(std::span<const StreamClassRow> rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-8s %8s %8s %8s %8s\n", "Stream", "Low", "Mid", "High", "Overall");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-8s", std::string(features::name_of(r.modality)).c_str());
    os << buf;
    for (const auto& v : r.class_accuracy) {
      if (v) std::snprintf(buf, sizeof buf, " %8.4f", *v);
      else std::snprintf(buf, sizeof buf, " %8s", "n/a");
      os << buf;
    }
    std::snprintf(buf, sizeof buf, " %8.4f\n", r.overall);
    os << buf;
  }
  return os.str();
}

namespace detail {

// 3x5 digit glyphs, one row per 3-bit mask.
inline constexpr std::array<std::array<unsigned char, 5>, 11> kGlyphs = {{
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1}, {7, 4, 7, 1, 7},
    {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7}, {0, 0, 0, 0, 2},  // '.'
}};

inline void draw_text(png::Rgb8& img, int x0, int y0, const std::string& s, int scale, unsigned char v) {
  int x = x0;
  for (char ch : s) {
    const int g = ch == '.' ? 10 : (ch >= '0' && ch <= '9') ? ch - '0' : -1;
    if (g >= 0) {
      for (int r = 0; r < 5; ++r) {
        for (int c = 0; c < 3; ++c) {
          if (!(kGlyphs[static_cast<std::size_t>(g)][static_cast<std::size_t>(r)] & (4 >> c))) continue;
          for (int dy = 0; dy < scale; ++dy) {
            for (int dx = 0; dx < scale; ++dx) img.set(x + c * scale + dx, y0 + r * scale + dy, v, v, v);
          }
        }
      }
    }
    x += 4 * scale;
  }
}

}  // namespace detail

/// Row-normalized heatmap (rows = truth) with each cell's count drawn in.
inline void render_confusion_png(const ConfusionMatrix& m, const std::string& path, int cell = 120) {
  const int n = static_cast<int>(kNumClasses);
  png::Rgb8 img(n * cell, n * cell);
  for (int t = 0; t < n; ++t) {
    const auto rt = m.row_total(static_cast<std::size_t>(t));
    for (int p = 0; p < n; ++p) {
      const auto count = m.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
      const double share = rt == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(rt);
      const auto shade = static_cast<unsigned char>(std::lround(255.0 * (1.0 - share)));
      for (int y = 0; y < cell; ++y) {
        for (int x = 0; x < cell; ++x) {
          const bool border = x == 0 || y == 0 || x == cell - 1 || y == cell - 1;
          img.set(p * cell + x, t * cell + y, border ? 0 : shade, border ? 0 : shade, border ? 0 : 255);
        }
      }
      const std::string label = std::to_string(count);
      const int scale = 3;
      const int w = static_cast<int>(label.size()) * 4 * scale;
      detail::draw_text(img, p * cell + std::max(2, (cell - w) / 2), t * cell + (cell - 5 * scale) / 2, label, scale,
                        share > 0.5 ? 255 : 0);
    }
  }
  png::write_rgb8(path, img);
}

}  // namespace attn::eval
