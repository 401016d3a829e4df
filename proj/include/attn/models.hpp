#pragma once

// Classifier zoo: linear SVM, multinomial logit, one-hidden-layer MLP, and
// the early / fully-connected / late fusion networks over modality streams.
//
// Conventions:
//   stream      = dense(256, ReLU) x 2 + 3-way softmax over one modality
//   FC fusion   = frozen streams, softmax detached, last 256-unit activations
//                 concatenated into dense(64, ReLU) + new softmax
//   late fusion = frozen streams, softmax kept; Average / Maximum combine the
//                 stream probabilities directly, Weighted learns one weight
//                 per (stream, class) plus a bias and applies a new softmax

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "attn/error.hpp"
#include "attn/feature_store.hpp"
#include "attn/labels.hpp"
#include "attn/nn.hpp"

namespace attn::models {

using features::FeatureRecord;
using features::Modality;
using nn::Tensor2;

enum class ModelKind { Majority, SVM, Logit, MLP, EarlyFusion, FCFusion, LateFusion, Hybrid };
enum class LateCombiner { Average, Maximum, Weighted };

inline std::string_view name_of(ModelKind k) {
  switch (k) {
    case ModelKind::Majority: return "majority";
    case ModelKind::SVM: return "svm";
    case ModelKind::Logit: return "logit";
    case ModelKind::MLP: return "mlp";
    case ModelKind::EarlyFusion: return "early";
    case ModelKind::FCFusion: return "fc";
    case ModelKind::LateFusion: return "late";
    case ModelKind::Hybrid: return "hybrid";
  }
  return "";
}

inline std::string_view name_of(LateCombiner c) {
  switch (c) {
    case LateCombiner::Average: return "average";
    case LateCombiner::Maximum: return "maximum";
    case LateCombiner::Weighted: return "weighted";
  }
  return "";
}

struct ModelSpec {
  std::string name;
  ModelKind kind = ModelKind::EarlyFusion;
  std::vector<Modality> modalities;  // canonical KP, GF, Depth order
  std::optional<LateCombiner> combiner;
  std::vector<std::size_t> stream_hidden = {256, 256};
  std::size_t head_hidden = 64;
  std::size_t mlp_hidden = 256;
  double svm_lambda = 1e-4;

  bool is_dnn() const {
    return kind == ModelKind::EarlyFusion || kind == ModelKind::FCFusion || kind == ModelKind::LateFusion ||
           kind == ModelKind::Hybrid;
  }

  void validate() const {
    if (modalities.empty()) throw ConfigError("model spec '" + name + "': no modalities");
    for (std::size_t i = 1; i < modalities.size(); ++i) {
      if (static_cast<int>(modalities[i - 1]) >= static_cast<int>(modalities[i])) {
        throw ConfigError("model spec '" + name + "': modalities must be distinct and in KP, GF, Depth order");
      }
    }
    if (combiner.has_value() != (kind == ModelKind::LateFusion)) {
      throw ConfigError("model spec '" + name + "': combiner is required for and only for late fusion");
    }
    if ((kind == ModelKind::FCFusion || kind == ModelKind::LateFusion) && modalities.size() < 2) {
      throw ConfigError("model spec '" + name + "': fusion needs at least two modalities");
    }
    if (kind == ModelKind::Hybrid && modalities.size() != 3) {
      throw ConfigError("model spec '" + name + "': hybrid fusion uses KP, GF and Depth");
    }
    if (is_dnn() && stream_hidden.empty()) throw ConfigError("model spec '" + name + "': empty stream");
  }
};

namespace detail {

inline std::string modality_suffix(std::span<const Modality> ms) {
  std::string s;
  for (auto m : ms) s += (s.empty() ? "" : "-") + std::string(features::name_of(m));
  return s;
}

inline std::vector<Modality> parse_modalities(std::string_view s, const std::string& full) {
  std::vector<Modality> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto pos = s.find('-', start);
    auto tok = s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    auto m = features::modality_from_name(tok);
    if (!m) throw ConfigError("unknown model '" + full + "': bad modality '" + std::string(tok) + "'");
    out.push_back(*m);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Resolves a model name: majority, svm, logit, mlp, stream-<m>,
/// early-<mods>, fc-<mods>, late-<average|maximum|weighted>-<mods>,
/// hybrid-fcgf-wdepth. <mods> is a dash-joined subset of kp, gf, depth.
inline ModelSpec spec_by_name(const std::string& name) {
  ModelSpec s;
  s.name = name;
  const std::vector<Modality> all(features::kAllModalities.begin(), features::kAllModalities.end());
  auto after = [&](std::string_view prefix) -> std::optional<std::string_view> {
    std::string_view n = name;
    if (n.substr(0, prefix.size()) == prefix) return n.substr(prefix.size());
    return std::nullopt;
  };
  if (name == "majority" || name == "svm" || name == "logit" || name == "mlp") {
    s.kind = name == "majority" ? ModelKind::Majority
             : name == "svm"    ? ModelKind::SVM
             : name == "logit"  ? ModelKind::Logit
                                : ModelKind::MLP;
    s.modalities = all;
  } else if (name == "hybrid-fcgf-wdepth") {
    s.kind = ModelKind::Hybrid;
    s.modalities = all;
  } else if (auto rest = after("stream-")) {
    s.kind = ModelKind::EarlyFusion;
    s.modalities = detail::parse_modalities(*rest, name);
    if (s.modalities.size() != 1) throw ConfigError("unknown model '" + name + "': a stream has one modality");
  } else if (auto rest = after("early-")) {
    s.kind = ModelKind::EarlyFusion;
    s.modalities = detail::parse_modalities(*rest, name);
  } else if (auto rest = after("fc-")) {
    s.kind = ModelKind::FCFusion;
    s.modalities = detail::parse_modalities(*rest, name);
  } else if (auto rest = after("late-")) {
    s.kind = ModelKind::LateFusion;
    const auto dash = rest->find('-');
    const auto comb = rest->substr(0, dash);
    if (comb == "average") s.combiner = LateCombiner::Average;
    else if (comb == "maximum") s.combiner = LateCombiner::Maximum;
    else if (comb == "weighted") s.combiner = LateCombiner::Weighted;
    else throw ConfigError("unknown model '" + name + "': combiner must be average, maximum or weighted");
    if (dash == std::string_view::npos) throw ConfigError("unknown model '" + name + "': missing modalities");
    s.modalities = detail::parse_modalities(rest->substr(dash + 1), name);
  } else {
    throw ConfigError("unknown model '" + name + "'");
  }
  s.validate();
  return s;
}

/// The evaluated configurations: three classic baselines, ten fusion networks
/// and the hybrid validation model.
inline std::vector<std::string> zoo_names() {
  std::vector<std::string> n = {"svm", "logit", "mlp"};
  for (const char* mods : {"kp-gf", "kp-gf-depth"}) n.push_back(std::string("early-") + mods);
  for (const char* mods : {"kp-gf", "kp-gf-depth"}) n.push_back(std::string("fc-") + mods);
  for (const char* comb : {"average", "maximum", "weighted"}) {
    for (const char* mods : {"kp-gf", "kp-gf-depth"}) n.push_back(std::string("late-") + comb + "-" + mods);
  }
  n.push_back("hybrid-fcgf-wdepth");
  return n;
}

inline std::vector<std::string> dnn_zoo_names() {
  auto all = zoo_names();
  std::vector<std::string> out;
  for (auto& n : all) {
    auto s = spec_by_name(n);
    if (s.is_dnn() && s.kind != ModelKind::Hybrid) out.push_back(n);
  }
  return out;
}

inline nlohmann::json to_json(const ModelSpec& s) {
  nlohmann::json mods = nlohmann::json::array();
  for (auto m : s.modalities) mods.push_back(std::string(features::name_of(m)));
  nlohmann::json j = {{"name", s.name},
                      {"kind", std::string(name_of(s.kind))},
                      {"modalities", mods},
                      {"stream_hidden", s.stream_hidden},
                      {"head_hidden", s.head_hidden},
                      {"mlp_hidden", s.mlp_hidden},
                      {"svm_lambda", s.svm_lambda}};
  if (s.combiner) j["combiner"] = std::string(name_of(*s.combiner));
  return j;
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s = spec_by_name(j.at("name").get<std::string>());
  s.stream_hidden = j.value("stream_hidden", s.stream_hidden);
  s.head_hidden = j.value("head_hidden", s.head_hidden);
  s.mlp_hidden = j.value("mlp_hidden", s.mlp_hidden);
  s.svm_lambda = j.value("svm_lambda", s.svm_lambda);
  s.validate();
  return s;
}

inline nlohmann::json zoo_manifest() {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& n : zoo_names()) j.push_back(to_json(spec_by_name(n)));
  return j;
}

// ---------------------------------------------------------------------------
// Training configuration and data

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;            // epochs without validation improvement
  double validation_fraction = 0.1;    // carved from the training rows
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0) || batch_size == 0 || max_epochs == 0 || patience == 0 ||
        validation_fraction < 0.0 || validation_fraction >= 1.0) {
      throw ConfigError("train config: values must be positive (validation_fraction in [0, 1))");
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},       {"patience", c.patience},
          {"validation_fraction", c.validation_fraction}, {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

/// Standardized modality matrices plus integer labels (-1 when unlabeled).
struct Dataset {
  std::array<Tensor2, 3> modality;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  const Tensor2& of(Modality m) const { return modality[static_cast<std::size_t>(m)]; }

  Tensor2 concat(std::span<const Modality> ms) const {
    std::vector<Tensor2> parts;
    for (auto m : ms) parts.push_back(of(m));
    return nn::hconcat(parts);
  }
};

inline Dataset make_dataset(std::span<const FeatureRecord> records) {
  Dataset ds;
  for (auto m : features::kAllModalities) {
    Tensor2 t(records.size(), features::dims_of(m));
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto src = records[i].modality(m);
      std::copy(src.begin(), src.end(), t.row(i).begin());
    }
    ds.modality[static_cast<std::size_t>(m)] = std::move(t);
  }
  ds.labels.reserve(records.size());
  for (const auto& r : records) ds.labels.push_back(r.label ? to_int(*r.label) : -1);
  return ds;
}

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline void require_trainable_labels(std::span<const int> labels) {
  std::array<std::size_t, kNumClasses> counts{};
  for (int l : labels) {
    if (l < 0 || l >= static_cast<int>(kNumClasses)) throw ContractError("training data contains unlabeled rows");
    ++counts[static_cast<std::size_t>(l)];
  }
  const auto present = std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; });
  if (present < 2) throw ContractError("degenerate training data: fewer than two classes present");
}

inline std::vector<int> gather(std::span<const int> v, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace detail

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
};

inline nlohmann::json to_json(const TrainHistory& h) {
  return {{"train_loss", h.train_loss}, {"val_loss", h.val_loss}, {"best_epoch", h.best_epoch}, {"steps", h.steps}};
}

inline TrainHistory history_from_json(const nlohmann::json& j) {
  TrainHistory h;
  h.train_loss = j.value("train_loss", std::vector<double>{});
  h.val_loss = j.value("val_loss", std::vector<double>{});
  h.best_epoch = j.value("best_epoch", std::size_t{0});
  h.steps = j.value("steps", std::size_t{0});
  return h;
}

// ---------------------------------------------------------------------------
// Objectives. Each exposes parameters(), loss(rows) and loss_and_grad(rows);
// loss_and_grad overwrites the gradient buffers behind parameters().

/// Softmax cross-entropy over a network applied to fixed inputs.
class SoftmaxObjective {
 public:
  SoftmaxObjective(nn::Network& net, const Tensor2& x, std::span<const int> y) : net_(net), x_(x), y_(y) {}

  std::vector<nn::ParamRef> parameters() { return net_.parameters(); }

  double loss(std::span<const std::size_t> rows) const {
    const auto xb = x_.gather_rows(rows);
    const auto yb = detail::gather(y_, rows);
    return nn::softmax_cross_entropy(nn::forward(net_, xb), yb).loss;
  }

  double loss_and_grad(std::span<const std::size_t> rows) {
    const auto xb = x_.gather_rows(rows);
    const auto yb = detail::gather(y_, rows);
    nn::ForwardCache cache;
    auto lr = nn::softmax_cross_entropy(nn::forward(net_, xb, &cache), yb);
    nn::backward(net_, cache, std::move(lr.grad));
    return lr.loss;
  }

 private:
  nn::Network& net_;
  const Tensor2& x_;
  std::span<const int> y_;
};

/// One-vs-rest hinge loss with L2 on the weights (not the bias).
class HingeObjective {
 public:
  HingeObjective(nn::Network& net, const Tensor2& x, std::span<const int> y, double lambda)
      : net_(net), x_(x), y_(y), lambda_(lambda) {
    if (net_.layers().size() != 1) throw ContractError("HingeObjective: expects a single linear layer");
  }

  std::vector<nn::ParamRef> parameters() { return net_.parameters(); }

  double loss(std::span<const std::size_t> rows) const { return evaluate(rows, nullptr); }

  double loss_and_grad(std::span<const std::size_t> rows) {
    Tensor2 dscores;
    const double l = evaluate(rows, &dscores);
    nn::ForwardCache cache;
    nn::forward(net_, x_.gather_rows(rows), &cache);
    nn::backward(net_, cache, std::move(dscores));
    auto& layer = net_.layers().front();
    auto w = layer.weights.values();
    auto gw = layer.grad_weights.values();
    for (std::size_t i = 0; i < w.size(); ++i) gw[i] += lambda_ * w[i];
    return l;
  }

 private:
  double evaluate(std::span<const std::size_t> rows, Tensor2* dscores) const {
    const auto scores = nn::forward(net_, x_.gather_rows(rows));
    const double n = static_cast<double>(rows.size());
    if (dscores) *dscores = Tensor2(scores.rows(), scores.cols());
    double loss = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t c = 0; c < scores.cols(); ++c) {
        const double yc = (y_[rows[i]] == static_cast<int>(c)) ? 1.0 : -1.0;
        const double margin = 1.0 - yc * scores(i, c);
        if (margin > 0.0) {
          loss += margin / n;
          if (dscores) (*dscores)(i, c) = -yc / n;
        }
      }
    }
    double reg = 0.0;
    for (double w : net_.layers().front().weights.values()) reg += w * w;
    return loss + 0.5 * lambda_ * reg;
  }

  nn::Network& net_;
  const Tensor2& x_;
  std::span<const int> y_;
  double lambda_;
};

/// Learnable per-(stream, class) weights over stream probabilities plus a
/// bias, followed by a softmax.
struct WeightedCombiner {
  Tensor2 weights;              // streams x classes
  std::vector<double> bias;     // classes
  Tensor2 grad_weights;
  std::vector<double> grad_bias;

  WeightedCombiner() = default;
  explicit WeightedCombiner(std::size_t streams)
      : weights(streams, kNumClasses, 1.0), bias(kNumClasses, 0.0), grad_weights(streams, kNumClasses),
        grad_bias(kNumClasses, 0.0) {}

  std::size_t streams() const { return weights.rows(); }

  std::vector<nn::ParamRef> parameters() {
    return {{weights.values(), grad_weights.values(), false}, {bias, grad_bias, false}};
  }

  /// probs[s] is (batch x classes) for stream s.
  Tensor2 logits(std::span<const Tensor2> probs) const {
    if (probs.size() != streams()) throw ShapeError("weighted combiner: stream count mismatch");
    const std::size_t n = probs.front().rows();
    Tensor2 z(n, kNumClasses);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        double v = bias[c];
        for (std::size_t s = 0; s < streams(); ++s) v += weights(s, c) * probs[s](i, c);
        z(i, c) = v;
      }
    }
    return z;
  }

  void backward(std::span<const Tensor2> probs, const Tensor2& dz) {
    std::fill(grad_weights.values().begin(), grad_weights.values().end(), 0.0);
    std::fill(grad_bias.begin(), grad_bias.end(), 0.0);
    for (std::size_t i = 0; i < dz.rows(); ++i) {
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        grad_bias[c] += dz(i, c);
        for (std::size_t s = 0; s < streams(); ++s) grad_weights(s, c) += dz(i, c) * probs[s](i, c);
      }
    }
  }
};

inline nlohmann::json to_json(const WeightedCombiner& c) {
  return {{"streams", c.streams()},
          {"weights", std::vector<double>(c.weights.values().begin(), c.weights.values().end())},
          {"bias", c.bias}};
}

inline WeightedCombiner combiner_from_json(const nlohmann::json& j) {
  WeightedCombiner c(j.at("streams").get<std::size_t>());
  const auto w = j.at("weights").get<std::vector<double>>();
  const auto b = j.at("bias").get<std::vector<double>>();
  if (w.size() != c.weights.size() || b.size() != kNumClasses) throw ParseError("weighted combiner: bad shape");
  std::copy(w.begin(), w.end(), c.weights.values().begin());
  c.bias = b;
  return c;
}

/// Trains the combiner on fixed (frozen-stream) probabilities. Frozen stream
/// networks may be attached so they appear, flagged frozen, in parameters().
class CombinerObjective {
 public:
  CombinerObjective(WeightedCombiner& comb, std::vector<Tensor2> probs, std::span<const int> y,
                    std::vector<nn::Network*> frozen_streams = {})
      : comb_(comb), probs_(std::move(probs)), y_(y), frozen_(std::move(frozen_streams)) {
    for (auto* s : frozen_) {
      for (const auto& l : s->layers()) {
        if (!l.frozen) throw InvariantViolation("combiner training requires frozen streams");
      }
    }
  }

  std::vector<nn::ParamRef> parameters() {
    std::vector<nn::ParamRef> p;
    for (auto* s : frozen_) {
      auto sp = s->parameters();
      p.insert(p.end(), sp.begin(), sp.end());
    }
    auto cp = comb_.parameters();
    p.insert(p.end(), cp.begin(), cp.end());
    return p;
  }

  double loss(std::span<const std::size_t> rows) const {
    const auto pb = batch(rows);
    return nn::softmax_cross_entropy(comb_.logits(pb), detail::gather(y_, rows)).loss;
  }

  double loss_and_grad(std::span<const std::size_t> rows) {
    const auto pb = batch(rows);
    auto lr = nn::softmax_cross_entropy(comb_.logits(pb), detail::gather(y_, rows));
    comb_.backward(pb, lr.grad);
    return lr.loss;
  }

 private:
  std::vector<Tensor2> batch(std::span<const std::size_t> rows) const {
    std::vector<Tensor2> out;
    for (const auto& p : probs_) out.push_back(p.gather_rows(rows));
    return out;
  }

  WeightedCombiner& comb_;
  std::vector<Tensor2> probs_;
  std::span<const int> y_;
  std::vector<nn::Network*> frozen_;
};

/// FC-fusion head trained on the frozen streams' detached top activations.
class FusionHeadObjective {
 public:
  FusionHeadObjective(nn::Network& head, Tensor2 stream_features, std::span<const int> y,
                      std::vector<nn::Network*> frozen_streams = {})
      : head_(head), features_(std::move(stream_features)), inner_(head, features_, y), frozen_(std::move(frozen_streams)) {
    for (auto* s : frozen_) {
      for (const auto& l : s->layers()) {
        if (!l.frozen) throw InvariantViolation("fusion head training requires frozen streams");
      }
    }
  }

  std::vector<nn::ParamRef> parameters() {
    std::vector<nn::ParamRef> p;
    for (auto* s : frozen_) {
      auto sp = s->parameters();
      p.insert(p.end(), sp.begin(), sp.end());
    }
    auto hp = head_.parameters();
    p.insert(p.end(), hp.begin(), hp.end());
    return p;
  }

  double loss(std::span<const std::size_t> rows) const { return inner_.loss(rows); }
  double loss_and_grad(std::span<const std::size_t> rows) { return inner_.loss_and_grad(rows); }

 private:
  nn::Network& head_;
  Tensor2 features_;
  SoftmaxObjective inner_;
  std::vector<nn::Network*> frozen_;
};

template <class Objective>
nn::GradCheckResult grad_check_objective(Objective& obj, std::span<const std::size_t> rows, double eps = 1e-5) {
  obj.loss_and_grad(rows);
  auto params = obj.parameters();
  return nn::grad_check(params, [&] { return obj.loss(rows); }, eps);
}

// ---------------------------------------------------------------------------
// Training loop

/// Minibatch Adam with a seeded hold-out split for early stopping. The best
/// validation-loss parameters are restored at the end.
template <class Objective>
TrainHistory fit(Objective& obj, std::size_t rows, const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(rows)));
  if (rows < 10) n_val = 0;
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (train.empty()) throw ContractError("fit: no training rows");

  nn::Adam adam({cfg.learning_rate});
  auto params = obj.parameters();
  auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    for (const auto& p : params) s.emplace_back(p.value.begin(), p.value.end());
    return s;
  };
  auto best = snapshot();
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  TrainHistory h;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double sum = 0.0;
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(train.size(), b + cfg.batch_size);
      std::span<const std::size_t> batch(train.data() + b, e - b);
      sum += obj.loss_and_grad(batch) * static_cast<double>(batch.size());
      adam.step(params);
      ++h.steps;
    }
    h.train_loss.push_back(sum / static_cast<double>(train.size()));
    const double monitored = val.empty() ? h.train_loss.back() : obj.loss(val);
    h.val_loss.push_back(monitored);
    if (monitored < best_loss) {
      best_loss = monitored;
      best = snapshot();
      h.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].frozen) std::copy(best[i].begin(), best[i].end(), params[i].value.begin());
  }
  return h;
}

// ---------------------------------------------------------------------------
// Trained model

struct TrainedStream {
  Modality modality = Modality::KP;
  nn::Network net;
  TrainHistory history;
};

struct TrainedModel {
  ModelSpec spec;
  features::Standardizer standardizer;  // unfitted when trained on pre-standardized data
  nn::Network network;                  // SVM / Logit / MLP / early fusion
  std::vector<TrainedStream> streams;   // fusion kinds
  nn::Network head;                     // FC fusion (hybrid: over KP+GF streams)
  std::optional<WeightedCombiner> combiner;
  int majority_class = 0;
  TrainHistory history;
};

/// Streams trained for one dataset, shared between fusion configurations.
/// Stream seeds depend only on (cfg.seed, modality), so cached and freshly
/// trained streams are identical.
struct StreamCache {
  const Dataset* dataset = nullptr;
  std::uint64_t seed = 0;
  std::map<Modality, TrainedStream> streams;
};

inline std::uint64_t stream_seed(const TrainConfig& cfg, Modality m) {
  return detail::mix_seed(cfg.seed, 100 + static_cast<std::uint64_t>(m));
}

/// Untrained per-modality streams: dense(hidden) x N + 3-way softmax.
inline std::vector<TrainedStream> build_streams(const ModelSpec& spec, const TrainConfig& cfg) {
  std::vector<TrainedStream> out;
  for (auto m : spec.modalities) {
    TrainedStream s;
    s.modality = m;
    s.net = nn::Network::mlp(features::dims_of(m), spec.stream_hidden, kNumClasses, stream_seed(cfg, m));
    out.push_back(std::move(s));
  }
  return out;
}

inline TrainedStream train_stream(Modality m, const std::vector<std::size_t>& hidden, const Dataset& ds,
                                  const TrainConfig& cfg, StreamCache* cache = nullptr) {
  if (cache) {
    if (cache->dataset != &ds || cache->seed != cfg.seed) {
      throw ContractError("stream cache bound to a different dataset or seed");
    }
    auto it = cache->streams.find(m);
    if (it != cache->streams.end() && it->second.net.layers().size() == hidden.size() + 1 &&
        it->second.net.layers().front().out_dim() == hidden.front()) {
      return it->second;
    }
  }
  detail::require_trainable_labels(ds.labels);
  TrainedStream s;
  s.modality = m;
  s.net = nn::Network::mlp(features::dims_of(m), hidden, kNumClasses, stream_seed(cfg, m));
  SoftmaxObjective obj(s.net, ds.of(m), ds.labels);
  s.history = fit(obj, ds.size(), cfg, detail::mix_seed(stream_seed(cfg, m), 1));
  if (cache) cache->streams[m] = s;
  return s;
}

/// Activations of the last hidden layer (softmax detached).
inline Tensor2 stream_top(const nn::Network& net, const Tensor2& x) {
  nn::Network trunk = net;
  trunk.layers().pop_back();
  return nn::forward(trunk, x);
}

inline Tensor2 stream_probs(const nn::Network& net, const Tensor2& x) { return nn::softmax(nn::forward(net, x)); }

namespace detail {

inline std::vector<double> concat_params(const std::vector<TrainedStream>& streams) {
  std::vector<double> out;
  for (const auto& s : streams) {
    auto p = s.net.flat_parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline void verify_unchanged(const std::vector<TrainedStream>& streams, const std::vector<double>& before) {
  if (concat_params(streams) != before) {
    throw InvariantViolation("frozen stream parameters changed during fusion training");
  }
}

inline Tensor2 fc_features(const std::vector<TrainedStream>& streams, const Dataset& ds) {
  std::vector<Tensor2> parts;
  for (const auto& s : streams) parts.push_back(stream_top(s.net, ds.of(s.modality)));
  return nn::hconcat(parts);
}

inline std::vector<Tensor2> late_probs(const std::vector<TrainedStream>& streams, const Dataset& ds) {
  std::vector<Tensor2> out;
  for (const auto& s : streams) out.push_back(stream_probs(s.net, ds.of(s.modality)));
  return out;
}

inline std::vector<TrainedStream> trained_streams(const ModelSpec& spec, std::span<const Modality> ms,
                                                  const Dataset& ds, const TrainConfig& cfg, StreamCache* cache) {
  std::vector<TrainedStream> out;
  for (auto m : ms) {
    out.push_back(train_stream(m, spec.stream_hidden, ds, cfg, cache));
    out.back().net.set_frozen(true);
  }
  return out;
}

inline nn::Network train_fc_head(const ModelSpec& spec, std::vector<TrainedStream>& streams, const Dataset& ds,
                                 const TrainConfig& cfg, TrainHistory& history) {
  const auto before = concat_params(streams);
  const std::size_t width = spec.stream_hidden.back() * streams.size();
  const std::array<std::size_t, 1> hidden = {spec.head_hidden};
  nn::Network head = nn::Network::mlp(width, hidden, kNumClasses, mix_seed(cfg.seed, 200));
  std::vector<nn::Network*> frozen;
  for (auto& s : streams) frozen.push_back(&s.net);
  FusionHeadObjective obj(head, fc_features(streams, ds), ds.labels, frozen);
  history = fit(obj, ds.size(), cfg, mix_seed(cfg.seed, 201));
  verify_unchanged(streams, before);
  return head;
}

}  // namespace detail

inline TrainedModel train_classic(ModelKind kind, const Dataset& ds, const TrainConfig& cfg,
                                  const ModelSpec* spec_override = nullptr) {
  detail::require_trainable_labels(ds.labels);
  TrainedModel m;
  if (spec_override) {
    m.spec = *spec_override;
  } else {
    m.spec = spec_by_name(kind == ModelKind::SVM ? "svm" : kind == ModelKind::Logit ? "logit" : "mlp");
  }
  const Tensor2 x = ds.concat(m.spec.modalities);
  const std::uint64_t seed = detail::mix_seed(cfg.seed, 300 + static_cast<std::uint64_t>(kind));
  switch (kind) {
    case ModelKind::SVM: {
      m.network = nn::Network::mlp(x.cols(), {}, kNumClasses, seed);
      HingeObjective obj(m.network, x, ds.labels, m.spec.svm_lambda);
      m.history = fit(obj, ds.size(), cfg, detail::mix_seed(seed, 1));
      break;
    }
    case ModelKind::Logit: {
      m.network = nn::Network::mlp(x.cols(), {}, kNumClasses, seed);
      SoftmaxObjective obj(m.network, x, ds.labels);
      m.history = fit(obj, ds.size(), cfg, detail::mix_seed(seed, 1));
      break;
    }
    case ModelKind::MLP: {
      const std::array<std::size_t, 1> hidden = {m.spec.mlp_hidden};
      m.network = nn::Network::mlp(x.cols(), hidden, kNumClasses, seed);
      SoftmaxObjective obj(m.network, x, ds.labels);
      m.history = fit(obj, ds.size(), cfg, detail::mix_seed(seed, 1));
      break;
    }
    default:
      throw ContractError("train_classic: kind must be svm, logit or mlp");
  }
  return m;
}

inline TrainedModel train_early_fusion(const ModelSpec& spec, const Dataset& ds, const TrainConfig& cfg,
                                       StreamCache* cache = nullptr) {
  if (spec.kind != ModelKind::EarlyFusion) throw ContractError("train_early_fusion: wrong spec kind");
  detail::require_trainable_labels(ds.labels);
  TrainedModel m;
  m.spec = spec;
  if (spec.modalities.size() == 1) {
    // A single-modality early network is exactly that modality's stream.
    auto s = train_stream(spec.modalities.front(), spec.stream_hidden, ds, cfg, cache);
    m.network = s.net;
    m.history = s.history;
    return m;
  }
  const Tensor2 x = ds.concat(spec.modalities);
  const std::uint64_t seed = detail::mix_seed(cfg.seed, 400 + spec.modalities.size());
  m.network = nn::Network::mlp(x.cols(), spec.stream_hidden, kNumClasses, seed);
  SoftmaxObjective obj(m.network, x, ds.labels);
  m.history = fit(obj, ds.size(), cfg, detail::mix_seed(seed, 1));
  return m;
}

/// Phase 1 trains each stream with its own softmax; phase 2 freezes them and
/// trains only the new FC head.
inline TrainedModel train_fc_fusion(const ModelSpec& spec, const Dataset& ds, const TrainConfig& cfg,
                                    StreamCache* cache = nullptr) {
  if (spec.kind != ModelKind::FCFusion) throw ContractError("train_fc_fusion: wrong spec kind");
  detail::require_trainable_labels(ds.labels);
  TrainedModel m;
  m.spec = spec;
  m.streams = detail::trained_streams(spec, spec.modalities, ds, cfg, cache);
  m.head = detail::train_fc_head(spec, m.streams, ds, cfg, m.history);
  return m;
}

inline TrainedModel train_late_fusion(const ModelSpec& spec, const Dataset& ds, const TrainConfig& cfg,
                                      StreamCache* cache = nullptr) {
  if (spec.kind != ModelKind::LateFusion) throw ContractError("train_late_fusion: wrong spec kind");
  detail::require_trainable_labels(ds.labels);
  TrainedModel m;
  m.spec = spec;
  m.streams = detail::trained_streams(spec, spec.modalities, ds, cfg, cache);
  if (spec.combiner == LateCombiner::Weighted) {
    const auto before = detail::concat_params(m.streams);
    m.combiner = WeightedCombiner(m.streams.size());
    std::vector<nn::Network*> frozen;
    for (auto& s : m.streams) frozen.push_back(&s.net);
    CombinerObjective obj(*m.combiner, detail::late_probs(m.streams, ds), ds.labels, frozen);
    m.history = fit(obj, ds.size(), cfg, detail::mix_seed(cfg.seed, 500));
    detail::verify_unchanged(m.streams, before);
  }
  return m;
}

/// KP and GF fused by an FC head, then combined with the depth stream by a
/// weighted late combiner.
inline TrainedModel train_hybrid(const ModelSpec& spec, const Dataset& ds, const TrainConfig& cfg,
                                 StreamCache* cache = nullptr) {
  if (spec.kind != ModelKind::Hybrid) throw ContractError("train_hybrid: wrong spec kind");
  detail::require_trainable_labels(ds.labels);
  TrainedModel m;
  m.spec = spec;
  const std::array<Modality, 2> fc_mods = {Modality::KP, Modality::GF};
  std::vector<TrainedStream> fc_streams = detail::trained_streams(spec, fc_mods, ds, cfg, cache);
  TrainHistory head_history;
  m.head = detail::train_fc_head(spec, fc_streams, ds, cfg, head_history);
  m.head.set_frozen(true);
  std::array<Modality, 1> depth_mod = {Modality::Depth};
  auto depth = detail::trained_streams(spec, depth_mod, ds, cfg, cache);
  m.streams = std::move(fc_streams);
  m.streams.push_back(std::move(depth.front()));
  const auto before = detail::concat_params(m.streams);
  std::vector<Tensor2> probs;
  probs.push_back(nn::softmax(nn::forward(m.head, detail::fc_features({m.streams[0], m.streams[1]}, ds))));
  probs.push_back(stream_probs(m.streams[2].net, ds.of(Modality::Depth)));
  m.combiner = WeightedCombiner(2);
  std::vector<nn::Network*> frozen;
  for (auto& s : m.streams) frozen.push_back(&s.net);
  frozen.push_back(&m.head);
  CombinerObjective obj(*m.combiner, std::move(probs), ds.labels, frozen);
  m.history = fit(obj, ds.size(), cfg, detail::mix_seed(cfg.seed, 600));
  detail::verify_unchanged(m.streams, before);
  return m;
}

/// Trains on pre-standardized data.
inline TrainedModel train_on_dataset(const ModelSpec& spec, const Dataset& ds, const TrainConfig& cfg,
                                     StreamCache* cache = nullptr) {
  spec.validate();
  switch (spec.kind) {
    case ModelKind::Majority: {
      detail::require_trainable_labels(ds.labels);
      TrainedModel m;
      m.spec = spec;
      std::array<std::size_t, kNumClasses> counts{};
      for (int l : ds.labels) ++counts[static_cast<std::size_t>(l)];
      m.majority_class = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      return m;
    }
    case ModelKind::SVM:
    case ModelKind::Logit:
    case ModelKind::MLP:
      return train_classic(spec.kind, ds, cfg, &spec);
    case ModelKind::EarlyFusion: return train_early_fusion(spec, ds, cfg, cache);
    case ModelKind::FCFusion: return train_fc_fusion(spec, ds, cfg, cache);
    case ModelKind::LateFusion: return train_late_fusion(spec, ds, cfg, cache);
    case ModelKind::Hybrid: return train_hybrid(spec, ds, cfg, cache);
  }
  throw ContractError("unknown model kind");
}

// ---------------------------------------------------------------------------
// Inference

/// Class probabilities for a standardized dataset (rows sum to 1).
inline Tensor2 predict_proba(const TrainedModel& m, const Dataset& ds) {
  const std::size_t n = ds.size();
  switch (m.spec.kind) {
    case ModelKind::Majority: {
      Tensor2 p(n, kNumClasses);
      for (std::size_t i = 0; i < n; ++i) p(i, static_cast<std::size_t>(m.majority_class)) = 1.0;
      return p;
    }
    case ModelKind::SVM:
    case ModelKind::Logit:
    case ModelKind::MLP:
    case ModelKind::EarlyFusion:
      return nn::softmax(nn::forward(m.network, ds.concat(m.spec.modalities)));
    case ModelKind::FCFusion:
      return nn::softmax(nn::forward(m.head, detail::fc_features(m.streams, ds)));
    case ModelKind::LateFusion: {
      const auto probs = detail::late_probs(m.streams, ds);
      if (m.spec.combiner == LateCombiner::Weighted) {
        if (!m.combiner) throw InvariantViolation("weighted late fusion without a combiner");
        return nn::softmax(m.combiner->logits(probs));
      }
      Tensor2 out(n, kNumClasses);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < kNumClasses; ++c) {
          double v = m.spec.combiner == LateCombiner::Average ? 0.0 : probs[0](i, c);
          for (const auto& p : probs) {
            v = m.spec.combiner == LateCombiner::Average ? v + p(i, c) : std::max(v, p(i, c));
          }
          out(i, c) = m.spec.combiner == LateCombiner::Average ? v / static_cast<double>(probs.size()) : v;
        }
        if (m.spec.combiner == LateCombiner::Maximum) {
          double s = 0.0;
          for (double v : out.row(i)) s += v;
          for (double& v : out.row(i)) v /= s;
        }
      }
      return out;
    }
    case ModelKind::Hybrid: {
      if (!m.combiner || m.streams.size() != 3) throw InvariantViolation("hybrid model incomplete");
      std::vector<Tensor2> probs;
      probs.push_back(nn::softmax(nn::forward(m.head, detail::fc_features({m.streams[0], m.streams[1]}, ds))));
      probs.push_back(stream_probs(m.streams[2].net, ds.of(Modality::Depth)));
      return nn::softmax(m.combiner->logits(probs));
    }
  }
  throw ContractError("unknown model kind");
}

/// Lowest index wins ties.
inline int argmax(std::span<const double> p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

struct Prediction {
  std::array<double, kNumClasses> probabilities{};
  AttentionLevel label = AttentionLevel::Low;
};

/// Applies the model's own standardizer (when fitted) to raw records.
inline std::vector<Prediction> predict(const TrainedModel& m, std::span<const FeatureRecord> records) {
  std::vector<FeatureRecord> z;
  if (m.standardizer.fitted()) {
    z = m.standardizer.apply(records);
  } else {
    z.assign(records.begin(), records.end());
  }
  const auto p = predict_proba(m, make_dataset(z));
  std::vector<Prediction> out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::copy(p.row(i).begin(), p.row(i).end(), out[i].probabilities.begin());
    out[i].label = static_cast<AttentionLevel>(argmax(p.row(i)));
  }
  return out;
}

inline Prediction predict(const TrainedModel& m, const FeatureRecord& record) {
  return predict(m, std::span<const FeatureRecord>(&record, 1)).front();
}

/// Fits a standardizer on the raw training records, then trains.
inline TrainedModel train(const ModelSpec& spec, std::span<const FeatureRecord> raw_train, const TrainConfig& cfg,
                          std::string provenance = {}) {
  auto standardizer = features::Standardizer::fit(raw_train, std::move(provenance));
  const auto z = standardizer.apply(raw_train);
  auto model = train_on_dataset(spec, make_dataset(z), cfg);
  model.standardizer = std::move(standardizer);
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kModelCheckpointVersion = 1;

inline nlohmann::json to_json(const TrainedModel& m) {
  nlohmann::json j;
  j["layout_version"] = kModelCheckpointVersion;
  j["spec"] = to_json(m.spec);
  if (m.standardizer.fitted()) j["standardizer"] = m.standardizer.to_json();
  if (!m.network.layers().empty()) j["network"] = nn::to_json(m.network);
  j["streams"] = nlohmann::json::array();
  for (const auto& s : m.streams) {
    j["streams"].push_back(
        {{"modality", std::string(features::name_of(s.modality))}, {"network", nn::to_json(s.net)}, {"history", to_json(s.history)}});
  }
  if (!m.head.layers().empty()) j["head"] = nn::to_json(m.head);
  if (m.combiner) j["combiner"] = to_json(*m.combiner);
  j["majority_class"] = m.majority_class;
  j["history"] = to_json(m.history);
  return j;
}

inline TrainedModel model_from_json(const nlohmann::json& j) {
  if (j.value("layout_version", -1) != kModelCheckpointVersion) {
    throw ParseError("model checkpoint: unsupported layout_version");
  }
  TrainedModel m;
  m.spec = spec_from_json(j.at("spec"));
  if (j.contains("standardizer")) m.standardizer = features::Standardizer::from_json(j["standardizer"]);
  if (j.contains("network")) m.network = nn::network_from_json(j["network"]);
  for (const auto& sj : j.at("streams")) {
    TrainedStream s;
    auto mod = features::modality_from_name(sj.at("modality").get<std::string>());
    if (!mod) throw ParseError("model checkpoint: bad stream modality");
    s.modality = *mod;
    s.net = nn::network_from_json(sj.at("network"));
    if (sj.contains("history")) s.history = history_from_json(sj["history"]);
    m.streams.push_back(std::move(s));
  }
  if (j.contains("head")) m.head = nn::network_from_json(j["head"]);
  if (j.contains("combiner")) m.combiner = combiner_from_json(j["combiner"]);
  m.majority_class = j.value("majority_class", 0);
  if (j.contains("history")) m.history = history_from_json(j["history"]);
  return m;
}

}  // namespace attn::models
