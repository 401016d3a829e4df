#pragma once

// Small deterministic dense-network core: row-major tensors, dense layers
// with ReLU/identity, softmax cross-entropy, Adam, freezing, and a
// central-difference gradient checker.
//
// Kernels accumulate in a fixed order per output row, so a row's result never
// depends on which other rows share the batch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "attn/error.hpp"

namespace attn::nn {

class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Tensor2: " + std::to_string(data_.size()) + " values for " + std::to_string(rows_) +
                       "x" + std::to_string(cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Copies the listed rows, in order.
  Tensor2 gather_rows(std::span<const std::size_t> idx) const {
    Tensor2 out(idx.size(), cols_);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(idx[i] * cols_), cols_,
                  out.data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
    }
    return out;
  }

  friend bool operator==(const Tensor2&, const Tensor2&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Horizontal concatenation of tensors with equal row counts.
inline Tensor2 hconcat(std::span<const Tensor2> parts) {
  if (parts.empty()) return {};
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw ShapeError("hconcat: row counts differ");
    cols += p.cols();
  }
  Tensor2 out(parts[0].rows(), cols);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row(r).begin();
    for (const auto& p : parts) dst = std::copy(p.row(r).begin(), p.row(r).end(), dst);
  }
  return out;
}

enum class Activation { ReLU, Identity };

inline std::string_view name_of(Activation a) { return a == Activation::ReLU ? "relu" : "identity"; }

struct DenseLayer {
  Tensor2 weights;             // in x out
  std::vector<double> bias;    // out
  Activation activation = Activation::ReLU;
  bool frozen = false;
  Tensor2 grad_weights;
  std::vector<double> grad_bias;

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out, Activation act)
      : weights(in, out), bias(out, 0.0), activation(act), grad_weights(in, out), grad_bias(out, 0.0) {}

  std::size_t in_dim() const { return weights.rows(); }
  std::size_t out_dim() const { return weights.cols(); }
  std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

/// Glorot-uniform weights, zero biases.
inline void glorot_init(DenseLayer& layer, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(layer.in_dim() + layer.out_dim()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& w : layer.weights.values()) w = dist(rng);
  std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
}

struct ParamRef {
  std::span<double> value;
  std::span<double> grad;
  bool frozen = false;
};

class Network {
 public:
  Network() = default;

  /// in -> hidden... (ReLU) -> out (identity logits).
  static Network mlp(std::size_t in, std::span<const std::size_t> hidden, std::size_t out, std::uint64_t seed) {
    Network net;
    net.seed_ = seed;
    std::mt19937_64 rng(seed);
    std::size_t prev = in;
    for (std::size_t h : hidden) {
      net.layers_.emplace_back(prev, h, Activation::ReLU);
      glorot_init(net.layers_.back(), rng);
      prev = h;
    }
    net.layers_.emplace_back(prev, out, Activation::Identity);
    glorot_init(net.layers_.back(), rng);
    return net;
  }

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t s) { seed_ = s; }

  std::size_t in_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
  }

  void set_frozen(bool frozen) {
    for (auto& l : layers_) l.frozen = frozen;
  }

  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> p;
    for (auto& l : layers_) {
      p.push_back({l.weights.values(), l.grad_weights.values(), l.frozen});
      p.push_back({l.bias, l.grad_bias, l.frozen});
    }
    return p;
  }

  /// Flattened parameter values, layer by layer (weights then bias).
  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& l : layers_) {
      out.insert(out.end(), l.weights.values().begin(), l.weights.values().end());
      out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
  }

  void set_flat_parameters(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw ShapeError("set_flat_parameters: size mismatch");
    auto it = flat.begin();
    for (auto& l : layers_) {
      std::copy_n(it, l.weights.size(), l.weights.values().begin());
      it += static_cast<std::ptrdiff_t>(l.weights.size());
      std::copy_n(it, l.bias.size(), l.bias.begin());
      it += static_cast<std::ptrdiff_t>(l.bias.size());
    }
  }

 private:
  std::vector<DenseLayer> layers_;
  std::uint64_t seed_ = 0;
};

// ---------------------------------------------------------------------------
// Kernels

#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__)
#define ATTN_VECTOR_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define ATTN_VECTOR_CLONES
#endif

/// y += a * x. The AVX2 clone has no FMA, so both clones round identically.
ATTN_VECTOR_CLONES inline void axpy(double a, const double* __restrict x, double* __restrict y, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += a * x[j];
}

inline constexpr std::size_t kRowTile = 16;
inline constexpr std::size_t kGradBlock = 32;

/// out = x * W + b
inline Tensor2 affine(const Tensor2& x, const DenseLayer& layer) {
  const std::size_t in = layer.in_dim(), out_dim = layer.out_dim();
  Tensor2 out(x.rows(), out_dim);
  const double* w = layer.weights.values().data();
  // Rows are tiled so each weight row is reused while cached. Every output
  // still accumulates over k in order, so results do not depend on the batch.
  for (std::size_t i0 = 0; i0 < x.rows(); i0 += kRowTile) {
    const std::size_t i1 = std::min(x.rows(), i0 + kRowTile);
    for (std::size_t i = i0; i < i1; ++i) std::copy(layer.bias.begin(), layer.bias.end(), out.row(i).data());
    for (std::size_t k = 0; k < in; ++k) {
      const double* wk = w + k * out_dim;
      for (std::size_t i = i0; i < i1; ++i) {
        const double a = x(i, k);
        if (a == 0.0) continue;
        double* o = out.row(i).data();
        axpy(a, wk, o, out_dim);
      }
    }
  }
  return out;
}

struct ForwardCache {
  std::vector<Tensor2> inputs;   // input to each layer
  std::vector<Tensor2> outputs;  // post-activation output of each layer
};

/// Runs the network; fills `cache` when given. Last layer output = logits.
inline Tensor2 forward(const Network& net, const Tensor2& x, ForwardCache* cache = nullptr) {
  const auto& layers = net.layers();
  if (layers.empty()) throw ShapeError("forward: empty network");
  if (cache) {
    cache->inputs.clear();
    cache->outputs.clear();
  }
  Tensor2 h = x;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& layer = layers[li];
    if (h.cols() != layer.in_dim()) {
      throw ShapeError("forward: layer " + std::to_string(li) + " expects " + std::to_string(layer.in_dim()) +
                       " inputs, got " + std::to_string(h.cols()));
    }
    Tensor2 z = affine(h, layer);
    if (layer.activation == Activation::ReLU) {
      for (double& v : z.values()) v = v > 0.0 ? v : 0.0;
    }
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->outputs.push_back(z);
    }
    h = std::move(z);
  }
  return h;
}

/// Overwrites every layer's gradients from d(loss)/d(logits). Frozen layers
/// get zero parameter gradients but still pass gradient to their inputs.
/// Returns d(loss)/d(input) when `want_input_grad` is set.
inline Tensor2 backward(Network& net, const ForwardCache& cache, Tensor2 dout, bool want_input_grad = false) {
  auto& layers = net.layers();
  if (cache.inputs.size() != layers.size()) throw ShapeError("backward: cache does not match network");
  for (std::size_t li = layers.size(); li-- > 0;) {
    auto& layer = layers[li];
    const Tensor2& x = cache.inputs[li];
    const Tensor2& y = cache.outputs[li];
    const std::size_t in = layer.in_dim(), out_dim = layer.out_dim();
    if (layer.activation == Activation::ReLU) {
      auto dv = dout.values();
      auto yv = y.values();
      for (std::size_t i = 0; i < dv.size(); ++i) {
        if (!(yv[i] > 0.0)) dv[i] = 0.0;
      }
    }
    std::fill(layer.grad_weights.values().begin(), layer.grad_weights.values().end(), 0.0);
    std::fill(layer.grad_bias.begin(), layer.grad_bias.end(), 0.0);
    if (!layer.frozen) {
      double* gw = layer.grad_weights.values().data();
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* di = dout.row(i).data();
        for (std::size_t j = 0; j < out_dim; ++j) layer.grad_bias[j] += di[j];
      }
      // Blocked over k so a slab of gradients stays cached across rows; each
      // entry still sums over rows in order.
      for (std::size_t k0 = 0; k0 < in; k0 += kGradBlock) {
        const std::size_t k1 = std::min(in, k0 + kGradBlock);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const double* xi = x.row(i).data();
          const double* di = dout.row(i).data();
          for (std::size_t k = k0; k < k1; ++k) {
            const double a = xi[k];
            if (a == 0.0) continue;
            double* gk = gw + k * out_dim;
            axpy(a, di, gk, out_dim);
          }
        }
      }
    }
    if (li == 0 && !want_input_grad) return {};
    // dx = dout * W^T via a transposed copy so the inner loop is contiguous.
    Tensor2 wt(out_dim, in);
    for (std::size_t k = 0; k < in; ++k) {
      for (std::size_t j = 0; j < out_dim; ++j) wt(j, k) = layer.weights(k, j);
    }
    Tensor2 dx(x.rows(), in);
    for (std::size_t i0 = 0; i0 < x.rows(); i0 += kRowTile) {
      const std::size_t i1 = std::min(x.rows(), i0 + kRowTile);
      for (std::size_t j = 0; j < out_dim; ++j) {
        const double* wj = wt.row(j).data();
        for (std::size_t i = i0; i < i1; ++i) {
          const double g = dout(i, j);
          if (g == 0.0) continue;
          double* o = dx.row(i).data();
          axpy(g, wj, o, in);
        }
      }
    }
    dout = std::move(dx);
  }
  return dout;
}

/// Row-wise softmax with max subtraction.
inline Tensor2 softmax(const Tensor2& logits) {
  Tensor2 p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    auto o = p.row(i);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      o[j] = std::exp(z[j] - m);
      s += o[j];
    }
    for (double& v : o) v /= s;
  }
  return p;
}

namespace detail {

// log-sum-exp split as max + log1p(sum of the other exps); callers subtract
// from the max first so tiny losses do not round to exactly 0.
struct Lse {
  double max = 0.0;
  double tail = 0.0;
};

inline Lse log_sum_exp(std::span<const double> z) {
  const auto top = std::max_element(z.begin(), z.end());
  const double m = *top;
  double rest = 0.0;
  for (auto it = z.begin(); it != z.end(); ++it) {
    if (it != top) rest += std::exp(*it - m);
  }
  return {m, std::log1p(rest)};
}

}  // namespace detail

struct LossResult {
  double loss = 0.0;
  Tensor2 grad;  // d(mean loss)/d(logits)
};

/// Mean cross-entropy of softmax(logits) against integer targets.
inline LossResult softmax_cross_entropy(const Tensor2& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows()) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.rows()) + " rows");
  }
  if (!logits.all_finite()) throw Error("softmax_cross_entropy: non-finite logits");
  LossResult r;
  r.grad = Tensor2(logits.rows(), logits.cols());
  const double n = static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    const auto t = static_cast<std::size_t>(targets[i]);
    if (t >= z.size()) throw ShapeError("softmax_cross_entropy: target out of range");
    const auto l = detail::log_sum_exp(z);
    const double lse = l.max + l.tail;
    r.loss += (l.max - z[t]) + l.tail;
    auto g = r.grad.row(i);
    for (std::size_t j = 0; j < z.size(); ++j) {
      g[j] = (std::exp(z[j] - lse) - (j == t ? 1.0 : 0.0)) / n;
    }
  }
  r.loss /= n;
  return r;
}

/// One-hot variant; rows of `targets` must be probability vectors.
inline LossResult softmax_cross_entropy(const Tensor2& logits, const Tensor2& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw ShapeError("softmax_cross_entropy: target shape mismatch");
  }
  if (!logits.all_finite()) throw Error("softmax_cross_entropy: non-finite logits");
  LossResult r;
  r.grad = Tensor2(logits.rows(), logits.cols());
  const double n = static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    auto y = targets.row(i);
    const auto l = detail::log_sum_exp(z);
    const double lse = l.max + l.tail;
    double ysum = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      r.loss += y[j] * ((l.max - z[j]) + l.tail);
      ysum += y[j];
    }
    auto g = r.grad.row(i);
    for (std::size_t j = 0; j < z.size(); ++j) g[j] = (ysum * std::exp(z[j] - lse) - y[j]) / n;
  }
  r.loss /= n;
  return r;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return t_; }

  /// Bias-corrected update of every non-frozen parameter block. Moment
  /// buffers are allocated on first use and must keep their shapes.
  void step(std::span<const ParamRef> params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.size(), 0.0);
        v_.emplace_back(p.value.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ShapeError("Adam: parameter block count changed");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < params.size(); ++b) {
      const auto& p = params[b];
      if (p.value.size() != m_[b].size() || p.grad.size() != p.value.size()) {
        throw ShapeError("Adam: moment shape mismatch in block " + std::to_string(b));
      }
      if (p.frozen) continue;
      auto& m = m_[b];
      auto& v = v_[b];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p.value[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  }

  nlohmann::json to_json() const {
    return {{"step", t_},
            {"learning_rate", cfg_.learning_rate},
            {"beta1", cfg_.beta1},
            {"beta2", cfg_.beta2},
            {"epsilon", cfg_.epsilon},
            {"m", m_},
            {"v", v_}};
  }

  static Adam from_json(const nlohmann::json& j) {
    Adam a({j.at("learning_rate").get<double>(), j.at("beta1").get<double>(), j.at("beta2").get<double>(),
            j.at("epsilon").get<double>()});
    a.t_ = j.at("step").get<std::int64_t>();
    a.m_ = j.at("m").get<std::vector<std::vector<double>>>();
    a.v_ = j.at("v").get<std::vector<std::vector<double>>>();
    return a;
  }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

/// Compares the analytic gradients already stored in `params` against
/// central differences of `loss`. Frozen blocks are skipped.
inline GradCheckResult grad_check(std::span<const ParamRef> params, const std::function<double()>& loss,
                                  double eps = 1e-5) {
  GradCheckResult r;
  for (const auto& p : params) {
    if (p.frozen) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + eps;
      const double up = loss();
      p.value[i] = orig - eps;
      const double down = loss();
      p.value[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      r.max_relative_error = std::max(r.max_relative_error, std::abs(analytic - numeric) / denom);
      ++r.checked;
    }
  }
  return r;
}

/// Network + mean softmax cross-entropy convenience wrapper.
inline GradCheckResult grad_check(Network& net, const Tensor2& x, std::span<const int> targets,
                                  double eps = 1e-5) {
  ForwardCache cache;
  auto logits = forward(net, x, &cache);
  auto lr = softmax_cross_entropy(logits, targets);
  backward(net, cache, lr.grad);
  auto params = net.parameters();
  return grad_check(params, [&] { return softmax_cross_entropy(forward(net, x), targets).loss; }, eps);
}

// ---------------------------------------------------------------------------
// Checkpoint

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    layers.push_back({{"in", l.in_dim()},
                      {"out", l.out_dim()},
                      {"activation", std::string(name_of(l.activation))},
                      {"frozen", l.frozen}});
  }
  return {{"layout_version", kCheckpointVersion},
          {"seed", net.seed()},
          {"layers", layers},
          {"parameters", net.flat_parameters()}};
}

inline Network network_from_json(const nlohmann::json& j) {
  if (j.value("layout_version", -1) != kCheckpointVersion) {
    throw ParseError("network checkpoint: unsupported layout_version");
  }
  Network net;
  net.set_seed(j.value("seed", std::uint64_t{0}));
  for (const auto& lj : j.at("layers")) {
    const auto act = lj.at("activation").get<std::string>() == "relu" ? Activation::ReLU : Activation::Identity;
    DenseLayer l(lj.at("in").get<std::size_t>(), lj.at("out").get<std::size_t>(), act);
    l.frozen = lj.value("frozen", false);
    if (!net.layers().empty() && net.layers().back().out_dim() != l.in_dim()) {
      throw ParseError("network checkpoint: layer dimensions do not chain");
    }
    net.layers().push_back(std::move(l));
  }
  const auto flat = j.at("parameters").get<std::vector<double>>();
  if (flat.size() != net.parameter_count()) {
    throw ParseError("network checkpoint: expected " + std::to_string(net.parameter_count()) +
                     " parameters, found " + std::to_string(flat.size()));
  }
  net.set_flat_parameters(flat);
  return net;
}

}  // namespace attn::nn
