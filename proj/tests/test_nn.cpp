#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "attn/nn.hpp"

using namespace attn;
using namespace attn::nn;

namespace {

Tensor2 random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  Tensor2 t(r, c);
  for (double& v : t.values()) v = g(rng);
  return t;
}

std::vector<int> random_targets(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> t(n);
  for (auto& v : t) v = static_cast<int>(rng() % 3);
  return t;
}

}  // namespace

TEST(Forward, IdentityLayerPassesInputThrough) {
  Network net;
  net.layers().emplace_back(3, 3, Activation::Identity);
  for (std::size_t i = 0; i < 3; ++i) net.layers()[0].weights(i, i) = 1.0;
  const auto x = random_tensor(4, 3, 1);
  EXPECT_EQ(forward(net, x), x);
}

TEST(Forward, ReluZeroesNegativePreActivations) {
  Network net;
  net.layers().emplace_back(2, 3, Activation::ReLU);
  for (double& w : net.layers()[0].weights.values()) w = 1.0;
  std::fill(net.layers()[0].bias.begin(), net.layers()[0].bias.end(), -10.0);
  const auto y = forward(net, Tensor2(5, 2, 1.0));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, ShapeMismatchNamesLayer) {
  const std::vector<std::size_t> hidden{4};
  const auto net = Network::mlp(5, hidden, 3, 1);
  try {
    forward(net, Tensor2(2, 6));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

TEST(Network, MlpParameterCountAndGlorotRange) {
  const std::vector<std::size_t> hidden{256, 256};
  const auto net = Network::mlp(36, hidden, 3, 7);
  EXPECT_EQ(net.parameter_count(), (36u * 256 + 256) + (256u * 256 + 256) + (256u * 3 + 3));
  for (const auto& l : net.layers()) {
    const double limit = std::sqrt(6.0 / static_cast<double>(l.in_dim() + l.out_dim()));
    for (double w : l.weights.values()) EXPECT_LE(std::abs(w), limit);
    for (double b : l.bias) EXPECT_EQ(b, 0.0);
  }
  EXPECT_EQ(net.layers().back().activation, Activation::Identity);
}

TEST(Network, SameSeedSameInit) {
  const std::vector<std::size_t> hidden{8};
  EXPECT_EQ(Network::mlp(5, hidden, 3, 9).flat_parameters(), Network::mlp(5, hidden, 3, 9).flat_parameters());
  EXPECT_NE(Network::mlp(5, hidden, 3, 9).flat_parameters(), Network::mlp(5, hidden, 3, 10).flat_parameters());
}

TEST(Softmax, RowsSumToOneAndLieInUnitInterval) {
  const auto p = softmax(random_tensor(200, 3, 2, 30.0));
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0.0;
    for (double v : p.row(i)) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLnThree) {
  const std::vector<int> t{0, 1, 2, 1};
  EXPECT_NEAR(softmax_cross_entropy(Tensor2(4, 3, 0.7), t).loss, std::log(3.0), 1e-15);
}

TEST(CrossEntropy, DecreasesMonotonicallyWithMargin) {
  const std::vector<int> t{1};
  double prev = std::numeric_limits<double>::infinity();
  for (double margin = 0.0; margin <= 40.0; margin += 0.5) {
    Tensor2 z(1, 3, 0.0);
    z(0, 1) = margin;
    const double loss = softmax_cross_entropy(z, t).loss;
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-15);
}

TEST(CrossEntropy, NonFiniteLogitsFail) {
  Tensor2 z(1, 3, 0.0);
  z(0, 2) = std::numeric_limits<double>::quiet_NaN();
  const std::vector<int> t{0};
  EXPECT_THROW(softmax_cross_entropy(z, t), Error);
  const std::vector<int> two{0, 1};
  EXPECT_THROW(softmax_cross_entropy(Tensor2(1, 3), two), ShapeError);
}

TEST(CrossEntropy, OneHotVariantMatchesIntegerVariant) {
  const auto z = random_tensor(10, 3, 3);
  const auto t = random_targets(10, 4);
  Tensor2 y(10, 3);
  for (std::size_t i = 0; i < 10; ++i) y(i, static_cast<std::size_t>(t[i])) = 1.0;
  const auto a = softmax_cross_entropy(z, t);
  const auto b = softmax_cross_entropy(z, y);
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  for (std::size_t i = 0; i < a.grad.size(); ++i) EXPECT_NEAR(a.grad.values()[i], b.grad.values()[i], 1e-15);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<double> w{1.0, -2.0, 3.0}, g{0.0, 0.0, 0.0};
  const auto before = w;
  Adam opt;
  std::vector<ParamRef> p{{w, g, false}};
  for (int i = 0; i < 5; ++i) opt.step(p);
  EXPECT_EQ(w, before);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  std::vector<double> w{1.0, 1.0, 1.0}, g{0.5, -3.0, 1e-3};
  Adam opt;
  std::vector<ParamRef> p{{w, g, false}};
  opt.step(p);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  for (std::size_t i = 0; i < 3; ++i) {
    const double want = 1.0 - 1e-4 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(w[i], want, 1e-15);
  }
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(Adam, FrozenBlocksAreSkipped) {
  std::vector<double> w{1.0}, g{1.0}, w2{1.0}, g2{1.0};
  Adam opt;
  std::vector<ParamRef> p{{w, g, true}, {w2, g2, false}};
  opt.step(p);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_NE(w2[0], 1.0);
}

TEST(Adam, JsonRoundTripContinuesIdentically) {
  std::vector<double> a{1.0, 2.0}, ga{0.3, -0.1};
  Adam opt;
  std::vector<ParamRef> p{{a, ga, false}};
  opt.step(p);
  auto restored = Adam::from_json(opt.to_json());
  auto b = a;
  std::vector<ParamRef> q{{b, ga, false}};
  opt.step(p);
  restored.step(q);
  EXPECT_EQ(a, b);
}

TEST(GradCheck, FreshTwoLayerNetwork) {
  const std::vector<std::size_t> hidden{12, 10};
  auto net = Network::mlp(7, hidden, 3, 11);
  const auto x = random_tensor(20, 7, 12);
  const auto t = random_targets(20, 13);
  const auto r = grad_check(net, x, t);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, InputGradient) {
  const std::vector<std::size_t> hidden{6};
  auto net = Network::mlp(4, hidden, 3, 14);
  auto x = random_tensor(5, 4, 15);
  const auto t = random_targets(5, 16);
  ForwardCache cache;
  const auto lr = softmax_cross_entropy(forward(net, x, &cache), t);
  const auto dx = backward(net, cache, lr.grad, true);
  std::vector<double> dummy(x.size());
  std::copy(dx.values().begin(), dx.values().end(), dummy.begin());
  std::vector<ParamRef> p{{x.values(), dummy, false}};
  const auto r = grad_check(p, [&] { return softmax_cross_entropy(forward(net, x), t).loss; });
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, ZeroLossIdentityNetworkIsVacuous) {
  Network net;
  net.layers().emplace_back(3, 3, Activation::Identity);
  for (std::size_t i = 0; i < 3; ++i) net.layers()[0].weights(i, i) = 1.0;
  auto params = net.parameters();
  for (const auto& p : params) std::fill(p.grad.begin(), p.grad.end(), 0.0);
  const auto r = grad_check(params, [] { return 0.0; });
  EXPECT_EQ(r.max_relative_error, 0.0);
}

TEST(GradCheck, FrozenLayersGetZeroGradientsButPassSignal) {
  const std::vector<std::size_t> hidden{5};
  auto net = Network::mlp(4, hidden, 3, 17);
  net.layers()[0].frozen = true;
  const auto x = random_tensor(6, 4, 18);
  const auto t = random_targets(6, 19);
  ForwardCache cache;
  const auto lr = softmax_cross_entropy(forward(net, x, &cache), t);
  backward(net, cache, lr.grad);
  for (double g : net.layers()[0].grad_weights.values()) EXPECT_EQ(g, 0.0);
  const auto r = grad_check(net, x, t);
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(Training, LossStrictlyDecreasesOverTenAdamSteps) {
  const std::vector<std::size_t> hidden{256, 256};
  auto net = Network::mlp(36, hidden, 3, 21);
  const auto x = random_tensor(32, 36, 22);
  const auto t = random_targets(32, 23);
  Adam opt;
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 10; ++step) {
    ForwardCache cache;
    const auto lr = softmax_cross_entropy(forward(net, x, &cache), t);
    EXPECT_LT(lr.loss, prev) << step;
    prev = lr.loss;
    backward(net, cache, lr.grad);
    opt.step(net.parameters());
  }
}

TEST(Training, DeterministicGivenSeedAndData) {
  auto run = [] {
    const std::vector<std::size_t> hidden{16};
    auto net = Network::mlp(6, hidden, 3, 31);
    const auto x = random_tensor(40, 6, 32);
    const auto t = random_targets(40, 33);
    Adam opt({1e-2});
    for (int step = 0; step < 25; ++step) {
      ForwardCache cache;
      const auto lr = softmax_cross_entropy(forward(net, x, &cache), t);
      backward(net, cache, lr.grad);
      opt.step(net.parameters());
    }
    return net.flat_parameters();
  };
  EXPECT_EQ(run(), run());
}

TEST(Inference, RowResultsIndependentOfBatch) {
  const std::vector<std::size_t> hidden{32, 32};
  const auto net = Network::mlp(10, hidden, 3, 41);
  const auto x = random_tensor(17, 10, 42);
  const auto batch = forward(net, x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const std::vector<std::size_t> one{i};
    const auto alone = forward(net, x.gather_rows(one));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(alone(0, j), batch(i, j));
  }
}

TEST(Checkpoint, JsonRoundTripIsBitExact) {
  const std::vector<std::size_t> hidden{9, 4};
  auto net = Network::mlp(6, hidden, 3, 51);
  net.layers()[1].frozen = true;
  const auto back = network_from_json(nlohmann::json::parse(to_json(net).dump()));
  EXPECT_EQ(back.flat_parameters(), net.flat_parameters());
  EXPECT_EQ(back.seed(), 51u);
  EXPECT_TRUE(back.layers()[1].frozen);
  auto j = to_json(net);
  j["parameters"].erase(j["parameters"].begin());
  EXPECT_THROW(network_from_json(j), ParseError);
  j = to_json(net);
  j["layout_version"] = 7;
  EXPECT_THROW(network_from_json(j), ParseError);
}

TEST(Tensor, HconcatAndGather) {
  const auto a = random_tensor(3, 2, 61), b = random_tensor(3, 4, 62);
  const std::vector<Tensor2> parts{a, b};
  const auto c = hconcat(parts);
  EXPECT_EQ(c.cols(), 6u);
  EXPECT_EQ(c(2, 1), a(2, 1));
  EXPECT_EQ(c(2, 5), b(2, 3));
  const std::vector<Tensor2> bad{a, random_tensor(2, 2, 1)};
  EXPECT_THROW(hconcat(bad), ShapeError);
  EXPECT_THROW(Tensor2(2, 2, std::vector<double>(3)), ShapeError);
}
