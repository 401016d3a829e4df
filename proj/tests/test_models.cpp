#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "attn/models.hpp"
#include "attn/synthetic.hpp"

using namespace attn;
using namespace attn::models;
using features::Modality;

namespace {

std::size_t dense_params(std::size_t in, std::size_t out) { return in * out + out; }

std::size_t stream_params(std::size_t in) {
  return dense_params(in, 256) + dense_params(256, 256) + dense_params(256, 3);
}

// Small networks keep training-based tests fast.
ModelSpec small(const std::string& name) {
  auto s = spec_by_name(name);
  s.stream_hidden = {16, 16};
  s.head_hidden = 8;
  s.mlp_hidden = 16;
  return s;
}

TrainConfig quick_config(std::uint64_t seed = 3) {
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.batch_size = 32;
  c.max_epochs = 15;
  c.patience = 5;
  c.seed = seed;
  return c;
}

Dataset cluster_dataset(std::size_t n, std::uint64_t seed, std::array<double, 3> sep = {1.0, 0.8, 0.35}) {
  synthetic::ClusterOptions o;
  o.frames = n;
  o.seed = seed;
  o.separation = sep;
  const auto raw = synthetic::gaussian_clusters(o);
  const auto st = features::Standardizer::fit(raw);
  return make_dataset(st.apply(raw));
}

// A stream whose softmax output is the constant `p` for every input.
TrainedStream constant_stream(Modality m, std::array<double, 3> p) {
  TrainedStream s;
  s.modality = m;
  s.net.layers().emplace_back(features::dims_of(m), 3, nn::Activation::Identity);
  for (std::size_t c = 0; c < 3; ++c) s.net.layers()[0].bias[c] = std::log(p[c]);
  return s;
}

TrainedModel late_model(LateCombiner c, std::vector<TrainedStream> streams) {
  TrainedModel m;
  m.spec = spec_by_name(std::string("late-") + std::string(name_of(c)) + "-kp-gf");
  m.streams = std::move(streams);
  return m;
}

double train_accuracy(const TrainedModel& m, const Dataset& ds) {
  const auto p = predict_proba(m, ds);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) hit += argmax(p.row(i)) == ds.labels[i];
  return static_cast<double>(hit) / static_cast<double>(ds.size());
}

std::vector<double> all_params(const TrainedModel& m) {
  std::vector<double> out = m.network.flat_parameters();
  for (const auto& s : m.streams) {
    auto p = s.net.flat_parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  auto h = m.head.flat_parameters();
  out.insert(out.end(), h.begin(), h.end());
  if (m.combiner) {
    out.insert(out.end(), m.combiner->weights.values().begin(), m.combiner->weights.values().end());
    out.insert(out.end(), m.combiner->bias.begin(), m.combiner->bias.end());
  }
  return out;
}

std::vector<std::size_t> first_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), 0);
  return r;
}

}  // namespace

TEST(Zoo, NamesResolveAndValidate) {
  const auto names = zoo_names();
  EXPECT_EQ(names.size(), 14u);
  for (const auto& n : names) EXPECT_NO_THROW(spec_by_name(n)) << n;
  EXPECT_EQ(dnn_zoo_names().size(), 10u);
  EXPECT_THROW(spec_by_name("late-median-kp-gf"), ConfigError);
  EXPECT_THROW(spec_by_name("fc-kp"), ConfigError);
  EXPECT_THROW(spec_by_name("early-gf-kp"), ConfigError);
  EXPECT_THROW(spec_by_name("nonsense"), ConfigError);
  EXPECT_EQ(spec_by_name("stream-depth").modalities, std::vector<Modality>{Modality::Depth});
}

TEST(Zoo, SpecJsonRoundTrip) {
  for (const auto& n : zoo_names()) {
    const auto s = spec_by_name(n);
    const auto back = spec_from_json(to_json(s));
    EXPECT_EQ(back.name, s.name);
    EXPECT_EQ(back.kind, s.kind);
    EXPECT_EQ(back.modalities, s.modalities);
    EXPECT_EQ(back.combiner, s.combiner);
  }
}

TEST(Architecture, StreamInputDimsAndParameterCounts) {
  const TrainConfig cfg;
  const auto s = build_streams(spec_by_name("fc-kp-gf-depth"), cfg);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].net.layers().front().in_dim(), 36u);
  EXPECT_EQ(s[1].net.layers().front().in_dim(), 26u);
  EXPECT_EQ(s[2].net.layers().front().in_dim(), 18u);
  EXPECT_EQ(s[0].net.parameter_count(), stream_params(36));
  EXPECT_EQ(s[1].net.parameter_count(), stream_params(26));
  EXPECT_EQ(s[2].net.parameter_count(), stream_params(18));
  for (const auto& st : s) {
    EXPECT_EQ(st.net.layers().size(), 3u);
    EXPECT_EQ(st.net.layers().back().out_dim(), 3u);
  }
}

TEST(Architecture, TwoModalitySpecsHaveTwoStreams) {
  const TrainConfig cfg;
  for (const char* n : {"fc-kp-gf", "late-average-kp-gf", "late-maximum-kp-gf", "late-weighted-kp-gf"}) {
    EXPECT_EQ(build_streams(spec_by_name(n), cfg).size(), 2u) << n;
  }
}

TEST(Architecture, EarlyFusionInputWidth) {
  auto ds = cluster_dataset(60, 1);
  auto cfg = quick_config();
  cfg.max_epochs = 1;
  const auto two = train_early_fusion(spec_by_name("early-kp-gf"), ds, cfg);
  const auto three = train_early_fusion(spec_by_name("early-kp-gf-depth"), ds, cfg);
  EXPECT_EQ(two.network.layers().front().in_dim(), 62u);
  EXPECT_EQ(three.network.layers().front().in_dim(), 80u);
  EXPECT_EQ(three.network.parameter_count(), stream_params(80));
}

TEST(Architecture, FcHeadInputIsStreamWidthTimesStreams) {
  auto ds = cluster_dataset(60, 2);
  auto cfg = quick_config();
  cfg.max_epochs = 1;
  for (const char* n : {"fc-kp-gf", "fc-kp-gf-depth"}) {
    const auto spec = spec_by_name(n);
    const auto m = train_fc_fusion(spec, ds, cfg);
    EXPECT_EQ(m.head.layers().front().in_dim(), 256u * spec.modalities.size()) << n;
    EXPECT_EQ(m.head.layers().front().out_dim(), 64u);
    EXPECT_EQ(m.head.layers().back().out_dim(), 3u);
  }
}

TEST(LateFusion, MaximumPicksStrongestClass) {
  auto m = late_model(LateCombiner::Maximum, {constant_stream(Modality::KP, {0.9, 0.05, 0.05}),
                                              constant_stream(Modality::GF, {0.1, 0.1, 0.8})});
  const auto ds = cluster_dataset(5, 3);
  const auto p = predict_proba(m, ds);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(argmax(p.row(i)), 0);
    EXPECT_NEAR(p(i, 0), 0.9 / 1.8, 1e-12);
    EXPECT_NEAR(p(i, 2), 0.8 / 1.8, 1e-12);
  }
}

TEST(LateFusion, AverageOfIdenticalStreamsEqualsStream) {
  const std::array<double, 3> q = {0.2, 0.5, 0.3};
  auto m = late_model(LateCombiner::Average, {constant_stream(Modality::KP, q), constant_stream(Modality::GF, q)});
  const auto ds = cluster_dataset(5, 4);
  const auto p = predict_proba(m, ds);
  const auto single = stream_probs(m.streams[0].net, ds.of(Modality::KP));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p(i, c), single(i, c), 1e-15);
  }
}

TEST(LateFusion, AverageIsBoundedByStreams) {
  auto ds = cluster_dataset(300, 5);
  const auto m = train_on_dataset(small("late-average-kp-gf-depth"), ds, quick_config());
  const auto p = predict_proba(m, ds);
  std::vector<Tensor2> sp;
  for (const auto& s : m.streams) sp.push_back(stream_probs(s.net, ds.of(s.modality)));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      double lo = 1.0, hi = 0.0;
      for (const auto& s : sp) {
        lo = std::min(lo, s(i, c));
        hi = std::max(hi, s(i, c));
      }
      EXPECT_GE(p(i, c), lo - 1e-15);
      EXPECT_LE(p(i, c), hi + 1e-15);
    }
  }
}

TEST(Inference, ArgmaxTieTakesLowestIndex) {
  const std::array<double, 3> tie = {0.4, 0.2, 0.4};
  EXPECT_EQ(argmax(tie), 0);
  const std::array<double, 3> tie12 = {0.2, 0.4, 0.4};
  EXPECT_EQ(argmax(tie12), 1);
}

TEST(Inference, ProbabilitiesSumToOneForEveryKind) {
  auto ds = cluster_dataset(200, 6);
  auto cfg = quick_config();
  cfg.max_epochs = 2;
  StreamCache cache{&ds, cfg.seed, {}};
  for (const auto& n : zoo_names()) {
    const auto m = train_on_dataset(small(n), ds, cfg, &cache);
    const auto p = predict_proba(m, ds);
    ASSERT_EQ(p.rows(), ds.size());
    ASSERT_EQ(p.cols(), 3u);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double s = 0.0;
      for (double v : p.row(i)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9) << n;
    }
  }
  const auto maj = train_on_dataset(spec_by_name("majority"), ds, cfg);
  EXPECT_NEAR(predict_proba(maj, ds)(0, static_cast<std::size_t>(maj.majority_class)), 1.0, 0.0);
}

TEST(Inference, BatchInvariantBitForBit) {
  auto ds = cluster_dataset(120, 7);
  auto cfg = quick_config();
  cfg.max_epochs = 2;
  for (const char* n : {"mlp", "early-kp-gf-depth", "fc-kp-gf", "late-weighted-kp-gf-depth", "hybrid-fcgf-wdepth"}) {
    const auto m = train_on_dataset(small(n), ds, cfg);
    const auto full = predict_proba(m, ds);
    for (std::size_t i = 0; i < ds.size(); i += 7) {
      Dataset one;
      for (auto mod : features::kAllModalities) {
        const std::array<std::size_t, 1> idx = {i};
        one.modality[static_cast<std::size_t>(mod)] = ds.of(mod).gather_rows(idx);
      }
      one.labels = {ds.labels[i]};
      const auto p = predict_proba(m, one);
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p(0, c), full(i, c)) << n << " row " << i;
    }
  }
}

TEST(Training, DeterministicForFixedSeed) {
  auto ds = cluster_dataset(150, 8);
  for (const char* n : {"svm", "logit", "fc-kp-gf", "late-weighted-kp-gf", "hybrid-fcgf-wdepth"}) {
    const auto a = train_on_dataset(small(n), ds, quick_config(11));
    const auto b = train_on_dataset(small(n), ds, quick_config(11));
    EXPECT_EQ(all_params(a), all_params(b)) << n;
    const auto c = train_on_dataset(small(n), ds, quick_config(12));
    EXPECT_NE(all_params(a), all_params(c)) << n;
  }
}

TEST(Training, ClassicModelsFitSeparableClusters) {
  auto ds = cluster_dataset(900, 9, {4.0, 4.0, 4.0});
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 64;
  cfg.max_epochs = 60;
  cfg.patience = 10;
  for (const char* n : {"svm", "logit", "mlp"}) {
    const auto m = train_on_dataset(spec_by_name(n), ds, cfg);
    EXPECT_GE(train_accuracy(m, ds), 0.99) << n;
  }
}

TEST(Training, SingleClassDataIsRejected) {
  auto ds = cluster_dataset(50, 10);
  std::fill(ds.labels.begin(), ds.labels.end(), 1);
  for (const char* n : {"majority", "svm", "logit", "early-kp-gf", "fc-kp-gf", "late-average-kp-gf"}) {
    EXPECT_THROW(train_on_dataset(small(n), ds, quick_config()), ContractError) << n;
  }
  ds.labels[0] = -1;
  ds.labels[1] = 0;
  EXPECT_THROW(train_on_dataset(small("logit"), ds, quick_config()), ContractError);
}

TEST(Training, LossDecreasesOnClusters) {
  auto ds = cluster_dataset(400, 11);
  const auto m = train_on_dataset(small("early-kp-gf-depth"), ds, quick_config());
  ASSERT_GE(m.history.train_loss.size(), 2u);
  EXPECT_LT(m.history.train_loss.back(), m.history.train_loss.front());
}

TEST(Inference, PermutingOutputRowsPermutesProbabilities) {
  auto ds = cluster_dataset(100, 12);
  auto m = train_on_dataset(small("logit"), ds, quick_config());
  const auto p = predict_proba(m, ds);
  const std::array<std::size_t, 3> perm = {2, 0, 1};
  auto permuted = m;
  auto& out = permuted.network.layers().back();
  const auto& src = m.network.layers().back();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t r = 0; r < out.in_dim(); ++r) out.weights(r, c) = src.weights(r, perm[c]);
    out.bias[c] = src.bias[perm[c]];
  }
  // Logits permute exactly; the softmax normaliser sums in a different order.
  const auto x = ds.concat(m.spec.modalities);
  const auto z = nn::forward(m.network, x), zp = nn::forward(permuted.network, x);
  const auto q = predict_proba(permuted, ds);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(zp(i, c), z(i, perm[c]));
      EXPECT_NEAR(q(i, c), p(i, perm[c]), 1e-15);
    }
  }
}

TEST(Freeze, FusionStreamsEqualStandaloneStreams) {
  auto ds = cluster_dataset(200, 13);
  const auto cfg = quick_config();
  for (const char* n : {"fc-kp-gf-depth", "late-weighted-kp-gf-depth", "hybrid-fcgf-wdepth"}) {
    const auto spec = small(n);
    const auto m = train_on_dataset(spec, ds, cfg);
    for (const auto& s : m.streams) {
      const auto standalone = train_stream(s.modality, spec.stream_hidden, ds, cfg);
      EXPECT_EQ(s.net.flat_parameters(), standalone.net.flat_parameters()) << n;
      for (const auto& l : s.net.layers()) EXPECT_TRUE(l.frozen);
    }
  }
}

TEST(Freeze, UnfrozenStreamsAreRejected) {
  auto net = nn::Network::mlp(4, std::vector<std::size_t>{3}, 3, 1);
  WeightedCombiner comb(1);
  const std::vector<int> y = {0, 1};
  std::vector<Tensor2> probs = {Tensor2(2, 3, 1.0 / 3.0)};
  EXPECT_THROW(CombinerObjective(comb, probs, y, {&net}), InvariantViolation);
  auto head = nn::Network::mlp(4, std::vector<std::size_t>{3}, 3, 2);
  EXPECT_THROW(FusionHeadObjective(head, Tensor2(2, 4), y, {&net}), InvariantViolation);
  net.set_frozen(true);
  EXPECT_NO_THROW(CombinerObjective(comb, probs, y, {&net}));
}

TEST(Checkpoint, RoundTripPreservesPredictions) {
  synthetic::ClusterOptions o;
  o.frames = 150;
  const auto raw = synthetic::gaussian_clusters(o);
  for (const char* n : {"majority", "svm", "mlp", "early-kp-gf", "fc-kp-gf", "late-maximum-kp-gf",
                        "late-weighted-kp-gf-depth", "hybrid-fcgf-wdepth"}) {
    const auto m = train(small(n), raw, quick_config(), "all");
    const auto back = model_from_json(nlohmann::json::parse(to_json(m).dump()));
    const auto a = predict(m, raw), b = predict(back, raw);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      EXPECT_EQ(a[i].probabilities, b[i].probabilities) << n;
      EXPECT_EQ(a[i].label, b[i].label);
    }
  }
  auto j = to_json(train(small("logit"), raw, quick_config()));
  j["layout_version"] = 9;
  EXPECT_THROW(model_from_json(j), ParseError);
}

TEST(GradCheck, LogitMlpAndEarlyObjectives) {
  auto ds = cluster_dataset(20, 14);
  const auto rows = first_rows(20);
  const std::array<Modality, 3> all = {Modality::KP, Modality::GF, Modality::Depth};
  const auto x = ds.concat(all);
  for (std::vector<std::size_t> hidden : {std::vector<std::size_t>{}, {12}, {10, 8}}) {
    auto net = nn::Network::mlp(x.cols(), hidden, 3, 5);
    SoftmaxObjective obj(net, x, ds.labels);
    EXPECT_LT(grad_check_objective(obj, rows).max_relative_error, 1e-4) << hidden.size();
  }
}

TEST(GradCheck, HingeObjectiveAwayFromKinks) {
  auto ds = cluster_dataset(20, 15);
  const auto rows = first_rows(20);
  const auto x = ds.of(Modality::GF);
  auto net = nn::Network::mlp(x.cols(), {}, 3, 6);
  HingeObjective obj(net, x, ds.labels, 1e-2);
  EXPECT_LT(grad_check_objective(obj, rows, 1e-7).max_relative_error, 1e-4);
}

TEST(GradCheck, FusionHeadAndCombiner) {
  auto ds = cluster_dataset(20, 16);
  const auto rows = first_rows(20);
  auto streams = build_streams(small("fc-kp-gf-depth"), quick_config());
  std::vector<nn::Network*> frozen;
  for (auto& s : streams) {
    s.net.set_frozen(true);
    frozen.push_back(&s.net);
  }
  std::vector<Tensor2> tops, probs;
  for (auto& s : streams) {
    tops.push_back(stream_top(s.net, ds.of(s.modality)));
    probs.push_back(stream_probs(s.net, ds.of(s.modality)));
  }
  auto head = nn::Network::mlp(48, std::vector<std::size_t>{8}, 3, 7);
  FusionHeadObjective fh(head, nn::hconcat(tops), ds.labels, frozen);
  EXPECT_LT(grad_check_objective(fh, rows).max_relative_error, 1e-4);

  WeightedCombiner comb(3);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (double& w : comb.weights.values()) w = u(rng);
  CombinerObjective co(comb, probs, ds.labels, frozen);
  const auto r = grad_check_objective(co, rows);
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_EQ(r.checked, 12u);
}
