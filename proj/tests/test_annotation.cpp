#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "attn/annotation.hpp"
#include "attn/synthetic.hpp"

using namespace attn;
using namespace attn::annotation;

namespace {

using L = AttentionLevel;

VoteSheet sheet(std::array<int, 4> v, std::optional<int> checker = std::nullopt) {
  VoteSheet s;
  s.set_id = "s";
  for (std::size_t i = 0; i < 4; ++i) s.votes[i] = {"a" + std::to_string(i + 1), static_cast<L>(v[i])};
  if (checker) s.checker_vote = static_cast<L>(*checker);
  return s;
}

// Counts per label; independent of the library's quorum logic.
std::array<int, 3> counts(std::span<const int> votes) {
  std::array<int, 3> c{};
  for (int v : votes) ++c[static_cast<std::size_t>(v)];
  return c;
}

std::optional<int> brute_majority(std::span<const int> votes, int quorum) {
  const auto c = counts(votes);
  for (int l = 0; l < 3; ++l)
    if (c[static_cast<std::size_t>(l)] >= quorum) return l;
  return std::nullopt;
}

std::vector<std::optional<L>> timeline(std::initializer_list<int> xs) {
  std::vector<std::optional<L>> t;
  for (int x : xs) t.push_back(x < 0 ? std::nullopt : std::optional<L>(static_cast<L>(x)));
  return t;
}

std::vector<AnnotatorLabels> unanimous(std::size_t frames) {
  std::vector<AnnotatorLabels> a(4);
  for (std::size_t i = 0; i < 4; ++i) {
    a[i].annotator = "a" + std::to_string(i + 1);
    for (std::size_t f = 0; f < frames; ++f) a[i].labels[{"set1", static_cast<std::int64_t>(f)}] = static_cast<L>(f % 3);
  }
  return a;
}

}  // namespace

TEST(MajorityVote, Examples) {
  const std::array<L, 4> a{L::Low, L::Low, L::Low, L::High};
  EXPECT_EQ(majority_vote(a, 3), L::Low);
  const std::array<L, 4> b{L::Low, L::Low, L::Mid, L::High};
  EXPECT_FALSE(majority_vote(b, 3));
  const std::array<L, 5> c{L::Mid, L::Mid, L::Mid, L::Mid, L::High};
  EXPECT_EQ(majority_vote(c, 3), L::Mid);
  EXPECT_EQ(majority_vote(c), L::Mid);
}

TEST(MajorityVote, EmptyVoteSetFails) {
  EXPECT_THROW(majority_vote(std::span<const L>{}), ContractError);
}

TEST(MajorityVote, ExhaustiveFourVotesMatchCounting) {
  std::set<std::array<int, 3>> unresolved_multisets;
  int unresolved = 0;
  for (int code = 0; code < 81; ++code) {
    std::array<int, 4> v{};
    for (int i = 0, c = code; i < 4; ++i, c /= 3) v[static_cast<std::size_t>(i)] = c % 3;
    std::array<L, 4> lv{};
    for (std::size_t i = 0; i < 4; ++i) lv[i] = static_cast<L>(v[i]);
    const auto got = majority_vote(lv, 3);
    const auto want = brute_majority(v, 3);
    ASSERT_EQ(got.has_value(), want.has_value()) << code;
    if (want) {
      ASSERT_EQ(to_int(*got), *want) << code;
    } else {
      ++unresolved;
      auto c = counts(v);
      std::sort(c.rbegin(), c.rend());
      unresolved_multisets.insert(c);
    }
  }
  EXPECT_EQ(unresolved_multisets, (std::set<std::array<int, 3>>{{2, 2, 0}, {2, 1, 1}}));
  // 3 * C(4,2) for {2,2,0} plus 3 * 4!/(2!) for {2,1,1}
  EXPECT_EQ(unresolved, 18 + 36);
}

TEST(ResolveWithChecker, Examples) {
  auto r = resolve_with_checker(sheet({0, 0, 1, 2}, 0));
  EXPECT_EQ(r.final_label, L::Low);
  EXPECT_EQ(r.resolution, Resolution::MajorityWithChecker);

  r = resolve_with_checker(sheet({0, 0, 1, 1}, 2));
  EXPECT_FALSE(r.final_label);
  EXPECT_FALSE(r.resolution);

  r = resolve_with_checker(sheet({2, 2, 2, 0}));
  EXPECT_EQ(r.final_label, L::High);
  EXPECT_EQ(r.resolution, Resolution::MajorityOfFour);
}

TEST(ResolveWithChecker, CheckerOnSettledFrameIsInvariantViolation) {
  EXPECT_THROW(resolve_with_checker(sheet({2, 2, 2, 0}, 1)), InvariantViolation);
}

TEST(ResolveWithChecker, ExhaustiveFiveVotesMatchCounting) {
  for (int code = 0; code < 243; ++code) {
    std::array<int, 5> v{};
    for (int i = 0, c = code; i < 5; ++i, c /= 3) v[static_cast<std::size_t>(i)] = c % 3;
    const auto s = sheet({v[0], v[1], v[2], v[3]}, v[4]);
    const auto first = brute_majority(std::span<const int>(v.data(), 4), 3);
    if (first) {
      ASSERT_THROW(resolve_with_checker(s), InvariantViolation) << code;
      const auto plain = resolve_with_checker(sheet({v[0], v[1], v[2], v[3]}));
      ASSERT_EQ(to_int(*plain.final_label), *first);
      continue;
    }
    const auto r = resolve_with_checker(s);
    const auto want = brute_majority(v, 3);
    ASSERT_EQ(r.final_label.has_value(), want.has_value()) << code;
    if (want) {
      ASSERT_EQ(to_int(*r.final_label), *want) << code;
      ASSERT_EQ(r.resolution, Resolution::MajorityWithChecker);
    }
  }
}

TEST(ResolveWithChecker, PermutationInvariantInAnnotatorOrder) {
  for (int code = 0; code < 243; ++code) {
    std::array<int, 5> v{};
    for (int i = 0, c = code; i < 5; ++i, c /= 3) v[static_cast<std::size_t>(i)] = c % 3;
    std::array<int, 4> four{v[0], v[1], v[2], v[3]};
    const bool settled = brute_majority(four, 3).has_value();
    const auto base = resolve_with_checker(sheet(four, settled ? std::nullopt : std::optional<int>(v[4])));
    std::array<int, 4> perm = four;
    std::sort(perm.begin(), perm.end());
    do {
      const auto r = resolve_with_checker(sheet(perm, settled ? std::nullopt : std::optional<int>(v[4])));
      ASSERT_EQ(r.final_label, base.final_label);
      ASSERT_EQ(r.resolution, base.resolution);
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
}

TEST(MedianFilter, Examples) {
  EXPECT_EQ(median_filter_resolve(timeline({0, 0, -1, 0, 0}))[2], L::Low);
  EXPECT_EQ(median_filter_resolve(timeline({0, 0, -1, 2, 2, 2}))[2], L::High);
  EXPECT_EQ(median_filter_resolve(timeline({0, 0, -1, 2, 2}))[2], L::Low);
}

TEST(MedianFilter, ResolvedEntriesUntouched) {
  const auto t = timeline({2, -1, 1, -1, 0});
  const auto out = median_filter_resolve(t);
  EXPECT_EQ(out[0], L::High);
  EXPECT_EQ(out[2], L::Mid);
  EXPECT_EQ(out[4], L::Low);
}

TEST(MedianFilter, NoResolvedFrameFails) {
  EXPECT_THROW(median_filter_resolve(timeline({-1, -1})), ContractError);
  EXPECT_THROW(median_filter_resolve(timeline({0}), 4), ConfigError);
}

TEST(MedianFilter, OutputMatchesNeighbourhoodOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> lab(-1, 2);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::optional<L>> t(1 + rng() % 30);
    for (auto& x : t) {
      const int v = lab(rng);
      if (v >= 0) x = static_cast<L>(v);
    }
    if (std::none_of(t.begin(), t.end(), [](auto& x) { return x.has_value(); })) t[0] = L::Mid;
    const auto out = median_filter_resolve(t);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i]) continue;
      std::vector<std::pair<std::size_t, std::size_t>> cand;  // (distance, index)
      for (std::size_t j = 0; j < t.size(); ++j) {
        if (t[j]) cand.push_back({i > j ? i - j : j - i, j});
      }
      std::sort(cand.begin(), cand.end());
      cand.resize(std::min<std::size_t>(5, cand.size()));
      std::vector<int> hood;
      for (auto [d, j] : cand) hood.push_back(to_int(*t[j]));
      std::sort(hood.begin(), hood.end());
      ASSERT_EQ(to_int(out[i]), hood[(hood.size() - 1) / 2]) << trial << " @" << i;
      ASSERT_TRUE(std::count(hood.begin(), hood.end(), to_int(out[i])) > 0);
    }
  }
}

TEST(LabelCsv, RoundTripAndErrors) {
  LabelMap m{{{"a", 1}, L::Mid}, {{"b", 0}, L::High}};
  std::ostringstream os;
  write_label_csv(os, m);
  std::istringstream is(os.str());
  EXPECT_EQ(read_label_csv(is), m);
  std::istringstream bad("set_id,frame_index,label\na,1,3\n");
  try {
    read_label_csv(bad, "x.csv");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Aggregate, UnanimousSetSettlesAtStageOne) {
  const auto a = unanimous(30);
  const auto r = aggregate_dataset(a, {});
  EXPECT_EQ(r.report.sets.at(0).pct_annotators(), 100.0);
  EXPECT_EQ(r.report.checker_rows_consumed, 0u);
  EXPECT_EQ(r.report.resolution_counts[0], 30u);
  for (const auto& s : r.sheets) EXPECT_EQ(s.resolution, Resolution::MajorityOfFour);
}

TEST(Aggregate, CoverageMismatchListsMissingFrames) {
  auto a = unanimous(5);
  a[2].labels.erase({"set1", 3});
  try {
    aggregate_dataset(a, {});
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("a3:set1#3"), std::string::npos) << e.what();
  }
}

TEST(Aggregate, WrongAnnotatorCountFails) {
  auto a = unanimous(3);
  a.pop_back();
  EXPECT_THROW(aggregate_dataset(a, {}), ContractError);
}

TEST(Aggregate, CheckerRowsForSettledFramesAreIgnoredAndCounted) {
  const auto a = unanimous(6);
  const LabelMap checker{{{"set1", 2}, L::Low}};
  const auto r = aggregate_dataset(a, checker);
  EXPECT_EQ(r.report.checker_rows_consumed, 0u);
  EXPECT_EQ(r.report.checker_rows_ignored, 1u);
  EXPECT_EQ(r.sheets[2].final_label, L::High);
}

TEST(Aggregate, MatchesPerFrameOracleOnNoisyVotes) {
  LabelMap truth;
  for (std::int64_t f = 0; f < 400; ++f) truth[{"set" + std::to_string(f % 2), f}] = static_cast<L>((f / 17) % 3);
  const auto fx = synthetic::noisy_votes(truth, 5);
  std::vector<AnnotatorLabels> a;
  for (std::size_t i = 0; i < 4; ++i) a.push_back({fx.annotators[i].annotator, fx.annotators[i].labels});
  const auto r = aggregate_dataset(a, fx.checker);
  ASSERT_EQ(r.sheets.size(), truth.size());

  std::map<std::string, std::vector<std::optional<L>>> per_set;
  std::map<std::string, std::vector<FrameKey>> keys;
  for (const auto& [k, _] : truth) {
    std::vector<int> v;
    for (const auto& an : a) v.push_back(to_int(an.labels.at(k)));
    std::optional<int> fin = brute_majority(v, 3);
    if (!fin && fx.checker.count(k)) {
      v.push_back(to_int(fx.checker.at(k)));
      fin = brute_majority(v, 3);
    }
    per_set[k.set_id].push_back(fin ? std::optional<L>(static_cast<L>(*fin)) : std::nullopt);
    keys[k.set_id].push_back(k);
  }
  std::map<FrameKey, L> want;
  for (auto& [set, t] : per_set) {
    const auto filled = median_filter_resolve(t);
    for (std::size_t i = 0; i < t.size(); ++i) want[keys[set][i]] = filled[i];
  }
  std::size_t resolved_counts[3] = {};
  for (const auto& s : r.sheets) {
    ASSERT_TRUE(s.final_label && s.resolution);
    EXPECT_EQ(*s.final_label, want.at(s.key())) << to_string(s.key());
    ++resolved_counts[static_cast<std::size_t>(*s.resolution)];
  }
  EXPECT_GT(resolved_counts[0], 0u);
  EXPECT_GT(resolved_counts[1], 0u);
  EXPECT_EQ(resolved_counts[0] + resolved_counts[1] + resolved_counts[2], truth.size());
  std::ostringstream os;
  EXPECT_NO_THROW(write_final_csv(os, r.sheets));
}

TEST(Agreement, MeanStdUsesSampleStd) {
  const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
  const auto ms = mean_std(xs);
  EXPECT_DOUBLE_EQ(ms.mean, 2.5);
  EXPECT_DOUBLE_EQ(ms.std, std::sqrt(5.0 / 3.0));
  const std::vector<double> one{7.0};
  EXPECT_EQ(mean_std(one).std, 0.0);
}

TEST(Agreement, PublishedPerSetTableReproducesSummaryRows) {
  const std::array<std::size_t, 20> frames{5197, 5562, 6317, 6706, 5340, 6222, 4861, 6907, 6433, 6757,
                                           5295, 6820, 7312, 8122, 7396, 6014, 7130, 8976, 8689, 4833};
  const std::array<double, 20> pa{94.15, 83.75, 78.12, 68.92, 82.02, 65.67, 81.98, 80.32, 92.04, 91.86,
                                  64.49, 76.73, 83.52, 74.17, 82.18, 76.02, 86.94, 65.66, 88.20, 80.96};
  const std::array<double, 20> pc{98.19, 94.70, 90.87, 85.71, 94.14, 85.26, 95.23, 94.90, 98.91, 97.60,
                                  82.85, 90.62, 93.34, 93.70, 92.39, 91.57, 96.06, 87.32, 96.05, 92.72};
  std::vector<SetAgreement> sets;
  for (std::size_t i = 0; i < 20; ++i) {
    SetAgreement s;
    s.set_id = std::to_string(i + 1);
    s.frames = frames[i];
    s.settled_annotators = static_cast<std::size_t>(std::lround(pa[i] * frames[i] / 100.0));
    s.settled_with_checker = static_cast<std::size_t>(std::lround(pc[i] * frames[i] / 100.0));
    EXPECT_NEAR(s.pct_annotators(), pa[i], 0.005);
    EXPECT_NEAR(s.pct_with_checker(), pc[i], 0.005);
    sets.push_back(s);
  }
  const auto r = summarize(sets);
  EXPECT_EQ(r.total_frames(), 130889u);
  EXPECT_NEAR(r.annotators.mean, 79.89, 0.005);
  EXPECT_NEAR(r.with_checker.mean, 92.61, 0.005);
  EXPECT_NEAR(r.annotators.std, 8.8245, 1e-3);
  // The published 4.2085 matches neither sample nor population std of the
  // published row; sample std of the reconstructed row is 4.4304.
  EXPECT_NEAR(r.with_checker.std, 4.4304, 1e-3);
  EXPECT_NEAR(r.global_pct_annotators, 79.71, 0.01);
  EXPECT_NEAR(r.global_pct_with_checker, 92.59, 0.01);
  const auto j = to_json(r);
  EXPECT_EQ(j["sets"].size(), 20u);
  EXPECT_FALSE(render_table(r).empty());
}
