#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "attn/annotation.hpp"
#include "attn/csv.hpp"
#include "attn/feature_store.hpp"
#include "attn/label_service.hpp"
#include "test_util.hpp"

using namespace attn;

namespace {

struct RunResult {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(ATTN_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.output.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

// One shared fixture tree for the whole suite.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testutil::TempDir("cli");
    const auto r = run("demo-data --out " + q(root()) + " --frames 50 --sets 1 --cluster-frames 400 --seed 3");
    ASSERT_EQ(r.code, 0) << r.output;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::filesystem::path root() { return dir_->path() / "demo"; }
  static std::filesystem::path out(const std::string& name) { return dir_->path() / name; }

  static testutil::TempDir* dir_;
};

testutil::TempDir* Cli::dir_ = nullptr;

}  // namespace

TEST_F(Cli, ExtractWritesOneRowPerFrame) {
  const auto r = run("extract --poses " + q(root() / "poses") + " --depth " + q(root() / "depth") + " --out " +
                     q(out("features.csv")));
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream is(slurp(out("features.csv")));
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, features::version_line());
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    EXPECT_EQ(csv::split(line).size(), 83u);
    ++rows;
  }
  EXPECT_EQ(rows, 51u);  // header + 50 frames
  const auto recs = features::load_features(out("features.csv").string());
  ASSERT_EQ(recs.size(), 50u);
  for (const auto& rec : recs) {
    EXPECT_EQ(rec.kp[0], 0.0);
    EXPECT_EQ(rec.kp[1], 0.0);
    for (double d : rec.depth) EXPECT_GT(d, 0.0);
  }
}

TEST_F(Cli, AggregateMatchesLibraryOracle) {
  const auto r = run("aggregate --labels " + q(root() / "labels") + " --checker " + q(root() / "checker.csv") +
                     " --out " + q(out("final.csv")) + " --report " + q(out("agreement.json")) + " --table");
  ASSERT_EQ(r.code, 0) << r.output;
  std::vector<annotation::AnnotatorLabels> files;
  for (const char* a : {"a1", "a2", "a3", "a4"}) {
    files.push_back({a, annotation::load_label_csv((root() / "labels" / (std::string(a) + ".csv")).string())});
  }
  const auto oracle = annotation::aggregate_dataset(files, annotation::load_label_csv((root() / "checker.csv").string()));
  const auto final_labels = annotation::load_label_csv(out("final.csv").string());
  ASSERT_EQ(final_labels.size(), oracle.sheets.size());
  for (const auto& s : oracle.sheets) EXPECT_EQ(final_labels.at(s.key()), *s.final_label);
  const auto rep = nlohmann::json::parse(slurp(out("agreement.json")));
  EXPECT_EQ(rep["total_frames"], 50);
  EXPECT_EQ(rep["sets"][0]["settled_annotators"], oracle.report.sets[0].settled_annotators);
  EXPECT_EQ(rep["checker_rows_consumed"], oracle.report.checker_rows_consumed);
}

TEST_F(Cli, EvaluateWritesFourFolds) {
  const auto r = run("evaluate --spec fc-kp-gf-depth --features " + q(root() / "clusters.csv") +
                     " --epochs 3 --report " + q(out("eval.json")));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto j = nlohmann::json::parse(slurp(out("eval.json")));
  ASSERT_EQ(j["reports"].size(), 1u);
  const auto& rep = j["reports"][0];
  EXPECT_EQ(rep["spec"], "fc-kp-gf-depth");
  ASSERT_EQ(rep["fold_accuracies"].size(), 4u);
  for (const auto& a : rep["fold_accuracies"]) {
    EXPECT_GE(a.get<double>(), 0.0);
    EXPECT_LE(a.get<double>(), 1.0);
  }
  EXPECT_NE(r.output.find("fc-kp-gf-depth"), std::string::npos);

  const auto table = run("report --eval " + q(out("eval.json")));
  EXPECT_EQ(table.code, 0) << table.output;
  EXPECT_NE(table.output.find("truth"), std::string::npos);
  const auto png = run("report --eval " + q(out("eval.json")) + " --render " + q(out("cm.png")));
  EXPECT_EQ(png.code, 0) << png.output;
  EXPECT_TRUE(std::filesystem::exists(out("cm.png")));
}

TEST_F(Cli, EvaluateIsReproducible) {
  const std::string base = "evaluate --spec logit,majority --features " + q(root() / "clusters.csv") +
                           " --epochs 3 --seed 4 --report ";
  ASSERT_EQ(run(base + q(out("e1.json"))).code, 0);
  ASSERT_EQ(run(base + q(out("e2.json")) + " --parallel").code, 0);
  EXPECT_EQ(slurp(out("e1.json")), slurp(out("e2.json")));
}

TEST_F(Cli, TrainThenPredict) {
  ASSERT_EQ(run("train --spec logit --features " + q(root() / "clusters.csv") + " --epochs 3 --out " +
                q(out("model.json")))
                .code,
            0);
  const auto r = run("predict --model " + q(out("model.json")) + " --features " + q(root() / "clusters.csv") +
                     " --out " + q(out("pred.csv")));
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream is(slurp(out("pred.csv")));
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "set_id,frame_index,label,p_low,p_mid,p_high");
  std::size_t n = 0;
  while (std::getline(is, line)) {
    const auto f = csv::split(line);
    ASSERT_EQ(f.size(), 6u);
    const double s = std::stod(std::string(f[3])) + std::stod(std::string(f[4])) + std::stod(std::string(f[5]));
    EXPECT_NEAR(s, 1.0, 1e-8);
    ++n;
  }
  EXPECT_EQ(n, 400u);
}

TEST_F(Cli, CompactReplaysEventLog) {
  testutil::TempDir d("compact");
  {
    service::LabelLog log(d / "events.jsonl");
    log.append({"t0", "w", service::Role::Labeler, "set1", 2, AttentionLevel::High, service::Action::Set});
    log.append({"t1", "x", service::Role::Labeler, "set1", 2, AttentionLevel::Mid, service::Action::Set});
    log.append({"t2", "x", service::Role::Labeler, "set1", 2, AttentionLevel::Mid, service::Action::Undo});
  }
  const auto r = run("compact --store " + q(d / "events.jsonl") + " --annotators w,x,y,z --out " + q(d / "labels"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(annotation::load_label_csv((d / "labels" / "w.csv").string()).at({"set1", 2}), AttentionLevel::High);
  EXPECT_TRUE(annotation::load_label_csv((d / "labels" / "x.csv").string()).empty());
}

TEST_F(Cli, ZooListsFourteenModels) {
  const auto r = run("zoo");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(nlohmann::json::parse(r.output).size(), 14u);
}

TEST_F(Cli, BadInvocationsFailWithOneLineDiagnostic) {
  auto one_line = [](const RunResult& r) {
    EXPECT_NE(r.code, 0) << r.output;
    std::string s = r.output;
    while (!s.empty() && s.back() == '\n') s.pop_back();
    EXPECT_FALSE(s.empty());
    EXPECT_EQ(s.find('\n'), std::string::npos) << s;
  };
  one_line(run("evaluate --spec no-such-model --features " + q(root() / "clusters.csv") + " --report " +
               q(out("x.json"))));
  one_line(run("aggregate --labels " + q(root() / "poses") + " --checker " + q(root() / "checker.csv") + " --out " +
               q(out("f.csv")) + " --report " + q(out("r.json"))));
  one_line(run("predict --model " + q(out("missing.json")) + " --features " + q(root() / "clusters.csv") +
               " --out " + q(out("p.csv"))));
  EXPECT_NE(run("").code, 0);
  EXPECT_NE(run("evaluate").code, 0);
}
