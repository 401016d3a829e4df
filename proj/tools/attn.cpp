// attn: command-line entry point for extraction, label aggregation,
// training, evaluation, reporting and the labeling service.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "attn/annotation.hpp"
#include "attn/evaluation.hpp"
#include "attn/feature_store.hpp"
#include "attn/label_service.hpp"
#include "attn/models.hpp"
#include "attn/pipeline.hpp"
#include "attn/png_io.hpp"
#include "attn/synthetic.hpp"

namespace fs = std::filesystem;
using namespace attn;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path);
  os << text;
  if (!os) throw Error("short write to " + path);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Label CSVs in a directory, one annotator per file (stem = annotator id).
std::vector<annotation::AnnotatorLabels> load_annotator_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("labels directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.size() != annotation::kAnnotators) {
    throw ConfigError("expected exactly 4 annotator CSV files in " + dir + ", found " + std::to_string(files.size()));
  }
  std::vector<annotation::AnnotatorLabels> out;
  for (const auto& f : files) out.push_back({f.stem().string(), annotation::load_label_csv(f.string())});
  return out;
}

struct TrainFlags {
  std::uint64_t seed = 0;
  std::size_t epochs = models::TrainConfig{}.max_epochs;
  std::size_t batch = models::TrainConfig{}.batch_size;
  std::size_t patience = models::TrainConfig{}.patience;
  double lr = models::TrainConfig{}.learning_rate;

  void add(CLI::App* app) {
    app->add_option("--seed", seed, "Random seed")->capture_default_str();
    app->add_option("--epochs", epochs, "Maximum epochs")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--batch", batch, "Minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--patience", patience, "Early-stopping patience")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  }

  models::TrainConfig config() const {
    models::TrainConfig c;
    c.seed = seed;
    c.max_epochs = epochs;
    c.batch_size = batch;
    c.patience = patience;
    c.learning_rate = lr;
    c.validate();
    return c;
  }
};

std::vector<features::FeatureRecord> labeled_features(const std::string& features_path, const std::string& labels_path) {
  auto records = features::load_features(features_path);
  if (labels_path.empty()) {
    for (const auto& r : records) {
      if (!r.label) throw ContractError("feature row " + to_string(r.key()) + " has no label; pass --labels");
    }
    return records;
  }
  pipeline::JoinStats js;
  auto out = pipeline::attach_labels(std::move(records), annotation::load_label_csv(labels_path), &js);
  if (js.features_without_label || js.labels_without_features) {
    std::cerr << "attn: joined " << js.labeled << " rows (" << js.features_without_label << " feature rows unlabeled, "
              << js.labels_without_features << " labels without features)\n";
  }
  return out;
}

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-level toolkit: features, labels, models, evaluation, labeling service"};
  app.require_subcommand(1);

  // extract
  auto* extract = app.add_subcommand("extract", "Pose JSON + depth maps -> feature CSV");
  std::string poses_dir, depth_dir, out_features, mapping_file, index_map_file, overlay_dir;
  double tau = 0.1;
  bool carry_forward = false;
  extract->add_option("--poses", poses_dir, "Directory of <set>_<index>.json pose files")->required();
  extract->add_option("--depth", depth_dir, "Directory of <set>_<index>_depth.png|.raw depth maps")->required();
  extract->add_option("--out", out_features, "Output feature CSV")->required();
  extract->add_option("--mapping", mapping_file, "RGB->depth coordinate mapping JSON");
  extract->add_option("--index-map", index_map_file, "Pose array index map JSON");
  extract->add_option("--tau", tau, "Keypoint confidence threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  extract->add_flag("--carry-forward", carry_forward, "Reuse previous angles on degenerate frames");
  extract->add_option("--overlay", overlay_dir, "Write debug overlay PNGs to this directory");

  // aggregate
  auto* aggregate = app.add_subcommand("aggregate", "Resolve four labelers + checker into final labels");
  std::string labels_dir, checker_file, final_out, agg_report;
  std::size_t window = 5;
  bool agg_table = false;
  aggregate->add_option("--labels", labels_dir, "Directory with exactly 4 annotator CSVs")->required();
  aggregate->add_option("--checker", checker_file, "Checker CSV")->required();
  aggregate->add_option("--out", final_out, "Final label CSV")->required();
  aggregate->add_option("--report", agg_report, "Agreement report JSON")->required();
  aggregate->add_option("--window", window, "Median-filter window (odd)")->capture_default_str();
  aggregate->add_flag("--table", agg_table, "Print the agreement table");

  // train
  auto* train = app.add_subcommand("train", "Train one model on all labeled rows");
  std::string spec_name, features_path, labels_path, model_out;
  TrainFlags train_flags;
  train->add_option("--spec", spec_name, "Model name (see `attn zoo`)")->required();
  train->add_option("--features", features_path, "Feature CSV")->required();
  train->add_option("--labels", labels_path, "Final label CSV (optional if the feature CSV is labeled)");
  train->add_option("--out", model_out, "Checkpoint JSON")->required();
  train_flags.add(train);

  // predict
  auto* predict = app.add_subcommand("predict", "Apply a checkpoint to a feature CSV");
  std::string model_in, pred_features, pred_out;
  predict->add_option("--model", model_in, "Checkpoint JSON")->required();
  predict->add_option("--features", pred_features, "Feature CSV")->required();
  predict->add_option("--out", pred_out, "Prediction CSV")->required();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "k-fold cross-validation");
  std::string eval_specs, eval_features, eval_labels, eval_report, strategy = "stratified";
  std::size_t folds = 4;
  bool per_stream = false, parallel = false;
  TrainFlags eval_flags;
  evaluate->add_option("--spec", eval_specs, "Model name, comma list, or `zoo`")->required();
  evaluate->add_option("--features", eval_features, "Feature CSV")->required();
  evaluate->add_option("--labels", eval_labels, "Final label CSV (optional if the feature CSV is labeled)");
  evaluate->add_option("--folds", folds, "Number of folds")->capture_default_str()->check(CLI::Range(2, 100));
  evaluate->add_option("--strategy", strategy, "stratified | subject")->capture_default_str();
  evaluate->add_option("--report", eval_report, "Evaluation JSON")->required();
  evaluate->add_flag("--per-stream", per_stream, "Also report per-stream per-class accuracy");
  evaluate->add_flag("--parallel", parallel, "Evaluate folds on separate threads");
  eval_flags.add(evaluate);

  // report
  auto* report = app.add_subcommand("report", "Render an evaluation JSON");
  std::string report_in, render = "table";
  report->add_option("--eval", report_in, "Evaluation JSON")->required();
  report->add_option("--render", render, "`table` or a .png path for the confusion matrix")->capture_default_str();
  std::string report_spec;
  report->add_option("--spec", report_spec, "Which model's confusion matrix to render (default: first)");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP labeling service");
  std::string frames_dir, store, annotators_csv, checker_id = "checker", host = "127.0.0.1";
  int port = 8080;
  bool checker_mode = false;
  serve->add_option("--frames", frames_dir, "Directory of <set>_<index>.png|jpg stills")->required();
  serve->add_option("--store", store, "Label event log (JSONL)")->envname("ATTN_STORE")->required();
  serve->add_option("--port", port, "Port")->envname("ATTN_PORT")->capture_default_str()->check(CLI::Range(1, 65535));
  serve->add_option("--host", host, "Bind address")->capture_default_str();
  serve->add_option("--annotators", annotators_csv, "Comma-separated ids of the four labelers")->required();
  serve->add_option("--checker", checker_id, "Checker id")->capture_default_str();
  serve->add_flag("--checker-mode", checker_mode, "Accept the checker (stage-1-unresolved frames only)");

  // compact
  auto* compact = app.add_subcommand("compact", "Label event log -> per-annotator CSVs");
  std::string compact_store, compact_annotators, compact_dir, compact_checker_out, compact_checker_id = "checker";
  compact->add_option("--store", compact_store, "Label event log (JSONL)")->envname("ATTN_STORE")->required();
  compact->add_option("--annotators", compact_annotators, "Comma-separated ids of the four labelers")->required();
  compact->add_option("--checker", compact_checker_id, "Checker id")->capture_default_str();
  compact->add_option("--out", compact_dir, "Directory for <annotator>.csv")->required();
  compact->add_option("--checker-out", compact_checker_out, "Checker CSV path");

  // zoo
  auto* zoo = app.add_subcommand("zoo", "Print the model manifest");

  // demo-data
  auto* demo = app.add_subcommand("demo-data", "Write a synthetic fixture tree");
  std::string demo_out;
  std::size_t demo_frames = 50, demo_sets = 1, demo_cluster_frames = 3000;
  std::uint64_t demo_seed = 1;
  demo->add_option("--out", demo_out, "Output directory")->required();
  demo->add_option("--frames", demo_frames, "Frames per set")->capture_default_str()->check(CLI::PositiveNumber);
  demo->add_option("--sets", demo_sets, "Number of sets")->capture_default_str()->check(CLI::PositiveNumber);
  demo->add_option("--cluster-frames", demo_cluster_frames, "Rows in the Gaussian feature set (0 to skip)")
      ->capture_default_str();
  demo->add_option("--seed", demo_seed, "Seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (extract->parsed()) {
      pipeline::ExtractOptions opts;
      opts.parse.confidence_threshold = tau;
      opts.carry_forward = carry_forward;
      if (!mapping_file.empty()) opts.mapping = depth::mapping_from_json(read_json(mapping_file));
      if (!index_map_file.empty()) opts.index_map = pose::index_map_from_json(read_json(index_map_file));
      if (!overlay_dir.empty()) opts.overlay_dir = overlay_dir;
      pipeline::ExtractStats st;
      const auto records = pipeline::extract(poses_dir, depth_dir, opts, &st);
      features::persist_features(records, out_features);
      std::cout << "extracted " << st.frames << " frames from " << st.sets << " set(s) -> " << out_features;
      if (st.frames_without_detection) std::cout << " (" << st.frames_without_detection << " interpolated)";
      if (st.carried_angles) std::cout << " (" << st.carried_angles << " carried angles)";
      std::cout << '\n';
    } else if (aggregate->parsed()) {
      const auto annotators = load_annotator_dir(labels_dir);
      const auto checker = annotation::load_label_csv(checker_file);
      const auto result = annotation::aggregate_dataset(annotators, checker, {window});
      std::ostringstream fin;
      annotation::write_final_csv(fin, result.sheets);
      write_text(final_out, fin.str());
      write_text(agg_report, annotation::to_json(result.report).dump(2) + "\n");
      if (agg_table) std::cout << annotation::render_table(result.report);
      std::cout << "resolved " << result.sheets.size() << " frames -> " << final_out << '\n';
    } else if (train->parsed()) {
      const auto spec = models::spec_by_name(spec_name);
      const auto records = labeled_features(features_path, labels_path);
      const auto model = models::train(spec, records, train_flags.config(), "train " + features_path);
      write_text(model_out, models::to_json(model).dump() + "\n");
      std::cout << "trained " << spec.name << " on " << records.size() << " rows -> " << model_out << '\n';
    } else if (predict->parsed()) {
      const auto model = models::model_from_json(read_json(model_in));
      const auto records = features::load_features(pred_features);
      const auto preds = models::predict(model, records);
      std::ostringstream os;
      os << "set_id,frame_index,label,p_low,p_mid,p_high\n";
      char buf[96];
      for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& p = preds[i].probabilities;
        std::snprintf(buf, sizeof buf, ",%d,%.9g,%.9g,%.9g\n", to_int(preds[i].label), p[0], p[1], p[2]);
        os << records[i].set_id << ',' << records[i].frame_index << buf;
      }
      write_text(pred_out, os.str());
    } else if (evaluate->parsed()) {
      std::vector<std::string> names = eval_specs == "zoo" ? models::zoo_names() : split_list(eval_specs);
      if (names.empty()) throw ConfigError("--spec is empty");
      std::vector<models::ModelSpec> specs;
      for (const auto& n : names) specs.push_back(models::spec_by_name(n));
      const auto records = labeled_features(eval_features, eval_labels);
      const auto cfg = eval_flags.config();
      const auto plan = eval::make_folds(records, eval::strategy_from_name(strategy), cfg.seed, folds);
      const eval::EvalOptions eopts{parallel};
      const auto reports = eval::cross_validate_many(specs, records, plan, cfg, eopts);
      nlohmann::json j;
      j["reports"] = nlohmann::json::array();
      for (const auto& r : reports) j["reports"].push_back(eval::to_json(r));
      if (per_stream) j["per_stream"] = eval::to_json(eval::per_stream_class_accuracy(records, plan, cfg, eopts));
      write_text(eval_report, j.dump(2) + "\n");
      std::cout << eval::render_accuracy_table(reports);
    } else if (report->parsed()) {
      const auto j = read_json(report_in);
      std::vector<eval::EvalReport> reports;
      for (const auto& r : j.at("reports")) reports.push_back(eval::report_from_json(r));
      if (reports.empty()) throw ParseError(report_in + ": no reports");
      const eval::EvalReport* chosen = &reports.front();
      if (!report_spec.empty()) {
        chosen = nullptr;
        for (const auto& r : reports) {
          if (r.spec == report_spec) chosen = &r;
        }
        if (!chosen) throw ConfigError("no report for spec '" + report_spec + "'");
      }
      if (render == "table") {
        std::cout << eval::render_accuracy_table(reports) << '\n';
        std::cout << chosen->spec << " confusion (rows = truth):\n" << eval::render_confusion(chosen->confusion());
        if (j.contains("per_stream")) {
          std::vector<eval::StreamClassRow> rows;
          for (const auto& rj : j["per_stream"]) {
            eval::StreamClassRow row;
            row.modality = *features::modality_from_name(rj.at("stream").get<std::string>());
            for (std::size_t c = 0; c < kNumClasses; ++c) {
              const auto& v = rj.at("per_class").at(std::string(kLevelNames[c]));
              if (!v.is_null()) row.class_accuracy[c] = v.get<double>();
            }
            row.overall = rj.at("overall").get<double>();
            rows.push_back(row);
          }
          std::cout << '\n' << eval::render_stream_table(rows);
        }
      } else if (fs::path(render).extension() == ".png") {
        eval::render_confusion_png(chosen->confusion(), render);
        std::cout << "wrote " << render << '\n';
      } else {
        throw ConfigError("--render must be `table` or a .png path");
      }
    } else if (serve->parsed()) {
      service::ServiceConfig cfg;
      cfg.frames_dir = frames_dir;
      cfg.store = store;
      cfg.annotators = split_list(annotators_csv);
      cfg.checker = checker_id;
      cfg.checker_mode = checker_mode;
      service::LabelService svc(cfg);
      httplib::Server server;
      service::mount(server, svc);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "serving " << svc.frame_count() << " frames on http://" << host << ':' << port
                << (checker_mode ? " (checker mode)" : "") << std::endl;
      if (!server.listen(host, port)) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
    } else if (compact->parsed()) {
      const auto ids = split_list(compact_annotators);
      if (ids.size() != annotation::kAnnotators) throw ConfigError("--annotators must list exactly 4 ids");
      const auto events = service::LabelLog::read(compact_store);
      const auto state = service::replay(events);
      std::optional<fs::path> chk;
      if (!compact_checker_out.empty()) chk = compact_checker_out;
      service::compact_state(state, ids, compact_checker_id, compact_dir, chk);
      std::cout << "compacted " << events.size() << " events -> " << compact_dir << '\n';
    } else if (zoo->parsed()) {
      std::cout << models::zoo_manifest().dump(2) << '\n';
    } else if (demo->parsed()) {
      const fs::path root = demo_out;
      for (const char* d : {"poses", "depth", "frames", "labels"}) fs::create_directories(root / d);
      annotation::LabelMap truth;
      for (std::size_t s = 0; s < demo_sets; ++s) {
        const std::string set_id = "set" + std::to_string(s + 1);
        const std::uint64_t seed = demo_seed * 7919 + s;
        for (std::size_t t = 0; t < demo_frames; ++t) {
          const auto ti = static_cast<std::int64_t>(t);
          const auto stem = set_id + "_" + std::to_string(t);
          const auto pts = synthetic::skeleton_at(ti, seed);
          write_text((root / "poses" / (stem + "_keypoints.json")).string(), synthetic::pose_document(pts).dump() + "\n");
          const auto dimg = synthetic::depth_frame(ti, seed);
          png::write_gray16((root / "depth" / (stem + "_depth.png")).string(), {dimg.width, dimg.height, dimg.values});
          png::Rgb8 still(192, 108, 235);
          for (const auto& p : pts) still.set(static_cast<int>(p.x / 10), static_cast<int>(p.y / 10), 20, 20, 20);
          png::write_rgb8((root / "frames" / (stem + ".png")).string(), still);
          truth[{set_id, ti}] = synthetic::fixture_label(ti, seed);
        }
      }
      const auto votes = synthetic::noisy_votes(truth, demo_seed);
      for (const auto& a : votes.annotators) {
        std::ostringstream os;
        annotation::write_label_csv(os, a.labels);
        write_text((root / "labels" / (a.annotator + ".csv")).string(), os.str());
      }
      std::ostringstream chk, tru;
      annotation::write_label_csv(chk, votes.checker);
      annotation::write_label_csv(tru, truth);
      write_text((root / "checker.csv").string(), chk.str());
      write_text((root / "truth.csv").string(), tru.str());
      if (demo_cluster_frames > 0) {
        synthetic::ClusterOptions co;
        co.frames = demo_cluster_frames;
        co.seed = demo_seed;
        features::persist_features(synthetic::gaussian_clusters(co), (root / "clusters.csv").string());
      }
      std::cout << "wrote fixture to " << root.string() << '\n';
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "attn: error: " << msg << '\n';
    return 1;
  }
  return 0;
}
