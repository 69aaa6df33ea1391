// mtgflow: unsupervised multivariate time-series anomaly detection.
// Subcommands: synth, train, score, eval, cluster, export-graph.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtgflow/detect.hpp"
#include "mtgflow/synthgen.hpp"
#include "mtgflow/training.hpp"

using namespace mtgflow;
using nlohmann::json;

namespace {

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ParseError("config " + path + ": " + e.what());
  }
}

json section(const json& config, const char* name) {
  json out = config.contains(name) ? config.at(name) : json::object();
  // a top-level seed is the default for every section
  if (config.contains("seed") && !out.contains("seed")) out["seed"] = config.at("seed");
  return out;
}

struct CommonFlags {
  std::string config_path;
  long long seed = -1;
  std::string mode;
  bool disable_graph = false;
  bool disable_entity_aware = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON configuration file");
    cmd->add_option("--seed", seed, "override the configured seed");
    cmd->add_option("--mode", mode, "target mode: entity or cluster")
        ->check(CLI::IsMember({"entity", "cluster"}));
    cmd->add_flag("--disable-graph", disable_graph, "ablate the graph (W1) path");
    cmd->add_flag("--disable-entity-aware", disable_entity_aware, "use zero target means");
  }

  void apply(json& sect) const {
    if (seed >= 0) sect["seed"] = static_cast<std::uint64_t>(seed);
    if (!mode.empty()) sect["mode"] = mode;
    if (disable_graph) sect["disable_graph"] = true;
    if (disable_entity_aware) sect["disable_entity_aware"] = true;
  }
};

struct SplitChoice {
  std::string name = "test";

  TimeSeriesTable pick(const SplitResult& parts) const {
    if (name == "train") return parts.train;
    if (name == "valid") return parts.valid;
    if (name == "test") return parts.test;
    throw ConfigError("unknown split '" + name + "'");
  }
};

void print_warnings(const Warnings& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

int run_synth(const CommonFlags& flags, const std::string& out_csv, const std::string& out_truth) {
  json sect = section(load_config_file(flags.config_path), "synth");
  flags.apply(sect);
  SynthConfig cfg = synth_config_from_json(sect);
  SynthResult result = generate(cfg);
  print_warnings(result.warnings);
  json echo = to_json(cfg);
  write_dataset_csv(out_csv, result.table, echo);
  write_ground_truth_json(out_truth, result, echo);
  std::size_t labeled = 0;
  for (int l : result.table.labels) labeled += static_cast<std::size_t>(l);
  std::cout << "wrote " << out_csv << " (" << result.table.entities() << " entities x "
            << result.table.timesteps() << " steps, " << labeled << " anomalous) and " << out_truth
            << "\n";
  return 0;
}

int run_train(const CommonFlags& flags, const std::string& data_path, const std::string& ck_path,
              const std::string& log_path) {
  json sect = section(load_config_file(flags.config_path), "train");
  flags.apply(sect);
  TrainConfig cfg = train_config_from_json(sect);
  TimeSeriesTable table = load_csv(data_path, cfg.label_column);
  Pipeline p = run_training_pipeline(table, cfg);
  print_warnings(p.warnings);
  json echo = to_json(p.resolved);
  save_checkpoint(ck_path, p.model, p.norm, p.entity_names, p.resolved, p.clusters);
  if (!log_path.empty()) write_training_log(log_path, p.epoch_nll, echo);
  std::cout << "trained " << p.epoch_nll.size() << " epochs, mean NLL " << std::setprecision(6)
            << p.epoch_nll.front() << " -> " << p.epoch_nll.back() << "; checkpoint " << ck_path
            << "\n";
  return 0;
}

int run_score(const std::string& ck_path, const std::string& data_path, const SplitChoice& split_on,
              const std::string& scores_path, const std::string& thresholds_path) {
  Checkpoint ck = load_checkpoint(ck_path);
  TimeSeriesTable table = load_csv(data_path, ck.config.label_column);
  if (table.entities() != ck.model.cfg.K)
    throw ConfigError("dataset has " + std::to_string(table.entities()) +
                      " entities but the checkpoint expects " + std::to_string(ck.model.cfg.K));
  auto parts = split(table, ck.config.splits);
  Warnings warnings;

  auto train_windows =
      make_windows(apply_norm(parts.train, ck.norm, &warnings), ck.config.M, ck.config.S, &warnings);
  ScoreSeries train_scores = anomaly_scores(ck.model, train_windows);
  ThresholdSet thresholds = compute_thresholds(train_scores, ck.config.lambda);

  TimeSeriesTable chosen = split_on.pick(parts);
  auto windows = make_windows(apply_norm(chosen, ck.norm, &warnings), ck.config.M, ck.config.S,
                              &warnings);
  ScoreSeries scores = anomaly_scores(ck.model, windows);
  Verdicts verdicts = classify(scores, thresholds);
  print_warnings(warnings);

  json echo = to_json(ck.config);
  echo["split"] = split_on.name;
  write_scores_csv(scores_path, scores, verdicts, ck.entity_names, echo);
  write_thresholds_json(thresholds_path, thresholds, ck.entity_names, echo);
  std::cout << "scored " << scores.size() << " windows of split '" << split_on.name
            << "'; global threshold " << std::setprecision(6) << thresholds.global << "\n";
  return 0;
}

int run_eval(const std::string& scores_path, const std::string& report_path) {
  std::ifstream in(scores_path);
  if (!in) throw ConfigError("cannot open scores file: " + scores_path);
  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    header = detail::split_csv_line(line);
    break;
  }
  long score_col = -1, label_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "score") score_col = static_cast<long>(i);
    if (header[i] == "label") label_col = static_cast<long>(i);
  }
  if (score_col < 0 || label_col < 0)
    throw ParseError(scores_path + ": need 'score' and 'label' columns");
  std::vector<double> scores;
  std::vector<int> labels;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    ++row;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError(scores_path + ": row " + std::to_string(row) + " has " +
                       std::to_string(cells.size()) + " cells");
    scores.push_back(detail::parse_cell(cells[static_cast<std::size_t>(score_col)], row, "score"));
    labels.push_back(
        detail::parse_cell(cells[static_cast<std::size_t>(label_col)], row, "label") != 0.0 ? 1 : 0);
  }
  double result = auroc(labels, scores);
  std::size_t pos = 0;
  for (int l : labels) pos += static_cast<std::size_t>(l);

  std::cout << "AUROC " << std::fixed << std::setprecision(4) << result << "\n";
  if (!report_path.empty()) {
    json report{{"format_version", kFormatVersion},
                {"auroc", result},
                {"windows", labels.size()},
                {"positives", pos},
                {"negatives", labels.size() - pos},
                {"config", {{"scores", scores_path}}}};
    std::ofstream out(report_path);
    if (!out) throw ConfigError("cannot write report: " + report_path);
    out << report.dump(2) << "\n";
  }
  return 0;
}

int run_cluster(const CommonFlags& flags, const std::string& data_path, long long m_override,
                const std::string& out_path) {
  json sect = section(load_config_file(flags.config_path), "train");
  flags.apply(sect);
  TrainConfig cfg = train_config_from_json(sect);
  if (m_override > 0) cfg.clusters = static_cast<std::size_t>(m_override);
  TimeSeriesTable table = load_csv(data_path, cfg.label_column);
  auto parts = split(table, cfg.splits);
  Warnings warnings;
  TimeSeriesTable train_norm = zscore_normalize(parts.train, &warnings);
  print_warnings(warnings);
  std::size_t m = std::min(cfg.clusters, table.entities());
  ClusterAssignment assignment = kshape(train_norm, m, Rng(cfg.seed).fork("kshape"));

  json assign = json::object();
  for (std::size_t k = 0; k < table.entities(); ++k)
    assign[table.entity_names[k]] = assignment.assignment[k];
  json echo = to_json(cfg);
  echo["clusters"] = m;
  json j{{"format_version", kFormatVersion},
         {"config", echo},
         {"assignment", assign},
         {"iterations", assignment.objective_trace.size()},
         {"objective", assignment.objective_trace.empty() ? 0.0 : assignment.objective_trace.back()}};
  std::ofstream out(out_path);
  if (!out) throw ConfigError("cannot write assignment: " + out_path);
  out << j.dump(2) << "\n";
  std::cout << "clustered " << table.entities() << " entities into " << m << " groups; wrote "
            << out_path << "\n";
  return 0;
}

int run_export_graph(const std::string& ck_path, const std::string& data_path,
                     const SplitChoice& split_on, double threshold, const std::string& out_path) {
  Checkpoint ck = load_checkpoint(ck_path);
  TimeSeriesTable table = load_csv(data_path, ck.config.label_column);
  auto parts = split(table, ck.config.splits);
  Warnings warnings;
  auto windows = make_windows(apply_norm(split_on.pick(parts), ck.norm, &warnings), ck.config.M,
                              ck.config.S, &warnings);
  print_warnings(warnings);

  AttentionParams attn{ck.model.params.at("attn.wq").value, ck.model.params.at("attn.wk").value,
                       ck.model.cfg.dropout};
  json graphs = json::array();
  for (std::size_t i = 0; i < windows.size(); ++i) {
    auto adj = attention_adjacency(pairwise_scores(windows.windows[i], attn), false, 0.0, nullptr,
                                   i);
    json rows = json::array();
    for (std::size_t r = 0; r < adj.a.rows(); ++r) {
      std::vector<double> row(adj.a.cols());
      for (std::size_t c = 0; c < adj.a.cols(); ++c) {
        double v = adj.a.at(r, c);
        row[c] = v >= threshold ? v : 0.0;
      }
      rows.push_back(row);
    }
    graphs.push_back({{"window_start", windows.window_starts[i]},
                      {"adjacency", rows},
                      {"threshold_applied", threshold}});
  }
  json echo = to_json(ck.config);
  echo["split"] = split_on.name;
  echo["threshold"] = threshold;
  json j{{"format_version", kFormatVersion}, {"config", echo}, {"graphs", graphs}};
  std::ofstream out(out_path);
  if (!out) throw ConfigError("cannot write graph export: " + out_path);
  out << j.dump(2) << "\n";
  std::cout << "exported " << graphs.size() << " window graphs to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MTGFlow: unsupervised anomaly detection for multivariate time series"};
  app.require_subcommand(1);

  CommonFlags synth_flags, train_flags, cluster_flags;
  std::string data_path, ck_path, scores_path, thresholds_path, log_path, truth_path, report_path,
      out_path;
  SplitChoice split_on;
  long long m_override = -1;
  double graph_threshold = 0.15;

  auto* synth = app.add_subcommand("synth", "generate a synthetic benchmark dataset");
  synth_flags.attach(synth);
  synth->add_option("--out", out_path, "dataset CSV to write")->required();
  synth->add_option("--truth", truth_path, "ground-truth JSON to write")->required();

  auto* train = app.add_subcommand("train", "fit the model on a dataset");
  train_flags.attach(train);
  train->add_option("--data", data_path, "dataset CSV")->required();
  train->add_option("--checkpoint", ck_path, "checkpoint JSON to write")->required();
  train->add_option("--log", log_path, "training log CSV to write");

  auto* score = app.add_subcommand("score", "score windows with a trained checkpoint");
  score->add_option("--checkpoint", ck_path, "checkpoint JSON")->required();
  score->add_option("--data", data_path, "dataset CSV")->required();
  score->add_option("--split", split_on.name, "split to score: train, valid or test");
  score->add_option("--scores", scores_path, "scores CSV to write")->required();
  score->add_option("--thresholds", thresholds_path, "thresholds JSON to write")->required();

  auto* eval = app.add_subcommand("eval", "compute AUROC from a scores file");
  eval->add_option("--scores", scores_path, "scores CSV with score and label columns")->required();
  eval->add_option("--report", report_path, "AUROC report JSON to write");

  auto* cluster = app.add_subcommand("cluster", "KShape-cluster the entities");
  cluster_flags.attach(cluster);
  cluster->add_option("--data", data_path, "dataset CSV")->required();
  cluster->add_option("--m", m_override, "number of clusters");
  cluster->add_option("--out", out_path, "assignment JSON to write")->required();

  auto* graph = app.add_subcommand("export-graph", "export learned adjacency matrices");
  graph->add_option("--checkpoint", ck_path, "checkpoint JSON")->required();
  graph->add_option("--data", data_path, "dataset CSV")->required();
  graph->add_option("--split", split_on.name, "split to export");
  graph->add_option("--threshold", graph_threshold, "zero out edges below this weight");
  graph->add_option("--out", out_path, "graph JSON to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage problems exit 2, --help exits 0
  }

  try {
    if (synth->parsed()) return run_synth(synth_flags, out_path, truth_path);
    if (train->parsed()) return run_train(train_flags, data_path, ck_path, log_path);
    if (score->parsed())
      return run_score(ck_path, data_path, split_on, scores_path, thresholds_path);
    if (eval->parsed()) return run_eval(scores_path, report_path);
    if (cluster->parsed()) return run_cluster(cluster_flags, data_path, m_override, out_path);
    if (graph->parsed())
      return run_export_graph(ck_path, data_path, split_on, graph_threshold, out_path);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
