#pragma once

#include <fstream>
#include <iomanip>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtgflow/cluster.hpp"
#include "mtgflow/dataset.hpp"
#include "mtgflow/model.hpp"

namespace mtgflow {

using nlohmann::json;

struct TrainConfig {
  std::size_t M = 0;  // 0 = auto: 60 multivariate, 10 univariate
  std::size_t S = 10;
  double lr = 0.002;
  std::size_t epochs = 40;
  std::size_t batch_size = 256;
  std::size_t flow_blocks = 1;
  std::size_t d_h = 32;
  std::size_t d_c = 32;
  std::size_t d_f = 64;
  TargetMode mode = TargetMode::kEntity;
  std::size_t clusters = 20;
  std::uint64_t seed = 1;
  double dropout = 0.2;
  double lambda = 0.8;
  bool disable_graph = false;
  bool disable_entity_aware = false;
  SplitSpec splits;
  std::string label_column = "auto";

  std::size_t window_for(std::size_t K) const { return M ? M : (K == 1 ? 10 : 60); }
};

inline json to_json(const TrainConfig& c) {
  return json{{"M", c.M},
              {"S", c.S},
              {"lr", c.lr},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"flow_blocks", c.flow_blocks},
              {"d_h", c.d_h},
              {"d_c", c.d_c},
              {"d_f", c.d_f},
              {"mode", c.mode == TargetMode::kEntity ? "entity" : "cluster"},
              {"clusters", c.clusters},
              {"seed", c.seed},
              {"dropout", c.dropout},
              {"lambda", c.lambda},
              {"disable_graph", c.disable_graph},
              {"disable_entity_aware", c.disable_entity_aware},
              {"train_frac", c.splits.train},
              {"valid_frac", c.splits.valid},
              {"test_frac", c.splits.test},
              {"label_column", c.label_column}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
  };
  opt("M", c.M);
  opt("S", c.S);
  opt("lr", c.lr);
  opt("epochs", c.epochs);
  opt("batch_size", c.batch_size);
  opt("flow_blocks", c.flow_blocks);
  opt("d_h", c.d_h);
  opt("d_c", c.d_c);
  opt("d_f", c.d_f);
  opt("clusters", c.clusters);
  opt("seed", c.seed);
  opt("dropout", c.dropout);
  opt("lambda", c.lambda);
  opt("disable_graph", c.disable_graph);
  opt("disable_entity_aware", c.disable_entity_aware);
  opt("train_frac", c.splits.train);
  opt("valid_frac", c.splits.valid);
  opt("test_frac", c.splits.test);
  opt("label_column", c.label_column);
  if (j.contains("mode")) {
    std::string mode = j.at("mode").get<std::string>();
    if (mode == "entity")
      c.mode = TargetMode::kEntity;
    else if (mode == "cluster")
      c.mode = TargetMode::kCluster;
    else
      throw ConfigError("mode must be 'entity' or 'cluster', got '" + mode + "'");
  }
  if (c.S < 1 || c.batch_size < 1 || c.flow_blocks < 1 || c.d_h < 1 || c.d_c < 1 || c.d_f < 1)
    throw ConfigError("sizes in the training config must be positive");
  return c;
}

// Mean negative log likelihood over a batch of windows (the negated joint
// objective). When with_grad is set, parameter gradients accumulate scaled
// by 1/batch. Eval mode (no dropout RNG) is fully deterministic.
inline double batch_loss(Model& model, std::span<const Tensor> windows, bool with_grad,
                         Rng* dropout_rng) {
  if (windows.empty()) throw ConfigError("batch_loss: empty batch");
  double total = 0.0;
  double inv = 1.0 / static_cast<double>(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    Tape tape;
    Bindings bindings;
    auto fwd = model.forward(tape, with_grad ? &bindings : nullptr, windows[i],
                             dropout_rng != nullptr, dropout_rng);
    double loss = tape.value(fwd.loss)[0];
    if (!std::isfinite(loss))
      throw NumericError("non-finite loss at batch window " + std::to_string(i));
    total += loss;
    if (with_grad) {
      tape.backward(fwd.loss, inv);
      bindings.accumulate(tape);
    }
  }
  return total * inv;
}

// Spec-level alias: the MLE loss of a batch under the current parameters.
inline double mle_loss(Model& model, std::span<const Tensor> windows) {
  return batch_loss(model, windows, false, nullptr);
}

struct TrainResult {
  std::vector<double> epoch_nll;
};

// Joint optimization of all modules by Adam over shuffled minibatches.
// Deterministic given config.seed: shuffling, dropout, and parameter
// iteration order are all fixed streams.
inline TrainResult train(Model& model, const WindowBatch& data, const TrainConfig& cfg) {
  if (data.size() == 0) throw ConfigError("train: no training windows");
  Rng root(cfg.seed);
  AdamConfig adam{cfg.lr};
  TrainResult result;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  double initial_nll = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = root.fork("shuffle", epoch);
    shuffle_rng.shuffle(order);
    Rng dropout_rng = root.fork("dropout", epoch);

    double epoch_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<Tensor> batch;
      batch.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) batch.push_back(data.windows[order[i]]);
      double loss = batch_loss(model, batch, true, &dropout_rng);
      adam_step(model.params, adam);
      epoch_sum += loss * static_cast<double>(end - begin);
    }
    double mean_nll = epoch_sum / static_cast<double>(order.size());
    result.epoch_nll.push_back(mean_nll);
    if (epoch == 0) initial_nll = mean_nll;
    if (!std::isfinite(mean_nll) || (initial_nll > 0.0 && mean_nll > 10.0 * initial_nll))
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": NLL " +
                         std::to_string(mean_nll) + " vs initial " + std::to_string(initial_nll));
  }
  return result;
}

// ---- artifacts ----

inline void write_training_log(const std::string& path, const std::vector<double>& epoch_nll,
                               const json& config_echo) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write training log: " + path);
  out << "# config: " << config_echo.dump() << "\n";
  out << "epoch,mean_nll\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < epoch_nll.size(); ++i) out << i << "," << epoch_nll[i] << "\n";
}

struct Checkpoint {
  Model model;
  NormStats norm;
  std::vector<std::string> entity_names;
  TrainConfig config;
  std::optional<ClusterAssignment> clusters;
};

inline void save_checkpoint(const std::string& path, const Model& model, const NormStats& norm,
                            const std::vector<std::string>& entity_names, const TrainConfig& cfg,
                            const std::optional<ClusterAssignment>& clusters) {
  json j;
  j["format_version"] = kFormatVersion;
  j["kind"] = "mtgflow-checkpoint";
  j["config"] = to_json(cfg);
  j["model"] = {{"K", model.cfg.K},
                {"M", model.cfg.M},
                {"d_h", model.cfg.d_h},
                {"d_c", model.cfg.d_c},
                {"d_f", model.cfg.d_f},
                {"flow_blocks", model.cfg.flow_blocks},
                {"dropout", model.cfg.dropout},
                {"alpha_clamp", model.cfg.alpha_clamp},
                {"disable_graph", model.cfg.disable_graph},
                {"disable_entity_aware", model.cfg.disable_entity_aware}};
  j["entity_names"] = entity_names;
  j["norm_mean"] = norm.mean;
  j["norm_std"] = norm.stddev;
  j["target_means"] = model.targets.entity_scalar;
  if (clusters) {
    json assign = json::object();
    for (std::size_t k = 0; k < entity_names.size(); ++k)
      assign[entity_names[k]] = clusters->assignment[k];
    j["cluster_assignment"] = assign;
  }
  j["params"] = model.params.values_json();
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  out << j.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("checkpoint file not found: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("checkpoint " + path + ": " + e.what());
  }
  if (!j.contains("format_version") || j.at("format_version").get<int>() != kFormatVersion)
    throw ConfigError("checkpoint " + path + ": unsupported format version");

  Checkpoint ck;
  ck.config = train_config_from_json(j.at("config"));
  const json& m = j.at("model");
  ck.model.cfg.K = m.at("K").get<std::size_t>();
  ck.model.cfg.M = m.at("M").get<std::size_t>();
  ck.model.cfg.d_h = m.at("d_h").get<std::size_t>();
  ck.model.cfg.d_c = m.at("d_c").get<std::size_t>();
  ck.model.cfg.d_f = m.at("d_f").get<std::size_t>();
  ck.model.cfg.flow_blocks = m.at("flow_blocks").get<std::size_t>();
  ck.model.cfg.dropout = m.at("dropout").get<double>();
  ck.model.cfg.alpha_clamp = m.at("alpha_clamp").get<double>();
  ck.model.cfg.disable_graph = m.at("disable_graph").get<bool>();
  ck.model.cfg.disable_entity_aware = m.at("disable_entity_aware").get<bool>();
  ck.entity_names = j.at("entity_names").get<std::vector<std::string>>();
  ck.norm.mean = j.at("norm_mean").get<std::vector<double>>();
  ck.norm.stddev = j.at("norm_std").get<std::vector<double>>();
  ck.model.targets.entity_scalar = j.at("target_means").get<std::vector<double>>();
  ck.model.targets.M = ck.model.cfg.M;
  ck.model.params.load_values_json(j.at("params"));
  if (j.contains("cluster_assignment")) {
    ClusterAssignment ca;
    ca.assignment.resize(ck.entity_names.size());
    std::size_t m_count = 0;
    for (std::size_t k = 0; k < ck.entity_names.size(); ++k) {
      ca.assignment[k] = j.at("cluster_assignment").at(ck.entity_names[k]).get<std::size_t>();
      m_count = std::max(m_count, ca.assignment[k] + 1);
    }
    ca.m = m_count;
    ck.clusters = std::move(ca);
  }
  return ck;
}

// ---- full pipeline ----

struct Pipeline {
  Model model;
  NormStats norm;
  std::vector<std::string> entity_names;
  std::vector<double> epoch_nll;
  std::optional<ClusterAssignment> clusters;
  TrainConfig resolved;
  Warnings warnings;
};

// Load-to-checkpoint path shared by the CLI and tests: chronological split,
// z-score statistics from the training split only, optional KShape cluster
// assignment on the normalized training split, joint training.
inline Pipeline run_training_pipeline(const TimeSeriesTable& raw, TrainConfig cfg) {
  std::size_t K = raw.entities();
  cfg.M = cfg.window_for(K);

  Pipeline p;
  auto parts = split(raw, cfg.splits);
  p.norm = compute_norm_stats(parts.train);
  TimeSeriesTable train_norm = apply_norm(parts.train, p.norm, &p.warnings);

  TargetBank targets;
  if (cfg.disable_entity_aware) {
    targets = zero_targets(K, cfg.M);
  } else if (cfg.mode == TargetMode::kCluster) {
    std::size_t m = std::min(cfg.clusters, K);
    if (m != cfg.clusters)
      warn(&p.warnings, "cluster count reduced to K=" + std::to_string(K));
    p.clusters = kshape(train_norm, m, Rng(cfg.seed).fork("kshape"));
    targets = init_targets(TargetMode::kCluster, p.clusters->assignment, K, cfg.M,
                           Rng(cfg.seed).fork("targets"));
  } else {
    targets = init_targets(TargetMode::kEntity, {}, K, cfg.M, Rng(cfg.seed).fork("targets"));
  }

  ModelConfig mc;
  mc.K = K;
  mc.M = cfg.M;
  mc.d_h = cfg.d_h;
  mc.d_c = cfg.d_c;
  mc.d_f = cfg.d_f;
  mc.flow_blocks = cfg.flow_blocks;
  mc.dropout = cfg.dropout;
  mc.disable_graph = cfg.disable_graph;
  mc.disable_entity_aware = cfg.disable_entity_aware;
  p.model = Model::init(mc, targets, cfg.seed);

  WindowBatch train_windows = make_windows(train_norm, cfg.M, cfg.S, &p.warnings);
  auto result = train(p.model, train_windows, cfg);
  p.epoch_nll = std::move(result.epoch_nll);
  p.entity_names = raw.entity_names;
  p.resolved = cfg;
  return p;
}

}  // namespace mtgflow
