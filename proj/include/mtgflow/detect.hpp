#pragma once

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtgflow/dataset.hpp"
#include "mtgflow/model.hpp"

namespace mtgflow {

// Per-window anomaly scores: S_ck = -log P_k for entity k, S_c their mean.
struct ScoreSeries {
  std::vector<std::size_t> window_starts;
  std::size_t M = 0;
  std::vector<double> score;  // S_c
  Tensor per_entity;          // {N, K}: S_ck
  std::vector<int> labels;

  std::size_t size() const { return score.size(); }

  std::vector<double> entity_column(std::size_t k) const {
    std::vector<double> col(size());
    for (std::size_t i = 0; i < size(); ++i) col[i] = per_entity.at(i, k);
    return col;
  }
};

inline ScoreSeries anomaly_scores(Model& model, const WindowBatch& windows) {
  ScoreSeries s;
  s.window_starts = windows.window_starts;
  s.labels = windows.window_labels;
  s.M = windows.M;
  std::size_t N = windows.size(), K = model.cfg.K;
  s.per_entity = Tensor({N, K});
  s.score.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    Tape tape;
    auto fwd = model.forward(tape, nullptr, windows.windows[i], false, nullptr);
    double mean = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      double v = tape.value(fwd.logp[k])[0];
      if (!std::isfinite(v))
        throw NumericError("non-finite score at window " + std::to_string(i) + ", entity " +
                           std::to_string(k));
      s.per_entity.at(i, k) = -v;
      mean += -v;
    }
    s.score[i] = mean / static_cast<double>(K);
  }
  return s;
}

// p-th percentile by linear interpolation on sorted order statistics at
// position p*(n-1).
inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ConfigError("percentile of empty sample");
  std::sort(values.begin(), values.end());
  double pos = p * static_cast<double>(values.size() - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  std::size_t hi = std::min(values.size() - 1, lo + 1);
  double frac = pos - static_cast<double>(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

// Tukey rule over training scores: Q3 + 1.5 * (Q3 - Q1).
inline double iqr_threshold(const std::vector<double>& training_scores) {
  if (training_scores.size() < 4)
    throw ConfigError("IQR threshold needs at least 4 training scores, got " +
                      std::to_string(training_scores.size()));
  double q1 = percentile(training_scores, 0.25);
  double q3 = percentile(training_scores, 0.75);
  return q3 + 1.5 * (q3 - q1);
}

struct ThresholdSet {
  double global = 0.0;
  std::vector<double> per_entity;
  std::vector<double> lambda;
};

// Entity-specific thresholds: lambda_k * (Q3_k + 1.5 * (Q3_k - Q1_k)) over
// that entity's training scores.
inline std::vector<double> entity_thresholds(const ScoreSeries& training,
                                             const std::vector<double>& lambda) {
  std::size_t K = training.per_entity.numel() ? training.per_entity.cols() : 0;
  if (lambda.size() != K) throw ConfigError("need one lambda per entity");
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k)
    out[k] = lambda[k] * iqr_threshold(training.entity_column(k));
  return out;
}

inline ThresholdSet compute_thresholds(const ScoreSeries& training, double lambda) {
  ThresholdSet t;
  t.global = iqr_threshold(training.score);
  std::size_t K = training.per_entity.cols();
  t.lambda.assign(K, lambda);
  t.per_entity = entity_thresholds(training, t.lambda);
  return t;
}

// Mann-Whitney formulation: (#(pos > neg) + 0.5 * #ties) / (P * N), computed
// via average ranks.
inline double auroc(const std::vector<int>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size()) throw ShapeError("auroc: labels/scores length mismatch");
  std::size_t P = 0, N = 0;
  for (int l : labels) (l ? P : N) += 1;
  if (P == 0 || N == 0)
    throw MetricError("AUROC undefined: labels contain a single class (" + std::to_string(P) +
                      " positive, " + std::to_string(N) + " negative)");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    double avg_rank = 0.5 * static_cast<double>(i + j - 1) + 1.0;  // 1-based
    for (std::size_t u = i; u < j; ++u)
      if (labels[idx[u]]) rank_sum_pos += avg_rank;
    i = j;
  }
  double u_stat = rank_sum_pos - 0.5 * static_cast<double>(P) * static_cast<double>(P + 1);
  return u_stat / (static_cast<double>(P) * static_cast<double>(N));
}

// Window verdicts and per-entity culprit flags. Ties resolve to normal
// (strict > at every threshold).
struct Verdicts {
  std::vector<int> window;  // 1 = anomalous
  Tensor culprit;           // {N, K} of 0/1
};

inline Verdicts classify(const ScoreSeries& scores, const ThresholdSet& thresholds) {
  std::size_t N = scores.size();
  std::size_t K = scores.per_entity.numel() ? scores.per_entity.cols() : 0;
  if (thresholds.per_entity.size() != K) throw ShapeError("classify: threshold arity mismatch");
  Verdicts v;
  v.window.resize(N);
  v.culprit = Tensor({N, K});
  for (std::size_t i = 0; i < N; ++i) {
    v.window[i] = scores.score[i] > thresholds.global ? 1 : 0;
    for (std::size_t k = 0; k < K; ++k)
      v.culprit.at(i, k) = scores.per_entity.at(i, k) > thresholds.per_entity[k] ? 1.0 : 0.0;
  }
  return v;
}

// ---- artifacts ----

inline void write_scores_csv(const std::string& path, const ScoreSeries& scores,
                             const Verdicts& verdicts, const std::vector<std::string>& entity_names,
                             const nlohmann::json& config_echo) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write scores file: " + path);
  out << "# config: " << config_echo.dump() << "\n";
  out << "window_start,window_end,score,label,verdict";
  for (const auto& name : entity_names) out << ",score_" << name;
  out << "\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out << scores.window_starts[i] << "," << scores.window_starts[i] + scores.M << ","
        << scores.score[i] << "," << scores.labels[i] << "," << verdicts.window[i];
    for (std::size_t k = 0; k < entity_names.size(); ++k) out << "," << scores.per_entity.at(i, k);
    out << "\n";
  }
}

inline void write_thresholds_json(const std::string& path, const ThresholdSet& thresholds,
                                  const std::vector<std::string>& entity_names,
                                  const nlohmann::json& config_echo) {
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["config"] = config_echo;
  j["global_threshold"] = thresholds.global;
  nlohmann::json per = nlohmann::json::object();
  nlohmann::json lam = nlohmann::json::object();
  for (std::size_t k = 0; k < entity_names.size(); ++k) {
    per[entity_names[k]] = thresholds.per_entity[k];
    lam[entity_names[k]] = thresholds.lambda[k];
  }
  j["entity_thresholds"] = per;
  j["lambda"] = lam;
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write thresholds file: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace mtgflow
