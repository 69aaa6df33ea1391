#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mtgflow/tensor.hpp"

namespace mtgflow {

// K entities by L timesteps of readings plus per-timestep anomaly labels.
// Labels are carried for evaluation only; nothing in training reads them.
struct TimeSeriesTable {
  Tensor values;  // {K, L}
  std::vector<int> labels;
  std::vector<std::string> entity_names;
  std::optional<double> sample_period;

  std::size_t entities() const { return values.numel() ? values.rows() : 0; }
  std::size_t timesteps() const { return values.numel() ? values.cols() : 0; }
};

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // population (1/L) standard deviation
};

struct WindowBatch {
  std::vector<Tensor> windows;  // each {K, M}
  std::vector<std::size_t> window_starts;
  std::vector<int> window_labels;
  std::size_t M = 0;
  std::size_t S = 1;

  std::size_t size() const { return windows.size(); }
};

struct SplitSpec {
  double train = 0.6;
  double valid = 0.2;
  double test = 0.2;
};

struct SplitResult {
  TimeSeriesTable train, valid, test;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_cell(const std::string& cell, std::size_t row, const std::string& column) {
  const char* b = cell.data();
  const char* e = b + cell.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (*(e - 1) == ' ' || *(e - 1) == '\t')) --e;
  double v = 0.0;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e)
    throw ParseError("row " + std::to_string(row) + ", column '" + column +
                     "': cannot parse '" + cell + "' as a number");
  if (!std::isfinite(v))
    throw ParseError("row " + std::to_string(row) + ", column '" + column +
                     "': non-finite value '" + cell + "'");
  return v;
}

}  // namespace detail

// CSV contract: first (non-comment) row is the header, one column per entity,
// optional 0/1 label column, '.' decimal separator, UTF-8. Lines starting
// with '#' are skipped so artifacts can carry provenance comments.
// label_column: empty string means no label column (labels all zero);
// "auto" picks a column literally named "label" when present.
inline TimeSeriesTable load_csv(const std::string& path, const std::string& label_column = "") {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset file: " + path);

  std::string line;
  std::vector<std::string> header;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    header = detail::split_csv_line(line);
    break;
  }
  if (header.empty()) throw ParseError("empty input: " + path + " has no header row");

  std::string label_name = label_column;
  if (label_name == "auto") {
    label_name.clear();
    for (const auto& h : header)
      if (h == "label") label_name = "label";
  }

  long label_idx = -1;
  std::vector<std::size_t> entity_cols;
  TimeSeriesTable table;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (!label_name.empty() && header[i] == label_name) {
      if (label_idx >= 0) throw ParseError("duplicate label column '" + label_name + "'");
      label_idx = static_cast<long>(i);
    } else {
      entity_cols.push_back(i);
      table.entity_names.push_back(header[i]);
    }
  }
  if (!label_name.empty() && label_idx < 0)
    throw ConfigError("label column '" + label_name + "' not found in " + path);
  if (entity_cols.empty()) throw ParseError("no entity columns in " + path);

  std::vector<std::vector<double>> columns(entity_cols.size());
  std::vector<int> labels;
  std::size_t data_row = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    ++data_row;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("row " + std::to_string(data_row) + ": expected " +
                       std::to_string(header.size()) + " cells, got " +
                       std::to_string(cells.size()));
    for (std::size_t c = 0; c < entity_cols.size(); ++c)
      columns[c].push_back(detail::parse_cell(cells[entity_cols[c]], data_row, table.entity_names[c]));
    if (label_idx >= 0) {
      double v = detail::parse_cell(cells[static_cast<std::size_t>(label_idx)], data_row, label_name);
      labels.push_back(v != 0.0 ? 1 : 0);
    } else {
      labels.push_back(0);
    }
  }
  if (data_row == 0) throw ParseError("empty input: " + path + " has no data rows");

  std::size_t K = columns.size(), L = data_row;
  table.values = Tensor({K, L});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t t = 0; t < L; ++t) table.values.at(k, t) = columns[k][t];
  table.labels = std::move(labels);
  return table;
}

inline NormStats compute_norm_stats(const TimeSeriesTable& table) {
  std::size_t K = table.entities(), L = table.timesteps();
  if (L < 2) throw ConfigError("normalization needs at least 2 timesteps");
  NormStats stats;
  stats.mean.resize(K);
  stats.stddev.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    double m = 0.0;
    for (std::size_t t = 0; t < L; ++t) m += table.values.at(k, t);
    m /= static_cast<double>(L);
    double ss = 0.0;
    for (std::size_t t = 0; t < L; ++t) {
      double d = table.values.at(k, t) - m;
      ss += d * d;
    }
    stats.mean[k] = m;
    stats.stddev[k] = std::sqrt(ss / static_cast<double>(L));
  }
  return stats;
}

// Entities whose training-split deviation is below 1e-8 are dead channels:
// they pass through as all-zeros with a warning instead of failing the run.
inline TimeSeriesTable apply_norm(const TimeSeriesTable& table, const NormStats& stats,
                                  Warnings* warnings = nullptr) {
  std::size_t K = table.entities(), L = table.timesteps();
  if (stats.mean.size() != K) throw ShapeError("norm stats entity count mismatch");
  TimeSeriesTable out = table;
  for (std::size_t k = 0; k < K; ++k) {
    if (stats.stddev[k] < 1e-8) {
      for (std::size_t t = 0; t < L; ++t) out.values.at(k, t) = 0.0;
      warn(warnings, "entity '" + table.entity_names[k] + "' is constant; normalized to zeros");
      continue;
    }
    for (std::size_t t = 0; t < L; ++t)
      out.values.at(k, t) = (table.values.at(k, t) - stats.mean[k]) / stats.stddev[k];
  }
  return out;
}

inline TimeSeriesTable zscore_normalize(const TimeSeriesTable& table, Warnings* warnings = nullptr) {
  return apply_norm(table, compute_norm_stats(table), warnings);
}

// Sliding windows of size M with stride S; window i spans [i*S, i*S + M).
// A window is labeled anomalous iff any covered timestep is.
inline WindowBatch make_windows(const TimeSeriesTable& table, std::size_t M, std::size_t S,
                                Warnings* warnings = nullptr) {
  if (M < 1) throw ConfigError("window size must be at least 1");
  if (S < 1) throw ConfigError("stride must be at least 1");
  std::size_t K = table.entities(), L = table.timesteps();
  WindowBatch batch;
  batch.M = M;
  batch.S = S;
  if (M > L) {
    warn(warnings, "window size " + std::to_string(M) + " exceeds series length " +
                       std::to_string(L) + "; no windows produced");
    return batch;
  }
  std::size_t N = (L - M) / S + 1;
  batch.windows.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t start = i * S;
    Tensor w({K, M});
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < M; ++t) w.at(k, t) = table.values.at(k, start + t);
    int label = 0;
    for (std::size_t t = start; t < start + M; ++t) label |= table.labels[t];
    batch.windows.push_back(std::move(w));
    batch.window_starts.push_back(start);
    batch.window_labels.push_back(label);
  }
  return batch;
}

// Contiguous chronological partition; concatenating the pieces reproduces
// the input exactly.
inline SplitResult split(const TimeSeriesTable& table, const SplitSpec& spec) {
  if (spec.train < 0 || spec.valid < 0 || spec.test < 0)
    throw ConfigError("split fractions must be non-negative");
  double sum = spec.train + spec.valid + spec.test;
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1, got " + std::to_string(sum));

  std::size_t L = table.timesteps();
  auto cut = [&](double f) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(L) + 1e-9));
  };
  std::size_t n_train = cut(spec.train);
  std::size_t n_valid = cut(spec.train + spec.valid) - n_train;

  auto take = [&](std::size_t begin, std::size_t len) {
    TimeSeriesTable part;
    part.entity_names = table.entity_names;
    part.sample_period = table.sample_period;
    std::size_t K = table.entities();
    part.values = Tensor({K, len});
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < len; ++t) part.values.at(k, t) = table.values.at(k, begin + t);
    part.labels.assign(table.labels.begin() + static_cast<long>(begin),
                       table.labels.begin() + static_cast<long>(begin + len));
    return part;
  };

  SplitResult out;
  out.train = take(0, n_train);
  out.valid = take(n_train, n_valid);
  out.test = take(n_train + n_valid, L - n_train - n_valid);
  return out;
}

}  // namespace mtgflow
