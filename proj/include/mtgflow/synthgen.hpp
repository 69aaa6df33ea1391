#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtgflow/dataset.hpp"
#include "mtgflow/rng.hpp"

namespace mtgflow {

// Entities in one group share a base frequency; per-entity phases are drawn
// from the family jitter.
struct GroupSpec {
  double freq = 0.01;  // cycles per timestep
  double phase = 0.0;
  double phase_jitter = 0.8;
  std::vector<std::size_t> members;
};

struct AnomalySpec {
  std::string type;  // "spike" | "level_shift" | "pattern_break"
  std::size_t count = 0;
  std::size_t duration = 10;
  double magnitude = 0.0;  // 0 = type default
};

struct SynthConfig {
  std::size_t K = 5;
  std::size_t L = 5000;
  std::vector<GroupSpec> groups;        // empty = one group covering all entities
  Tensor coupling;                      // {K,K}; empty = derived from groups
  double coupling_strength = 0.25;      // used when deriving the matrix
  std::vector<AnomalySpec> anomalies;   // events placed outside the training region
  double contamination = 0.0;           // anomalous fraction of the training region
  double train_frac = 0.6;
  double noise_sigma = 0.25;
  double ar_rho = 0.65;
  double ar_sigma = 0.2;
  std::uint64_t seed = 1;
};

struct AnomalyInterval {
  std::size_t start = 0;
  std::size_t len = 0;
  std::string type;
  std::size_t entity = 0;
};

struct SynthResult {
  TimeSeriesTable table;
  std::vector<AnomalyInterval> intervals;
  Tensor coupling;
  Warnings warnings;
};

namespace detail {

inline double default_magnitude(const std::string& type) {
  if (type == "spike") return 4.0;
  if (type == "level_shift") return 2.5;
  if (type == "pattern_break") return 3.0;  // frequency multiplier
  throw ConfigError("unknown anomaly type '" + type + "'");
}

}  // namespace detail

inline SynthResult generate(const SynthConfig& cfg) {
  if (cfg.K < 1 || cfg.L < 2) throw ConfigError("synth: need K >= 1 and L >= 2");
  if (cfg.contamination < 0.0 || cfg.contamination > 0.3)
    throw ConfigError("synth: contamination must lie in [0, 0.3]");
  for (const auto& a : cfg.anomalies) detail::default_magnitude(a.type);  // validates types

  SynthResult out;
  Rng root(cfg.seed);

  std::vector<GroupSpec> groups = cfg.groups;
  if (groups.empty()) {
    GroupSpec g;
    g.freq = 0.011;
    for (std::size_t k = 0; k < cfg.K; ++k) g.members.push_back(k);
    groups.push_back(g);
  }
  std::vector<long> group_of(cfg.K, -1);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t k : groups[g].members) {
      if (k >= cfg.K) throw ConfigError("synth: group member out of range");
      if (group_of[k] >= 0) throw ConfigError("synth: entity in two groups");
      group_of[k] = static_cast<long>(g);
    }
  for (std::size_t k = 0; k < cfg.K; ++k)
    if (group_of[k] < 0) throw ConfigError("synth: entity " + std::to_string(k) + " has no group");

  Tensor coupling = cfg.coupling;
  if (coupling.numel() == 0) {
    coupling = Tensor({cfg.K, cfg.K});
    for (std::size_t a = 0; a < cfg.K; ++a)
      for (std::size_t b = 0; b < cfg.K; ++b)
        if (a != b && group_of[a] == group_of[b]) coupling.at(a, b) = cfg.coupling_strength;
  } else if (coupling.ndim() != 2 || coupling.rows() != cfg.K || coupling.cols() != cfg.K) {
    throw ConfigError("synth: coupling matrix must be K x K");
  }

  // per-entity phase and intrinsic (pre-coupling) signal
  std::vector<double> phase(cfg.K);
  for (std::size_t k = 0; k < cfg.K; ++k) {
    const GroupSpec& g = groups[static_cast<std::size_t>(group_of[k])];
    Rng pr = root.fork("phase", k);
    phase[k] = g.phase + pr.uniform(0.0, g.phase_jitter);
  }
  Tensor intrinsic({cfg.K, cfg.L});
  for (std::size_t k = 0; k < cfg.K; ++k) {
    const GroupSpec& g = groups[static_cast<std::size_t>(group_of[k])];
    Rng br = root.fork("base", k);
    double ar = 0.0;
    for (std::size_t t = 0; t < cfg.L; ++t) {
      ar = cfg.ar_rho * ar + cfg.ar_sigma * br.normal();
      intrinsic.at(k, t) =
          std::sin(2.0 * M_PI * g.freq * static_cast<double>(t) + phase[k]) + ar;
    }
  }

  TimeSeriesTable table;
  table.values = Tensor({cfg.K, cfg.L});
  table.labels.assign(cfg.L, 0);
  for (std::size_t k = 0; k < cfg.K; ++k) table.entity_names.push_back("e" + std::to_string(k));
  for (std::size_t k = 0; k < cfg.K; ++k) {
    Rng nr = root.fork("noise", k);
    for (std::size_t t = 0; t < cfg.L; ++t) {
      double v = intrinsic.at(k, t);
      for (std::size_t j = 0; j < cfg.K; ++j)
        if (j != k) v += coupling.at(k, j) * intrinsic.at(j, t);
      table.values.at(k, t) = v + cfg.noise_sigma * nr.normal();
    }
  }

  // ---- anomaly injection ----
  std::size_t train_end = static_cast<std::size_t>(
      std::floor(cfg.train_frac * static_cast<double>(cfg.L) + 1e-9));
  std::vector<char> taken(cfg.L, 0);
  Rng er = root.fork("events");

  auto place = [&](std::size_t region_lo, std::size_t region_hi, std::size_t len) -> long {
    if (region_hi <= region_lo || len == 0 || len > region_hi - region_lo) return -1;
    for (int attempt = 0; attempt < 200; ++attempt) {
      std::size_t start = region_lo + er.index(region_hi - region_lo - len + 1);
      bool clear = true;
      for (std::size_t t = start; t < start + len; ++t) clear = clear && !taken[t];
      if (clear) return static_cast<long>(start);
    }
    // fall back to an overlapping position; intervals merge in the labels
    warn(&out.warnings, "synth: overlapping anomaly intervals merged");
    return static_cast<long>(region_lo + er.index(region_hi - region_lo - len + 1));
  };

  auto apply = [&](const AnomalySpec& spec, std::size_t start, std::size_t len) {
    std::size_t entity = er.index(cfg.K);
    double mag = spec.magnitude != 0.0 ? spec.magnitude : detail::default_magnitude(spec.type);
    for (std::size_t t = start; t < start + len; ++t) {
      if (spec.type == "spike") {
        table.values.at(entity, t) += ((t - start) % 2 == 0 ? mag : -mag);
      } else if (spec.type == "level_shift") {
        table.values.at(entity, t) += mag;
      } else {  // pattern_break: the entity swaps to a mag-times-faster cycle
        const GroupSpec& g = groups[static_cast<std::size_t>(group_of[entity])];
        double td = static_cast<double>(t);
        table.values.at(entity, t) +=
            std::sin(2.0 * M_PI * g.freq * mag * td + phase[entity]) -
            std::sin(2.0 * M_PI * g.freq * td + phase[entity]);
      }
      table.labels[t] = 1;
      taken[t] = 1;
    }
    out.intervals.push_back(AnomalyInterval{start, len, spec.type, entity});
  };

  // configured events land outside the training region
  for (const auto& spec : cfg.anomalies)
    for (std::size_t c = 0; c < spec.count; ++c) {
      long start = place(train_end, cfg.L, spec.duration);
      if (start < 0) {
        warn(&out.warnings, "synth: no room for '" + spec.type + "' event outside training region");
        continue;
      }
      apply(spec, static_cast<std::size_t>(start), spec.duration);
    }

  // training-region events cycle the same specs until the contamination
  // target is hit exactly
  if (cfg.contamination > 0.0 && !cfg.anomalies.empty()) {
    std::size_t target = static_cast<std::size_t>(
        std::llround(cfg.contamination * static_cast<double>(train_end)));
    std::size_t placed = 0, spec_i = 0, guard = 0;
    while (placed < target && guard++ < 10000) {
      const AnomalySpec& spec = cfg.anomalies[spec_i % cfg.anomalies.size()];
      ++spec_i;
      std::size_t len = std::min(spec.duration, target - placed);
      long pos = place(0, train_end, len);
      if (pos < 0) break;
      std::size_t start = static_cast<std::size_t>(pos);
      // count only fresh labels toward the target
      std::size_t fresh = 0;
      for (std::size_t t = start; t < start + len; ++t) fresh += table.labels[t] ? 0 : 1;
      apply(spec, start, len);
      placed += fresh;
    }
  }

  std::sort(out.intervals.begin(), out.intervals.end(),
            [](const AnomalyInterval& a, const AnomalyInterval& b) { return a.start < b.start; });
  out.table = std::move(table);
  out.coupling = std::move(coupling);
  return out;
}

// ---- config and artifact IO ----

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
  };
  opt("K", c.K);
  opt("L", c.L);
  opt("coupling_strength", c.coupling_strength);
  opt("contamination", c.contamination);
  opt("train_frac", c.train_frac);
  opt("noise_sigma", c.noise_sigma);
  opt("ar_rho", c.ar_rho);
  opt("ar_sigma", c.ar_sigma);
  opt("seed", c.seed);
  if (j.contains("groups"))
    for (const auto& gj : j.at("groups")) {
      GroupSpec g;
      if (gj.contains("freq")) g.freq = gj.at("freq").get<double>();
      if (gj.contains("phase")) g.phase = gj.at("phase").get<double>();
      if (gj.contains("phase_jitter")) g.phase_jitter = gj.at("phase_jitter").get<double>();
      g.members = gj.at("members").get<std::vector<std::size_t>>();
      c.groups.push_back(std::move(g));
    }
  if (j.contains("coupling")) {
    auto rows = j.at("coupling").get<std::vector<std::vector<double>>>();
    Tensor m({rows.size(), rows.empty() ? 0 : rows.front().size()});
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t col = 0; col < rows[r].size(); ++col) m.at(r, col) = rows[r][col];
    c.coupling = std::move(m);
  }
  if (j.contains("anomalies"))
    for (const auto& aj : j.at("anomalies")) {
      AnomalySpec a;
      a.type = aj.at("type").get<std::string>();
      if (aj.contains("count")) a.count = aj.at("count").get<std::size_t>();
      if (aj.contains("duration")) a.duration = aj.at("duration").get<std::size_t>();
      if (aj.contains("magnitude")) a.magnitude = aj.at("magnitude").get<double>();
      c.anomalies.push_back(std::move(a));
    }
  return c;
}

inline nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : c.groups)
    groups.push_back({{"freq", g.freq},
                      {"phase", g.phase},
                      {"phase_jitter", g.phase_jitter},
                      {"members", g.members}});
  nlohmann::json anomalies = nlohmann::json::array();
  for (const auto& a : c.anomalies)
    anomalies.push_back({{"type", a.type},
                         {"count", a.count},
                         {"duration", a.duration},
                         {"magnitude", a.magnitude}});
  return nlohmann::json{{"K", c.K},
                        {"L", c.L},
                        {"groups", groups},
                        {"anomalies", anomalies},
                        {"coupling_strength", c.coupling_strength},
                        {"contamination", c.contamination},
                        {"train_frac", c.train_frac},
                        {"noise_sigma", c.noise_sigma},
                        {"ar_rho", c.ar_rho},
                        {"ar_sigma", c.ar_sigma},
                        {"seed", c.seed}};
}

inline void write_dataset_csv(const std::string& path, const TimeSeriesTable& table,
                              const nlohmann::json& config_echo) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write dataset file: " + path);
  out << "# config: " << config_echo.dump() << "\n";
  for (std::size_t k = 0; k < table.entities(); ++k) out << table.entity_names[k] << ",";
  out << "label\n";
  out << std::setprecision(17);
  for (std::size_t t = 0; t < table.timesteps(); ++t) {
    for (std::size_t k = 0; k < table.entities(); ++k) out << table.values.at(k, t) << ",";
    out << table.labels[t] << "\n";
  }
}

inline void write_ground_truth_json(const std::string& path, const SynthResult& result,
                                    const nlohmann::json& config_echo) {
  nlohmann::json intervals = nlohmann::json::array();
  for (const auto& iv : result.intervals)
    intervals.push_back({{"start", iv.start},
                         {"end", iv.start + iv.len},
                         {"type", iv.type},
                         {"entity", result.table.entity_names[iv.entity]}});
  nlohmann::json coupling = nlohmann::json::array();
  for (std::size_t r = 0; r < result.coupling.rows(); ++r) {
    std::vector<double> row(result.coupling.cols());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = result.coupling.at(r, c);
    coupling.push_back(row);
  }
  nlohmann::json j{{"format_version", kFormatVersion},
                   {"config", config_echo},
                   {"intervals", intervals},
                   {"coupling", coupling},
                   {"warnings", result.warnings}};
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write ground truth file: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace mtgflow
