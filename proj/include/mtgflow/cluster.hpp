#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mtgflow/dataset.hpp"
#include "mtgflow/rng.hpp"

namespace mtgflow {

struct SbdResult {
  double distance;     // 1 - max normalized circular cross-correlation, in [0, 2]
  long best_shift;     // aligning shift, reported in (-L/2, L/2]
};

namespace detail {

inline std::vector<double> znorm(const std::vector<double>& x) {
  double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  double sd = std::sqrt(ss / static_cast<double>(x.size()));
  std::vector<double> out(x.size());
  if (sd < 1e-12) return out;  // caller handles the degenerate case
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - m) / sd;
  return out;
}

inline double l2(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

}  // namespace detail

// Shape-based distance between equal-length series, z-normalized internally.
// Correlation is searched over all circular shifts s:
//   ncc(s) = sum_t x~[(t+s) mod L] * y~[t] / (||x~|| ||y~||).
inline SbdResult sbd(const std::vector<double>& x, const std::vector<double>& y,
                     Warnings* warnings = nullptr) {
  if (x.size() != y.size() || x.empty()) throw ShapeError("sbd: series lengths must match");
  std::size_t L = x.size();
  auto xn = detail::znorm(x);
  auto yn = detail::znorm(y);
  double nx = detail::l2(xn), ny = detail::l2(yn);
  if (nx < 1e-12 || ny < 1e-12) {
    warn(warnings, "sbd: zero-variance series, distance defined as 1");
    return SbdResult{1.0, 0};
  }
  double best = -2.0;
  std::size_t best_s = 0;
  for (std::size_t s = 0; s < L; ++s) {
    double acc = 0.0;
    for (std::size_t t = 0; t < L; ++t) acc += xn[(t + s) % L] * yn[t];
    double ncc = acc / (nx * ny);
    if (ncc > best) {
      best = ncc;
      best_s = s;
    }
  }
  long shift = static_cast<long>(best_s);
  if (shift > static_cast<long>(L / 2)) shift -= static_cast<long>(L);
  return SbdResult{1.0 - best, shift};
}

struct ClusterAssignment {
  std::vector<std::size_t> assignment;        // entity -> cluster index
  std::size_t m = 0;                          // number of clusters
  std::vector<std::vector<double>> centroids; // m series of length L
  std::vector<double> objective_trace;        // within-cluster SBD sum per iteration
};

namespace detail {

inline std::vector<double> circular_shift(const std::vector<double>& x, long s) {
  std::size_t L = x.size();
  std::vector<double> out(L);
  long ls = ((s % static_cast<long>(L)) + static_cast<long>(L)) % static_cast<long>(L);
  for (std::size_t t = 0; t < L; ++t) out[t] = x[(t + static_cast<std::size_t>(ls)) % L];
  return out;
}

// Shape extraction: dominant eigenvector of Q S Q with S the sum of outer
// products of the aligned, z-normalized members and Q the centering
// projector. Computed matrix-free by power iteration (tolerance 1e-8).
inline std::vector<double> extract_shape(const std::vector<std::vector<double>>& aligned) {
  std::size_t L = aligned.front().size();
  auto center = [&](std::vector<double>& v) {
    double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(L);
    for (double& x : v) x -= m;
  };
  std::vector<std::vector<double>> y;
  for (const auto& a : aligned) y.push_back(znorm(a));

  auto apply = [&](const std::vector<double>& v) {
    std::vector<double> qv = v;
    center(qv);
    std::vector<double> sv(L, 0.0);
    for (const auto& yi : y) {
      double dot = 0.0;
      for (std::size_t t = 0; t < L; ++t) dot += yi[t] * qv[t];
      for (std::size_t t = 0; t < L; ++t) sv[t] += dot * yi[t];
    }
    center(sv);
    return sv;
  };

  // start from the centered mean shape; fall back to a fixed ramp if it
  // vanishes
  std::vector<double> v(L, 0.0);
  for (const auto& yi : y)
    for (std::size_t t = 0; t < L; ++t) v[t] += yi[t];
  center(v);
  if (l2(v) < 1e-12)
    for (std::size_t t = 0; t < L; ++t) v[t] = static_cast<double>(t + 1);
  double n = l2(v);
  for (double& x : v) x /= n;

  for (int iter = 0; iter < 300; ++iter) {
    std::vector<double> next = apply(v);
    double nn = l2(next);
    if (nn < 1e-14) break;  // S is (numerically) zero; keep current direction
    for (double& x : next) x /= nn;
    double diff = 0.0;
    for (std::size_t t = 0; t < L; ++t) diff = std::max(diff, std::abs(next[t] - v[t]));
    v = std::move(next);
    if (diff < 1e-8) break;
  }

  // sign: the centroid should correlate positively with the first member
  double d1 = 0.0, d2 = 0.0;
  for (std::size_t t = 0; t < L; ++t) {
    d1 += (y.front()[t] - v[t]) * (y.front()[t] - v[t]);
    d2 += (y.front()[t] + v[t]) * (y.front()[t] + v[t]);
  }
  if (d1 > d2)
    for (double& x : v) x = -x;
  return znorm(v);
}

inline double cluster_cost(const std::vector<std::vector<double>>& rows,
                           const std::vector<std::size_t>& members,
                           const std::vector<double>& centroid) {
  double c = 0.0;
  for (std::size_t k : members) c += sbd(rows[k], centroid).distance;
  return c;
}

}  // namespace detail

// KShape over the (z-normalized) training split: iterative refinement of a
// min-SBD assignment and shape-extracted centroids. Deterministic given the
// seed; centroid updates that would increase a cluster's within-cluster cost
// are rejected, so the objective trace is non-increasing. Final cluster
// indices are canonicalized by smallest member entity.
inline ClusterAssignment kshape(const TimeSeriesTable& table, std::size_t m, Rng rng,
                                std::size_t max_iter = 100) {
  std::size_t K = table.entities(), L = table.timesteps();
  if (m < 1 || m > K) throw ConfigError("cluster count must be in [1, K]");

  std::vector<std::vector<double>> rows(K, std::vector<double>(L));
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t t = 0; t < L; ++t) rows[k][t] = table.values.at(k, t);

  // farthest-first seeding: centroids start as actual entity series
  std::vector<std::size_t> seeds{rng.index(K)};
  while (seeds.size() < m) {
    double best = -1.0;
    std::size_t pick = 0;
    for (std::size_t k = 0; k < K; ++k) {
      double near = 1e300;
      for (std::size_t s : seeds) near = std::min(near, sbd(rows[k], rows[s]).distance);
      if (near > best) {
        best = near;
        pick = k;
      }
    }
    seeds.push_back(pick);
  }
  std::vector<std::vector<double>> centroids;
  for (std::size_t s : seeds) centroids.push_back(detail::znorm(rows[s]));

  ClusterAssignment out;
  out.m = m;
  out.assignment.assign(K, 0);

  std::vector<std::size_t> prev(K, SIZE_MAX);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    // assignment step
    for (std::size_t k = 0; k < K; ++k) {
      double best = 1e300;
      std::size_t arg = 0;
      for (std::size_t c = 0; c < m; ++c) {
        double d = sbd(rows[k], centroids[c]).distance;
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      out.assignment[k] = arg;
    }

    // empty clusters grab the entity farthest from its current centroid
    for (std::size_t c = 0; c < m; ++c) {
      bool empty = std::none_of(out.assignment.begin(), out.assignment.end(),
                                [&](std::size_t a) { return a == c; });
      if (!empty) continue;
      double far = -1.0;
      std::size_t pick = 0;
      for (std::size_t k = 0; k < K; ++k) {
        std::size_t cnt = static_cast<std::size_t>(
            std::count(out.assignment.begin(), out.assignment.end(), out.assignment[k]));
        if (cnt < 2) continue;  // do not empty another cluster
        double d = sbd(rows[k], centroids[out.assignment[k]]).distance;
        if (d > far) {
          far = d;
          pick = k;
        }
      }
      out.assignment[pick] = c;
      centroids[c] = detail::znorm(rows[pick]);
    }

    // guarded centroid refinement
    for (std::size_t c = 0; c < m; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t k = 0; k < K; ++k)
        if (out.assignment[k] == c) members.push_back(k);
      if (members.empty()) continue;
      std::vector<std::vector<double>> aligned;
      for (std::size_t k : members) {
        long s = sbd(rows[k], centroids[c]).best_shift;
        aligned.push_back(detail::circular_shift(rows[k], s));
      }
      auto candidate = detail::extract_shape(aligned);
      if (detail::cluster_cost(rows, members, candidate) <=
          detail::cluster_cost(rows, members, centroids[c]))
        centroids[c] = std::move(candidate);
    }

    double objective = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      objective += sbd(rows[k], centroids[out.assignment[k]]).distance;
    out.objective_trace.push_back(objective);

    if (out.assignment == prev) break;
    prev = out.assignment;
  }

  // canonical labels: clusters ordered by their smallest member entity
  std::vector<std::size_t> first_member(m, SIZE_MAX);
  for (std::size_t k = 0; k < K; ++k)
    first_member[out.assignment[k]] = std::min(first_member[out.assignment[k]], k);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return first_member[a] < first_member[b]; });
  std::vector<std::size_t> relabel(m);
  for (std::size_t i = 0; i < m; ++i) relabel[order[i]] = i;
  std::vector<std::vector<double>> reordered(m);
  for (std::size_t c = 0; c < m; ++c) reordered[relabel[c]] = std::move(centroids[c]);
  for (std::size_t k = 0; k < K; ++k) out.assignment[k] = relabel[out.assignment[k]];
  out.centroids = std::move(reordered);
  return out;
}

}  // namespace mtgflow
