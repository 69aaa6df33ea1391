#pragma once

#include <cmath>

#include "mtgflow/rng.hpp"
#include "mtgflow/tape.hpp"

namespace mtgflow {

struct AttentionParams {
  Tensor w_query;  // {M, M}
  Tensor w_key;    // {M, M}
  double dropout_rate = 0.2;
};

inline AttentionParams init_attention(std::size_t M, double dropout_rate, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(M));
  AttentionParams p;
  p.w_query = rng.uniform_tensor({M, M}, -bound, bound);
  p.w_key = rng.uniform_tensor({M, M}, -bound, bound);
  p.dropout_rate = dropout_rate;
  return p;
}

// Row-stochastic attention matrix over entities for one window.
struct AdjacencyMatrix {
  Tensor a;  // {K, K}
  std::size_t window_index = 0;
};

// e_ij = (x_i Wq) . (x_j Wk) / sqrt(M) for a window x {K, M}.
inline Var pairwise_scores_node(Tape& t, Var x, Var w_query, Var w_key) {
  const Tensor& xv = t.value(x);
  if (xv.ndim() != 2) throw ShapeError("pairwise_scores: window must be {K, M}");
  std::size_t M = xv.cols();
  Var q = t.matmul(x, w_query);
  Var k = t.matmul(x, w_key);
  return t.scale(t.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(M)));
}

// Row softmax; in training mode inverted dropout is applied to the
// normalized weights (scaled by 1/(1-rate), rows not renormalized). Eval
// mode is deterministic and exactly row-stochastic.
inline Var attention_node(Tape& t, Var scores, bool training, double rate, Rng* rng) {
  Var a = t.softmax_rows(scores);
  if (training && rate > 0.0) {
    if (!rng) throw ConfigError("attention dropout requires an RNG in training mode");
    const Tensor& av = t.value(a);
    Tensor mask(av.shape());
    double keep = 1.0 - rate;
    for (std::size_t i = 0; i < mask.numel(); ++i)
      mask[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
    a = t.mul(a, t.constant(std::move(mask)));
  }
  return a;
}

inline Tensor pairwise_scores(const Tensor& x_window, const AttentionParams& params) {
  if (x_window.ndim() != 2 || params.w_query.rows() != x_window.cols())
    throw ShapeError("pairwise_scores: window " + shape_str(x_window.shape()) +
                     " vs weights " + shape_str(params.w_query.shape()));
  Tape t;
  return t.value(pairwise_scores_node(t, t.constant(x_window), t.constant(params.w_query),
                                      t.constant(params.w_key)));
}

inline AdjacencyMatrix attention_adjacency(const Tensor& scores, bool training, double rate,
                                           Rng* rng, std::size_t window_index = 0) {
  Tape t;
  Tensor a = t.value(attention_node(t, t.constant(scores), training, rate, rng));
  return AdjacencyMatrix{std::move(a), window_index};
}

}  // namespace mtgflow
