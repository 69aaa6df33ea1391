#pragma once

#include "mtgflow/rng.hpp"
#include "mtgflow/tape.hpp"

namespace mtgflow {

// Fusion weights for the spatio-temporal condition
//   C_t = ReLU(A H_t W1 + H_{t-1} W2) W3
// with H_{t-1} zero at t = 0. W1 carries the graph-mixed states, W2 the
// entity's own history.
struct ConditionParams {
  Tensor w1;  // {H, C}
  Tensor w2;  // {H, C}
  Tensor w3;  // {C, C}
};

inline ConditionParams init_condition(std::size_t d_h, std::size_t d_c, Rng& rng) {
  double bh = 1.0 / std::sqrt(static_cast<double>(d_h));
  double bc = 1.0 / std::sqrt(static_cast<double>(d_c));
  ConditionParams p;
  p.w1 = rng.uniform_tensor({d_h, d_c}, -bh, bh);
  p.w2 = rng.uniform_tensor({d_h, d_c}, -bh, bh);
  p.w3 = rng.uniform_tensor({d_c, d_c}, -bc, bc);
  return p;
}

struct ConditionNodes {
  Var condition;  // {K*M, d_c}
  Var pre_w3;     // ReLU output, elementwise >= 0
};

// adj may be an invalid Var when use_graph is false; the W1 path is then
// dropped entirely (the graph-ablated configuration).
inline ConditionNodes condition_node(Tape& t, Var adj, Var h, Var w1, Var w2, Var w3,
                                     std::size_t K, std::size_t M, bool use_graph = true) {
  Var hist = t.matmul(t.time_shift(h, K, M), w2);
  Var pre = use_graph ? t.add(t.matmul(t.graph_mix(adj, h, K, M), w1), hist) : hist;
  Var act = t.relu(pre);
  return ConditionNodes{t.matmul(act, w3), act};
}

// Value-level evaluation for a single window; h rows are (entity, time)
// pairs laid out k*M + t, matching temporal::encode.
inline Tensor spatio_temporal_condition(const Tensor& adjacency, const Tensor& h,
                                        const ConditionParams& params, std::size_t K,
                                        std::size_t M) {
  Tape t;
  auto nodes = condition_node(t, t.constant(adjacency), t.constant(h), t.constant(params.w1),
                              t.constant(params.w2), t.constant(params.w3), K, M, true);
  return t.value(nodes.condition);
}

}  // namespace mtgflow
