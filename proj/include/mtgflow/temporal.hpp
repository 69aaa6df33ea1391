#pragma once

#include <cmath>

#include "mtgflow/rng.hpp"
#include "mtgflow/tape.hpp"

namespace mtgflow {

// Single-layer LSTM over each entity's scalar series, weights shared across
// entities and time, zero initial state per window.
struct RecurrentParams {
  Tensor w_ih;  // {4H}, gate order i, f, g, o
  Tensor w_hh;  // {4H, H}
  Tensor bias;  // {4H}
  std::size_t hidden = 0;
};

inline RecurrentParams init_lstm(std::size_t hidden, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  RecurrentParams p;
  p.w_ih = rng.uniform_tensor({4 * hidden}, -bound, bound);
  p.w_hh = rng.uniform_tensor({4 * hidden, hidden}, -bound, bound);
  p.bias = rng.uniform_tensor({4 * hidden}, -bound, bound);
  p.hidden = hidden;
  return p;
}

// Hidden states for a window x {K, M}: row k*M + t of the result is the
// state after consuming x_k at steps 0..t.
inline Tensor encode(const Tensor& x_window, const RecurrentParams& params) {
  Tape t;
  Var h = t.lstm_seq(t.constant(x_window), t.constant(params.w_ih), t.constant(params.w_hh),
                     t.constant(params.bias), params.hidden);
  return t.value(h);
}

}  // namespace mtgflow
