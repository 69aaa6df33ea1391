#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "mtgflow/rng.hpp"
#include "mtgflow/tape.hpp"

namespace mtgflow {

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

// One masked autoregressive block. For coordinate i the conditioner sees the
// masked input prefix x_{<i} and that coordinate's condition row c_i:
//   hidden_i = ReLU(sum_{j<i} x_j * Wx[j,:] + c_i Wc + bh)
//   (mu_i, alpha_i) = hidden_i Wout + bout,  alpha clamped to [-clamp, clamp]
//   z_i = (x_i - mu_i) * exp(-alpha_i)
// so the Jacobian is triangular and log|det| = -sum_i alpha_i. Blocks with
// `reversed` set run the same recursion over flipped coordinates (and flipped
// condition rows) and flip back, which alternates the autoregressive order
// through the stack.
struct MafBlockParams {
  Tensor wx;    // {M, F}
  Tensor wc;    // {Dc, F}
  Tensor bh;    // {F}
  Tensor wout;  // {F, 2}: columns (mu, alpha); zero at init => identity flow
  Tensor bout;  // {2}
  bool reversed = false;
};

struct FlowStack {
  std::vector<MafBlockParams> blocks;
  std::size_t M = 0;
  std::size_t d_c = 0;
  std::size_t d_f = 0;
  double alpha_clamp = 7.0;
};

inline FlowStack init_flow(std::size_t M, std::size_t d_c, std::size_t d_f, std::size_t n_blocks,
                           Rng& rng) {
  if (n_blocks < 1) throw ConfigError("flow needs at least one block");
  FlowStack s;
  s.M = M;
  s.d_c = d_c;
  s.d_f = d_f;
  double bound = 1.0 / std::sqrt(static_cast<double>(M + d_c));
  for (std::size_t b = 0; b < n_blocks; ++b) {
    MafBlockParams p;
    p.wx = rng.uniform_tensor({M, d_f}, -bound, bound);
    p.wc = rng.uniform_tensor({d_c, d_f}, -bound, bound);
    p.bh = Tensor({d_f});
    p.wout = Tensor({d_f, 2});
    p.bout = Tensor({2});
    p.reversed = (b % 2) == 1;
    s.blocks.push_back(std::move(p));
  }
  return s;
}

struct MafBlockVars {
  Var wx, wc, bh, wout, bout;
  bool reversed = false;
};

struct FlowNodes {
  Var z;       // {M}
  Var logdet;  // {1}
};

// Conditioner outputs (mu, alpha) for one block given input x {M} and
// condition rows cond {M, Dc}. Exposed separately so tests can probe the
// autoregressive mask directly.
inline std::pair<Var, Var> maf_conditioner_node(Tape& t, Var x, Var cond, const MafBlockVars& p,
                                                double clamp) {
  Var hin = t.add(t.masked_prefix_linear(x, p.wx), t.matmul(cond, p.wc));
  Var hidden = t.relu(t.add_rows(hin, p.bh));
  Var out = t.add_rows(t.matmul(hidden, p.wout), p.bout);  // {M, 2}
  std::size_t M = t.value(x).numel();
  Var mu = t.reshape(t.slice_cols(out, 0, 1), Shape{M});
  Var alpha = t.clamp(t.reshape(t.slice_cols(out, 1, 2), Shape{M}), -clamp, clamp);
  return {mu, alpha};
}

inline FlowNodes maf_block_node(Tape& t, Var x, Var cond, const MafBlockVars& p, double clamp) {
  Var xb = p.reversed ? t.reverse(x) : x;
  Var cb = p.reversed ? t.reverse_rows(cond) : cond;
  auto [mu, alpha] = maf_conditioner_node(t, xb, cb, p, clamp);
  Var z = t.mul(t.sub(xb, mu), t.exp(t.scale(alpha, -1.0)));
  if (p.reversed) z = t.reverse(z);
  return FlowNodes{z, t.scale(t.sum(alpha), -1.0)};
}

inline FlowNodes flow_stack_node(Tape& t, Var x, Var cond, const std::vector<MafBlockVars>& blocks,
                                 double clamp) {
  Var cur = x;
  Var logdet;
  for (const auto& b : blocks) {
    FlowNodes n = maf_block_node(t, cur, cond, b, clamp);
    cur = n.z;
    logdet = logdet.valid() ? t.add(logdet, n.logdet) : n.logdet;
  }
  return FlowNodes{cur, logdet};
}

namespace detail {

inline std::vector<MafBlockVars> bind_blocks(Tape& t, const FlowStack& stack) {
  std::vector<MafBlockVars> vars;
  for (const auto& b : stack.blocks)
    vars.push_back(MafBlockVars{t.constant(b.wx), t.constant(b.wc), t.constant(b.bh),
                                t.constant(b.wout), t.constant(b.bout), b.reversed});
  return vars;
}

}  // namespace detail

// Data-to-latent transform: z = f(x | cond), plus log|det df/dx^T|.
inline std::pair<Tensor, double> forward_transform(const Tensor& x, const Tensor& cond,
                                                   const FlowStack& stack) {
  if (x.ndim() != 1 || x.numel() != stack.M || cond.ndim() != 2 || cond.rows() != stack.M ||
      cond.cols() != stack.d_c)
    throw ShapeError("forward_transform: x " + shape_str(x.shape()) + ", cond " +
                     shape_str(cond.shape()));
  Tape t;
  Var xv = t.constant(x);
  Var cv = t.constant(cond);
  auto blocks = detail::bind_blocks(t, stack);
  Var cur = xv;
  double logdet = 0.0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    FlowNodes n = maf_block_node(t, cur, cv, blocks[b], stack.alpha_clamp);
    if (!all_finite(t.value(n.z)))
      throw NumericError("non-finite flow output in block " + std::to_string(b));
    cur = n.z;
    logdet += t.value(n.logdet)[0];
  }
  return {t.value(cur), logdet};
}

// Sequential coordinate-by-coordinate inversion of the stack.
inline Tensor inverse_transform(const Tensor& z, const Tensor& cond, const FlowStack& stack) {
  if (z.ndim() != 1 || z.numel() != stack.M) throw ShapeError("inverse_transform: bad z shape");
  std::size_t M = stack.M, F = stack.d_f;
  Tensor cur = z;
  for (std::size_t bi = stack.blocks.size(); bi-- > 0;) {
    const MafBlockParams& p = stack.blocks[bi];
    Tensor zb = cur;
    Tensor cb = cond;
    if (p.reversed) {
      std::reverse(zb.vec().begin(), zb.vec().end());
      Tensor flipped({M, stack.d_c});
      for (std::size_t i = 0; i < M; ++i)
        std::copy(cond.data() + i * stack.d_c, cond.data() + (i + 1) * stack.d_c,
                  flipped.data() + (M - 1 - i) * stack.d_c);
      cb = std::move(flipped);
    }
    // cond projection is input-independent; precompute rows of cb*Wc + bh
    Tensor base({M, F});
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t f = 0; f < F; ++f) {
        double acc = p.bh[f];
        for (std::size_t d = 0; d < stack.d_c; ++d) acc += cb.at(i, d) * p.wc.at(d, f);
        base.at(i, f) = acc;
      }
    Tensor xb({M});
    std::vector<double> prefix(F, 0.0);
    for (std::size_t i = 0; i < M; ++i) {
      double mu = p.bout[0], alpha = p.bout[1];
      for (std::size_t f = 0; f < F; ++f) {
        double h = prefix[f] + base.at(i, f);
        if (h > 0.0) {
          mu += h * p.wout.at(f, 0);
          alpha += h * p.wout.at(f, 1);
        }
      }
      alpha = std::min(stack.alpha_clamp, std::max(-stack.alpha_clamp, alpha));
      xb[i] = zb[i] * std::exp(alpha) + mu;
      if (!std::isfinite(xb[i]))
        throw NumericError("non-finite inverse in block " + std::to_string(bi));
      for (std::size_t f = 0; f < F; ++f) prefix[f] += xb[i] * p.wx.at(i, f);
    }
    if (p.reversed) std::reverse(xb.vec().begin(), xb.vec().end());
    cur = std::move(xb);
  }
  return cur;
}

// log P(x | cond) against a N(target_mean, I) base:
//   -1/2 ||z - mu||^2 - (M/2) log(2*pi) + log|det|.
inline double log_prob(const Tensor& x, const Tensor& cond, const FlowStack& stack,
                       const Tensor& target_mean) {
  if (target_mean.numel() != stack.M) throw ShapeError("log_prob: target mean must have M entries");
  auto [z, logdet] = forward_transform(x, cond, stack);
  double ss = 0.0;
  for (std::size_t i = 0; i < stack.M; ++i) {
    double d = z[i] - target_mean[i];
    ss += d * d;
  }
  return -0.5 * ss - 0.5 * static_cast<double>(stack.M) * kLog2Pi + logdet;
}

// Base-distribution means. Each entity maps to a constant M-vector whose
// scalar is drawn once from N(0,1) at init and then frozen; in cluster mode
// entities of one cluster share a draw. Singleton clusters reproduce the
// per-entity bank exactly (same draw order).
struct TargetBank {
  std::vector<double> entity_scalar;  // resolved per entity
  std::size_t M = 0;

  Tensor mean_vector(std::size_t entity) const {
    return Tensor::full({M}, entity_scalar.at(entity));
  }
};

enum class TargetMode { kEntity, kCluster };

inline TargetBank init_targets(TargetMode mode, const std::vector<std::size_t>& assignments,
                               std::size_t K, std::size_t M, Rng rng) {
  TargetBank bank;
  bank.M = M;
  bank.entity_scalar.resize(K);
  if (mode == TargetMode::kEntity) {
    for (std::size_t k = 0; k < K; ++k) bank.entity_scalar[k] = rng.normal();
    return bank;
  }
  if (assignments.size() != K)
    throw ConfigError("cluster assignments must cover every entity (" +
                      std::to_string(assignments.size()) + " of " + std::to_string(K) + ")");
  std::size_t m = 0;
  for (std::size_t c : assignments) m = std::max(m, c + 1);
  std::vector<double> cluster_scalar(m);
  for (std::size_t c = 0; c < m; ++c) cluster_scalar[c] = rng.normal();
  for (std::size_t k = 0; k < K; ++k) bank.entity_scalar[k] = cluster_scalar[assignments[k]];
  return bank;
}

inline TargetBank zero_targets(std::size_t K, std::size_t M) {
  TargetBank bank;
  bank.M = M;
  bank.entity_scalar.assign(K, 0.0);
  return bank;
}

}  // namespace mtgflow
