#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mtgflow/tensor.hpp"

namespace mtgflow {

// Reverse-mode autodiff over Tensor values. A Tape is an append-only record
// of one forward computation; creation order is a topological order, so the
// backward sweep visits each node exactly once in reverse. Tapes are
// single-threaded and single-shot: build, backward once, discard.
class Tape {
 public:
  struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
  };

  Var constant(Tensor v) { return push(std::move(v), false, nullptr); }

  // Grad-tracked input (parameter or probe point).
  Var leaf(Tensor v) { return push(std::move(v), true, nullptr); }

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }
  const Tensor& grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.numel() == 0) throw NumericError("gradient not computed; run backward first");
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // When enabled, every op verifies its output is finite and names itself
  // on failure.
  void set_finite_checks(bool on) { finite_checks_ = on; }

  // ---- arithmetic ----

  Var add(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    require_same_shape(va, vb, "add");
    Tensor out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return push_op("add", std::move(out), {a, b}, [this, a, b](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      accumulate(a, g);
      accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    require_same_shape(va, vb, "sub");
    Tensor out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    return push_op("sub", std::move(out), {a, b}, [this, a, b](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      accumulate(a, g);
      Tensor ng = g;
      for (std::size_t i = 0; i < ng.numel(); ++i) ng[i] = -ng[i];
      accumulate(b, ng);
    });
  }

  Var mul(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    require_same_shape(va, vb, "mul");
    Tensor out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return push_op("mul", std::move(out), {a, b}, [this, a, b](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      const Tensor &va = value(a), &vb = value(b);
      Tensor ga = g, gb = g;
      for (std::size_t i = 0; i < g.numel(); ++i) {
        ga[i] *= vb[i];
        gb[i] *= va[i];
      }
      accumulate(a, ga);
      accumulate(b, gb);
    });
  }

  // mat {r,c} + rowvec {c}, broadcast over rows (bias add).
  Var add_rows(Var m, Var rowvec) {
    const Tensor &vm = value(m), &vr = value(rowvec);
    if (vm.ndim() != 2 || vr.ndim() != 1 || vm.cols() != vr.numel())
      throw ShapeError("add_rows: " + shape_str(vm.shape()) + " + " + shape_str(vr.shape()));
    Tensor out = vm;
    for (std::size_t r = 0; r < vm.rows(); ++r)
      for (std::size_t c = 0; c < vm.cols(); ++c) out.at(r, c) += vr[c];
    return push_op("add_rows", std::move(out), {m, rowvec}, [this, m, rowvec](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      accumulate(m, g);
      Tensor gr(value(rowvec).shape());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g.at(r, c);
      accumulate(rowvec, gr);
    });
  }

  Var scale(Var a, double s) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return push_op("scale", std::move(out), {a}, [this, a, s](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= s;
      accumulate(a, ga);
    });
  }

  Var add_const(Var a, double c) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c;
    return push_op("add_const", std::move(out), {a},
                   [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) { accumulate(a, g); });
  }

  Var matmul(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.cols() != vb.rows())
      throw ShapeError("matmul: " + shape_str(va.shape()) + " * " + shape_str(vb.shape()));
    Tensor out = mm(va, vb);
    return push_op("matmul", std::move(out), {a, b}, [this, a, b](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      accumulate(a, mm_nt(g, value(b)));  // dA = g * B^T
      accumulate(b, mm_tn(value(a), g));  // dB = A^T * g
    });
  }

  // a {m,k} * b^T with b {n,k} -> {m,n}
  Var matmul_nt(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.cols() != vb.cols())
      throw ShapeError("matmul_nt: " + shape_str(va.shape()) + " * " + shape_str(vb.shape()) + "^T");
    Tensor out = mm_nt(va, vb);
    return push_op("matmul_nt", std::move(out), {a, b}, [this, a, b](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      accumulate(a, mm(g, value(b)));     // dA = g * B
      accumulate(b, mm_tn(g, value(a)));  // dB = g^T * A
    });
  }

  // ---- elementwise nonlinearities ----

  Var exp(Var a) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    return push_op("exp", std::move(out), {a}, [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      const Tensor& y = out_v;
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= y[i];
      accumulate(a, ga);
    });
  }

  Var log(Var a) {
    const Tensor& va = value(a);
    Tensor out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) {
      if (!(va[i] > 0.0)) throw NumericError("log: non-positive input " + std::to_string(va[i]));
      out[i] = std::log(va[i]);
    }
    return push_op("log", std::move(out), {a}, [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      const Tensor& x = value(a);
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] /= x[i];
      accumulate(a, ga);
    });
  }

  Var tanh(Var a) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
    return push_op("tanh", std::move(out), {a}, [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      const Tensor& y = out_v;
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= 1.0 - y[i] * y[i];
      accumulate(a, ga);
    });
  }

  Var sigmoid(Var a) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(out[i]);
    return push_op("sigmoid", std::move(out), {a}, [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      const Tensor& y = out_v;
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= y[i] * (1.0 - y[i]);
      accumulate(a, ga);
    });
  }

  Var relu(Var a) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return push_op("relu", std::move(out), {a}, [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      const Tensor& x = value(a);
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i)
        if (x[i] <= 0.0) ga[i] = 0.0;
      accumulate(a, ga);
    });
  }

  // Subgradient zero outside [lo, hi].
  Var clamp(Var a, double lo, double hi) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
    return push_op("clamp", std::move(out), {a}, [this, a, lo, hi](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      const Tensor& x = value(a);
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i)
        if (x[i] < lo || x[i] > hi) ga[i] = 0.0;
      accumulate(a, ga);
    });
  }

  // Softmax over the last axis; a 1-D input is treated as a single row.
  Var softmax_rows(Var a) {
    const Tensor& va = value(a);
    std::size_t nrows = va.ndim() == 2 ? va.rows() : 1;
    std::size_t ncols = va.ndim() == 2 ? va.cols() : va.numel();
    Tensor out = va;
    for (std::size_t r = 0; r < nrows; ++r) {
      double* p = out.data() + r * ncols;
      double mx = p[0];
      for (std::size_t c = 1; c < ncols; ++c) mx = std::max(mx, p[c]);
      double sum = 0.0;
      for (std::size_t c = 0; c < ncols; ++c) {
        p[c] = std::exp(p[c] - mx);
        sum += p[c];
      }
      for (std::size_t c = 0; c < ncols; ++c) p[c] /= sum;
    }
    return push_op("softmax", std::move(out), {a}, [this, a, nrows, ncols](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      const Tensor& y = out_v;
      Tensor ga = g;
      for (std::size_t r = 0; r < nrows; ++r) {
        const double* yr = y.data() + r * ncols;
        double* gr = ga.data() + r * ncols;
        double dot = 0.0;
        for (std::size_t c = 0; c < ncols; ++c) dot += gr[c] * yr[c];
        for (std::size_t c = 0; c < ncols; ++c) gr[c] = yr[c] * (gr[c] - dot);
      }
      accumulate(a, ga);
    });
  }

  // ---- structural ops ----

  Var concat_rows(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.cols() != vb.cols())
      throw ShapeError("concat_rows: " + shape_str(va.shape()) + " | " + shape_str(vb.shape()));
    Tensor out({va.rows() + vb.rows(), va.cols()});
    std::copy(va.data(), va.data() + va.numel(), out.data());
    std::copy(vb.data(), vb.data() + vb.numel(), out.data() + va.numel());
    std::size_t na = va.numel();
    return push_op("concat_rows", std::move(out), {a, b}, [this, a, b, na](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor ga(value(a).shape()), gb(value(b).shape());
      std::copy(g.data(), g.data() + na, ga.data());
      std::copy(g.data() + na, g.data() + g.numel(), gb.data());
      accumulate(a, ga);
      accumulate(b, gb);
    });
  }

  Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
    const Tensor& va = value(a);
    if (va.ndim() != 2 || r0 >= r1 || r1 > va.rows())
      throw ShapeError("slice_rows: bad range on " + shape_str(va.shape()));
    std::size_t c = va.cols();
    Tensor out({r1 - r0, c});
    std::copy(va.data() + r0 * c, va.data() + r1 * c, out.data());
    return push_op("slice_rows", std::move(out), {a}, [this, a, r0, c](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor ga(value(a).shape());
      std::copy(g.data(), g.data() + g.numel(), ga.data() + r0 * c);
      accumulate(a, ga);
    });
  }

  Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Tensor& va = value(a);
    if (va.ndim() != 2 || c0 >= c1 || c1 > va.cols())
      throw ShapeError("slice_cols: bad range on " + shape_str(va.shape()));
    Tensor out({va.rows(), c1 - c0});
    for (std::size_t r = 0; r < va.rows(); ++r)
      for (std::size_t c = c0; c < c1; ++c) out.at(r, c - c0) = va.at(r, c);
    return push_op("slice_cols", std::move(out), {a}, [this, a, c0](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor ga(value(a).shape());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) ga.at(r, c + c0) = g.at(r, c);
      accumulate(a, ga);
    });
  }

  // Row r of a matrix as a 1-D vector.
  Var row(Var a, std::size_t r) {
    const Tensor& va = value(a);
    if (va.ndim() != 2 || r >= va.rows()) throw ShapeError("row: bad index");
    std::size_t c = va.cols();
    Tensor out({c});
    std::copy(va.data() + r * c, va.data() + (r + 1) * c, out.data());
    return push_op("row", std::move(out), {a}, [this, a, r, c](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor ga(value(a).shape());
      std::copy(g.data(), g.data() + c, ga.data() + r * c);
      accumulate(a, ga);
    });
  }

  Var reshape(Var a, Shape s) {
    Tensor out = value(a).reshaped(std::move(s));
    return push_op("reshape", std::move(out), {a}, [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      accumulate(a, g.reshaped(value(a).shape()));
    });
  }

  Var reverse(Var a) {  // 1-D coordinate reversal
    const Tensor& va = value(a);
    if (va.ndim() != 1) throw ShapeError("reverse: expects a vector");
    Tensor out = va;
    std::reverse(out.vec().begin(), out.vec().end());
    return push_op("reverse", std::move(out), {a}, [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor ga = g;
      std::reverse(ga.vec().begin(), ga.vec().end());
      accumulate(a, ga);
    });
  }

  Var reverse_rows(Var a) {
    const Tensor& va = value(a);
    if (va.ndim() != 2) throw ShapeError("reverse_rows: expects a matrix");
    std::size_t r = va.rows(), c = va.cols();
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i)
      std::copy(va.data() + i * c, va.data() + (i + 1) * c, out.data() + (r - 1 - i) * c);
    return push_op("reverse_rows", std::move(out), {a}, [this, a, r, c](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor ga(value(a).shape());
      for (std::size_t i = 0; i < r; ++i)
        std::copy(g.data() + i * c, g.data() + (i + 1) * c, ga.data() + (r - 1 - i) * c);
      accumulate(a, ga);
    });
  }

  // ---- reductions ----

  Var sum(Var a) {
    double s = 0.0;
    const Tensor& va = value(a);
    for (std::size_t i = 0; i < va.numel(); ++i) s += va[i];
    return push_op("sum", Tensor::scalar(s), {a}, [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor ga(value(a).shape());
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = g[0];
      accumulate(a, ga);
    });
  }

  Var mean(Var a) {
    const Tensor& va = value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < va.numel(); ++i) s += va[i];
    double inv = 1.0 / static_cast<double>(va.numel());
    return push_op("mean", Tensor::scalar(s * inv), {a}, [this, a, inv](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor ga(value(a).shape());
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = g[0] * inv;
      accumulate(a, ga);
    });
  }

  // Squared L2 norm: sum of squares of all elements.
  Var sumsq(Var a) {
    const Tensor& va = value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < va.numel(); ++i) s += va[i] * va[i];
    return push_op("sumsq", Tensor::scalar(s), {a}, [this, a](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      const Tensor& x = value(a);
      Tensor ga(x.shape());
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = 2.0 * x[i] * g[0];
      accumulate(a, ga);
    });
  }

  // ---- fused model ops ----

  // Per-timestep graph mixing: rows of h are (entity, time) pairs laid out
  // k*M + t; out[k,t] = sum_j adj[k,j] * h[j,t].
  Var graph_mix(Var adj, Var h, std::size_t K, std::size_t M) {
    const Tensor &A = value(adj), &H = value(h);
    if (A.ndim() != 2 || A.rows() != K || A.cols() != K || H.ndim() != 2 || H.rows() != K * M)
      throw ShapeError("graph_mix: adj " + shape_str(A.shape()) + ", h " + shape_str(H.shape()));
    std::size_t D = H.cols();
    Tensor out({K * M, D});
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < K; ++j) {
        double a = A.at(k, j);
        if (a == 0.0) continue;
        for (std::size_t t = 0; t < M; ++t) {
          const double* src = H.data() + (j * M + t) * D;
          double* dst = out.data() + (k * M + t) * D;
          for (std::size_t d = 0; d < D; ++d) dst[d] += a * src[d];
        }
      }
    return push_op("graph_mix", std::move(out), {adj, h},
                   [this, adj, h, K, M, D](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
                     const Tensor &A = value(adj), &H = value(h);
                     Tensor gA({K, K}), gH({K * M, D});
                     for (std::size_t k = 0; k < K; ++k)
                       for (std::size_t j = 0; j < K; ++j) {
                         double acc = 0.0;
                         double a = A.at(k, j);
                         for (std::size_t t = 0; t < M; ++t) {
                           const double* gr = g.data() + (k * M + t) * D;
                           const double* hr = H.data() + (j * M + t) * D;
                           double* gh = gH.data() + (j * M + t) * D;
                           for (std::size_t d = 0; d < D; ++d) {
                             acc += gr[d] * hr[d];
                             gh[d] += a * gr[d];
                           }
                         }
                         gA.at(k, j) = acc;
                       }
                     accumulate(adj, gA);
                     accumulate(h, gH);
                   });
  }

  // One-step history: out[k,t] = h[k,t-1], zeros at t = 0.
  Var time_shift(Var h, std::size_t K, std::size_t M) {
    const Tensor& H = value(h);
    if (H.ndim() != 2 || H.rows() != K * M) throw ShapeError("time_shift: h " + shape_str(H.shape()));
    std::size_t D = H.cols();
    Tensor out({K * M, D});
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 1; t < M; ++t)
        std::copy(H.data() + (k * M + t - 1) * D, H.data() + (k * M + t) * D,
                  out.data() + (k * M + t) * D);
    return push_op("time_shift", std::move(out), {h}, [this, h, K, M, D](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
      Tensor gH({K * M, D});
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t t = 1; t < M; ++t) {
          const double* gr = g.data() + (k * M + t) * D;
          double* dst = gH.data() + (k * M + t - 1) * D;
          for (std::size_t d = 0; d < D; ++d) dst[d] += gr[d];
        }
      accumulate(h, gH);
    });
  }

  // Single-layer LSTM over each entity's scalar series with shared weights.
  // x {K,M}; w_ih {4H}; w_hh {4H,H}; bias {4H}; output {K*M, H} with rows
  // k*M + t. Gate order i, f, g, o; zero initial state.
  Var lstm_seq(Var x, Var w_ih, Var w_hh, Var bias, std::size_t hidden) {
    const Tensor &X = value(x), &Wi = value(w_ih), &Wh = value(w_hh), &B = value(bias);
    std::size_t H = hidden;
    if (X.ndim() != 2 || Wi.numel() != 4 * H || Wh.ndim() != 2 || Wh.rows() != 4 * H ||
        Wh.cols() != H || B.numel() != 4 * H)
      throw ShapeError("lstm_seq: bad parameter shapes for hidden=" + std::to_string(H));
    std::size_t K = X.rows(), M = X.cols();

    auto saved = std::make_shared<LstmSaved>();
    saved->gates = Tensor({K * M, 4 * H});
    saved->cell = Tensor({K * M, H});
    saved->tanh_cell = Tensor({K * M, H});
    Tensor out({K * M, H});

    std::vector<double> pre(4 * H);
    for (std::size_t k = 0; k < K; ++k) {
      const double* h_prev = nullptr;  // null means zero state
      const double* c_prev = nullptr;
      for (std::size_t t = 0; t < M; ++t) {
        double xv = X.at(k, t);
        for (std::size_t r = 0; r < 4 * H; ++r) pre[r] = Wi[r] * xv + B[r];
        if (h_prev)
          for (std::size_t r = 0; r < 4 * H; ++r) {
            const double* wr = Wh.data() + r * H;
            double acc = 0.0;
            for (std::size_t d = 0; d < H; ++d) acc += wr[d] * h_prev[d];
            pre[r] += acc;
          }
        std::size_t rowi = k * M + t;
        double* gate = saved->gates.data() + rowi * 4 * H;
        double* cell = saved->cell.data() + rowi * H;
        double* tc = saved->tanh_cell.data() + rowi * H;
        double* hrow = out.data() + rowi * H;
        for (std::size_t d = 0; d < H; ++d) {
          double ig = stable_sigmoid(pre[d]);
          double fg = stable_sigmoid(pre[H + d]);
          double gg = std::tanh(pre[2 * H + d]);
          double og = stable_sigmoid(pre[3 * H + d]);
          double c = ig * gg + (c_prev ? fg * c_prev[d] : 0.0);
          gate[d] = ig;
          gate[H + d] = fg;
          gate[2 * H + d] = gg;
          gate[3 * H + d] = og;
          cell[d] = c;
          tc[d] = std::tanh(c);
          hrow[d] = og * tc[d];
        }
        h_prev = hrow;
        c_prev = cell;
      }
    }

    return push_op(
        "lstm_seq", std::move(out), {x, w_ih, w_hh, bias},
        [this, x, w_ih, w_hh, bias, saved, K, M, H](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
          const Tensor &X = value(x), &Wi = value(w_ih), &Wh = value(w_hh);
          const Tensor& out = out_v;
          Tensor gX({K, M}), gWi({4 * H}), gWh({4 * H, H}), gB({4 * H});
          std::vector<double> dh(H), dc(H), da(4 * H);
          for (std::size_t k = 0; k < K; ++k) {
            std::fill(dh.begin(), dh.end(), 0.0);
            std::fill(dc.begin(), dc.end(), 0.0);
            for (std::size_t t = M; t-- > 0;) {
              std::size_t rowi = k * M + t;
              const double* gate = saved->gates.data() + rowi * 4 * H;
              const double* cell = saved->cell.data() + rowi * H;
              const double* tc = saved->tanh_cell.data() + rowi * H;
              const double* c_prev = t > 0 ? saved->cell.data() + (rowi - 1) * H : nullptr;
              const double* h_prev = t > 0 ? out.data() + (rowi - 1) * H : nullptr;
              const double* gout = g.data() + rowi * H;
              (void)cell;
              for (std::size_t d = 0; d < H; ++d) {
                double dhd = dh[d] + gout[d];
                double ig = gate[d], fg = gate[H + d], gg = gate[2 * H + d], og = gate[3 * H + d];
                double dcd = dc[d] + dhd * og * (1.0 - tc[d] * tc[d]);
                da[d] = dcd * gg * ig * (1.0 - ig);
                da[H + d] = (c_prev ? dcd * c_prev[d] : 0.0) * fg * (1.0 - fg);
                da[2 * H + d] = dcd * ig * (1.0 - gg * gg);
                da[3 * H + d] = dhd * tc[d] * og * (1.0 - og);
                dc[d] = dcd * fg;
              }
              double xv = X.at(k, t);
              double dx = 0.0;
              std::fill(dh.begin(), dh.end(), 0.0);
              for (std::size_t r = 0; r < 4 * H; ++r) {
                double dar = da[r];
                gWi[r] += dar * xv;
                gB[r] += dar;
                dx += dar * Wi[r];
                if (h_prev) {
                  const double* wr = Wh.data() + r * H;
                  double* gwr = gWh.data() + r * H;
                  for (std::size_t d = 0; d < H; ++d) {
                    gwr[d] += dar * h_prev[d];
                    dh[d] += dar * wr[d];
                  }
                }
              }
              gX.at(k, t) = dx;
            }
          }
          accumulate(x, gX);
          accumulate(w_ih, gWi);
          accumulate(w_hh, gWh);
          accumulate(bias, gB);
        });
  }

  // Exclusive prefix of per-coordinate contributions: x {M}, w {M,F},
  // out[i,:] = sum_{j<i} x[j] * w[j,:]. This is the masked input path of the
  // autoregressive conditioner (coordinate i sees only x_{<i}).
  Var masked_prefix_linear(Var x, Var w) {
    const Tensor &X = value(x), &W = value(w);
    if (X.ndim() != 1 || W.ndim() != 2 || W.rows() != X.numel())
      throw ShapeError("masked_prefix_linear: x " + shape_str(X.shape()) + ", w " +
                       shape_str(W.shape()));
    std::size_t M = X.numel(), F = W.cols();
    Tensor out({M, F});
    std::vector<double> acc(F, 0.0);
    for (std::size_t i = 0; i < M; ++i) {
      double* dst = out.data() + i * F;
      std::copy(acc.begin(), acc.end(), dst);
      const double* wr = W.data() + i * F;
      for (std::size_t f = 0; f < F; ++f) acc[f] += X[i] * wr[f];
    }
    return push_op("masked_prefix_linear", std::move(out), {x, w},
                   [this, x, w, M, F](const Tensor& g, [[maybe_unused]] const Tensor& out_v) {
                     const Tensor &X = value(x), &W = value(w);
                     Tensor gX({M}), gW({M, F});
                     std::vector<double> suffix(F, 0.0);  // sum of g rows > j
                     for (std::size_t j = M; j-- > 0;) {
                       const double* wr = W.data() + j * F;
                       double* gwr = gW.data() + j * F;
                       double dx = 0.0;
                       for (std::size_t f = 0; f < F; ++f) {
                         dx += suffix[f] * wr[f];
                         gwr[f] = suffix[f] * X[j];
                       }
                       gX[j] = dx;
                       const double* gr = g.data() + j * F;
                       for (std::size_t f = 0; f < F; ++f) suffix[f] += gr[f];
                     }
                     accumulate(x, gX);
                     accumulate(w, gW);
                   });
  }

  // ---- backward ----

  void backward(Var root, double seed = 1.0) {
    const Tensor& rv = value(root);
    if (rv.numel() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(rv.shape()));
    if (backward_done_) throw NumericError("backward: tape already swept");
    backward_done_ = true;
    for (auto& n : nodes_)
      if (n.needs_grad) n.grad = Tensor(n.value.shape());
    Node& r = nodes_[check(root)];
    if (!r.needs_grad) return;  // nothing reachable requires gradients
    r.grad[0] = seed;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.back && n.needs_grad) n.back(n.grad, n.value);
    }
  }

 private:
  struct LstmSaved {
    Tensor gates;      // {K*M, 4H}: i, f, g, o
    Tensor cell;       // {K*M, H}
    Tensor tanh_cell;  // {K*M, H}
  };

  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(const Tensor&, const Tensor&)> back;  // (this node's grad, value)
    bool needs_grad = false;
  };

  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  }

  static Tensor mm(const Tensor& a, const Tensor& b) {
    std::size_t m = a.rows(), kk = a.cols(), n = b.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      double* dst = out.data() + i * n;
      const double* ar = a.data() + i * kk;
      for (std::size_t k = 0; k < kk; ++k) {
        double av = ar[k];
        if (av == 0.0) continue;
        const double* br = b.data() + k * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += av * br[j];
      }
    }
    return out;
  }

  static Tensor mm_nt(const Tensor& a, const Tensor& b) {  // a * b^T
    std::size_t m = a.rows(), kk = a.cols(), n = b.rows();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      const double* ar = a.data() + i * kk;
      double* dst = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* br = b.data() + j * kk;
        double acc = 0.0;
        for (std::size_t k = 0; k < kk; ++k) acc += ar[k] * br[k];
        dst[j] = acc;
      }
    }
    return out;
  }

  static Tensor mm_tn(const Tensor& a, const Tensor& b) {  // a^T * b
    std::size_t m = a.cols(), kk = a.rows(), n = b.cols();
    Tensor out({m, n});
    for (std::size_t k = 0; k < kk; ++k) {
      const double* ar = a.data() + k * m;
      const double* br = b.data() + k * n;
      for (std::size_t i = 0; i < m; ++i) {
        double av = ar[i];
        if (av == 0.0) continue;
        double* dst = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += av * br[j];
      }
    }
    return out;
  }

  int check(Var v) const {
    if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
      throw ShapeError("invalid tape variable");
    return v.idx;
  }

  Var push(Tensor v, bool needs_grad, std::function<void(const Tensor&, const Tensor&)> back) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  Var push_op(const char* name, Tensor out, std::initializer_list<Var> parents,
              std::function<void(const Tensor&, const Tensor&)> back) {
    if (finite_checks_ && !all_finite(out))
      throw NumericError(std::string("non-finite value produced by op '") + name + "'");
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_[check(p)].needs_grad;
    return push(std::move(out), needs, needs ? std::move(back) : nullptr);
  }

  void accumulate(Var v, const Tensor& g) {
    Node& n = nodes_[check(v)];
    if (!n.needs_grad) return;
    for (std::size_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
  }

  std::vector<Node> nodes_;
  bool finite_checks_ = false;
  bool backward_done_ = false;
};

using Var = Tape::Var;

}  // namespace mtgflow
