#pragma once

#include <functional>

#include "mtgflow/optim.hpp"
#include "mtgflow/tape.hpp"

namespace mtgflow {

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// `build` constructs the scalar function on a fresh tape from the probe leaf.
inline double grad_check(const std::function<Var(Tape&, Var)>& build, const Tensor& point,
                         double eps = 1e-4) {
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.leaf(point);
    Var y = build(tape, x);
    tape.backward(y);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    Var x = tape.constant(p);
    return tape.value(build(tape, x))[0];
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    probe[i] = point[i] + eps;
    double hi = eval(probe);
    probe[i] = point[i] - eps;
    double lo = eval(probe);
    probe[i] = point[i];
    double numeric = (hi - lo) / (2.0 * eps);
    double denom = std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// Same check against a loss over a whole ParamStore. `loss` must fill the
// store's gradients when with_grad is true and must not mutate values.
inline double grad_check_params(ParamStore& store,
                                const std::function<double(ParamStore&, bool)>& loss,
                                double eps = 1e-4) {
  store.zero_grads();
  loss(store, true);
  std::map<std::string, Tensor> analytic;
  for (auto& [name, p] : store) analytic.emplace(name, p.grad);
  store.zero_grads();

  double worst = 0.0;
  for (auto& [name, p] : store) {
    const Tensor& ga = analytic.at(name);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      double keep = p.value[i];
      p.value[i] = keep + eps;
      double hi = loss(store, false);
      p.value[i] = keep - eps;
      double lo = loss(store, false);
      p.value[i] = keep;
      double numeric = (hi - lo) / (2.0 * eps);
      double denom = std::max(1.0, std::abs(ga[i]));
      worst = std::max(worst, std::abs(ga[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mtgflow
