#include <catch2/catch_amalgamated.hpp>

#include "mtgflow/temporal.hpp"

using namespace mtgflow;

TEST_CASE("zero input with zero parameters stays at the origin") {
  RecurrentParams p;
  p.hidden = 4;
  p.w_ih = Tensor({16});
  p.w_hh = Tensor({16, 4});
  p.bias = Tensor({16});
  Tensor x({2, 5});
  Tensor h = encode(x, p);
  for (std::size_t i = 0; i < h.numel(); ++i) REQUIRE(h[i] == 0.0);
}

TEST_CASE("identical entity rows produce identical hidden rows") {
  Rng rng(41);
  RecurrentParams p = init_lstm(6, rng);
  Tensor x({2, 7});
  for (std::size_t t = 0; t < 7; ++t) {
    double v = rng.normal();
    x.at(0, t) = v;
    x.at(1, t) = v;
  }
  Tensor h = encode(x, p);
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t d = 0; d < 6; ++d)
      REQUIRE(h.at(0 * 7 + t, d) == h.at(1 * 7 + t, d));
}

TEST_CASE("single step matches the hand-evaluated gate equations") {
  // hidden size 1: every weight is a scalar, so the cell can be evaluated
  // by hand: i=s(wi*x+bi), f=s(wf*x+bf), g=tanh(wg*x+bg), o=s(wo*x+bo),
  // c=i*g, h=o*tanh(c) at t=0 (zero state).
  RecurrentParams p;
  p.hidden = 1;
  p.w_ih = Tensor({4}, {0.3, -0.2, 0.7, 0.4});
  p.w_hh = Tensor({4, 1}, {0.11, 0.12, 0.13, 0.14});
  p.bias = Tensor({4}, {0.05, -0.01, 0.02, 0.03});
  double x0 = 0.9;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  double i = sig(0.3 * x0 + 0.05);
  double f = sig(-0.2 * x0 - 0.01);
  double g = std::tanh(0.7 * x0 + 0.02);
  double o = sig(0.4 * x0 + 0.03);
  double c = i * g;
  double h0 = o * std::tanh(c);
  (void)f;  // forget gate multiplies the zero initial cell

  Tensor x({1, 2}, {x0, -0.4});
  Tensor h = encode(x, p);
  REQUIRE(h.at(0, 0) == Catch::Approx(h0).margin(1e-12));

  // second step by hand, carrying h0/c
  double i1 = sig(0.3 * -0.4 + 0.11 * h0 + 0.05);
  double f1 = sig(-0.2 * -0.4 + 0.12 * h0 - 0.01);
  double g1 = std::tanh(0.7 * -0.4 + 0.13 * h0 + 0.02);
  double o1 = sig(0.4 * -0.4 + 0.14 * h0 + 0.03);
  double c1 = i1 * g1 + f1 * c;
  double h1 = o1 * std::tanh(c1);
  REQUIRE(h.at(1, 0) == Catch::Approx(h1).margin(1e-12));
}

TEST_CASE("hidden coordinates stay inside (-1, 1)") {
  Rng rng(42);
  RecurrentParams p = init_lstm(8, rng);
  Tensor x = rng.normal_tensor({3, 40}, 0.0, 3.0);
  Tensor h = encode(x, p);
  for (std::size_t i = 0; i < h.numel(); ++i) {
    REQUIRE(h[i] > -1.0);
    REQUIRE(h[i] < 1.0);
  }
}

TEST_CASE("encoding is causal: the future does not change the past") {
  Rng rng(43);
  RecurrentParams p = init_lstm(5, rng);
  Tensor x = rng.normal_tensor({2, 10});
  Tensor h = encode(x, p);
  Tensor x2 = x;
  x2.at(1, 7) += 2.5;  // perturb entity 1 at t=7
  Tensor h2 = encode(x2, p);
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t d = 0; d < 5; ++d) {
      // entity 0 is untouched everywhere; entity 1 only from t=7 onwards
      REQUIRE(h2.at(t, d) == h.at(t, d));
      if (t < 7) REQUIRE(h2.at(10 + t, d) == h.at(10 + t, d));
    }
  double moved = 0.0;
  for (std::size_t d = 0; d < 5; ++d) moved += std::abs(h2.at(10 + 7, d) - h.at(10 + 7, d));
  REQUIRE(moved > 0.0);
}
