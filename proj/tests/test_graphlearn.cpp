#include <catch2/catch_amalgamated.hpp>

#include "mtgflow/graphlearn.hpp"

using namespace mtgflow;

namespace {

// Independent oracle: the literal double loop over entity pairs.
Tensor scores_oracle(const Tensor& x, const AttentionParams& p) {
  std::size_t K = x.rows(), M = x.cols();
  auto project = [&](const Tensor& w, std::size_t i) {
    std::vector<double> out(M, 0.0);
    for (std::size_t c = 0; c < M; ++c)
      for (std::size_t r = 0; r < M; ++r) out[c] += x.at(i, r) * w.at(r, c);
    return out;
  };
  Tensor e({K, K});
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      auto q = project(p.w_query, i);
      auto k = project(p.w_key, j);
      double dot = 0.0;
      for (std::size_t c = 0; c < M; ++c) dot += q[c] * k[c];
      e.at(i, j) = dot / std::sqrt(static_cast<double>(M));
    }
  return e;
}

AttentionParams identity_params(std::size_t M) {
  AttentionParams p;
  p.w_query = Tensor({M, M});
  p.w_key = Tensor({M, M});
  for (std::size_t i = 0; i < M; ++i) {
    p.w_query.at(i, i) = 1.0;
    p.w_key.at(i, i) = 1.0;
  }
  return p;
}

}  // namespace

TEST_CASE("orthogonal rows score zero under identity weights") {
  auto p = identity_params(2);
  Tensor x({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor e = pairwise_scores(x, p);
  REQUIRE(e.at(0, 1) == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(e.at(1, 0) == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("equal rows score sqrt(2) under identity weights") {
  auto p = identity_params(2);
  Tensor x({2, 2}, {1.0, 1.0, 1.0, 1.0});
  Tensor e = pairwise_scores(x, p);
  REQUIRE(e.at(0, 1) == Catch::Approx(std::sqrt(2.0)).margin(1e-12));
}

TEST_CASE("scores match the double-loop oracle") {
  Rng rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    std::size_t K = 4, M = 6;
    AttentionParams p = init_attention(M, 0.2, rng);
    Tensor x = rng.normal_tensor({K, M});
    Tensor got = pairwise_scores(x, p);
    Tensor want = scores_oracle(x, p);
    REQUIRE(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("scores reject mismatched shapes") {
  Rng rng(32);
  AttentionParams p = init_attention(6, 0.2, rng);
  REQUIRE_THROWS_AS(pairwise_scores(rng.normal_tensor({4, 5}), p), ShapeError);
}

TEST_CASE("singleton graph is exactly [[1]]") {
  Tensor scores({1, 1}, {3.7});
  auto adj = attention_adjacency(scores, false, 0.2, nullptr);
  REQUIRE(adj.a.numel() == 1);
  REQUIRE(adj.a[0] == 1.0);
}

TEST_CASE("uniform scores give uniform attention") {
  Tensor scores = Tensor::full({5, 5}, 1.3);
  auto adj = attention_adjacency(scores, false, 0.2, nullptr);
  for (std::size_t i = 0; i < 25; ++i) REQUIRE(adj.a[i] == Catch::Approx(0.2).margin(1e-12));
}

TEST_CASE("eval adjacency is deterministic and row-stochastic") {
  Rng rng(33);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor scores = rng.normal_tensor({4, 4}, 0.0, 2.0);
    auto a1 = attention_adjacency(scores, false, 0.2, nullptr);
    auto a2 = attention_adjacency(scores, false, 0.2, nullptr);
    REQUIRE(max_abs_diff(a1.a, a2.a) == 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        double v = a1.a.at(i, j);
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
        row += v;
      }
      REQUIRE(std::abs(row - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("adding a constant to a score row leaves that attention row unchanged") {
  Rng rng(34);
  Tensor scores = rng.normal_tensor({4, 4});
  auto base = attention_adjacency(scores, false, 0.2, nullptr);
  Tensor shifted = scores;
  for (std::size_t j = 0; j < 4; ++j) shifted.at(2, j) += 11.25;
  auto moved = attention_adjacency(shifted, false, 0.2, nullptr);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      REQUIRE(std::abs(moved.a.at(i, j) - base.a.at(i, j)) < 1e-9);
}

TEST_CASE("training dropout rescales kept weights and breaks row sums") {
  Rng rng(35);
  Tensor scores = rng.normal_tensor({6, 6});
  auto eval = attention_adjacency(scores, false, 0.2, nullptr);
  Rng drop(77);
  auto train = attention_adjacency(scores, true, 0.2, &drop);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 36; ++i) {
    if (train.a[i] == 0.0) {
      ++zeros;
    } else {
      // kept entries are the eval weights scaled by 1/(1-rate)
      REQUIRE(train.a[i] == Catch::Approx(eval.a[i] / 0.8).margin(1e-12));
    }
  }
  REQUIRE(zeros > 0);
  REQUIRE_THROWS_AS(attention_adjacency(scores, true, 0.2, nullptr), ConfigError);
}

TEST_CASE("adjacency is a pure function of window content and parameters") {
  Rng rng(36);
  AttentionParams p = init_attention(8, 0.2, rng);
  Tensor w1 = rng.normal_tensor({3, 8});
  Tensor w2 = rng.normal_tensor({3, 8});
  auto a_same_1 = attention_adjacency(pairwise_scores(w1, p), false, 0.2, nullptr);
  auto a_same_2 = attention_adjacency(pairwise_scores(w1, p), false, 0.2, nullptr);
  auto a_other = attention_adjacency(pairwise_scores(w2, p), false, 0.2, nullptr);
  REQUIRE(max_abs_diff(a_same_1.a, a_same_2.a) == 0.0);
  REQUIRE(max_abs_diff(a_same_1.a, a_other.a) > 1e-6);  // different windows, different graph
}
