#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mtgflow/dataset.hpp"
#include "mtgflow/rng.hpp"

using namespace mtgflow;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& content) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream out(p);
  out << content;
  return p;
}

TimeSeriesTable random_table(std::size_t K, std::size_t L, Rng& rng) {
  TimeSeriesTable t;
  t.values = rng.normal_tensor({K, L}, 0.0, 2.0);
  t.labels.assign(L, 0);
  for (std::size_t k = 0; k < K; ++k) t.entity_names.push_back("e" + std::to_string(k));
  return t;
}

}  // namespace

TEST_CASE("load_csv without label column defaults labels to zero") {
  auto p = write_temp("mtg_ds1.csv", "a,b,c\n1,2,3\n4,5,6\n7,8,9\n10,11,12\n13,14,15\n");
  auto t = load_csv(p.string());
  REQUIRE(t.entities() == 3);
  REQUIRE(t.timesteps() == 5);
  for (int l : t.labels) REQUIRE(l == 0);
  REQUIRE(t.values.at(2, 4) == 15.0);
}

TEST_CASE("load_csv takes labels from the named column") {
  auto p = write_temp("mtg_ds2.csv", "a,b,label\n1,2,0\n3,4,1\n");
  auto t = load_csv(p.string(), "label");
  REQUIRE(t.entities() == 2);
  REQUIRE(t.entity_names == std::vector<std::string>{"a", "b"});
  REQUIRE(t.labels == std::vector<int>{0, 1});

  auto t2 = load_csv(p.string(), "auto");
  REQUIRE(t2.entities() == 2);
  REQUIRE(t2.labels == std::vector<int>{0, 1});
}

TEST_CASE("load_csv reports the bad row and column on a parse error") {
  auto p = write_temp("mtg_ds3.csv", "a,b\n1,2\nabc,4\n");
  try {
    load_csv(p.string());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("row 2") != std::string::npos);
    REQUIRE(msg.find("'a'") != std::string::npos);
  }
}

TEST_CASE("load_csv rejects empty files and missing values") {
  auto p = write_temp("mtg_ds4.csv", "");
  REQUIRE_THROWS_AS(load_csv(p.string()), ParseError);
  auto p2 = write_temp("mtg_ds5.csv", "a,b\n");
  REQUIRE_THROWS_AS(load_csv(p2.string()), ParseError);
  auto p3 = write_temp("mtg_ds6.csv", "a,b\n1,\n");
  REQUIRE_THROWS_AS(load_csv(p3.string()), ParseError);
  auto p4 = write_temp("mtg_ds7.csv", "a,b\n1,nan\n");
  REQUIRE_THROWS_AS(load_csv(p4.string()), ParseError);
}

TEST_CASE("load_csv skips comment lines") {
  auto p = write_temp("mtg_ds8.csv", "# config: {}\na,b\n1,2\n# trailing note\n3,4\n");
  auto t = load_csv(p.string());
  REQUIRE(t.timesteps() == 2);
  REQUIRE(t.values.at(1, 1) == 4.0);
}

TEST_CASE("zscore uses population std") {
  TimeSeriesTable t;
  t.values = Tensor({1, 3}, {1.0, 2.0, 3.0});
  t.labels = {0, 1, 0};
  t.entity_names = {"a"};
  auto n = zscore_normalize(t);
  // population std of {1,2,3} is sqrt(2/3)
  REQUIRE(n.values.at(0, 0) == Catch::Approx(-1.2247448713915890).margin(1e-9));
  REQUIRE(n.values.at(0, 1) == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(n.values.at(0, 2) == Catch::Approx(1.2247448713915890).margin(1e-9));
  REQUIRE(n.labels == t.labels);
}

TEST_CASE("constant entities normalize to zeros with a warning") {
  TimeSeriesTable t;
  t.values = Tensor({2, 3}, {5.0, 5.0, 5.0, 1.0, 2.0, 3.0});
  t.labels = {0, 0, 0};
  t.entity_names = {"dead", "live"};
  Warnings w;
  auto n = zscore_normalize(t, &w);
  REQUIRE(w.size() == 1);
  REQUIRE(w[0].find("dead") != std::string::npos);
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(n.values.at(0, i) == 0.0);
  REQUIRE(n.values.at(1, 2) != 0.0);
}

TEST_CASE("zscore is idempotent on normalized input") {
  Rng rng(21);
  auto t = random_table(3, 50, rng);
  auto once = zscore_normalize(t);
  auto twice = zscore_normalize(once);
  REQUIRE(max_abs_diff(once.values, twice.values) < 1e-6);
}

TEST_CASE("normalization commutes with entity permutation") {
  Rng rng(22);
  auto t = random_table(4, 30, rng);
  auto norm = zscore_normalize(t);
  TimeSeriesTable perm = t;
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < 30; ++i) perm.values.at(k, i) = t.values.at(3 - k, i);
  auto norm_perm = zscore_normalize(perm);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < 30; ++i)
      REQUIRE(norm_perm.values.at(k, i) == Catch::Approx(norm.values.at(3 - k, i)).margin(1e-12));
}

TEST_CASE("window counts and starts follow the stride rule") {
  Rng rng(23);
  auto t = random_table(2, 100, rng);
  auto b = make_windows(t, 60, 10);
  REQUIRE(b.size() == 5);
  REQUIRE(b.window_starts == std::vector<std::size_t>{0, 10, 20, 30, 40});
  for (int l : b.window_labels) REQUIRE(l == 0);
}

TEST_CASE("window labels OR the covered timesteps") {
  Rng rng(24);
  auto t = random_table(1, 100, rng);
  t.labels[65] = 1;
  auto b = make_windows(t, 60, 10);
  // spans containing t=65: starts 10..40; the start-0 window covers [0,60)
  REQUIRE(b.window_labels == std::vector<int>{0, 1, 1, 1, 1});
}

TEST_CASE("window label equals OR over covered labels (brute force, L <= 50)") {
  Rng rng(25);
  for (int rep = 0; rep < 20; ++rep) {
    std::size_t L = 20 + rng.index(31);
    std::size_t M = 1 + rng.index(L);
    std::size_t S = 1 + rng.index(8);
    auto t = random_table(2, L, rng);
    for (auto& l : t.labels) l = rng.uniform() < 0.2 ? 1 : 0;
    auto b = make_windows(t, M, S);
    REQUIRE(b.size() == (L >= M ? (L - M) / S + 1 : 0));
    for (std::size_t i = 0; i < b.size(); ++i) {
      int expect = 0;
      for (std::size_t u = 0; u < M; ++u) expect |= t.labels[i * S + u];
      REQUIRE(b.window_labels[i] == expect);
      REQUIRE(b.window_starts[i] + M <= L);  // never reads outside [0, L)
      for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t u = 0; u < M; ++u)
          REQUIRE(b.windows[i].at(k, u) == t.values.at(k, i * S + u));
    }
  }
}

TEST_CASE("oversized window yields an empty batch with a warning") {
  Rng rng(26);
  auto t = random_table(2, 10, rng);
  Warnings w;
  auto b = make_windows(t, 20, 5, &w);
  REQUIRE(b.size() == 0);
  REQUIRE(w.size() == 1);
}

TEST_CASE("split produces contiguous chronological partitions") {
  Rng rng(27);
  auto t = random_table(2, 10, rng);
  for (auto& l : t.labels) l = rng.uniform() < 0.5 ? 1 : 0;
  auto s = split(t, {0.6, 0.2, 0.2});
  REQUIRE(s.train.timesteps() == 6);
  REQUIRE(s.valid.timesteps() == 2);
  REQUIRE(s.test.timesteps() == 2);
  // concatenation reproduces the input, labels partitioned alongside
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 10; ++i) {
      double v = i < 6 ? s.train.values.at(k, i)
                       : (i < 8 ? s.valid.values.at(k, i - 6) : s.test.values.at(k, i - 8));
      REQUIRE(v == t.values.at(k, i));
    }
  for (std::size_t i = 0; i < 10; ++i) {
    int l = i < 6 ? s.train.labels[i] : (i < 8 ? s.valid.labels[i - 6] : s.test.labels[i - 8]);
    REQUIRE(l == t.labels[i]);
  }
}

TEST_CASE("degenerate and invalid splits") {
  Rng rng(28);
  auto t = random_table(2, 10, rng);
  auto s = split(t, {1.0, 0.0, 0.0});
  REQUIRE(s.train.timesteps() == 10);
  REQUIRE(s.valid.timesteps() == 0);
  REQUIRE_THROWS_AS(split(t, {0.6, 0.2, 0.3}), ConfigError);
  REQUIRE_THROWS_AS(split(t, {-0.1, 0.6, 0.5}), ConfigError);
}
