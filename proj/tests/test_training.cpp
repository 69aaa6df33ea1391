#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "mtgflow/detect.hpp"
#include "mtgflow/gradcheck.hpp"
#include "mtgflow/synthgen.hpp"
#include "mtgflow/training.hpp"

using namespace mtgflow;

namespace {

SynthConfig small_synth(std::uint64_t seed) {
  SynthConfig c;
  c.K = 3;
  c.L = 800;
  GroupSpec slow, fast;
  slow.freq = 0.02;
  slow.members = {0, 1};
  fast.freq = 0.055;
  fast.members = {2};
  c.groups = {slow, fast};
  c.noise_sigma = 0.15;
  c.ar_sigma = 0.1;
  c.seed = seed;
  return c;
}

TrainConfig small_train(std::uint64_t seed) {
  TrainConfig c;
  c.M = 16;
  c.S = 4;
  c.epochs = 8;
  c.batch_size = 64;
  c.d_h = 8;
  c.d_c = 8;
  c.d_f = 16;
  c.seed = seed;
  return c;
}

Model fresh_model(std::size_t K, std::size_t M, std::uint64_t seed, bool entity_aware = true) {
  ModelConfig mc;
  mc.K = K;
  mc.M = M;
  mc.d_h = 8;
  mc.d_c = 8;
  mc.d_f = 16;
  mc.flow_blocks = 1;
  TargetBank targets = entity_aware
                           ? init_targets(TargetMode::kEntity, {}, K, M, Rng(seed).fork("targets"))
                           : zero_targets(K, M);
  return Model::init(mc, targets, seed);
}

}  // namespace

TEST_CASE("mle_loss of an identity flow at the target means is (M/2) log 2pi") {
  std::size_t K = 4, M = 12;
  Model model = fresh_model(K, M, 3);
  Tensor w({K, M});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t t = 0; t < M; ++t) w.at(k, t) = model.targets.entity_scalar[k];
  std::vector<Tensor> batch{w};
  REQUIRE(mle_loss(model, batch) == Catch::Approx(0.5 * M * kLog2Pi).margin(1e-9));
}

TEST_CASE("mle_loss gradient matches central finite differences") {
  Rng rng(101);
  std::size_t K = 3, M = 8;
  Model model = fresh_model(K, M, 7);
  std::vector<Tensor> windows;
  for (int i = 0; i < 2; ++i) windows.push_back(rng.normal_tensor({K, M}));
  auto loss = [&](ParamStore&, bool with_grad) {
    return batch_loss(model, windows, with_grad, nullptr);
  };
  REQUIRE(grad_check_params(model.params, loss, 1e-4) < 1e-4);
}

TEST_CASE("eval-mode loss is deterministic; training dropout is seeded") {
  Rng rng(102);
  std::size_t K = 3, M = 8;
  Model model = fresh_model(K, M, 8);
  // a fresh stack is the identity flow, which ignores its condition; give the
  // conditioner output weight so attention dropout can reach the loss
  model.params.at("flow.b0.wout").value = rng.uniform_tensor({16, 2}, -0.5, 0.5);
  std::vector<Tensor> windows;
  for (int i = 0; i < 3; ++i) windows.push_back(rng.normal_tensor({K, M}));
  REQUIRE(mle_loss(model, windows) == mle_loss(model, windows));
  Rng d1(5), d2(5), d3(6);
  double a = batch_loss(model, windows, false, &d1);
  double b = batch_loss(model, windows, false, &d2);
  double c = batch_loss(model, windows, false, &d3);
  REQUIRE(a == b);
  REQUIRE(a != c);
}

TEST_CASE("graph-ablated loss ignores attention parameters entirely") {
  Rng rng(103);
  std::size_t K = 3, M = 8;
  ModelConfig mc;
  mc.K = K;
  mc.M = M;
  mc.d_h = 8;
  mc.d_c = 8;
  mc.d_f = 16;
  mc.disable_graph = true;
  TargetBank targets = init_targets(TargetMode::kEntity, {}, K, M, Rng(4).fork("targets"));
  Model model = Model::init(mc, targets, 4);
  std::vector<Tensor> windows{rng.normal_tensor({K, M})};
  double before = mle_loss(model, windows);
  model.params.at("attn.wq").value.fill(3.0);
  model.params.at("attn.wk").value.fill(-2.0);
  REQUIRE(mle_loss(model, windows) == before);
  // and the graph-mixing weight W1 receives no gradient
  model.params.zero_grads();
  batch_loss(model, windows, true, nullptr);
  const Tensor& g = model.params.at("cond.w1").grad;
  for (std::size_t i = 0; i < g.numel(); ++i) REQUIRE(g[i] == 0.0);
}

TEST_CASE("zero-target ablation wipes the entity means") {
  auto synth = generate(small_synth(11));
  TrainConfig cfg = small_train(11);
  cfg.epochs = 1;
  cfg.disable_entity_aware = true;
  auto p = run_training_pipeline(synth.table, cfg);
  for (double m : p.model.targets.entity_scalar) REQUIRE(m == 0.0);
}

TEST_CASE("training lowers the NLL and is bitwise reproducible") {
  auto synth = generate(small_synth(12));
  auto run = [&] { return run_training_pipeline(synth.table, small_train(12)); };
  auto p1 = run();
  REQUIRE(p1.epoch_nll.size() == 8);
  REQUIRE(p1.epoch_nll.back() < p1.epoch_nll.front());
  auto p2 = run();
  REQUIRE(p1.epoch_nll == p2.epoch_nll);
  for (auto& [name, param] : p1.model.params)
    REQUIRE(max_abs_diff(param.value, p2.model.params.at(name).value) == 0.0);
}

TEST_CASE("training on an empty batch is a config error") {
  Model model = fresh_model(2, 8, 1);
  WindowBatch empty;
  empty.M = 8;
  TrainConfig cfg = small_train(1);
  REQUIRE_THROWS_AS(train(model, empty, cfg), ConfigError);
  std::vector<Tensor> none;
  REQUIRE_THROWS_AS(mle_loss(model, none), ConfigError);
}

TEST_CASE("an absurd learning rate aborts with a divergence report") {
  auto synth = generate(small_synth(13));
  TrainConfig cfg = small_train(13);
  cfg.lr = 50.0;
  cfg.epochs = 40;
  REQUIRE_THROWS_AS(run_training_pipeline(synth.table, cfg), NumericError);
}

TEST_CASE("checkpoints round-trip through disk and reproduce scores") {
  auto synth = generate(small_synth(14));
  TrainConfig cfg = small_train(14);
  cfg.epochs = 2;
  auto p = run_training_pipeline(synth.table, cfg);

  auto path = (std::filesystem::temp_directory_path() / "mtg_ck.json").string();
  save_checkpoint(path, p.model, p.norm, p.entity_names, p.resolved, p.clusters);
  auto ck = load_checkpoint(path);
  REQUIRE(ck.model.cfg.K == 3);
  REQUIRE(ck.entity_names == p.entity_names);

  auto parts = split(synth.table, cfg.splits);
  auto norm_test = apply_norm(parts.test, p.norm);
  auto windows = make_windows(norm_test, p.resolved.M, p.resolved.S);
  auto before = anomaly_scores(p.model, windows);
  auto after = anomaly_scores(ck.model, windows);
  REQUIRE(before.score == after.score);

  REQUIRE_THROWS_AS(load_checkpoint("/nonexistent/path.json"), ConfigError);
}

TEST_CASE("trained per-entity flows concentrate near their target means") {
  // three entities with distinct dynamics, trained to convergence
  SynthConfig sc;
  sc.K = 3;
  sc.L = 1200;
  GroupSpec g0, g1, g2;
  g0.freq = 0.015;
  g0.members = {0};
  g1.freq = 0.035;
  g1.members = {1};
  g2.freq = 0.06;
  g2.members = {2};
  sc.groups = {g0, g1, g2};
  sc.noise_sigma = 0.1;
  sc.ar_sigma = 0.05;
  sc.seed = 16;
  auto synth = generate(sc);
  TrainConfig cfg = small_train(16);
  cfg.epochs = 60;
  cfg.flow_blocks = 2;
  cfg.d_h = 16;
  cfg.d_c = 16;
  cfg.d_f = 32;
  cfg.dropout = 0.0;
  auto p = run_training_pipeline(synth.table, cfg);

  // push training windows through the trained flow with the value-level API
  auto parts = split(synth.table, cfg.splits);
  auto norm = apply_norm(parts.train, p.norm);
  auto windows = make_windows(norm, cfg.M, cfg.S);
  AttentionParams attn{p.model.params.at("attn.wq").value, p.model.params.at("attn.wk").value,
                       cfg.dropout};
  RecurrentParams lstm{p.model.params.at("lstm.wih").value, p.model.params.at("lstm.whh").value,
                       p.model.params.at("lstm.b").value, cfg.d_h};
  ConditionParams cond{p.model.params.at("cond.w1").value, p.model.params.at("cond.w2").value,
                       p.model.params.at("cond.w3").value};
  FlowStack stack = p.model.flow_stack();

  std::size_t K = 3;
  std::vector<double> mean_z(K, 0.0);
  std::size_t count = 0;
  for (const Tensor& w : windows.windows) {
    auto adj = attention_adjacency(pairwise_scores(w, attn), false, 0.0, nullptr);
    Tensor h = encode(w, lstm);
    Tensor c = spatio_temporal_condition(adj.a, h, cond, K, cfg.M);
    for (std::size_t k = 0; k < K; ++k) {
      Tensor xk({cfg.M});
      for (std::size_t t = 0; t < cfg.M; ++t) xk[t] = w.at(k, t);
      Tensor ck({cfg.M, cfg.d_c});
      for (std::size_t t = 0; t < cfg.M; ++t)
        for (std::size_t d = 0; d < cfg.d_c; ++d) ck.at(t, d) = c.at(k * cfg.M + t, d);
      auto [z, logdet] = forward_transform(xk, ck, stack);
      (void)logdet;
      for (std::size_t t = 0; t < cfg.M; ++t) mean_z[k] += z[t];
    }
    ++count;
  }
  for (std::size_t k = 0; k < K; ++k) {
    mean_z[k] /= static_cast<double>(count * cfg.M);
    REQUIRE(std::abs(mean_z[k] - p.model.targets.entity_scalar[k]) < 0.5);
  }
}

TEST_CASE("training log carries the config echo and epoch rows") {
  auto path = (std::filesystem::temp_directory_path() / "mtg_log.csv").string();
  write_training_log(path, {55.5, 44.4, 33.3}, to_json(TrainConfig{}));
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  REQUIRE(line.rfind("# config:", 0) == 0);
  std::getline(in, line);
  REQUIRE(line == "epoch,mean_nll");
  std::getline(in, line);
  REQUIRE(line.rfind("0,", 0) == 0);
}

TEST_CASE("train config json round trip preserves every field") {
  TrainConfig c;
  c.M = 24;
  c.S = 6;
  c.lr = 0.001;
  c.epochs = 7;
  c.batch_size = 128;
  c.flow_blocks = 2;
  c.mode = TargetMode::kCluster;
  c.clusters = 5;
  c.seed = 99;
  c.disable_graph = true;
  c.splits = {0.7, 0.1, 0.2};
  c.label_column = "y";
  TrainConfig back = train_config_from_json(to_json(c));
  REQUIRE(back.M == 24);
  REQUIRE(back.S == 6);
  REQUIRE(back.lr == 0.001);
  REQUIRE(back.epochs == 7);
  REQUIRE(back.batch_size == 128);
  REQUIRE(back.flow_blocks == 2);
  REQUIRE(back.mode == TargetMode::kCluster);
  REQUIRE(back.clusters == 5);
  REQUIRE(back.seed == 99);
  REQUIRE(back.disable_graph);
  REQUIRE(back.splits.train == 0.7);
  REQUIRE(back.label_column == "y");
  REQUIRE_THROWS_AS(train_config_from_json({{"mode", "banana"}}), ConfigError);
  REQUIRE_THROWS_AS(train_config_from_json({{"S", 0}}), ConfigError);
}
