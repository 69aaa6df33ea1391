#pragma once

#include <string>
#include <vector>

#include "mtgflow/condition.hpp"
#include "mtgflow/flow.hpp"
#include "mtgflow/graphlearn.hpp"
#include "mtgflow/optim.hpp"
#include "mtgflow/temporal.hpp"

namespace mtgflow {

struct ModelConfig {
  std::size_t K = 0;
  std::size_t M = 0;
  std::size_t d_h = 32;
  std::size_t d_c = 32;
  std::size_t d_f = 64;
  std::size_t flow_blocks = 1;
  double dropout = 0.2;
  double alpha_clamp = 7.0;
  bool disable_graph = false;
  bool disable_entity_aware = false;
};

// Routes tape leaves back to their parameters so a backward sweep can be
// folded into ParamStore gradients.
struct Bindings {
  std::vector<std::pair<Parameter*, Var>> items;

  Var bind(Tape& t, Parameter& p) {
    Var v = t.leaf(p.value);
    items.emplace_back(&p, v);
    return v;
  }

  void accumulate(const Tape& t) {
    for (auto& [param, var] : items) {
      const Tensor& g = t.grad(var);
      for (std::size_t i = 0; i < g.numel(); ++i) param->grad[i] += g[i];
    }
  }
};

// The joint model: self-attention adjacency, shared LSTM encoder,
// spatio-temporal condition, and one parameter-shared conditional MAF with
// per-entity (or per-cluster) Gaussian targets.
class Model {
 public:
  ModelConfig cfg;
  ParamStore params;
  TargetBank targets;

  static Model init(const ModelConfig& cfg, const TargetBank& targets, std::uint64_t seed) {
    if (cfg.K < 1 || cfg.M < 1) throw ConfigError("model needs K >= 1 entities and M >= 1 steps");
    if (targets.entity_scalar.size() != cfg.K || targets.M != cfg.M)
      throw ConfigError("target bank does not match model dimensions");
    Model model;
    model.cfg = cfg;
    model.targets = targets;
    Rng rng = Rng(seed).fork("model");

    auto attn = init_attention(cfg.M, cfg.dropout, rng);
    model.params.add("attn.wq", std::move(attn.w_query));
    model.params.add("attn.wk", std::move(attn.w_key));

    auto lstm = init_lstm(cfg.d_h, rng);
    model.params.add("lstm.wih", std::move(lstm.w_ih));
    model.params.add("lstm.whh", std::move(lstm.w_hh));
    model.params.add("lstm.b", std::move(lstm.bias));

    auto cond = init_condition(cfg.d_h, cfg.d_c, rng);
    model.params.add("cond.w1", std::move(cond.w1));
    model.params.add("cond.w2", std::move(cond.w2));
    model.params.add("cond.w3", std::move(cond.w3));

    auto flow = init_flow(cfg.M, cfg.d_c, cfg.d_f, cfg.flow_blocks, rng);
    for (std::size_t b = 0; b < flow.blocks.size(); ++b) {
      const std::string base = "flow.b" + std::to_string(b) + ".";
      model.params.add(base + "wx", std::move(flow.blocks[b].wx));
      model.params.add(base + "wc", std::move(flow.blocks[b].wc));
      model.params.add(base + "bh", std::move(flow.blocks[b].bh));
      model.params.add(base + "wout", std::move(flow.blocks[b].wout));
      model.params.add(base + "bout", std::move(flow.blocks[b].bout));
    }
    return model;
  }

  FlowStack flow_stack() const {
    FlowStack s;
    s.M = cfg.M;
    s.d_c = cfg.d_c;
    s.d_f = cfg.d_f;
    s.alpha_clamp = cfg.alpha_clamp;
    for (std::size_t b = 0; b < cfg.flow_blocks; ++b) {
      const std::string base = "flow.b" + std::to_string(b) + ".";
      MafBlockParams p;
      p.wx = params.at(base + "wx").value;
      p.wc = params.at(base + "wc").value;
      p.bh = params.at(base + "bh").value;
      p.wout = params.at(base + "wout").value;
      p.bout = params.at(base + "bout").value;
      p.reversed = (b % 2) == 1;
      s.blocks.push_back(std::move(p));
    }
    return s;
  }

  struct Forward {
    Var loss;                 // scalar: -(1/K) sum_k log p_k
    std::vector<Var> logp;    // per entity
    Var adjacency;            // eval-or-training adjacency used by the window
    Var condition;            // {K*M, d_c}
  };

  // One window {K, M} on the caller's tape. In training mode attention
  // dropout draws from `dropout_rng`. When `bindings` is null, parameters
  // enter as constants (pure evaluation).
  Forward forward(Tape& t, Bindings* bindings, const Tensor& window, bool training,
                  Rng* dropout_rng) {
    if (window.ndim() != 2 || window.rows() != cfg.K || window.cols() != cfg.M)
      throw ShapeError("window " + shape_str(window.shape()) + " does not match model K=" +
                       std::to_string(cfg.K) + ", M=" + std::to_string(cfg.M));
    auto get = [&](const std::string& name) -> Var {
      Parameter& p = params.at(name);
      return bindings ? bindings->bind(t, p) : t.constant(p.value);
    };

    Var x = t.constant(window);
    Var adj;  // stays invalid when the graph path is ablated
    if (!cfg.disable_graph)
      adj = attention_node(t, pairwise_scores_node(t, x, get("attn.wq"), get("attn.wk")),
                           training, cfg.dropout, dropout_rng);
    Var h = t.lstm_seq(x, get("lstm.wih"), get("lstm.whh"), get("lstm.b"), cfg.d_h);
    auto cond = condition_node(t, adj, h, get("cond.w1"), get("cond.w2"), get("cond.w3"), cfg.K,
                               cfg.M, !cfg.disable_graph);

    std::vector<MafBlockVars> blocks;
    for (std::size_t b = 0; b < cfg.flow_blocks; ++b) {
      const std::string base = "flow.b" + std::to_string(b) + ".";
      blocks.push_back(MafBlockVars{get(base + "wx"), get(base + "wc"), get(base + "bh"),
                                    get(base + "wout"), get(base + "bout"), (b % 2) == 1});
    }

    Forward out;
    out.adjacency = adj;
    out.condition = cond.condition;
    Var total;
    for (std::size_t k = 0; k < cfg.K; ++k) {
      Var xk = t.reshape(t.slice_rows(x, k, k + 1), Shape{cfg.M});
      Var ck = t.slice_rows(cond.condition, k * cfg.M, (k + 1) * cfg.M);
      FlowNodes f = flow_stack_node(t, xk, ck, blocks, cfg.alpha_clamp);
      double mu_k = cfg.disable_entity_aware ? 0.0 : targets.entity_scalar[k];
      Var resid = t.add_const(f.z, -mu_k);
      Var logp = t.add(t.add_const(t.scale(t.sumsq(resid), -0.5),
                                   -0.5 * static_cast<double>(cfg.M) * kLog2Pi),
                       f.logdet);
      out.logp.push_back(logp);
      total = total.valid() ? t.add(total, logp) : logp;
    }
    out.loss = t.scale(total, -1.0 / static_cast<double>(cfg.K));
    return out;
  }
};

}  // namespace mtgflow
