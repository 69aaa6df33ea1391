#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include <json.hpp>

#include "mtgflow/tensor.hpp"

namespace mtgflow {

struct Parameter {
  Tensor value;
  Tensor grad;
  Tensor m;  // Adam first moment
  Tensor v;  // Adam second moment
  std::int64_t steps = 0;
};

// Named trainable arrays. Iteration is in lexicographic name order, which
// keeps every optimizer sweep (and therefore training) bitwise reproducible.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor init) {
    if (params_.count(name)) throw ConfigError("parameter already registered: " + name);
    Parameter p;
    p.grad = Tensor(init.shape());
    p.m = Tensor(init.shape());
    p.v = Tensor(init.shape());
    p.value = std::move(init);
    return params_.emplace(name, std::move(p)).first->second;
  }

  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grads() {
    for (auto& [name, p] : params_) p.grad.fill(0.0);
  }

  std::size_t total_coords() const {
    std::size_t n = 0;
    for (auto& [name, p] : params_) n += p.value.numel();
    return n;
  }

  nlohmann::json values_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (auto& [name, p] : params_) {
      j[name] = {{"shape", p.value.shape()}, {"data", p.value.vec()}};
    }
    return j;
  }

  void load_values_json(const nlohmann::json& j) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      Shape shape = it.value().at("shape").get<Shape>();
      std::vector<double> data = it.value().at("data").get<std::vector<double>>();
      if (contains(it.key()))
        at(it.key()).value = Tensor(shape, std::move(data));
      else
        add(it.key(), Tensor(shape, std::move(data)));
    }
  }

 private:
  std::map<std::string, Parameter> params_;
};

struct AdamConfig {
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update over every parameter; gradients are cleared afterwards.
inline void adam_step(ParamStore& store, const AdamConfig& cfg) {
  for (auto& [name, p] : store) {
    for (std::size_t i = 0; i < p.grad.numel(); ++i)
      if (!std::isfinite(p.grad[i]))
        throw NumericError("non-finite gradient in parameter '" + name + "'");
    p.steps += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.steps));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.steps));
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      double g = p.grad[i];
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
      double m_hat = p.m[i] / bc1;
      double v_hat = p.v[i] / bc2;
      p.value[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
    p.grad.fill(0.0);
  }
}

}  // namespace mtgflow
