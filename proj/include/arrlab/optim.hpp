#pragma once

// First-order optimizers over a ParamSet.

#include "arrlab/diffcore.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace arrlab {

struct OptimizerSpec {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double lr = 3e-4;
  double momentum = 0.0;      // sgd
  double beta1 = 0.9;         // adam
  double beta2 = 0.999;       // adam
  double eps = 1e-8;          // adam
  double weight_decay = 0.0;  // L2 term added to the gradient
  double clip_norm = 0.0;     // global gradient-norm clip; 0 disables

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("optimizer: lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("optimizer: momentum must be in [0,1)");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw std::invalid_argument("optimizer: betas must be in [0,1)");
    if (weight_decay < 0.0 || clip_norm < 0.0) throw std::invalid_argument("optimizer: negative decay or clip");
  }
};

inline nlohmann::json to_json(const OptimizerSpec& s) {
  return {{"kind", s.kind == OptimizerSpec::Kind::sgd ? "sgd" : "adam"},
          {"lr", s.lr},
          {"momentum", s.momentum},
          {"beta1", s.beta1},
          {"beta2", s.beta2},
          {"eps", s.eps},
          {"weight_decay", s.weight_decay},
          {"clip_norm", s.clip_norm}};
}

inline OptimizerSpec optimizer_from_json(const nlohmann::json& j, OptimizerSpec s = {}) {
  if (j.contains("kind")) {
    const auto k = j.at("kind").get<std::string>();
    if (k == "sgd") s.kind = OptimizerSpec::Kind::sgd;
    else if (k == "adam") s.kind = OptimizerSpec::Kind::adam;
    else throw std::invalid_argument("optimizer: unknown kind " + k);
  }
  s.lr = j.value("lr", s.lr);
  s.momentum = j.value("momentum", s.momentum);
  s.beta1 = j.value("beta1", s.beta1);
  s.beta2 = j.value("beta2", s.beta2);
  s.eps = j.value("eps", s.eps);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.clip_norm = j.value("clip_norm", s.clip_norm);
  s.validate();
  return s;
}

/// Scales `grad` in place so its global L2 norm is at most `max_norm`. Returns the pre-clip norm.
inline double clip_grad_norm(ParamSet& grad, double max_norm) {
  const double norm = std::sqrt(grad.squared_norm());
  if (max_norm > 0.0 && norm > max_norm) grad.scale(max_norm / norm);
  return norm;
}

class Optimizer {
 public:
  Optimizer(OptimizerSpec spec, const ParamSet& params) : spec_(spec) {
    spec_.validate();
    m_ = params.zeros_like();
    if (spec_.kind == OptimizerSpec::Kind::adam) v_ = params.zeros_like();
  }

  const OptimizerSpec& spec() const { return spec_; }
  long steps() const { return t_; }

  /// One update. `grad` is modified (decay, clipping).
  void step(ParamSet& params, ParamSet& grad) {
    if (!params.same_layout(grad)) throw std::invalid_argument("optimizer: gradient layout mismatch");
    if (spec_.weight_decay > 0.0) grad.axpy(spec_.weight_decay, params);
    if (spec_.clip_norm > 0.0) clip_grad_norm(grad, spec_.clip_norm);
    ++t_;
    if (spec_.kind == OptimizerSpec::Kind::sgd) {
      // v = mu v + g; p -= lr v
      for (auto& [name, p] : params) {
        auto& v = m_.at(name).data;
        const auto& g = grad.at(name).data;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
          v[i] = spec_.momentum * v[i] + g[i];
          p.data[i] -= spec_.lr * v[i];
        }
      }
      return;
    }
    const double c1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      auto& m = m_.at(name).data;
      auto& v = v_.at(name).data;
      const auto& g = grad.at(name).data;
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        m[i] = spec_.beta1 * m[i] + (1.0 - spec_.beta1) * g[i];
        v[i] = spec_.beta2 * v[i] + (1.0 - spec_.beta2) * g[i] * g[i];
        p.data[i] -= spec_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + spec_.eps);
      }
    }
  }

 private:
  OptimizerSpec spec_;
  ParamSet m_, v_;
  long t_ = 0;
};

}  // namespace arrlab
