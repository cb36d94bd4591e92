#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "syndiag/autodiff.hpp"

namespace syndiag {

struct OptimizerConfig {
  double learning_rate = 3e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("optimizer: learning_rate must be > 0");
    if (weight_decay < 0.0 || weight_decay >= 1.0)
      throw std::invalid_argument("optimizer: weight_decay must be in [0, 1)");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
      throw std::invalid_argument("optimizer: betas must be in (0, 1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("optimizer: epsilon must be > 0");
  }
};

// AdamW with decoupled weight decay: the decay multiplies the weight
// directly and never enters the moment estimates.
class AdamW {
 public:
  AdamW(std::vector<Var> params, OptimizerConfig config)
      : params_(std::move(params)), config_(config) {
    config_.validate();
    for (const auto& p : params_) {
      if (!p.requires_grad())
        throw std::invalid_argument("optimizer: parameter without requires_grad");
      m_.emplace_back(p.value().shape());
      v_.emplace_back(p.value().shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& w = params_[i].mutable_value();
      const Tensor& g = params_[i].grad();
      if (g.numel() != 0 && !g.same_shape(w))
        throw std::invalid_argument("optimizer: gradient shape mismatch");
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (int64_t j = 0; j < w.numel(); ++j) {
        double gj = g.numel() ? g[j] : 0.0;
        m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
        v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        w[j] *= 1.0 - config_.learning_rate * config_.weight_decay;
        w[j] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
  }

  int64_t step_count() const { return t_; }
  const std::vector<Var>& params() const { return params_; }

 private:
  std::vector<Var> params_;
  OptimizerConfig config_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

}  // namespace syndiag
