#pragma once

#include <cmath>
#include <map>
#include <string>

#include "mmgl/nn/layers.hpp"

namespace mmgl::nn {

template <typename Scalar>
struct AdamMoments {
  Grid<Scalar> m;
  Grid<Scalar> v;
};

/// Adam with bias correction. Moments are keyed by parameter name so state can be
/// checkpointed and restored independently of parameter order.
template <typename Scalar>
class Adam {
 public:
  Adam(ParamList<Scalar> params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      auto& s = state_[p.name];
      s.m = Grid<Scalar>::Zero(p.param->value.rows(), p.param->value.cols());
      s.v = s.m;
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.param->zero_grad();
  }

  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    const auto step_size = static_cast<Scalar>(lr_ / c1);
    const auto b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
    const auto inv_sqrt_c2 = static_cast<Scalar>(1.0 / std::sqrt(c2));
    const auto eps = static_cast<Scalar>(eps_);
    for (auto& p : params_) {
      auto& s = state_.at(p.name);
      const auto& g = p.param->grad.array();
      s.m.array() = b1 * s.m.array() + (Scalar(1) - b1) * g;
      s.v.array() = b2 * s.v.array() + (Scalar(1) - b2) * g.square();
      p.param->value.array() -= step_size * s.m.array() / (s.v.array().sqrt() * inv_sqrt_c2 + eps);
    }
  }

  long steps() const { return steps_; }
  void set_steps(long s) { steps_ = s; }
  double learning_rate() const { return lr_; }
  const ParamList<Scalar>& params() const { return params_; }
  std::map<std::string, AdamMoments<Scalar>>& state() { return state_; }
  const std::map<std::string, AdamMoments<Scalar>>& state() const { return state_; }

 private:
  ParamList<Scalar> params_;
  std::map<std::string, AdamMoments<Scalar>> state_;
  double lr_, beta1_, beta2_, eps_;
  long steps_ = 0;
};

}  // namespace mmgl::nn
