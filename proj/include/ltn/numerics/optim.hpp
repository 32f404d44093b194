#pragma once

#include <cmath>
#include <vector>

#include "ltn/numerics/tensor.hpp"
#include "ltn/rng.hpp"

namespace ltn {

/// Stochastic gradient descent with classical momentum.
template <typename T>
class Sgd {
 public:
  Sgd(ParameterList<T> params, double learning_rate, double momentum = 0.9, double weight_decay = 0.0)
      : params_(std::move(params)), lr_(learning_rate), momentum_(momentum), decay_(weight_decay) {
    for (const auto* p : params_) velocity_.push_back(Tensor<T>::zeros_like(p->value));
  }

  /// Apply one update from the accumulated gradients, then clear them.
  void step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const T g = p.grad[i] + static_cast<T>(decay_) * p.value[i];
        v[i] = static_cast<T>(momentum_) * v[i] + g;
        p.value[i] -= static_cast<T>(lr_) * v[i];
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  double learning_rate() const noexcept { return lr_; }
  void set_learning_rate(double lr) noexcept { lr_ = lr; }

 private:
  ParameterList<T> params_;
  std::vector<Tensor<T>> velocity_;
  double lr_;
  double momentum_;
  double decay_;
};

/// Gaussian init scaled by sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_normal(Shape shape, int fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * s);
  return t;
}

}  // namespace ltn
