#pragma once

#include <cmath>
#include <vector>

#include "planseg/errors.hpp"
#include "planseg/nn/layers.hpp"

namespace planseg {

inline constexpr double kMomentum = 0.99;
inline constexpr double kPolyExponent = 0.9;

// lr0 * (1 - epoch / num_epochs)^0.9
inline double poly_learning_rate(double lr0, int epoch, int num_epochs, double exponent = kPolyExponent) {
  if (num_epochs <= 0) throw ParameterError("num_epochs must be positive");
  return lr0 * std::pow(1.0 - static_cast<double>(epoch) / num_epochs, exponent);
}

// SGD with Nesterov momentum: buf = mu * buf + g; p -= lr * (g + mu * buf).
template <class T>
class SgdNesterov {
 public:
  SgdNesterov() = default;
  SgdNesterov(nn::ParameterList<T> params, double momentum = kMomentum)
      : params_(std::move(params)), momentum_(momentum) {
    for (auto* p : params_) buffers_.emplace_back(p->value.size(), T{});
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_);
    const T rate = static_cast<T>(lr);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& buf = buffers_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const T g = p.grad[i];
        buf[i] = mu * buf[i] + g;
        p.value[i] -= rate * (g + mu * buf[i]);
      }
    }
  }

  double momentum() const { return momentum_; }
  const nn::ParameterList<T>& parameters() const { return params_; }
  std::vector<std::vector<T>>& buffers() { return buffers_; }
  const std::vector<std::vector<T>>& buffers() const { return buffers_; }

 private:
  nn::ParameterList<T> params_;
  double momentum_ = kMomentum;
  std::vector<std::vector<T>> buffers_;
};

// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
template <class T>
double clip_gradient_norm(const nn::ParameterList<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params)
    for (T g : p->grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto* p : params)
      for (auto& g : p->grad) g *= scale;
  }
  return norm;
}

}  // namespace planseg
