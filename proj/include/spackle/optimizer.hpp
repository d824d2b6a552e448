#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "spackle/errors.hpp"

namespace spackle {

// Adam with bias correction (default decay 0.9/0.999, epsilon 1e-8).
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t size, T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(size, T(0)), v_(size, T(0)) {}

  void step(std::vector<T>& params, const std::vector<T>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw ValidationError("optimizer state size mismatch");
    ++t_;
    const T b1c = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
    const T b2c = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<Arr> p(params.data(), static_cast<Eigen::Index>(params.size()));
    Eigen::Map<const Arr> g(grads.data(), static_cast<Eigen::Index>(grads.size()));
    Eigen::Map<Arr> m(m_.data(), static_cast<Eigen::Index>(m_.size()));
    Eigen::Map<Arr> v(v_.data(), static_cast<Eigen::Index>(v_.size()));
    m = beta1_ * m + (T(1) - beta1_) * g;
    v = beta2_ * v + (T(1) - beta2_) * g.square();
    p -= lr_ * (m / b1c) / ((v / b2c).sqrt() + eps_);
  }

  long long iterations() const { return t_; }
  T learning_rate() const { return lr_; }
  const std::vector<T>& first_moment() const { return m_; }
  const std::vector<T>& second_moment() const { return v_; }

  // Checkpoint restore.
  void restore(std::vector<T> m, std::vector<T> v, long long t) {
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

 private:
  T lr_ = T(1e-3);
  T beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
  std::vector<T> m_, v_;
  long long t_ = 0;
};

}  // namespace spackle
