#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "neurocell/errors.hpp"
#include "neurocell/tensor.hpp"

namespace neurocell {

/// Stochastic gradient descent with classical momentum:
///   v <- momentum * v + grad;  p <- p - lr * v.
/// Velocity buffers are bound positionally to the parameter list passed to
/// step(), so the same list must be passed every time.
template <typename T>
class Sgd {
 public:
  explicit Sgd(double learning_rate = 0.01, double momentum = 0.9)
      : learning_rate_(learning_rate), momentum_(momentum) {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be nonnegative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  }

  double learning_rate() const { return learning_rate_; }
  void set_learning_rate(double lr) {
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be nonnegative");
    learning_rate_ = lr;
  }
  double momentum() const { return momentum_; }
  const std::vector<std::vector<T>>& velocities() const { return velocity_; }

  /// Applies one update to every parameter and zeroes its gradient.
  void step(std::vector<Tensor<T>>& params) {
    if (velocity_.empty()) {
      velocity_.reserve(params.size());
      for (const Tensor<T>& p : params) velocity_.emplace_back(p.size(), T(0));
    }
    if (velocity_.size() != params.size()) {
      throw ContractError("optimizer bound to " + std::to_string(velocity_.size()) +
                          " parameters, step() received " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) {
        throw ContractError("trainable parameter " + std::to_string(i) + " has no gradient");
      }
      if (velocity_[i].size() != params[i].size()) {
        throw ContractError("velocity buffer " + std::to_string(i) + " does not match its parameter");
      }
    }
    const T lr = static_cast<T>(learning_rate_);
    const T mom = static_cast<T>(momentum_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::span<T> value = params[i].data();
      std::span<T> grad = params[i].grad();
      std::vector<T>& v = velocity_[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        v[j] = mom * v[j] + grad[j];
        value[j] -= lr * v[j];
      }
      params[i].zero_grad();
    }
  }

 private:
  double learning_rate_;
  double momentum_;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace neurocell
