#include "sdcs/sgd.hpp"

#include <cmath>

#include "sdcs/error.hpp"

namespace sdcs {

SgdState::SgdState(float learning_rate, float momentum)
    : learning_rate_(learning_rate), momentum_(momentum) {
  if (!(learning_rate > 0.0f)) throw ConfigError("SGD learning rate must be positive");
  if (!(momentum >= 0.0f && momentum < 1.0f)) {
    throw ConfigError("SGD momentum must lie in [0, 1)");
  }
}

void SgdState::set_learning_rate(float lr) {
  if (!(lr > 0.0f)) throw ConfigError("SGD learning rate must be positive");
  learning_rate_ = lr;
}

void SgdState::step(const std::string& key, std::span<float> params,
                    std::span<const float> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd step '" + key + "': " + std::to_string(params.size()) +
                     " parameters but " + std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError("sgd step '" + key + "': non-finite gradient at index " +
                         std::to_string(i));
    }
  }
  auto [it, inserted] = velocity_.try_emplace(key, params.size(), 0.0f);
  std::vector<float>& v = it->second;
  if (v.size() != params.size()) {
    throw ShapeError("sgd step '" + key + "': velocity length " + std::to_string(v.size()) +
                     " != parameter length " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    v[i] = momentum_ * v[i] - learning_rate_ * grads[i];
    params[i] += v[i];
  }
}

const std::vector<float>* SgdState::velocity(const std::string& key) const {
  auto it = velocity_.find(key);
  return it == velocity_.end() ? nullptr : &it->second;
}

}  // namespace sdcs
