#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

namespace sdcs {

// Momentum SGD:  v <- momentum * v - lr * g;  w <- w + v.
// Velocity buffers are keyed by a caller-chosen parameter name and created
// lazily on first use.
class SgdState {
 public:
  SgdState(float learning_rate, float momentum);

  float learning_rate() const { return learning_rate_; }
  float momentum() const { return momentum_; }
  void set_learning_rate(float lr);

  // Throws NumericError on a NaN/Inf gradient, ShapeError on a length
  // mismatch between params, grads or an existing velocity buffer.
  void step(const std::string& key, std::span<float> params,
            std::span<const float> grads);

  const std::vector<float>* velocity(const std::string& key) const;

 private:
  float learning_rate_;
  float momentum_;
  std::map<std::string, std::vector<float>> velocity_;
};

}  // namespace sdcs
