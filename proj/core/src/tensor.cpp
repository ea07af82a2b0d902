#include "sdcs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sdcs {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

void require_shape(const Shape& actual, const Shape& expected, const char* what) {
  if (actual != expected) {
    throw ShapeError(std::string(what) + ": expected shape " + expected.str() +
                     ", got " + actual.str());
  }
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill)
    : shape_(shape), data_(shape.numel(), fill) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative tensor dimension " + shape.str());
  }
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape.numel()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape.str());
  }
}

template <typename T>
std::span<T> BasicTensor<T>::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), T(0));
  return grad_;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  grad_.assign(data_.size(), T(0));
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void BasicTensor<T>::check_finite(const char* what) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw NumericError(std::string(what) + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace sdcs
