#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sdcs/error.hpp"

namespace sdcs {

// (batch, channels, height, width); data is row-major in that order.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
               shape_.w +
           x;
  }
  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  T at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  // Pointer to the start of channel plane (n, c).
  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  bool has_grad() const { return !grad_.empty(); }
  // Allocates a zeroed gradient buffer of matching length if absent.
  std::span<T> grad();
  std::span<const T> grad() const { return grad_; }
  void zero_grad();
  void drop_grad() { grad_.clear(); }

  void fill(T value);
  // Throws NumericError if any element is NaN or infinite.
  void check_finite(const char* what) const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Throws ShapeError with `what` and both shapes in the message.
void require_shape(const Shape& actual, const Shape& expected, const char* what);

}  // namespace sdcs
