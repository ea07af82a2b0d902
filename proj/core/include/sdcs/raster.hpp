#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sdcs/error.hpp"

namespace sdcs {

// Single-channel image with row-major storage.
template <typename T>
class Plane {
 public:
  Plane() = default;
  Plane(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(checked(width, height)) * height, fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

  T& at(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  const T& at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  bool operator==(const Plane&) const = default;

 private:
  static int checked(int width, int height) {
    if (width < 0 || height < 0) throw ShapeError("negative plane dimensions");
    return width;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using FloatPlane = Plane<float>;
using Mask = Plane<std::uint8_t>;
using LabelPlane = Plane<std::int32_t>;

using Rgb = std::array<std::uint8_t, 3>;

// 8-bit, 3-channel interleaved RGB tile.
class RasterImage {
 public:
  RasterImage() = default;
  RasterImage(int width, int height, Rgb fill = {0, 0, 0});
  RasterImage(int width, int height, std::vector<std::uint8_t> interleaved);

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return width_ == 0 || height_ == 0; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

  Rgb pixel(int x, int y) const {
    const std::size_t i = offset(x, y);
    return {bytes_[i], bytes_[i + 1], bytes_[i + 2]};
  }
  void set_pixel(int x, int y, Rgb value) {
    const std::size_t i = offset(x, y);
    bytes_[i] = value[0];
    bytes_[i + 1] = value[1];
    bytes_[i + 2] = value[2];
  }
  std::uint8_t channel(int x, int y, int c) const { return bytes_[offset(x, y) + c]; }

  std::span<const std::uint8_t> bytes() const { return bytes_; }
  std::span<std::uint8_t> bytes() { return bytes_; }

  // Copy of the rectangle [x, x+w) x [y, y+h); must lie inside the image.
  RasterImage crop(int x, int y, int w, int h) const;
  // Writes `src` with its top-left corner at (x, y); must fit.
  void paste(const RasterImage& src, int x, int y);

  bool operator==(const RasterImage&) const = default;

 private:
  std::size_t offset(int x, int y) const {
    return (static_cast<std::size_t>(y) * width_ + x) * 3;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bytes_;
};

}  // namespace sdcs
