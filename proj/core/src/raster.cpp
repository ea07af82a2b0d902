#include "sdcs/raster.hpp"

#include <algorithm>

namespace sdcs {

RasterImage::RasterImage(int width, int height, Rgb fill)
    : width_(width), height_(height) {
  if (width < 0 || height < 0) throw ShapeError("negative image dimensions");
  bytes_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < bytes_.size(); i += 3) {
    bytes_[i] = fill[0];
    bytes_[i + 1] = fill[1];
    bytes_[i + 2] = fill[2];
  }
}

RasterImage::RasterImage(int width, int height, std::vector<std::uint8_t> interleaved)
    : width_(width), height_(height), bytes_(std::move(interleaved)) {
  if (width < 0 || height < 0) throw ShapeError("negative image dimensions");
  if (bytes_.size() != static_cast<std::size_t>(width) * height * 3) {
    throw ShapeError("RGB buffer of " + std::to_string(bytes_.size()) + " bytes does not match " +
                     std::to_string(width) + "x" + std::to_string(height));
  }
}

RasterImage RasterImage::crop(int x, int y, int w, int h) const {
  if (x < 0 || y < 0 || w < 0 || h < 0 || x + w > width_ || y + h > height_) {
    throw ShapeError("crop rectangle (" + std::to_string(x) + "," + std::to_string(y) + "," +
                     std::to_string(w) + "," + std::to_string(h) + ") outside " +
                     std::to_string(width_) + "x" + std::to_string(height_) + " image");
  }
  RasterImage out(w, h);
  for (int r = 0; r < h; ++r) {
    auto src = bytes_.begin() + static_cast<std::ptrdiff_t>(offset(x, y + r));
    std::copy_n(src, static_cast<std::size_t>(w) * 3,
                out.bytes_.begin() + static_cast<std::ptrdiff_t>(out.offset(0, r)));
  }
  return out;
}

void RasterImage::paste(const RasterImage& src, int x, int y) {
  if (x < 0 || y < 0 || x + src.width_ > width_ || y + src.height_ > height_) {
    throw ShapeError("paste target outside image");
  }
  for (int r = 0; r < src.height_; ++r) {
    std::copy_n(src.bytes_.begin() + static_cast<std::ptrdiff_t>(src.offset(0, r)),
                static_cast<std::size_t>(src.width_) * 3,
                bytes_.begin() + static_cast<std::ptrdiff_t>(offset(x, y + r)));
  }
}

}  // namespace sdcs
