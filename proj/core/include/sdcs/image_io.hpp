#pragma once

#include <filesystem>

#include "sdcs/raster.hpp"

namespace sdcs {

// 8-bit RGB PNG. Gray, palette and alpha inputs are converted to RGB.
RasterImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RasterImage& image);

// Any libtiff-readable RGB(A)/gray TIFF, converted to 8-bit RGB.
RasterImage read_tiff(const std::filesystem::path& path);

// Dispatches on extension (.png, .tif, .tiff). Throws FormatError when the
// file is missing or unreadable.
RasterImage read_image(const std::filesystem::path& path);

}  // namespace sdcs
