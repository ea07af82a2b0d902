#include "sdcs/image_io.hpp"

#include <png.h>
#include <tiffio.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

namespace sdcs {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct TiffCloser {
  void operator()(TIFF* t) const {
    if (t) TIFFClose(t);
  }
};

std::string lower_ext(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

}  // namespace

RasterImage read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw FormatError("cannot open image " + path.string());
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw FormatError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw FormatError("libpng: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError("libpng: cannot create info struct");
  }
  // Locals touched after setjmp must not live in registers.
  std::vector<std::uint8_t> pixels;
  int width = 0;
  int height = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("libpng: failed decoding " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const png_byte color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<png_size_t>(width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("unsupported PNG layout in " + path.string());
  }
  pixels.resize(static_cast<std::size_t>(width) * height * 3);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return RasterImage(width, height, std::move(pixels));
}

void write_png(const std::filesystem::path& path, const RasterImage& image) {
  if (image.empty()) throw FormatError("refusing to write an empty image to " + path.string());
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw FormatError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw FormatError("libpng: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("libpng: cannot create info struct");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng: failed encoding " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, image.width(), image.height(), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or text chunks: identical pixels give identical files.
  png_write_info(png, info);
  auto bytes = image.bytes();
  for (int y = 0; y < image.height(); ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * image.width() * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

RasterImage read_tiff(const std::filesystem::path& path) {
  TIFFSetWarningHandler(nullptr);
  std::unique_ptr<TIFF, TiffCloser> tif(TIFFOpen(path.c_str(), "r"));
  if (!tif) throw FormatError("cannot open TIFF " + path.string());
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &width);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &height);
  std::vector<std::uint32_t> rgba(static_cast<std::size_t>(width) * height);
  if (!TIFFReadRGBAImageOriented(tif.get(), width, height, rgba.data(), ORIENTATION_TOPLEFT, 0)) {
    throw FormatError("libtiff: failed decoding " + path.string());
  }
  std::vector<std::uint8_t> pixels(rgba.size() * 3);
  for (std::size_t i = 0; i < rgba.size(); ++i) {
    pixels[3 * i] = static_cast<std::uint8_t>(TIFFGetR(rgba[i]));
    pixels[3 * i + 1] = static_cast<std::uint8_t>(TIFFGetG(rgba[i]));
    pixels[3 * i + 2] = static_cast<std::uint8_t>(TIFFGetB(rgba[i]));
  }
  return RasterImage(static_cast<int>(width), static_cast<int>(height), std::move(pixels));
}

RasterImage read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("image not found: " + path.string());
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".tif" || ext == ".tiff") return read_tiff(path);
  throw FormatError("unsupported image extension '" + ext + "' for " + path.string());
}

}  // namespace sdcs
