#include <algorithm>

#include "sdcs/error.hpp"
#include "sdcs/pipeline.hpp"

namespace sdcs::pipeline {

std::vector<int> tile_origins(int extent, int tile_size) {
  if (extent < 1) throw ShapeError("cannot tile an empty image");
  if (tile_size < 1) throw ConfigError("tile size must be positive");
  if (extent <= tile_size) return {0};
  std::vector<int> origins;
  for (int o = 0; o + tile_size < extent; o += tile_size) origins.push_back(o);
  origins.push_back(extent - tile_size);
  return origins;
}

TiledImage tile_image(const RasterImage& image, int tile_size, const std::string& source_id) {
  TiledImage out;
  out.manifest.source_id = source_id;
  out.manifest.image_width = image.width();
  out.manifest.image_height = image.height();
  out.manifest.tile_size = tile_size;
  const auto xs = tile_origins(image.width(), tile_size);
  const auto ys = tile_origins(image.height(), tile_size);
  for (int y : ys) {
    for (int x : xs) {
      const int w = std::min(tile_size, image.width());
      const int h = std::min(tile_size, image.height());
      out.tiles.push_back(image.crop(x, y, w, h));
      out.manifest.tiles.push_back({x, y, w, h, 1.0});
    }
  }
  return out;
}

RasterImage reassemble(const TileManifest& manifest, const std::vector<RasterImage>& tiles) {
  if (tiles.size() != manifest.tiles.size()) throw DataError("tile count does not match the manifest");
  RasterImage image(manifest.image_width, manifest.image_height);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const TileInfo& t = manifest.tiles[i];
    if (tiles[i].width() != t.width || tiles[i].height() != t.height) {
      throw ShapeError("tile " + std::to_string(i) + " does not match its manifest size");
    }
    image.paste(tiles[i], t.x, t.y);
  }
  return image;
}

std::array<int, 4> owned_region(const TileManifest& manifest, std::size_t tile) {
  const TileInfo& t = manifest.tiles.at(tile);
  // The owned span of an origin ends where the next origin on its axis starts.
  auto span_end = [](int origin, int size, int extent, const std::vector<int>& origins) {
    for (int o : origins) {
      if (o > origin) return o;
    }
    return std::min(origin + size, extent);
  };
  const auto xs = tile_origins(manifest.image_width, manifest.tile_size);
  const auto ys = tile_origins(manifest.image_height, manifest.tile_size);
  return {t.x, t.y, span_end(t.x, t.width, manifest.image_width, xs),
          span_end(t.y, t.height, manifest.image_height, ys)};
}

TissueMask tissue_mask(const RasterImage& tile, const TissueConfig& config) {
  const int w = tile.width();
  const int h = tile.height();
  TissueMask out;
  out.mask = Mask(w, h, 0);
  if (w == 0 || h == 0) return out;
  const int r = config.smoothing_radius;

  // Summed-area table per channel for the clamped box mean.
  const std::size_t stride = static_cast<std::size_t>(w) + 1;
  std::vector<double> sums(stride * (h + 1) * 3, 0.0);
  auto at = [&](int x, int y, int c) -> double& { return sums[(y * stride + x) * 3 + c]; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        at(x + 1, y + 1, c) = tile.channel(x, y, c) + at(x, y + 1, c) + at(x + 1, y, c) - at(x, y, c);
      }
    }
  }
  long tissue = 0;
  for (int y = 0; y < h; ++y) {
    const int y0 = std::max(0, y - r);
    const int y1 = std::min(h, y + r + 1);
    for (int x = 0; x < w; ++x) {
      const int x0 = std::max(0, x - r);
      const int x1 = std::min(w, x + r + 1);
      const double n = static_cast<double>(x1 - x0) * (y1 - y0);
      double m[3];
      for (int c = 0; c < 3; ++c) {
        m[c] = (at(x1, y1, c) - at(x0, y1, c) - at(x1, y0, c) + at(x0, y0, c)) / n;
      }
      const double hi = std::max({m[0], m[1], m[2]});
      const double lo = std::min({m[0], m[1], m[2]});
      const double saturation = hi > 0.0 ? (hi - lo) / hi : 0.0;
      const double luminance = 0.299 * m[0] + 0.587 * m[1] + 0.114 * m[2];
      const bool background = saturation < config.max_saturation && luminance > config.min_luminance;
      out.mask.at(x, y) = background ? 0 : 1;
      tissue += !background;
    }
  }
  out.fraction = static_cast<double>(tissue) / (static_cast<double>(w) * h);
  return out;
}

}  // namespace sdcs::pipeline
