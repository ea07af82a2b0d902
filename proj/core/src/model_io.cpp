#include "sdcs/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace sdcs {
namespace binio {
namespace {

template <typename U>
void write_le(std::ostream& out, U v) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw FormatError("unexpected end of binary stream");
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
void write_f32(std::ostream& out, float v) { write_le(out, std::bit_cast<std::uint32_t>(v)); }
void write_f64(std::ostream& out, double v) { write_le(out, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return read_le<std::uint64_t>(in); }
float read_f32(std::istream& in) { return std::bit_cast<float>(read_le<std::uint32_t>(in)); }
double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<std::uint64_t>(in)); }

void write_magic(std::ostream& out, const std::array<char, 4>& magic) {
  out.write(magic.data(), magic.size());
}

void expect_magic(std::istream& in, const std::array<char, 4>& magic, const char* what) {
  std::array<char, 4> got{};
  if (!in.read(got.data(), got.size()) || got != magic) {
    throw FormatError(std::string(what) + ": bad magic, expected \"" +
                      std::string(magic.begin(), magic.end()) + "\"");
  }
}

}  // namespace binio

namespace {

constexpr std::uint32_t kMaxLayers = 1u << 16;
constexpr std::uint64_t kMaxElements = 1ull << 32;

bool known_kind(std::uint32_t tag) { return tag >= 1 && tag <= 8; }

}  // namespace

void write_layers(std::ostream& out, const std::vector<LayerParams>& layers) {
  binio::write_magic(out, kWeightsMagic);
  binio::write_u32(out, kWeightsFormatVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(layers.size()));
  for (const LayerParams& layer : layers) {
    layer.validate();
    binio::write_u32(out, static_cast<std::uint32_t>(layer.kind));
    binio::write_u32(out, static_cast<std::uint32_t>(layer.stride));
    binio::write_f32(out, layer.scale);
    const Shape& s = layer.weights.shape();
    for (int d : {s.n, s.c, s.h, s.w}) binio::write_u32(out, static_cast<std::uint32_t>(d));
    for (float v : layer.weights.data()) binio::write_f32(out, v);
    binio::write_u32(out, static_cast<std::uint32_t>(layer.bias.size()));
    for (float v : layer.bias) binio::write_f32(out, v);
  }
  if (!out) throw FormatError("failed writing weight container");
}

std::vector<LayerParams> read_layers(std::istream& in) {
  binio::expect_magic(in, kWeightsMagic, "weight container");
  const std::uint32_t version = binio::read_u32(in);
  if (version != kWeightsFormatVersion) {
    throw FormatError("unsupported weight format version " + std::to_string(version));
  }
  const std::uint32_t count = binio::read_u32(in);
  if (count > kMaxLayers) throw FormatError("implausible layer count " + std::to_string(count));
  std::vector<LayerParams> layers;
  layers.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerParams layer;
    const std::uint32_t tag = binio::read_u32(in);
    if (!known_kind(tag)) {
      throw FormatError("layer " + std::to_string(i) + ": unknown kind tag " +
                        std::to_string(tag));
    }
    layer.kind = static_cast<LayerKind>(tag);
    layer.stride = static_cast<int>(binio::read_u32(in));
    layer.scale = binio::read_f32(in);
    std::uint32_t dims[4];
    std::uint64_t numel = 1;
    for (auto& d : dims) {
      d = binio::read_u32(in);
      numel *= d;
    }
    if (numel > kMaxElements) throw FormatError("implausible layer size");
    Shape shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                static_cast<int>(dims[2]), static_cast<int>(dims[3])};
    std::vector<float> weights(numel);
    for (float& v : weights) v = binio::read_f32(in);
    layer.weights = Tensor(shape, std::move(weights));
    const std::uint32_t bias_len = binio::read_u32(in);
    if (bias_len > kMaxElements) throw FormatError("implausible bias length");
    layer.bias.resize(bias_len);
    for (float& v : layer.bias) v = binio::read_f32(in);
    try {
      layer.validate();
    } catch (const ShapeError& e) {
      throw FormatError("layer " + std::to_string(i) + ": " + e.what());
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

void save_layers(const std::filesystem::path& path, const std::vector<LayerParams>& layers) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_layers(out, layers);
}

std::vector<LayerParams> load_layers(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file " + path.string());
  return read_layers(in);
}

}  // namespace sdcs
