#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sdcs/layers.hpp"

namespace sdcs {

inline constexpr std::array<char, 4> kWeightsMagic = {'S', 'D', 'C', 'S'};
inline constexpr std::uint32_t kWeightsFormatVersion = 1;

// Layer container:
//   magic[4] "SDCS" | u32 version | u32 layer_count |
//   per layer: u32 kind | u32 stride | f32 scale | u32 dims[4] |
//              f32 weights[prod(dims)] | u32 bias_len | f32 bias[bias_len]
// All integers and floats little-endian.
void write_layers(std::ostream& out, const std::vector<LayerParams>& layers);
std::vector<LayerParams> read_layers(std::istream& in);

void save_layers(const std::filesystem::path& path, const std::vector<LayerParams>& layers);
std::vector<LayerParams> load_layers(const std::filesystem::path& path);

// Little-endian primitives shared by the other binary containers.
namespace binio {
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f32(std::ostream& out, float v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
float read_f32(std::istream& in);
double read_f64(std::istream& in);
void write_magic(std::ostream& out, const std::array<char, 4>& magic);
// Throws FormatError naming `what` when the stream does not start with magic.
void expect_magic(std::istream& in, const std::array<char, 4>& magic, const char* what);
}  // namespace binio

}  // namespace sdcs
