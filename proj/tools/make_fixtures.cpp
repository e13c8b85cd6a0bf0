// SPDX-License-Identifier: Apache-2.0
// Regenerates the committed .geobank fixtures:
//
//   make_fixtures <output dir>
//
// valid_* files must load; bad_* files must be rejected with a format error.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "geoweaver/bank_io.hpp"

namespace {

using geoweaver::RawLayerStack;
using geoweaver::Tensor2D;

RawLayerStack make_stack(std::uint32_t first, std::size_t layers, std::size_t frames, std::size_t grid,
                         std::size_t d_geo, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> value(0.0f, 1.0f);
  RawLayerStack raw;
  raw.num_frames = frames;
  raw.grid_h = grid;
  raw.grid_w = grid;
  raw.d_geo = d_geo;
  for (std::size_t l = 0; l < layers; ++l) {
    raw.layer_indices.push_back(first + static_cast<std::uint32_t>(l));
    Tensor2D t(frames * grid * grid, d_geo);
    for (double& x : t.values()) x = static_cast<double>(value(rng)) + static_cast<double>(l);
    raw.layers.push_back(std::move(t));
  }
  return raw;
}

void put_u32(std::vector<std::uint8_t>& bytes, std::size_t offset, std::uint32_t v) {
  for (std::size_t i = 0; i < 4; ++i) bytes[offset + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

void save(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw geoweaver::IoError(path.string() + ": write failed");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixtures <output dir>\n";
    return 2;
  }
  const std::filesystem::path dir = argv[1];
  std::filesystem::create_directories(dir);

  // Latter half of a 24-layer encoder, two 8x8 frames.
  const RawLayerStack twelve = make_stack(12, 12, 2, 8, 16, 2024);
  geoweaver::write_geobank(dir / "valid_12layer.geobank", twelve);

  RawLayerStack constant = make_stack(0, 2, 1, 4, 4, 7);
  for (double& x : constant.layers[0].values()) x = 3.5;
  geoweaver::write_geobank(dir / "valid_constant_layer.geobank", constant);

  const std::vector<std::uint8_t> good = geoweaver::encode_geobank(make_stack(0, 2, 1, 4, 4, 9));
  struct Corruption {
    const char* name;
    std::size_t offset;
    std::uint32_t value;
  };
  const Corruption corruptions[] = {
      {"bad_magic", 0, 0x58585858},   // "XXXX"
      {"bad_version", 4, 2},
      {"bad_dtype", 32, 1},
      {"bad_odd_grid", 20, 3},
      {"bad_zero_dim", 28, 0},
      {"bad_zero_stride", 36, 0},
      {"bad_index_overflow", 12, 0xffffffff},
  };
  for (const Corruption& c : corruptions) {
    std::vector<std::uint8_t> bytes = good;
    put_u32(bytes, c.offset, c.value);
    save(dir / (std::string(c.name) + ".geobank"), bytes);
  }
  save(dir / "bad_truncated.geobank", std::vector<std::uint8_t>(good.begin(), good.end() - 1));
  std::vector<std::uint8_t> longer = good;
  longer.push_back(0);
  save(dir / "bad_oversized.geobank", longer);
  save(dir / "bad_short_header.geobank", std::vector<std::uint8_t>(good.begin(), good.begin() + 20));
  std::cout << "fixtures written to " << dir.string() << "\n";
  return 0;
}
