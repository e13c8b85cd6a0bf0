// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "geoweaver/bank_io.hpp"

namespace geoweaver {
namespace {

const std::filesystem::path kFixtures = std::filesystem::path(GEOWEAVER_SOURCE_DIR) / "tests" / "fixtures";

RawLayerStack stack(std::uint32_t first, std::size_t layers, std::size_t frames, std::size_t h, std::size_t w,
                    std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  RawLayerStack raw;
  raw.num_frames = frames;
  raw.grid_h = h;
  raw.grid_w = w;
  raw.d_geo = d;
  for (std::size_t l = 0; l < layers; ++l) {
    raw.layer_indices.push_back(first + static_cast<std::uint32_t>(l));
    Tensor2D t(frames * h * w, d);
    for (double& x : t.values()) x = n(rng);
    raw.layers.push_back(std::move(t));
  }
  return raw;
}

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "geoweaver_test_bank_io";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string format_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_geobank(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

TEST(Geobank, HeaderLayoutIsLittleEndian) {
  const RawLayerStack raw = stack(12, 3, 2, 4, 6, 5, 1);
  const std::vector<std::uint8_t> bytes = encode_geobank(raw);
  ASSERT_GE(bytes.size(), kGeobankHeaderBytes);
  const std::uint8_t expected[kGeobankHeaderBytes] = {
      'G', 'E', 'O', 'B', 1, 0, 0, 0, 3, 0, 0, 0, 12, 0, 0, 0, 2, 0, 0, 0,
      4,   0,   0,   0,   6, 0, 0, 0, 5, 0, 0, 0, 0,  0, 0, 0, 1, 0, 0, 0};
  for (std::size_t i = 0; i < kGeobankHeaderBytes; ++i) EXPECT_EQ(bytes[i], expected[i]) << "byte " << i;
  EXPECT_EQ(bytes.size(), 40u + 3u * 2u * 4u * 6u * 5u * 4u);
}

TEST(Geobank, FloatPayloadRoundTrip) {
  RawLayerStack raw = stack(0, 2, 1, 2, 2, 3, 2);
  raw.layers[0](0, 0) = 0.1;  // not representable in binary32
  const RawLayerStack back = decode_geobank(encode_geobank(raw));
  EXPECT_EQ(back.layer_indices, raw.layer_indices);
  EXPECT_EQ(back.layers[0](0, 0), static_cast<double>(0.1f));
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t i = 0; i < raw.layers[l].size(); ++i) {
      EXPECT_EQ(back.layers[l].values()[i], static_cast<double>(static_cast<float>(raw.layers[l].values()[i])));
    }
  }
  // Downcast values are fixed points of a second round trip.
  EXPECT_EQ(encode_geobank(back), encode_geobank(raw));
}

TEST(Geobank, StrideCarriesSparseIndices) {
  RawLayerStack raw = stack(0, 3, 1, 2, 2, 2, 3);
  raw.layer_indices = {5, 11, 17};
  GeobankHeader header;
  const RawLayerStack back = decode_geobank(encode_geobank(raw), &header);
  EXPECT_EQ(header.layer_stride, 6u);
  EXPECT_EQ(back.layer_indices, raw.layer_indices);
  raw.layer_indices = {5, 11, 18};
  EXPECT_THROW(encode_geobank(raw), FormatError);
}

TEST(Geobank, FileRoundTrip) {
  const RawLayerStack raw = stack(12, 2, 2, 4, 4, 3, 4);
  const auto path = temp_path("roundtrip.geobank");
  write_geobank(path, raw);
  EXPECT_EQ(std::filesystem::file_size(path), 40u + 2u * 2u * 16u * 3u * 4u);
  EXPECT_EQ(encode_geobank(read_geobank(path)), encode_geobank(raw));
}

TEST(Geobank, TruncationNamesByteCounts) {
  std::vector<std::uint8_t> bytes = encode_geobank(stack(0, 2, 1, 2, 2, 2, 5));
  bytes.pop_back();
  EXPECT_NE(format_error(bytes).find("expected 104 bytes, got 103"), std::string::npos) << format_error(bytes);
  bytes.resize(10);
  EXPECT_FALSE(format_error(bytes).empty());
}

TEST(Geobank, HeaderCorruptionsRejected) {
  const std::vector<std::uint8_t> good = encode_geobank(stack(0, 2, 1, 2, 2, 2, 6));
  auto corrupt = [&](std::size_t offset, std::uint8_t value) {
    std::vector<std::uint8_t> bytes = good;
    bytes[offset] = value;
    return format_error(bytes);
  };
  EXPECT_NE(corrupt(0, 'X').find("magic"), std::string::npos);
  EXPECT_NE(corrupt(4, 2).find("version"), std::string::npos);
  EXPECT_FALSE(corrupt(8, 0).empty());    // zero layers
  EXPECT_FALSE(corrupt(20, 3).empty());   // odd grid_h
  EXPECT_FALSE(corrupt(24, 0).empty());   // zero grid_w
  EXPECT_FALSE(corrupt(32, 1).empty());   // dtype
  EXPECT_FALSE(corrupt(36, 0).empty());   // zero stride
  std::vector<std::uint8_t> overflow = good;
  for (std::size_t i = 12; i < 16; ++i) overflow[i] = 0xff;  // last index overflows 32 bits
  EXPECT_FALSE(format_error(overflow).empty());
}

TEST(Geobank, CommittedFixtures) {
  GeobankHeader header;
  const RawLayerStack twelve = read_geobank(kFixtures / "valid_12layer.geobank", &header);
  EXPECT_EQ(header.num_layers, 12u);
  EXPECT_EQ(twelve.layer_indices.front(), 12u);
  EXPECT_EQ(twelve.layer_indices.back(), 23u);
  EXPECT_EQ(twelve.grid_h, 8u);
  EXPECT_EQ(twelve.d_geo, 16u);
  for (const auto& entry : std::filesystem::directory_iterator(kFixtures)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("bad_", 0) != 0) continue;
    EXPECT_THROW(read_geobank(entry.path()), FormatError) << name;
  }
  try {
    read_geobank(kFixtures / "bad_magic.geobank");
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad_magic.geobank"), std::string::npos);
  }
}

TEST(Geobank, MissingFileIsIoError) {
  EXPECT_THROW(read_geobank(kFixtures / "does_not_exist.geobank"), IoError);
}

TEST(Describe, ConstantLayerHasZeroStd) {
  GeobankHeader header;
  const RawLayerStack raw = read_geobank(kFixtures / "valid_constant_layer.geobank", &header);
  const std::string text = describe_geobank(header, raw);
  EXPECT_NE(text.find("num_layers = 2\n"), std::string::npos);
  EXPECT_NE(text.find("grid = 4x4\n"), std::string::npos);
  EXPECT_NE(text.find("\n0,0,3.500000,0.000000,3.500000,3.500000\n"), std::string::npos) << text;
}

TEST(Heatmap, AverageLayerIndex) {
  RoutingWeights routing;
  routing.weights = Tensor2D(4, 3);
  routing.selected = {{0, 2}, {1, 2}, {0, 1}, {2, 0}};
  const std::vector<std::uint32_t> ids = {12, 16, 20};
  const HeatmapGrid grid = avg_layer_index_heatmap(routing, ids, 1, 2, 2);
  EXPECT_EQ(grid.values, Tensor2D(2, 2, {16.0, 18.0, 14.0, 16.0}));
  EXPECT_THROW(avg_layer_index_heatmap(routing, ids, 1, 2, 4), DimensionError);
}

TEST(Heatmap, RoiSimilarity) {
  GeometryBank bank;
  bank.num_frames = 1;
  bank.tokens_per_frame = 4;
  bank.d_model = 2;
  bank.layer_indices = {7};
  bank.layers = {Tensor2D(4, 2, {1, 0, 0, 3, -2, 0, 0, 0})};
  const HeatmapGrid grid = roi_similarity_heatmap(bank, 0, 0, 2, 2);
  EXPECT_EQ(grid.values, Tensor2D(2, 2, {1.0, 0.0, -1.0, 0.0}));
  EXPECT_THROW(roi_similarity_heatmap(bank, 0, 4, 2, 2), IndexError);
}

TEST(Heatmap, HistogramCountsSumToTokensTimesK) {
  std::mt19937_64 rng(3);
  RoutingWeights routing;
  const std::size_t tokens = 50;
  routing.weights = Tensor2D(tokens, 5);
  for (std::size_t t = 0; t < tokens; ++t) {
    const std::size_t a = rng() % 5;
    routing.selected.push_back({a, (a + 1 + rng() % 4) % 5});
  }
  const std::vector<std::uint32_t> ids = {1, 2, 3, 4, 5};
  const HeatmapGrid grid = layer_histogram(routing, ids);
  double sum = 0.0;
  for (double v : grid.values.values()) sum += v;
  EXPECT_EQ(sum, 2.0 * tokens);
  EXPECT_EQ(grid.values.rows(), 1u);
  EXPECT_EQ(grid.values.cols(), 5u);
}

TEST(Heatmap, CsvAndKinds) {
  HeatmapGrid grid;
  grid.kind = HeatmapKind::roi_similarity;
  grid.grid_h = 1;
  grid.grid_w = 2;
  grid.values = Tensor2D(1, 2, {0.5, -1.0});
  EXPECT_EQ(heatmap_csv(grid), "0.500000,-1.000000\n");
  EXPECT_NE(heatmap_meta(grid).find("roi_similarity"), std::string::npos);
  EXPECT_EQ(parse_heatmap_kind("layer_histogram"), HeatmapKind::layer_histogram);
  EXPECT_THROW(parse_heatmap_kind("pie_chart"), ConfigError);
}

TEST(Report, KeyValueRendering) {
  KeyValueReport report;
  report.add("name", "x");
  report.add("accuracy", 0.25, 3);
  report.add("tokens", std::size_t{32});
  EXPECT_EQ(report.render(), "name = x\naccuracy = 0.250\ntokens = 32\n");
}

}  // namespace
}  // namespace geoweaver
