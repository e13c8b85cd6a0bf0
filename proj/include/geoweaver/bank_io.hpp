// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "geoweaver/geometry_bank.hpp"
#include "geoweaver/grounding.hpp"

namespace geoweaver {

// .geobank layout, all fields little-endian:
//
//   offset  field
//        0  magic "GEOB"
//        4  version (1)
//        8  num_layers
//       12  first_layer_index
//       16  num_frames
//       20  grid_h
//       24  grid_w
//       28  d_geo
//       32  dtype (0 = IEEE-754 binary32)
//       36  layer_stride (index gap between consecutive layers, >= 1)
//       40  payload: layer, frame, row-major token, channel; float32
//
// Layer l of the file carries encoder layer first_layer_index + l * layer_stride.
constexpr std::size_t kGeobankHeaderBytes = 40;
constexpr std::uint32_t kGeobankVersion = 1;
constexpr std::uint32_t kGeobankFloat32 = 0;

struct GeobankHeader {
  std::uint32_t version = kGeobankVersion;
  std::uint32_t num_layers = 0;
  std::uint32_t first_layer_index = 0;
  std::uint32_t num_frames = 0;
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;
  std::uint32_t d_geo = 0;
  std::uint32_t dtype = kGeobankFloat32;
  std::uint32_t layer_stride = 1;

  std::uint64_t payload_values() const;
  std::uint64_t file_bytes() const { return kGeobankHeaderBytes + 4 * payload_values(); }
  std::vector<std::uint32_t> layer_indices() const;
};

std::array<std::uint8_t, kGeobankHeaderBytes> encode_geobank_header(const GeobankHeader& header);
// Throws FormatError on any invariant violation.
GeobankHeader decode_geobank_header(std::span<const std::uint8_t> bytes);

// Header describing `raw`; throws FormatError when the layer indices are not
// evenly spaced (the format stores first index + stride only).
GeobankHeader header_for(const RawLayerStack& raw);

std::vector<std::uint8_t> encode_geobank(const RawLayerStack& raw);
RawLayerStack decode_geobank(std::span<const std::uint8_t> bytes, GeobankHeader* header = nullptr);

void write_geobank(const std::filesystem::path& path, const RawLayerStack& raw);
RawLayerStack read_geobank(const std::filesystem::path& path, GeobankHeader* header = nullptr);

// ---------------------------------------------------------------------------
// Diagnostics

enum class HeatmapKind { avg_layer_index, roi_similarity, layer_histogram };

HeatmapKind parse_heatmap_kind(const std::string& name);
std::string to_string(HeatmapKind kind);

struct HeatmapGrid {
  HeatmapKind kind = HeatmapKind::avg_layer_index;
  std::size_t num_frames = 1;
  std::size_t grid_h = 0;  // rows per frame
  std::size_t grid_w = 0;
  Tensor2D values;         // (num_frames * grid_h) x grid_w
  std::vector<std::uint32_t> layer_ids;
  std::string note;
};

// Per token, the mean encoder index of its selected layers.
HeatmapGrid avg_layer_index_heatmap(const RoutingWeights& routing, std::span<const std::uint32_t> layer_ids,
                                    std::size_t num_frames, std::size_t grid_h, std::size_t grid_w);

// Cosine similarity of the query token's layer feature against every token of
// the same layer. Zero-norm rows give similarity 0.
HeatmapGrid roi_similarity_heatmap(const GeometryBank& bank, std::size_t layer, std::size_t query_token,
                                   std::size_t grid_h, std::size_t grid_w);

// Selection count per bank position, as a single row.
HeatmapGrid layer_histogram(const RoutingWeights& routing, std::span<const std::uint32_t> layer_ids);
// Same, from precomputed counts (one per bank position).
HeatmapGrid layer_histogram(std::span<const std::size_t> counts, std::span<const std::uint32_t> layer_ids);

std::string heatmap_csv(const HeatmapGrid& grid);
std::string heatmap_meta(const HeatmapGrid& grid);
// Writes `<stem>.csv` and `<stem>.meta.txt` under `dir`.
void write_heatmap(const std::filesystem::path& dir, const std::string& stem, const HeatmapGrid& grid);

// ---------------------------------------------------------------------------
// Reports

// Ordered key = value text, one pair per line.
class KeyValueReport {
 public:
  void add(const std::string& key, const std::string& value);
  void add(const std::string& key, double value, int precision = 6);
  void add(const std::string& key, std::size_t value);
  std::string render() const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

std::string format_double(double value, int precision = 6);

// Per-layer statistics plus header fields, as printed by `inspect`.
std::string describe_geobank(const GeobankHeader& header, const RawLayerStack& raw);

void write_text_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace geoweaver
