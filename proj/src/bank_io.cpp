// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/bank_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

namespace geoweaver {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'G', 'E', 'O', 'B'};

void put_u32(std::uint8_t* dst, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) dst[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint32_t get_u32(const std::uint8_t* src) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(src[i]) << (8 * i);
  return v;
}

// Multiplies without wrapping; saturates at uint64 max so an absurd header can
// never look like a small payload.
std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) return std::numeric_limits<std::uint64_t>::max();
  return a * b;
}

void validate_header(const GeobankHeader& h) {
  if (h.version != kGeobankVersion) {
    throw FormatError("geobank: unsupported version " + std::to_string(h.version));
  }
  if (h.dtype != kGeobankFloat32) throw FormatError("geobank: unsupported dtype code " + std::to_string(h.dtype));
  const std::pair<const char*, std::uint32_t> dims[] = {{"num_layers", h.num_layers}, {"num_frames", h.num_frames},
                                                        {"grid_h", h.grid_h},         {"grid_w", h.grid_w},
                                                        {"d_geo", h.d_geo},           {"layer_stride", h.layer_stride}};
  for (const auto& [name, value] : dims) {
    if (value < 1) throw FormatError(std::string("geobank: ") + name + " must be >= 1");
  }
  if (h.grid_h % 2 != 0 || h.grid_w % 2 != 0) {
    throw FormatError("geobank: odd grid " + std::to_string(h.grid_h) + "x" + std::to_string(h.grid_w));
  }
  const std::uint64_t last =
      std::uint64_t{h.first_layer_index} + std::uint64_t{h.num_layers - 1} * std::uint64_t{h.layer_stride};
  if (last > std::numeric_limits<std::uint32_t>::max()) throw FormatError("geobank: layer indices overflow");
}

}  // namespace

std::uint64_t GeobankHeader::payload_values() const {
  std::uint64_t n = num_layers;
  for (std::uint32_t f : {num_frames, grid_h, grid_w, d_geo}) n = checked_mul(n, f);
  return n;
}

std::vector<std::uint32_t> GeobankHeader::layer_indices() const {
  std::vector<std::uint32_t> out(num_layers);
  for (std::uint32_t l = 0; l < num_layers; ++l) out[l] = first_layer_index + l * layer_stride;
  return out;
}

std::array<std::uint8_t, kGeobankHeaderBytes> encode_geobank_header(const GeobankHeader& h) {
  std::array<std::uint8_t, kGeobankHeaderBytes> out{};
  std::copy(kMagic.begin(), kMagic.end(), out.begin());
  const std::uint32_t fields[] = {h.version, h.num_layers, h.first_layer_index, h.num_frames, h.grid_h,
                                  h.grid_w,  h.d_geo,      h.dtype,             h.layer_stride};
  for (std::size_t i = 0; i < std::size(fields); ++i) put_u32(out.data() + 4 + 4 * i, fields[i]);
  return out;
}

GeobankHeader decode_geobank_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kGeobankHeaderBytes) {
    throw FormatError("geobank: truncated header, expected " + std::to_string(kGeobankHeaderBytes) +
                      " bytes, got " + std::to_string(bytes.size()));
  }
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw FormatError("geobank: bad magic");
  GeobankHeader h;
  const std::uint8_t* p = bytes.data() + 4;
  h.version = get_u32(p);
  h.num_layers = get_u32(p + 4);
  h.first_layer_index = get_u32(p + 8);
  h.num_frames = get_u32(p + 12);
  h.grid_h = get_u32(p + 16);
  h.grid_w = get_u32(p + 20);
  h.d_geo = get_u32(p + 24);
  h.dtype = get_u32(p + 28);
  h.layer_stride = get_u32(p + 32);
  validate_header(h);
  return h;
}

GeobankHeader header_for(const RawLayerStack& raw) {
  raw.validate();
  if (raw.num_layers() == 0) throw FormatError("geobank: stack has no layers");
  GeobankHeader h;
  auto narrow = [](std::size_t v, const char* name) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw FormatError(std::string("geobank: ") + name + " too large");
    return static_cast<std::uint32_t>(v);
  };
  h.num_layers = narrow(raw.num_layers(), "num_layers");
  h.first_layer_index = raw.layer_indices.front();
  h.num_frames = narrow(raw.num_frames, "num_frames");
  h.grid_h = narrow(raw.grid_h, "grid_h");
  h.grid_w = narrow(raw.grid_w, "grid_w");
  h.d_geo = narrow(raw.d_geo, "d_geo");
  h.layer_stride = raw.num_layers() > 1 ? raw.layer_indices[1] - raw.layer_indices[0] : 1;
  for (std::size_t l = 1; l < raw.num_layers(); ++l) {
    if (raw.layer_indices[l] - raw.layer_indices[l - 1] != h.layer_stride) {
      throw FormatError("geobank: layer indices are not evenly spaced; the format stores first index and stride");
    }
  }
  validate_header(h);
  return h;
}

std::vector<std::uint8_t> encode_geobank(const RawLayerStack& raw) {
  const GeobankHeader h = header_for(raw);
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(h.file_bytes()));
  const auto header = encode_geobank_header(h);
  out.insert(out.end(), header.begin(), header.end());
  std::uint8_t buf[4];
  for (const Tensor2D& layer : raw.layers) {
    for (double v : layer.values()) {
      const auto f = static_cast<float>(v);
      if (!std::isfinite(f)) throw DataError("geobank: value not representable as float32");
      put_u32(buf, std::bit_cast<std::uint32_t>(f));
      out.insert(out.end(), buf, buf + 4);
    }
  }
  return out;
}

RawLayerStack decode_geobank(std::span<const std::uint8_t> bytes, GeobankHeader* header_out) {
  const GeobankHeader h = decode_geobank_header(bytes);
  const std::uint64_t expected = h.file_bytes();
  if (expected != bytes.size()) {
    throw FormatError("geobank: payload size mismatch, expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()));
  }
  RawLayerStack raw;
  raw.layer_indices = h.layer_indices();
  raw.num_frames = h.num_frames;
  raw.grid_h = h.grid_h;
  raw.grid_w = h.grid_w;
  raw.d_geo = h.d_geo;
  const std::size_t rows = raw.num_frames * raw.grid_h * raw.grid_w;
  const std::uint8_t* p = bytes.data() + kGeobankHeaderBytes;
  raw.layers.reserve(h.num_layers);
  for (std::uint32_t l = 0; l < h.num_layers; ++l) {
    Tensor2D layer(rows, raw.d_geo);
    for (double& v : layer.values()) {
      const float f = std::bit_cast<float>(get_u32(p));
      if (!std::isfinite(f)) throw FormatError("geobank: non-finite payload value in layer " + std::to_string(l));
      v = static_cast<double>(f);
      p += 4;
    }
    raw.layers.push_back(std::move(layer));
  }
  if (header_out != nullptr) *header_out = h;
  return raw;
}

void write_geobank(const std::filesystem::path& path, const RawLayerStack& raw) {
  const std::vector<std::uint8_t> bytes = encode_geobank(raw);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

RawLayerStack read_geobank(const std::filesystem::path& path, GeobankHeader* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  try {
    return decode_geobank(bytes, header);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

HeatmapKind parse_heatmap_kind(const std::string& name) {
  if (name == "avg_layer_index") return HeatmapKind::avg_layer_index;
  if (name == "roi_similarity") return HeatmapKind::roi_similarity;
  if (name == "layer_histogram") return HeatmapKind::layer_histogram;
  throw ConfigError("unknown heatmap kind '" + name + "'");
}

std::string to_string(HeatmapKind kind) {
  switch (kind) {
    case HeatmapKind::avg_layer_index:
      return "avg_layer_index";
    case HeatmapKind::roi_similarity:
      return "roi_similarity";
    case HeatmapKind::layer_histogram:
      return "layer_histogram";
  }
  return "unknown";
}

HeatmapGrid avg_layer_index_heatmap(const RoutingWeights& routing, std::span<const std::uint32_t> layer_ids,
                                    std::size_t num_frames, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t n = routing.selected.size();
  if (n != num_frames * grid_h * grid_w) {
    throw DimensionError("avg_layer_index: " + std::to_string(n) + " tokens for a " + std::to_string(num_frames) +
                         "x" + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
  HeatmapGrid grid;
  grid.kind = HeatmapKind::avg_layer_index;
  grid.num_frames = num_frames;
  grid.grid_h = grid_h;
  grid.grid_w = grid_w;
  grid.layer_ids.assign(layer_ids.begin(), layer_ids.end());
  grid.values = Tensor2D(num_frames * grid_h, grid_w);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& selected = routing.selected[t];
    if (selected.empty()) throw DimensionError("avg_layer_index: token " + std::to_string(t) + " selects nothing");
    double sum = 0.0;
    for (std::size_t l : selected) {
      if (l >= layer_ids.size()) throw IndexError("avg_layer_index: layer position " + std::to_string(l));
      sum += layer_ids[l];
    }
    grid.values.values()[t] = sum / static_cast<double>(selected.size());
  }
  return grid;
}

HeatmapGrid roi_similarity_heatmap(const GeometryBank& bank, std::size_t layer, std::size_t query_token,
                                   std::size_t grid_h, std::size_t grid_w) {
  if (layer >= bank.num_layers()) throw IndexError("roi_similarity: layer " + std::to_string(layer));
  if (query_token >= bank.token_count()) throw IndexError("roi_similarity: token " + std::to_string(query_token));
  if (grid_h * grid_w != bank.tokens_per_frame) throw DimensionError("roi_similarity: grid does not match the bank");
  const Tensor2D& g = bank.layers[layer];
  auto norm = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  const auto q = g.row(query_token);
  const double qn = norm(q);
  HeatmapGrid grid;
  grid.kind = HeatmapKind::roi_similarity;
  grid.num_frames = bank.num_frames;
  grid.grid_h = grid_h;
  grid.grid_w = grid_w;
  grid.layer_ids = {bank.layer_indices.at(layer)};
  grid.note = "query_token=" + std::to_string(query_token);
  grid.values = Tensor2D(bank.num_frames * grid_h, grid_w);
  for (std::size_t t = 0; t < bank.token_count(); ++t) {
    const auto row = g.row(t);
    const double rn = norm(row);
    double value = 0.0;
    if (qn > 0.0 && rn > 0.0) {
      double dot = 0.0;
      for (std::size_t c = 0; c < row.size(); ++c) dot += q[c] * row[c];
      value = std::clamp(dot / (qn * rn), -1.0, 1.0);
    }
    grid.values.values()[t] = value;
  }
  // Self-similarity is 1 by definition; pin it against rounding.
  if (qn > 0.0) grid.values.values()[query_token] = 1.0;
  return grid;
}

HeatmapGrid layer_histogram(const RoutingWeights& routing, std::span<const std::uint32_t> layer_ids) {
  HeatmapGrid grid;
  grid.kind = HeatmapKind::layer_histogram;
  grid.num_frames = 1;
  grid.grid_h = 1;
  grid.grid_w = layer_ids.size();
  grid.layer_ids.assign(layer_ids.begin(), layer_ids.end());
  grid.values = Tensor2D(1, layer_ids.size());
  for (const auto& selected : routing.selected) {
    for (std::size_t l : selected) {
      if (l >= layer_ids.size()) throw IndexError("layer_histogram: layer position " + std::to_string(l));
      grid.values(0, l) += 1.0;
    }
  }
  return grid;
}

HeatmapGrid layer_histogram(std::span<const std::size_t> counts, std::span<const std::uint32_t> layer_ids) {
  if (counts.size() != layer_ids.size()) {
    throw DimensionError("layer_histogram: " + std::to_string(counts.size()) + " counts for " +
                         std::to_string(layer_ids.size()) + " layers");
  }
  RoutingWeights empty;
  HeatmapGrid grid = layer_histogram(empty, layer_ids);
  for (std::size_t l = 0; l < counts.size(); ++l) grid.values(0, l) = static_cast<double>(counts[l]);
  return grid;
}

std::string format_double(double value, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, value);
  return buf;
}

std::string heatmap_csv(const HeatmapGrid& grid) {
  std::ostringstream out;
  for (std::size_t r = 0; r < grid.values.rows(); ++r) {
    for (std::size_t c = 0; c < grid.values.cols(); ++c) {
      if (c > 0) out << ',';
      out << format_double(grid.values(r, c), 6);
    }
    out << '\n';
  }
  return out.str();
}

std::string heatmap_meta(const HeatmapGrid& grid) {
  KeyValueReport meta;
  meta.add("kind", to_string(grid.kind));
  meta.add("num_frames", grid.num_frames);
  meta.add("grid_h", grid.grid_h);
  meta.add("grid_w", grid.grid_w);
  std::string ids;
  for (std::size_t i = 0; i < grid.layer_ids.size(); ++i) ids += (i ? " " : "") + std::to_string(grid.layer_ids[i]);
  meta.add("layer_ids", ids);
  if (!grid.values.empty()) {
    const auto [lo, hi] = std::minmax_element(grid.values.values().begin(), grid.values.values().end());
    meta.add("min", *lo);
    meta.add("max", *hi);
  }
  if (!grid.note.empty()) meta.add("note", grid.note);
  meta.add("layout", "frames stacked vertically, grid_h rows each");
  return meta.render();
}

void write_heatmap(const std::filesystem::path& dir, const std::string& stem, const HeatmapGrid& grid) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  write_text_file(dir / (stem + ".csv"), heatmap_csv(grid));
  write_text_file(dir / (stem + ".meta.txt"), heatmap_meta(grid));
}

void KeyValueReport::add(const std::string& key, const std::string& value) { entries_.emplace_back(key, value); }

void KeyValueReport::add(const std::string& key, double value, int precision) {
  entries_.emplace_back(key, format_double(value, precision));
}

void KeyValueReport::add(const std::string& key, std::size_t value) { entries_.emplace_back(key, std::to_string(value)); }

std::string KeyValueReport::render() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

std::string describe_geobank(const GeobankHeader& h, const RawLayerStack& raw) {
  std::ostringstream out;
  out << "version = " << h.version << '\n'
      << "num_layers = " << h.num_layers << '\n'
      << "first_layer_index = " << h.first_layer_index << '\n'
      << "layer_stride = " << h.layer_stride << '\n'
      << "num_frames = " << h.num_frames << '\n'
      << "grid = " << h.grid_h << "x" << h.grid_w << '\n'
      << "d_geo = " << h.d_geo << '\n'
      << "dtype = float32\n"
      << "payload_bytes = " << 4 * h.payload_values() << '\n';
  out << "layer,index,mean,std,min,max\n";
  for (std::size_t l = 0; l < raw.num_layers(); ++l) {
    const auto& v = raw.layers[l].values();
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    out << l << ',' << raw.layer_indices[l] << ',' << format_double(mean) << ',' << format_double(std::sqrt(var)) << ','
        << format_double(*lo) << ',' << format_double(*hi) << '\n';
  }
  return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << contents;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace geoweaver
