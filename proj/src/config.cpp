// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace geoweaver {

namespace {

// One value under its dotted path. `mark` falls back to the key's position
// when the value itself has none (empty values).
struct Field {
  YAML::Node node;
  YAML::Mark mark;
  std::string path;
};

class Parser {
 public:
  explicit Parser(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const YAML::Mark& mark, const std::string& field, const std::string& why) const {
    std::string where = source_;
    if (!mark.is_null()) where += ":" + std::to_string(mark.line + 1) + ":" + std::to_string(mark.column + 1);
    throw ConfigError(where + ": " + field + ": " + why);
  }
  [[noreturn]] void fail(const Field& f, const std::string& why) const { fail(f.mark, f.path, why); }

  // Calls `visit` for every key of a mapping, rejecting duplicates and
  // leaving unknown keys to the visitor.
  void each_key(const Field& f, const std::function<bool(const std::string&, const Field&)>& visit) const {
    if (f.node.IsNull()) return;
    if (!f.node.IsMap()) fail(f, "expected a mapping");
    std::set<std::string> seen;
    for (const auto& kv : f.node) {
      if (!kv.first.IsScalar()) fail(kv.first.Mark(), f.path, "keys must be scalars");
      const std::string key = kv.first.Scalar();
      const std::string path = f.path.empty() ? key : f.path + "." + key;
      if (!seen.insert(key).second) fail(kv.first.Mark(), path, "duplicate key");
      const YAML::Mark mark = kv.second.Mark().is_null() ? kv.first.Mark() : kv.second.Mark();
      if (!visit(key, Field{kv.second, mark, path})) fail(kv.first.Mark(), path, "unknown key");
    }
  }

  std::string scalar(const Field& f) const {
    if (!f.node.IsScalar()) fail(f, "expected a scalar value");
    return f.node.Scalar();
  }

  std::uint64_t uint(const Field& f) const {
    const std::string s = scalar(f);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
      fail(f, "expected a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  std::size_t size(const Field& f) const { return static_cast<std::size_t>(uint(f)); }

  std::size_t positive(const Field& f) const {
    const std::size_t v = size(f);
    if (v == 0) fail(f, "must be >= 1");
    return v;
  }

  std::uint32_t u32(const Field& f) const {
    const std::uint64_t v = uint(f);
    if (v > 0xffffffffULL) fail(f, "value exceeds 32 bits");
    return static_cast<std::uint32_t>(v);
  }

  double real(const Field& f) const {
    const std::string s = scalar(f);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) fail(f, "expected a number, got '" + s + "'");
    if (!std::isfinite(v)) fail(f, "must be finite");
    return v;
  }

  double non_negative(const Field& f) const {
    const double v = real(f);
    if (v < 0.0) fail(f, "must be >= 0");
    return v;
  }

  bool boolean(const Field& f) const {
    const std::string s = scalar(f);
    if (s == "true") return true;
    if (s == "false") return false;
    fail(f, "expected true or false, got '" + s + "'");
  }

  template <typename T, typename Item>
  std::vector<T> list(const Field& f, Item&& item) const {
    if (!f.node.IsSequence()) fail(f, "expected a list");
    std::vector<T> out;
    for (std::size_t i = 0; i < f.node.size(); ++i) {
      const YAML::Node n = f.node[i];
      out.push_back(item(Field{n, n.Mark().is_null() ? f.mark : n.Mark(), f.path + "[" + std::to_string(i) + "]"}));
    }
    return out;
  }

  // Enum parsers throw ConfigError without a position; re-anchor it here.
  template <typename E>
  E enumeration(const Field& f, E (*parse)(const std::string&)) const {
    const std::string s = scalar(f);
    try {
      return parse(s);
    } catch (const ConfigError& e) {
      fail(f, e.what());
    }
  }

 private:
  std::string source_;
};

void parse_task(const Parser& p, const Field& section, ExperimentConfig& out) {
  ProxyConfig& t = out.task;
  p.each_key(section, [&](const std::string& key, const Field& f) {
    if (key == "num_layers") t.num_layers = p.positive(f);
    else if (key == "encoder_layers") t.encoder_layers = p.positive(f);
    else if (key == "num_frames") t.num_frames = p.positive(f);
    else if (key == "grid_h") t.grid_h = p.positive(f);
    else if (key == "grid_w") t.grid_w = p.positive(f);
    else if (key == "d_geo") t.d_geo = p.positive(f);
    else if (key == "d_model") t.d_model = p.positive(f);
    else if (key == "num_roles") t.num_roles = p.positive(f);
    else if (key == "num_classes") t.num_classes = p.positive(f);
    else if (key == "signal_layer_map") t.signal_layer_map = p.list<std::size_t>(f, [&](const Field& i) { return p.size(i); });
    else if (key == "two_signal") t.two_signal = p.boolean(f);
    else if (key == "second_signal_layer_map")
      t.second_signal_layer_map = p.list<std::size_t>(f, [&](const Field& i) { return p.size(i); });
    else if (key == "role_weights") t.role_weights = p.list<double>(f, [&](const Field& i) { return p.non_negative(i); });
    else if (key == "noise_std") t.noise_std = p.non_negative(f);
    else if (key == "visual_noise_std") t.visual_noise_std = p.non_negative(f);
    else if (key == "signal_amplitude") t.signal_amplitude = p.real(f);
    else if (key == "signal_noise") t.signal_noise = p.non_negative(f);
    else if (key == "distractors") t.distractors = p.boolean(f);
    else if (key == "train_samples") t.train_samples = p.positive(f);
    else if (key == "test_samples") t.test_samples = p.positive(f);
    else if (key == "background_geobank") {
      out.background_geobank = p.scalar(f);
      if (out.background_geobank.empty()) p.fail(f, "must be a non-empty path");
    } else return false;
    return true;
  });
}

void parse_bank(const Parser& p, const Field& section, ProxyConfig& t) {
  p.each_key(section, [&](const std::string& key, const Field& f) {
    if (key == "strategy") t.bank_strategy = p.enumeration(f, &parse_layer_strategy);
    else if (key == "size") t.bank_size = p.size(f);
    else if (key == "explicit_layers") t.explicit_layers = p.list<std::uint32_t>(f, [&](const Field& i) { return p.u32(i); });
    else if (key == "merge") t.merge = p.enumeration(f, &parse_merge_mode);
    else return false;
    return true;
  });
}

void parse_grounding(const Parser& p, const Field& section, ModelOptions& m) {
  p.each_key(section, [&](const std::string& key, const Field& f) {
    if (key == "mode") m.mode = p.enumeration(f, &parse_allocation_mode);
    else if (key == "top_k") m.top_k = p.positive(f);
    else if (key == "position") m.position = p.enumeration(f, &parse_grounding_position);
    else if (key == "router_init_std") m.router_std = p.non_negative(f);
    else return false;
    return true;
  });
}

void parse_training(const Parser& p, const Field& section, ProxyConfig& t) {
  p.each_key(section, [&](const std::string& key, const Field& f) {
    if (key == "steps") t.steps = p.size(f);
    else if (key == "batch_size") t.batch_size = p.positive(f);
    else if (key == "lr") {
      t.lr = p.real(f);
      if (t.lr <= 0.0) p.fail(f, "must be > 0");
    } else if (key == "trace_every") t.trace_every = p.size(f);
    else return false;
    return true;
  });
}

void parse_output(const Parser& p, const Field& section, ExperimentConfig& out) {
  p.each_key(section, [&](const std::string& key, const Field& f) {
    if (key == "dir") {
      out.output_dir = p.scalar(f);
      if (out.output_dir.empty()) p.fail(f, "must be a non-empty path");
    } else if (key == "heatmaps") {
      out.heatmaps = p.list<HeatmapKind>(f, [&](const Field& i) { return p.enumeration(i, &parse_heatmap_kind); });
      std::set<HeatmapKind> unique(out.heatmaps.begin(), out.heatmaps.end());
      if (unique.size() != out.heatmaps.size()) p.fail(f, "lists a heatmap kind twice");
    } else return false;
    return true;
  });
}

void parse_full_scale(const Parser& p, const Field& section, ProxyConfig& t) {
  p.each_key(section, [&](const std::string& key, const Field& f) {
    if (key == "lr") t.full_scale_lr = p.non_negative(f);
    else if (key == "batch_size") t.full_scale_batch_size = p.size(f);
    else if (key == "frames") t.full_scale_frames = p.size(f);
    else if (key == "top_k") t.full_scale_top_k = p.size(f);
    else return false;
    return true;
  });
}

// Shortest text that reads back to the same double.
std::string exact(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, ptr);
  if (s.find_first_of(".eE") == std::string::npos && s.find("inf") == std::string::npos &&
      s.find("nan") == std::string::npos) {
    s += ".0";
  }
  return s;
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

template <typename T, typename Fn>
std::string flow(const std::vector<T>& items, Fn&& fmt) {
  std::string out = "[";
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + fmt(items[i]);
  return out + "]";
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [&](const std::string& field, const std::string& why) {
    throw ConfigError(source + ": " + field + ": " + why);
  };
  if (seeds.empty()) fail("seeds", "must list at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    fail("seeds", "must not repeat a seed");
  }
  if (model.top_k == 0) fail("grounding.top_k", "must be >= 1");
  if (output_dir.empty()) fail("output.dir", "must be a non-empty path");
  try {
    task.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": task: " + e.what());
  }
}

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& source) {
  const Parser p(source);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    p.fail(e.mark, "yaml", e.msg);
  }
  if (!root.IsMap()) p.fail(root.Mark(), "<root>", "expected a mapping of sections");

  ExperimentConfig config;
  config.source = source;
  p.each_key(Field{root, root.Mark(), ""}, [&](const std::string& key, const Field& f) {
    if (key == "name") config.name = p.scalar(f);
    else if (key == "task") parse_task(p, f, config);
    else if (key == "bank") parse_bank(p, f, config.task);
    else if (key == "grounding") parse_grounding(p, f, config.model);
    else if (key == "training") parse_training(p, f, config.task);
    else if (key == "output") parse_output(p, f, config);
    else if (key == "full_scale") parse_full_scale(p, f, config.task);
    else if (key == "seeds") {
      if (f.node.IsNull()) p.fail(f, "must list at least one seed");
      config.seeds = p.list<std::uint64_t>(f, [&](const Field& i) { return p.uint(i); });
      if (config.seeds.empty()) p.fail(f, "must list at least one seed");
    } else return false;
    return true;
  });
  config.validate();
  return config;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::ostringstream text;
  text << in.rdbuf();
  ExperimentConfig config = parse_experiment_config(text.str(), path.string());
  if (!config.background_geobank.empty() && config.background_geobank.is_relative()) {
    config.background_geobank = path.parent_path() / config.background_geobank;
  }
  return config;
}

std::string render_experiment_config(const ExperimentConfig& c) {
  const ProxyConfig& t = c.task;
  auto num = [](std::size_t v) { return std::to_string(v); };
  auto u32 = [](std::uint32_t v) { return std::to_string(v); };
  auto u64 = [](std::uint64_t v) { return std::to_string(v); };
  auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
  auto kind = [](HeatmapKind k) { return to_string(k); };

  std::ostringstream o;
  o << "name: " << quoted(c.name) << "\n";
  o << "task:\n";
  o << "  num_layers: " << t.num_layers << "\n";
  o << "  encoder_layers: " << t.encoder_layers << "\n";
  o << "  num_frames: " << t.num_frames << "\n";
  o << "  grid_h: " << t.grid_h << "\n";
  o << "  grid_w: " << t.grid_w << "\n";
  o << "  d_geo: " << t.d_geo << "\n";
  o << "  d_model: " << t.d_model << "\n";
  o << "  num_roles: " << t.num_roles << "\n";
  o << "  num_classes: " << t.num_classes << "\n";
  o << "  signal_layer_map: " << flow(t.signal_layer_map, num) << "\n";
  o << "  two_signal: " << flag(t.two_signal) << "\n";
  o << "  second_signal_layer_map: " << flow(t.second_signal_layer_map, num) << "\n";
  o << "  role_weights: " << flow(t.role_weights, exact) << "\n";
  o << "  noise_std: " << exact(t.noise_std) << "\n";
  o << "  visual_noise_std: " << exact(t.visual_noise_std) << "\n";
  o << "  signal_amplitude: " << exact(t.signal_amplitude) << "\n";
  o << "  signal_noise: " << exact(t.signal_noise) << "\n";
  o << "  distractors: " << flag(t.distractors) << "\n";
  o << "  train_samples: " << t.train_samples << "\n";
  o << "  test_samples: " << t.test_samples << "\n";
  if (!c.background_geobank.empty()) o << "  background_geobank: " << quoted(c.background_geobank.string()) << "\n";
  o << "bank:\n";
  o << "  strategy: " << to_string(t.bank_strategy) << "\n";
  o << "  size: " << t.bank_size << "\n";
  o << "  explicit_layers: " << flow(t.explicit_layers, u32) << "\n";
  o << "  merge: " << to_string(t.merge) << "\n";
  o << "grounding:\n";
  o << "  mode: " << to_string(c.model.mode) << "\n";
  o << "  top_k: " << c.model.top_k << "\n";
  o << "  position: " << to_string(c.model.position) << "\n";
  o << "  router_init_std: " << exact(c.model.router_std) << "\n";
  o << "training:\n";
  o << "  steps: " << t.steps << "\n";
  o << "  batch_size: " << t.batch_size << "\n";
  o << "  lr: " << exact(t.lr) << "\n";
  o << "  trace_every: " << t.trace_every << "\n";
  o << "seeds: " << flow(c.seeds, u64) << "\n";
  o << "output:\n";
  o << "  dir: " << quoted(c.output_dir.string()) << "\n";
  o << "  heatmaps: " << flow(c.heatmaps, kind) << "\n";
  o << "full_scale:\n";
  o << "  lr: " << exact(t.full_scale_lr) << "\n";
  o << "  batch_size: " << t.full_scale_batch_size << "\n";
  o << "  frames: " << t.full_scale_frames << "\n";
  o << "  top_k: " << t.full_scale_top_k << "\n";
  return o.str();
}

}  // namespace geoweaver
