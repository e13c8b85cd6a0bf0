// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/proxy_task.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace geoweaver {

namespace {

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kTestStream = 2;

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError(field + ": " + why);
}

// Independent engine per (seed, stream, sample, encoder layer), so a layer's
// content does not depend on which other layers a bank keeps.
std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream, std::uint64_t sample, std::uint64_t slot) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(sample),
                    static_cast<std::uint32_t>(slot)};
  return std::mt19937_64(seq);
}

// Writes scale * noise + amplitude * onehot(cls) into channels
// [offset, offset + width) of all four raw sub-tokens of merged token t.
void write_one_hot(RawLayerStack& raw, Tensor2D& layer, std::size_t t, std::size_t offset, std::size_t width,
                   int cls, double amplitude, double noise_scale) {
  for (std::size_t row : raw.sub_tokens(t)) {
    auto dst = layer.row(row);
    for (std::size_t c = 0; c < width; ++c) {
      const double hot = static_cast<int>(c) == cls ? amplitude : 0.0;
      dst[offset + c] = noise_scale * dst[offset + c] + hot;
    }
  }
}

ProxySample make_sample(const ProxyConfig& config, const std::vector<std::uint32_t>& layers, std::uint64_t seed,
                        std::uint64_t stream, std::uint64_t index) {
  const std::size_t tokens = config.merged_tokens();
  const std::size_t raw_rows = config.num_frames * config.grid_h * config.grid_w;

  ProxySample sample;
  std::mt19937_64 rng = make_engine(seed, stream, index, 0);
  std::discrete_distribution<int> role_dist(config.role_weights.begin(), config.role_weights.end());
  std::uniform_int_distribution<int> label_dist(0, static_cast<int>(config.num_classes) - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  sample.roles.resize(tokens);
  sample.labels.resize(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    sample.roles[t] = role_dist(rng);
    sample.labels[t] = label_dist(rng);
  }
  sample.visual.num_frames = config.num_frames;
  sample.visual.tokens_per_frame = tokens / config.num_frames;
  sample.visual.matrix = Tensor2D(tokens, config.d_model);
  for (std::size_t t = 0; t < tokens; ++t) {
    auto v = sample.visual.matrix.row(t);
    for (double& x : v) x = config.visual_noise_std * normal(rng);
    v[static_cast<std::size_t>(sample.roles[t])] += 1.0;
  }

  RawLayerStack& raw = sample.raw;
  raw.layer_indices = layers;
  raw.num_frames = config.num_frames;
  raw.grid_h = config.grid_h;
  raw.grid_w = config.grid_w;
  raw.d_geo = config.d_geo;
  raw.layers.reserve(layers.size());

  const std::size_t half = config.num_classes / 2;
  for (std::uint32_t encoder_layer : layers) {
    std::mt19937_64 layer_rng = make_engine(seed, stream, index, std::uint64_t{encoder_layer} + 1);
    Tensor2D z(raw_rows, config.d_geo);
    for (double& x : z.values()) x = config.noise_std * normal(layer_rng);
    if (config.background) {
      const RawLayerStack& bg = *config.background;
      const auto pos = static_cast<std::size_t>(
          std::find(bg.layer_indices.begin(), bg.layer_indices.end(), encoder_layer) - bg.layer_indices.begin());
      for (std::size_t i = 0; i < z.size(); ++i) z.values()[i] += bg.layers[pos].values()[i];
    }
    std::uniform_int_distribution<int> first_dist(0, static_cast<int>(config.two_signal ? half : config.num_classes) - 1);
    std::uniform_int_distribution<int> bit_dist(0, 1);
    for (std::size_t t = 0; t < tokens; ++t) {
      const auto role = static_cast<std::size_t>(sample.roles[t]);
      const int label = sample.labels[t];
      // Distractor draws happen unconditionally to keep the stream layout fixed.
      const int decoy_first = first_dist(layer_rng);
      const int decoy_bit = bit_dist(layer_rng);
      if (!config.two_signal) {
        const bool signal = encoder_layer == config.signal_encoder_layer(role);
        if (signal || config.distractors) {
          write_one_hot(raw, z, t, 0, config.num_classes, signal ? label : decoy_first, config.signal_amplitude,
                        config.signal_noise);
        }
        continue;
      }
      const bool first = encoder_layer == config.signal_encoder_layer(role);
      const bool second = encoder_layer == config.second_signal_encoder_layer(role);
      if (first || config.distractors) {
        write_one_hot(raw, z, t, 0, half, first ? label / 2 : decoy_first, config.signal_amplitude,
                      config.signal_noise);
      }
      if (second || config.distractors) {
        write_one_hot(raw, z, t, half, 2, second ? label % 2 : decoy_bit, config.signal_amplitude,
                      config.signal_noise);
      }
    }
    raw.layers.push_back(std::move(z));
  }
  return sample;
}

}  // namespace

std::vector<std::uint32_t> ProxyConfig::bank_layers() const {
  return select_layers(encoder_layers, bank_strategy, effective_bank_size(), explicit_layers);
}

std::uint32_t ProxyConfig::signal_encoder_layer(std::size_t role) const {
  return static_cast<std::uint32_t>(encoder_layers - num_layers + signal_layer_map.at(role));
}

std::uint32_t ProxyConfig::second_signal_encoder_layer(std::size_t role) const {
  return static_cast<std::uint32_t>(encoder_layers - num_layers + second_signal_layer_map.at(role));
}

void ProxyConfig::validate() const {
  require(num_layers >= 1, "num_layers", "must be >= 1");
  require(encoder_layers >= num_layers, "encoder_layers", "must be >= num_layers");
  if (bank_strategy == LayerStrategy::explicit_list) {
    require(!explicit_layers.empty(), "explicit_layers", "required by the explicit bank strategy");
  } else {
    require(effective_bank_size() <= encoder_layers, "bank_size", "must be <= encoder_layers");
  }
  require(num_frames >= 1, "num_frames", "must be >= 1");
  require(grid_h >= 2 && grid_h % 2 == 0, "grid_h", "must be even and >= 2");
  require(grid_w >= 2 && grid_w % 2 == 0, "grid_w", "must be even and >= 2");
  require(num_classes >= 2, "num_classes", "must be >= 2");
  require(num_classes <= d_geo, "num_classes", "must fit in d_geo channels");
  require(num_roles >= 1 && num_roles <= d_model, "num_roles", "must be in [1, d_model]");

  require(signal_layer_map.size() == num_roles, "signal_layer_map", "needs one entry per role");
  std::set<std::size_t> used;
  for (std::size_t p : signal_layer_map) {
    require(p < num_layers, "signal_layer_map", "entry " + std::to_string(p) + " outside [0, num_layers)");
    require(used.insert(p).second, "signal_layer_map", "must be injective");
  }
  if (two_signal) {
    require(num_classes % 2 == 0, "num_classes", "must be even for the two-signal variant");
    require(num_classes / 2 + 2 <= d_geo, "d_geo", "too small for the two-signal channels");
    require(second_signal_layer_map.size() == num_roles, "second_signal_layer_map", "needs one entry per role");
    for (std::size_t p : second_signal_layer_map) {
      require(p < num_layers, "second_signal_layer_map", "entry " + std::to_string(p) + " outside [0, num_layers)");
      require(used.insert(p).second, "second_signal_layer_map", "must not reuse a signal layer");
    }
  }

  require(role_weights.size() == num_roles, "role_weights", "needs one entry per role");
  double total = 0.0;
  for (double w : role_weights) {
    require(std::isfinite(w) && w >= 0.0, "role_weights", "entries must be finite and >= 0");
    total += w;
  }
  require(total > 0.0, "role_weights", "must not sum to zero");
  require(std::isfinite(noise_std) && noise_std >= 0.0, "noise_std", "must be finite and >= 0");
  require(std::isfinite(visual_noise_std) && visual_noise_std >= 0.0, "visual_noise_std", "must be finite and >= 0");
  require(std::isfinite(signal_amplitude), "signal_amplitude", "must be finite");
  require(std::isfinite(signal_noise) && signal_noise >= 0.0, "signal_noise", "must be finite and >= 0");
  require(train_samples >= 1, "train_samples", "must be >= 1");
  require(test_samples >= 1, "test_samples", "must be >= 1");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(std::isfinite(lr) && lr > 0.0, "lr", "must be > 0");
  // Surfaces select_layers range errors as config errors on this struct.
  const std::vector<std::uint32_t> layers = bank_layers();
  if (background) {
    const RawLayerStack& bg = *background;
    bg.validate();
    require(bg.num_frames == num_frames && bg.grid_h == grid_h && bg.grid_w == grid_w && bg.d_geo == d_geo,
            "background_geobank", "frame/grid/d_geo shape differs from the task");
    for (std::uint32_t l : layers) {
      require(std::find(bg.layer_indices.begin(), bg.layer_indices.end(), l) != bg.layer_indices.end(),
              "background_geobank", "has no encoder layer " + std::to_string(l) + " required by the bank");
    }
  }
}

ProxyDataset generate_task(const ProxyConfig& config, std::uint64_t seed) {
  config.validate();
  const std::vector<std::uint32_t> layers = config.bank_layers();
  ProxyDataset data;
  data.train.reserve(config.train_samples);
  data.test.reserve(config.test_samples);
  for (std::size_t i = 0; i < config.train_samples; ++i) {
    data.train.push_back(make_sample(config, layers, seed, kTrainStream, i));
  }
  for (std::size_t i = 0; i < config.test_samples; ++i) {
    data.test.push_back(make_sample(config, layers, seed, kTestStream, i));
  }
  return data;
}

std::vector<int> signal_positions(const ProxyConfig& config, const std::vector<std::uint32_t>& bank_layers,
                                  bool second) {
  std::vector<int> positions(config.num_roles, -1);
  for (std::size_t r = 0; r < config.num_roles; ++r) {
    const std::uint32_t target = second ? config.second_signal_encoder_layer(r) : config.signal_encoder_layer(r);
    const auto it = std::find(bank_layers.begin(), bank_layers.end(), target);
    if (it != bank_layers.end()) positions[r] = static_cast<int>(it - bank_layers.begin());
  }
  return positions;
}

ProbeHead ProbeHead::init(std::size_t in_dim, std::size_t num_classes, std::mt19937_64& rng) {
  ProbeHead probe;
  probe.weight = Tensor2D(num_classes, in_dim);
  probe.bias = Tensor2D(1, num_classes);
  fill_fan_in_uniform(probe.weight, in_dim, rng);
  fill_fan_in_uniform(probe.bias, in_dim, rng);
  return probe;
}

namespace {

Tensor2D probe_input(const GroundedTokens& grounded) {
  if (grounded.late_evidence.empty()) return grounded.matrix;
  if (grounded.late_evidence.rows() != grounded.matrix.rows()) {
    throw DimensionError("probe: late evidence row count mismatch");
  }
  const std::size_t d = grounded.matrix.cols();
  const std::size_t late = grounded.late_evidence.cols();
  Tensor2D in(grounded.matrix.rows(), d + late);
  for (std::size_t i = 0; i < in.rows(); ++i) {
    auto dst = in.row(i);
    std::copy(grounded.matrix.row(i).begin(), grounded.matrix.row(i).end(), dst.begin());
    std::copy(grounded.late_evidence.row(i).begin(), grounded.late_evidence.row(i).end(),
              dst.begin() + static_cast<std::ptrdiff_t>(d));
  }
  return in;
}

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) {
    throw DimensionError("probe_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " tokens");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("probe_loss: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

}  // namespace

ProbeOutput probe_loss(const GroundedTokens& grounded, const ProbeHead& probe, std::span<const int> labels) {
  const Tensor2D in = probe_input(grounded);
  if (in.cols() != probe.weight.cols()) {
    throw DimensionError("probe_loss: input dim " + std::to_string(in.cols()) + " vs probe dim " +
                         std::to_string(probe.weight.cols()));
  }
  check_labels(labels, in.rows(), probe.num_classes());
  ProbeOutput out;
  linear_forward(in, probe.weight, &probe.bias, out.logits);
  long double total = 0.0L;
  for (std::size_t i = 0; i < in.rows(); ++i) {
    const auto z = out.logits.row(i);
    const long double m = *std::max_element(z.begin(), z.end());
    long double sum = 0.0L;
    for (double v : z) sum += std::exp(static_cast<long double>(v) - m);
    total += m + std::log(sum) - static_cast<long double>(z[static_cast<std::size_t>(labels[i])]);
  }
  out.precise_loss = in.rows() == 0 ? 0.0L : total / static_cast<long double>(in.rows());
  out.loss = static_cast<double>(out.precise_loss);
  return out;
}

ProbeGradients probe_loss_backward(const GroundedTokens& grounded, const ProbeHead& probe, std::span<const int> labels,
                                   const ProbeOutput& output) {
  const Tensor2D in = probe_input(grounded);
  check_labels(labels, in.rows(), probe.num_classes());
  const std::size_t n = in.rows();
  Tensor2D grad_logits(n, probe.num_classes());
  const double scale = n == 0 ? 0.0 : 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = softmax(output.logits.row(i));
    auto g = grad_logits.row(i);
    for (std::size_t c = 0; c < p.size(); ++c) g[c] = scale * p[c];
    g[static_cast<std::size_t>(labels[i])] -= scale;
  }
  ProbeGradients grads;
  grads.probe.weight = Tensor2D(probe.weight.rows(), probe.weight.cols());
  grads.probe.bias = Tensor2D(1, probe.num_classes());
  Tensor2D grad_in;
  linear_backward(in, probe.weight, grad_logits, &grad_in, &grads.probe.weight, &grads.probe.bias);

  const std::size_t d = grounded.matrix.cols();
  if (grounded.late_evidence.empty()) {
    grads.grounded = std::move(grad_in);
    return grads;
  }
  grads.grounded = Tensor2D(n, d);
  grads.late = Tensor2D(n, grounded.late_evidence.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = grad_in.row(i);
    std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(d), grads.grounded.row(i).begin());
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(d), src.end(), grads.late.row(i).begin());
  }
  return grads;
}

}  // namespace geoweaver
