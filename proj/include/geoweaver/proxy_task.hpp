// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geoweaver/geometry_bank.hpp"
#include "geoweaver/grounding.hpp"
#include "geoweaver/numerics.hpp"

namespace geoweaver {

// Synthetic routed-evidence task. The visual token of each merged position
// carries its role (one-hot + noise) but nothing about the label; the label is
// written into the raw geometry features of the role's signal layer only.
struct ProxyConfig {
  // Reference bank: the latter `num_layers` layers of an `encoder_layers`-deep
  // encoder. Signal positions are relative to that reference bank.
  std::size_t num_layers = 12;
  std::size_t encoder_layers = 24;
  // Bank actually built for a run (bank_size 0 means num_layers, or the
  // explicit list's length).
  LayerStrategy bank_strategy = LayerStrategy::latter_half;
  std::size_t bank_size = 0;
  std::vector<std::uint32_t> explicit_layers;

  std::size_t num_frames = 2;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t d_geo = 16;
  std::size_t d_model = 32;
  std::size_t num_roles = 4;
  std::size_t num_classes = 4;

  std::vector<std::size_t> signal_layer_map = {2, 5, 8, 11};
  // Two-signal variant: label = 2a + b. The latent a = label / 2 lives at
  // signal_layer_map[role] (channels [0, C/2)), the bit b = label % 2 at
  // second_signal_layer_map[role] (channels [C/2, C/2 + 2)). Neither layer
  // alone determines the label.
  bool two_signal = false;
  std::vector<std::size_t> second_signal_layer_map = {4, 7, 10, 11};

  std::vector<double> role_weights = {0.7, 0.1, 0.1, 0.1};
  double noise_std = 1.0;
  double visual_noise_std = 0.1;
  double signal_amplitude = 1.0;
  // Scale of the Gaussian noise kept underneath the written one-hots.
  double signal_noise = 0.0;
  // Every layer writes a one-hot into the signal channels: the true label at
  // the token's signal layer, a random class everywhere else.
  bool distractors = true;
  // When set, each bank layer starts from this stack's layer with the same
  // encoder index (plus noise_std Gaussian noise) instead of pure noise.
  std::shared_ptr<const RawLayerStack> background;

  std::size_t train_samples = 512;
  std::size_t test_samples = 256;
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  double lr = 1e-3;
  MergeMode merge = MergeMode::concat;
  std::size_t trace_every = 100;

  // Full-scale values, recorded for reports only.
  double full_scale_lr = 1e-5;
  std::size_t full_scale_batch_size = 64;
  std::size_t full_scale_frames = 8;
  std::size_t full_scale_top_k = 2;

  std::size_t effective_bank_size() const {
    if (bank_strategy == LayerStrategy::explicit_list && bank_size == 0) return explicit_layers.size();
    return bank_size == 0 ? num_layers : bank_size;
  }
  std::size_t merged_tokens() const { return num_frames * (grid_h / 2) * (grid_w / 2); }
  std::vector<std::uint32_t> bank_layers() const;
  // Encoder index of each role's signal layer(s).
  std::uint32_t signal_encoder_layer(std::size_t role) const;
  std::uint32_t second_signal_encoder_layer(std::size_t role) const;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct ProxySample {
  RawLayerStack raw;
  VisualTokens visual;
  std::vector<int> roles;
  std::vector<int> labels;
};

struct ProxyDataset {
  std::vector<ProxySample> train;
  std::vector<ProxySample> test;
};

ProxyDataset generate_task(const ProxyConfig& config, std::uint64_t seed);

// Bank position of each role's primary signal layer within a generated bank,
// or -1 when the layer was not selected.
std::vector<int> signal_positions(const ProxyConfig& config, const std::vector<std::uint32_t>& bank_layers,
                                  bool second = false);

struct ProbeHead {
  Tensor2D weight;  // C x in (in = D, or 2D for decoder_fusion)
  Tensor2D bias;    // 1 x C

  std::size_t num_classes() const { return weight.rows(); }
  static ProbeHead init(std::size_t in_dim, std::size_t num_classes, std::mt19937_64& rng);
};

struct ProbeOutput {
  double loss = 0.0;
  // Same mean, accumulated in extended precision. Finite-difference checks
  // difference two of these, where double rounding of an O(1) loss would
  // otherwise swamp small gradient components.
  long double precise_loss = 0.0L;
  Tensor2D logits;  // tokens x C
};

// Mean token-level cross-entropy of probe(V' [; late]).
ProbeOutput probe_loss(const GroundedTokens& grounded, const ProbeHead& probe, std::span<const int> labels);

struct ProbeGradients {
  ProbeHead probe;
  Tensor2D grounded;  // dLoss/dV'
  Tensor2D late;      // dLoss/dlate (decoder_fusion only)
};

ProbeGradients probe_loss_backward(const GroundedTokens& grounded, const ProbeHead& probe, std::span<const int> labels,
                                   const ProbeOutput& output);

}  // namespace geoweaver
