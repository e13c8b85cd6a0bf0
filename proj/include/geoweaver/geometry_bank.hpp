// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geoweaver/numerics.hpp"

namespace geoweaver {

enum class LayerStrategy { first_half, uniform, latter_half, explicit_list };

LayerStrategy parse_layer_strategy(const std::string& name);
std::string to_string(LayerStrategy strategy);

// Picks `bank_size` encoder layers. latter_half takes the last bank_size
// indices, first_half the first bank_size, and uniform splits the encoder
// into bank_size contiguous blocks and keeps the last layer of each block.
std::vector<std::uint32_t> select_layers(std::size_t num_encoder_layers, LayerStrategy strategy,
                                         std::size_t bank_size,
                                         std::span<const std::uint32_t> explicit_indices = {});

// Pre-alignment per-layer features. Each layer is a
// (num_frames * grid_h * grid_w) x d_geo matrix, frame-major then row-major.
struct RawLayerStack {
  std::vector<std::uint32_t> layer_indices;
  std::size_t num_frames = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t d_geo = 0;
  std::vector<Tensor2D> layers;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t tokens_per_frame() const { return grid_h * grid_w; }
  std::size_t merged_tokens_per_frame() const { return (grid_h / 2) * (grid_w / 2); }
  std::size_t merged_token_count() const { return num_frames * merged_tokens_per_frame(); }

  // Throws DimensionError when shapes disagree, grid dims are odd, or
  // indices are not strictly increasing.
  void validate() const;

  // Row indices of the four raw sub-tokens (TL, TR, BL, BR) under merged token t.
  std::array<std::size_t, 4> sub_tokens(std::size_t merged_token) const;
};

struct GeometryBank {
  std::vector<std::uint32_t> layer_indices;
  std::size_t num_frames = 0;
  std::size_t tokens_per_frame = 0;  // N_p
  std::size_t d_model = 0;
  std::vector<Tensor2D> layers;  // (num_frames * N_p) x d_model each

  std::size_t num_layers() const { return layers.size(); }
  std::size_t token_count() const { return num_frames * tokens_per_frame; }
};

enum class MergeMode { concat, mean };

MergeMode parse_merge_mode(const std::string& name);
std::string to_string(MergeMode mode);

// Two-layer perceptron shared by every bank layer: in -> hidden (GELU) -> out.
struct Projector {
  Tensor2D w1;  // hidden x in
  Tensor2D b1;  // 1 x hidden
  Tensor2D w2;  // out x hidden
  Tensor2D b2;  // 1 x out

  std::size_t in_dim() const { return w1.cols(); }
  std::size_t hidden_dim() const { return w1.rows(); }
  std::size_t out_dim() const { return w2.rows(); }

  static Projector zeros(std::size_t in, std::size_t hidden, std::size_t out);
  static Projector random(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);
};

struct BankParams {
  Tensor2D gamma;  // |S| x d_geo, one affine row per layer
  Tensor2D beta;   // |S| x d_geo
  Projector phi;
  MergeMode merge = MergeMode::concat;
  double eps = kLayerNormEps;

  std::size_t num_layers() const { return gamma.rows(); }
  std::size_t d_geo() const { return gamma.cols(); }

  static BankParams init(std::size_t num_layers, std::size_t d_geo, std::size_t d_model, MergeMode merge,
                         std::mt19937_64& rng);
  // Same shapes, every entry zero; used as a gradient accumulator.
  BankParams zeros_like() const;
};

std::size_t merged_dim(MergeMode merge, std::size_t d_geo);

Tensor2D normalize_layer(const Tensor2D& z, std::span<const double> gamma, std::span<const double> beta,
                         double eps = kLayerNormEps);

Tensor2D spatial_merge_2x2(const Tensor2D& grid, std::size_t num_frames, std::size_t grid_h, std::size_t grid_w,
                           MergeMode merge = MergeMode::concat);

Tensor2D project_layer(const Tensor2D& merged, const Projector& phi);

GeometryBank build_bank(const RawLayerStack& raw, const BankParams& params);

// Backward through build_bank: given dLoss/dG^(l) for every layer, accumulates
// gradients for the affines and the projector into `grads`.
void build_bank_backward(const RawLayerStack& raw, const BankParams& params,
                         const std::vector<Tensor2D>& grad_layers, BankParams& grads);

// Evaluates G^(l)_t only for requested (token, layer) pairs, across any number
// of raw stacks. Produces the same rows as build_bank but skips unselected
// layers, which is what the training loop needs for sparse allocation.
struct BankQuery {
  const RawLayerStack* raw = nullptr;
  std::size_t token = 0;
  std::size_t layer = 0;  // bank position
};

class SparseBankProjection {
 public:
  // Returns a queries.size() x d_model matrix.
  const Tensor2D& forward(std::span<const BankQuery> queries, const BankParams& params);
  // grad_rows: queries.size() x d_model. Accumulates into grads.
  void backward(const Tensor2D& grad_rows, const BankParams& params, BankParams& grads) const;

 private:
  std::vector<BankQuery> queries_;
  Tensor2D x_hat_;                // 4 rows per query
  std::vector<double> inv_std_;   // 4 per query
  Tensor2D merged_;
  Tensor2D pre_activation_;
  Tensor2D cdf_;
  Tensor2D hidden_;
  Tensor2D output_;
};

}  // namespace geoweaver
