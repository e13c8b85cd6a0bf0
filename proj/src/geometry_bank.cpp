// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/geometry_bank.hpp"

#include <algorithm>
#include <cmath>

namespace geoweaver {

namespace {

void require_merge_input(std::size_t merged_cols, const Projector& phi) {
  if (merged_cols != phi.in_dim()) {
    throw DimensionError("project_layer: merged token dim " + std::to_string(merged_cols) +
                         " != projector input dim " + std::to_string(phi.in_dim()));
  }
}

// Row index of raw sub-token `k` (0..3 as TL, TR, BL, BR) under merged token t.
std::size_t sub_token_row(std::size_t t, std::size_t k, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t mh = grid_h / 2;
  const std::size_t mw = grid_w / 2;
  const std::size_t per_frame = mh * mw;
  const std::size_t frame = t / per_frame;
  const std::size_t within = t % per_frame;
  const std::size_t i = within / mw;
  const std::size_t j = within % mw;
  const std::size_t r = 2 * i + k / 2;
  const std::size_t c = 2 * j + k % 2;
  return frame * grid_h * grid_w + r * grid_w + c;
}

}  // namespace

LayerStrategy parse_layer_strategy(const std::string& name) {
  if (name == "first_half") return LayerStrategy::first_half;
  if (name == "uniform") return LayerStrategy::uniform;
  if (name == "latter_half") return LayerStrategy::latter_half;
  if (name == "explicit" || name == "explicit_list") return LayerStrategy::explicit_list;
  throw ConfigError("unknown layer strategy '" + name + "'");
}

std::string to_string(LayerStrategy strategy) {
  switch (strategy) {
    case LayerStrategy::first_half:
      return "first_half";
    case LayerStrategy::uniform:
      return "uniform";
    case LayerStrategy::latter_half:
      return "latter_half";
    case LayerStrategy::explicit_list:
      return "explicit";
  }
  return "unknown";
}

std::vector<std::uint32_t> select_layers(std::size_t num_encoder_layers, LayerStrategy strategy,
                                         std::size_t bank_size, std::span<const std::uint32_t> explicit_indices) {
  if (bank_size < 1 || bank_size > num_encoder_layers) {
    throw ConfigError("select_layers: bank_size " + std::to_string(bank_size) + " outside [1, " +
                      std::to_string(num_encoder_layers) + "]");
  }
  std::vector<std::uint32_t> out;
  out.reserve(bank_size);
  switch (strategy) {
    case LayerStrategy::first_half:
      for (std::size_t i = 0; i < bank_size; ++i) out.push_back(static_cast<std::uint32_t>(i));
      break;
    case LayerStrategy::latter_half:
      for (std::size_t i = num_encoder_layers - bank_size; i < num_encoder_layers; ++i) {
        out.push_back(static_cast<std::uint32_t>(i));
      }
      break;
    case LayerStrategy::uniform:
      for (std::size_t b = 0; b < bank_size; ++b) {
        out.push_back(static_cast<std::uint32_t>((b + 1) * num_encoder_layers / bank_size - 1));
      }
      break;
    case LayerStrategy::explicit_list:
      if (explicit_indices.size() != bank_size) {
        throw ConfigError("select_layers: explicit list has " + std::to_string(explicit_indices.size()) +
                          " entries, bank_size is " + std::to_string(bank_size));
      }
      for (std::size_t i = 0; i < explicit_indices.size(); ++i) {
        if (explicit_indices[i] >= num_encoder_layers) {
          throw ConfigError("select_layers: layer " + std::to_string(explicit_indices[i]) + " out of range");
        }
        if (i > 0 && explicit_indices[i] <= explicit_indices[i - 1]) {
          throw ConfigError("select_layers: explicit indices must be strictly increasing");
        }
        out.push_back(explicit_indices[i]);
      }
      break;
  }
  return out;
}

void RawLayerStack::validate() const {
  if (layers.empty()) throw DimensionError("RawLayerStack: no layers");
  if (layer_indices.size() != layers.size()) {
    throw DimensionError("RawLayerStack: " + std::to_string(layer_indices.size()) + " indices for " +
                         std::to_string(layers.size()) + " layers");
  }
  if (num_frames == 0 || grid_h == 0 || grid_w == 0 || d_geo == 0) {
    throw DimensionError("RawLayerStack: all dimensions must be >= 1");
  }
  if (grid_h % 2 != 0 || grid_w % 2 != 0) {
    throw DimensionError("RawLayerStack: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                         " must have even dimensions for the 2x2 merge");
  }
  for (std::size_t i = 1; i < layer_indices.size(); ++i) {
    if (layer_indices[i] <= layer_indices[i - 1]) {
      throw DimensionError("RawLayerStack: layer indices must be strictly increasing");
    }
  }
  const std::size_t tokens = num_frames * grid_h * grid_w;
  for (const auto& layer : layers) {
    if (layer.rows() != tokens || layer.cols() != d_geo) {
      throw DimensionError("RawLayerStack: layer shape " + std::to_string(layer.rows()) + "x" +
                           std::to_string(layer.cols()) + ", expected " + std::to_string(tokens) + "x" +
                           std::to_string(d_geo));
    }
  }
}

std::array<std::size_t, 4> RawLayerStack::sub_tokens(std::size_t merged_token) const {
  return {sub_token_row(merged_token, 0, grid_h, grid_w), sub_token_row(merged_token, 1, grid_h, grid_w),
          sub_token_row(merged_token, 2, grid_h, grid_w), sub_token_row(merged_token, 3, grid_h, grid_w)};
}

MergeMode parse_merge_mode(const std::string& name) {
  if (name == "concat") return MergeMode::concat;
  if (name == "mean") return MergeMode::mean;
  throw ConfigError("unknown merge mode '" + name + "'");
}

std::string to_string(MergeMode mode) { return mode == MergeMode::concat ? "concat" : "mean"; }

std::size_t merged_dim(MergeMode merge, std::size_t d_geo) { return merge == MergeMode::concat ? 4 * d_geo : d_geo; }

Projector Projector::zeros(std::size_t in, std::size_t hidden, std::size_t out) {
  return Projector{Tensor2D(hidden, in), Tensor2D(1, hidden), Tensor2D(out, hidden), Tensor2D(1, out)};
}

Projector Projector::random(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
  Projector p = zeros(in, hidden, out);
  fill_fan_in_uniform(p.w1, in, rng);
  fill_fan_in_uniform(p.b1, in, rng);
  fill_fan_in_uniform(p.w2, hidden, rng);
  fill_fan_in_uniform(p.b2, hidden, rng);
  return p;
}

BankParams BankParams::init(std::size_t num_layers, std::size_t d_geo, std::size_t d_model, MergeMode merge,
                            std::mt19937_64& rng) {
  BankParams p;
  p.gamma = Tensor2D(num_layers, d_geo, 1.0);
  p.beta = Tensor2D(num_layers, d_geo, 0.0);
  p.phi = Projector::random(merged_dim(merge, d_geo), d_model, d_model, rng);
  p.merge = merge;
  return p;
}

BankParams BankParams::zeros_like() const {
  BankParams z;
  z.gamma = Tensor2D(gamma.rows(), gamma.cols());
  z.beta = Tensor2D(beta.rows(), beta.cols());
  z.phi = Projector::zeros(phi.in_dim(), phi.hidden_dim(), phi.out_dim());
  z.merge = merge;
  z.eps = eps;
  return z;
}

Tensor2D normalize_layer(const Tensor2D& z, std::span<const double> gamma, std::span<const double> beta,
                         double eps) {
  if (z.cols() != gamma.size() || z.cols() != beta.size()) {
    throw DimensionError("normalize_layer: feature dim " + std::to_string(z.cols()) + " vs affine length " +
                         std::to_string(gamma.size()));
  }
  Tensor2D out(z.rows(), z.cols());
  LayerNormCache cache;
  for (std::size_t r = 0; r < z.rows(); ++r) layer_norm_forward(z.row(r), gamma, beta, eps, out.row(r), cache);
  return out;
}

Tensor2D spatial_merge_2x2(const Tensor2D& grid, std::size_t num_frames, std::size_t grid_h, std::size_t grid_w,
                           MergeMode merge) {
  if (grid_h % 2 != 0 || grid_w % 2 != 0) {
    throw DimensionError("spatial_merge_2x2: odd grid dimension " + std::to_string(grid_h) + "x" +
                         std::to_string(grid_w));
  }
  if (grid.rows() != num_frames * grid_h * grid_w) {
    throw DimensionError("spatial_merge_2x2: " + std::to_string(grid.rows()) + " rows for " +
                         std::to_string(num_frames) + " frames of " + std::to_string(grid_h) + "x" +
                         std::to_string(grid_w));
  }
  const std::size_t d = grid.cols();
  const std::size_t merged_tokens = num_frames * (grid_h / 2) * (grid_w / 2);
  Tensor2D out(merged_tokens, merged_dim(merge, d));
  for (std::size_t t = 0; t < merged_tokens; ++t) {
    auto dst = out.row(t);
    for (std::size_t k = 0; k < 4; ++k) {
      const auto src = grid.row(sub_token_row(t, k, grid_h, grid_w));
      if (merge == MergeMode::concat) {
        std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(k * d));
      } else {
        for (std::size_t c = 0; c < d; ++c) dst[c] += 0.25 * src[c];
      }
    }
  }
  return out;
}

Tensor2D project_layer(const Tensor2D& merged, const Projector& phi) {
  require_merge_input(merged.cols(), phi);
  Tensor2D hidden;
  linear_forward(merged, phi.w1, &phi.b1, hidden);
  for (double& v : hidden.values()) v = gelu(v);
  Tensor2D out;
  linear_forward(hidden, phi.w2, &phi.b2, out);
  return out;
}

GeometryBank build_bank(const RawLayerStack& raw, const BankParams& params) {
  raw.validate();
  if (params.num_layers() != raw.num_layers()) {
    throw DimensionError("build_bank: " + std::to_string(params.num_layers()) + " affine rows for " +
                         std::to_string(raw.num_layers()) + " layers");
  }
  GeometryBank bank;
  bank.layer_indices = raw.layer_indices;
  bank.num_frames = raw.num_frames;
  bank.tokens_per_frame = raw.merged_tokens_per_frame();
  bank.d_model = params.phi.out_dim();
  bank.layers.reserve(raw.num_layers());
  for (std::size_t l = 0; l < raw.num_layers(); ++l) {
    const Tensor2D normalized = normalize_layer(raw.layers[l], params.gamma.row(l), params.beta.row(l), params.eps);
    const Tensor2D merged = spatial_merge_2x2(normalized, raw.num_frames, raw.grid_h, raw.grid_w, params.merge);
    bank.layers.push_back(project_layer(merged, params.phi));
  }
  return bank;
}

void build_bank_backward(const RawLayerStack& raw, const BankParams& params,
                         const std::vector<Tensor2D>& grad_layers, BankParams& grads) {
  raw.validate();
  if (grad_layers.size() != raw.num_layers()) throw DimensionError("build_bank_backward: layer count mismatch");
  const std::size_t d = raw.d_geo;
  for (std::size_t l = 0; l < raw.num_layers(); ++l) {
    Tensor2D normalized(raw.layers[l].rows(), d);
    std::vector<LayerNormCache> caches(raw.layers[l].rows());
    for (std::size_t r = 0; r < raw.layers[l].rows(); ++r) {
      layer_norm_forward(raw.layers[l].row(r), params.gamma.row(l), params.beta.row(l), params.eps,
                         normalized.row(r), caches[r]);
    }
    const Tensor2D merged = spatial_merge_2x2(normalized, raw.num_frames, raw.grid_h, raw.grid_w, params.merge);
    Tensor2D pre;
    linear_forward(merged, params.phi.w1, &params.phi.b1, pre);
    Tensor2D hidden = pre;
    for (double& v : hidden.values()) v = gelu(v);

    Tensor2D grad_hidden;
    linear_backward(hidden, params.phi.w2, grad_layers[l], &grad_hidden, &grads.phi.w2, &grads.phi.b2);
    for (std::size_t i = 0; i < grad_hidden.size(); ++i) grad_hidden.values()[i] *= gelu_derivative(pre.values()[i]);
    Tensor2D grad_merged;
    linear_backward(merged, params.phi.w1, grad_hidden, &grad_merged, &grads.phi.w1, &grads.phi.b1);

    std::vector<double> grad_sub(d);
    for (std::size_t t = 0; t < merged.rows(); ++t) {
      for (std::size_t k = 0; k < 4; ++k) {
        const std::size_t row = sub_token_row(t, k, raw.grid_h, raw.grid_w);
        for (std::size_t c = 0; c < d; ++c) {
          grad_sub[c] = params.merge == MergeMode::concat ? grad_merged(t, k * d + c) : 0.25 * grad_merged(t, c);
        }
        layer_norm_backward(grad_sub, params.gamma.row(l), caches[row], {}, grads.gamma.row(l), grads.beta.row(l));
      }
    }
  }
}

const Tensor2D& SparseBankProjection::forward(std::span<const BankQuery> queries, const BankParams& params) {
  const std::size_t d = params.d_geo();
  const std::size_t in = merged_dim(params.merge, d);
  require_merge_input(in, params.phi);
  queries_.assign(queries.begin(), queries.end());
  if (x_hat_.rows() != 4 * queries_.size() || x_hat_.cols() != d) x_hat_ = Tensor2D(4 * queries_.size(), d);
  inv_std_.resize(4 * queries_.size());
  if (merged_.rows() != queries_.size() || merged_.cols() != in) {
    merged_ = Tensor2D(queries_.size(), in);
  } else if (params.merge == MergeMode::mean) {
    merged_.fill(0.0);
  }
  std::vector<double> normalized(d);
  for (std::size_t q = 0; q < queries_.size(); ++q) {
    const BankQuery& query = queries_[q];
    const RawLayerStack& raw = *query.raw;
    if (query.layer >= raw.num_layers() || query.layer >= params.num_layers()) {
      throw IndexError("SparseBankProjection: layer " + std::to_string(query.layer) + " out of range");
    }
    if (query.token >= raw.merged_token_count()) {
      throw IndexError("SparseBankProjection: token " + std::to_string(query.token) + " out of range");
    }
    if (raw.d_geo != d) throw DimensionError("SparseBankProjection: d_geo mismatch");
    auto dst = merged_.row(q);
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t row = sub_token_row(query.token, k, raw.grid_h, raw.grid_w);
      inv_std_[4 * q + k] = layer_norm_forward(raw.layers[query.layer].row(row), params.gamma.row(query.layer),
                                               params.beta.row(query.layer), params.eps, normalized,
                                               x_hat_.row(4 * q + k));
      if (params.merge == MergeMode::concat) {
        std::copy(normalized.begin(), normalized.end(), dst.begin() + static_cast<std::ptrdiff_t>(k * d));
      } else {
        for (std::size_t c = 0; c < d; ++c) dst[c] += 0.25 * normalized[c];
      }
    }
  }
  linear_forward(merged_, params.phi.w1, &params.phi.b1, pre_activation_);
  hidden_ = pre_activation_;
  cdf_ = pre_activation_;
  for (std::size_t i = 0; i < hidden_.size(); ++i) {
    cdf_.values()[i] = normal_cdf(pre_activation_.values()[i]);
    hidden_.values()[i] = pre_activation_.values()[i] * cdf_.values()[i];
  }
  linear_forward(hidden_, params.phi.w2, &params.phi.b2, output_);
  return output_;
}

void SparseBankProjection::backward(const Tensor2D& grad_rows, const BankParams& params, BankParams& grads) const {
  if (grad_rows.rows() != queries_.size()) throw DimensionError("SparseBankProjection::backward: row mismatch");
  const std::size_t d = params.d_geo();
  Tensor2D grad_hidden;
  linear_backward(hidden_, params.phi.w2, grad_rows, &grad_hidden, &grads.phi.w2, &grads.phi.b2);
  for (std::size_t i = 0; i < grad_hidden.size(); ++i) {
    grad_hidden.values()[i] *= gelu_derivative(pre_activation_.values()[i], cdf_.values()[i]);
  }
  Tensor2D grad_merged;
  linear_backward(merged_, params.phi.w1, grad_hidden, &grad_merged, &grads.phi.w1, &grads.phi.b1);
  std::vector<double> grad_sub(d);
  for (std::size_t q = 0; q < queries_.size(); ++q) {
    const std::size_t l = queries_[q].layer;
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t c = 0; c < d; ++c) {
        grad_sub[c] = params.merge == MergeMode::concat ? grad_merged(q, k * d + c) : 0.25 * grad_merged(q, c);
      }
      layer_norm_backward(grad_sub, params.gamma.row(l), x_hat_.row(4 * q + k), inv_std_[4 * q + k], {},
                          grads.gamma.row(l), grads.beta.row(l));
    }
  }
}

}  // namespace geoweaver
