// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geoweaver/geometry_bank.hpp"
#include "geoweaver/numerics.hpp"

namespace geoweaver {

enum class AllocationMode { token_adaptive, global, uniform };
enum class GroundingPosition { pre_reasoning, input_fusion, decoder_fusion };

AllocationMode parse_allocation_mode(const std::string& name);
GroundingPosition parse_grounding_position(const std::string& name);
std::string to_string(AllocationMode mode);
std::string to_string(GroundingPosition position);

struct VisualTokens {
  std::size_t num_frames = 0;
  std::size_t tokens_per_frame = 0;  // N_p
  Tensor2D matrix;                   // (num_frames * N_p) x D

  std::size_t token_count() const { return matrix.rows(); }
  std::size_t d_model() const { return matrix.cols(); }
};

// Top-k selection over one token's logits plus the renormalized weights.
struct SparseAllocation {
  std::vector<std::size_t> selected;  // descending logit, ties -> lower position first
  std::vector<double> weights;        // length |S|, zero outside `selected`
};

struct RoutingWeights {
  Tensor2D logits;                                // tokens x |S|
  std::vector<std::vector<std::size_t>> selected;  // per token
  Tensor2D weights;                               // tokens x |S|

  std::size_t token_count() const { return weights.rows(); }
  std::size_t num_layers() const { return weights.cols(); }
};

struct GroundingHead {
  Tensor2D router_w;       // |S| x D
  Tensor2D router_b;       // 1 x |S|
  Tensor2D out_proj;       // D x D, zero at init
  Tensor2D global_logits;  // 1 x |S|, zero at init
  AllocationMode mode = AllocationMode::token_adaptive;
  std::size_t top_k = 2;
  GroundingPosition position = GroundingPosition::pre_reasoning;

  std::size_t num_layers() const { return router_w.rows(); }
  std::size_t d_model() const { return out_proj.rows(); }

  // Router ~ N(0, router_std^2), bias/out_proj/global_logits zero.
  static GroundingHead init(std::size_t num_layers, std::size_t d_model, AllocationMode mode, std::size_t top_k,
                            GroundingPosition position, std::mt19937_64& rng, double router_std = 0.02);
  GroundingHead zeros_like() const;
};

struct GroundedTokens {
  Tensor2D matrix;  // V', same shape as V
  // decoder_fusion only: W_o g per token, concatenated at the probe input.
  Tensor2D late_evidence;
};

struct GroundingResult {
  GroundedTokens grounded;
  RoutingWeights routing;
  Tensor2D evidence;  // g_i per token (tokens x D)
};

// Allocation actually applied for a head: input_fusion always averages
// uniformly, decoder_fusion always uses the dataset-level global logits, and
// pre_reasoning follows head.mode.
AllocationMode effective_mode(const GroundingHead& head);

Tensor2D route(const VisualTokens& tokens, const GroundingHead& head);

SparseAllocation sparse_allocate(std::span<const double> logits, std::size_t top_k);

// dLoss/dlogits given dLoss/dweights; zero at masked entries.
std::vector<double> sparse_allocate_backward(const SparseAllocation& alloc, std::span<const double> grad_weights);

// Routing weights for every token under effective_mode(head). uniform selects
// every layer in position order with weight 1/|S|.
RoutingWeights allocate(const VisualTokens& tokens, const GroundingHead& head);

std::vector<double> aggregate_evidence(std::span<const double> weights, const GeometryBank& bank, std::size_t token);

std::vector<double> residual_ground(std::span<const double> v, std::span<const double> g, const Tensor2D& out_proj);

GroundingResult ground_tokens(const VisualTokens& tokens, const GeometryBank& bank, const GroundingHead& head);

struct GroundingGradients {
  GroundingHead head;               // router/out_proj/global_logits gradients
  std::vector<Tensor2D> bank;       // dLoss/dG^(l)
  Tensor2D tokens;                  // dLoss/dV
};

// Backward through ground_tokens. grad_late is ignored unless the head is in
// decoder_fusion position.
GroundingGradients ground_tokens_backward(const VisualTokens& tokens, const GeometryBank& bank,
                                          const GroundingHead& head, const GroundingResult& result,
                                          const Tensor2D& grad_grounded, const Tensor2D& grad_late);

}  // namespace geoweaver
