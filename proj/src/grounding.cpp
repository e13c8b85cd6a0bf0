// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/grounding.hpp"

#include <algorithm>
#include <numeric>

namespace geoweaver {

AllocationMode parse_allocation_mode(const std::string& name) {
  if (name == "token_adaptive") return AllocationMode::token_adaptive;
  if (name == "global") return AllocationMode::global;
  if (name == "uniform") return AllocationMode::uniform;
  throw ConfigError("unknown allocation mode '" + name + "'");
}

GroundingPosition parse_grounding_position(const std::string& name) {
  if (name == "pre_reasoning") return GroundingPosition::pre_reasoning;
  if (name == "input_fusion") return GroundingPosition::input_fusion;
  if (name == "decoder_fusion") return GroundingPosition::decoder_fusion;
  throw ConfigError("unknown grounding position '" + name + "'");
}

std::string to_string(AllocationMode mode) {
  switch (mode) {
    case AllocationMode::token_adaptive:
      return "token_adaptive";
    case AllocationMode::global:
      return "global";
    case AllocationMode::uniform:
      return "uniform";
  }
  return "unknown";
}

std::string to_string(GroundingPosition position) {
  switch (position) {
    case GroundingPosition::pre_reasoning:
      return "pre_reasoning";
    case GroundingPosition::input_fusion:
      return "input_fusion";
    case GroundingPosition::decoder_fusion:
      return "decoder_fusion";
  }
  return "unknown";
}

GroundingHead GroundingHead::init(std::size_t num_layers, std::size_t d_model, AllocationMode mode,
                                  std::size_t top_k, GroundingPosition position, std::mt19937_64& rng,
                                  double router_std) {
  if (top_k < 1) throw ConfigError("GroundingHead: top_k must be >= 1");
  GroundingHead head;
  head.router_w = Tensor2D(num_layers, d_model);
  if (router_std > 0.0) {
    std::normal_distribution<double> dist(0.0, router_std);
    for (double& v : head.router_w.values()) v = dist(rng);
  }
  head.router_b = Tensor2D(1, num_layers);
  head.out_proj = Tensor2D(d_model, d_model);
  head.global_logits = Tensor2D(1, num_layers);
  head.mode = mode;
  head.top_k = top_k;
  head.position = position;
  return head;
}

GroundingHead GroundingHead::zeros_like() const {
  GroundingHead z = *this;
  z.router_w.fill(0.0);
  z.router_b.fill(0.0);
  z.out_proj.fill(0.0);
  z.global_logits.fill(0.0);
  return z;
}

AllocationMode effective_mode(const GroundingHead& head) {
  switch (head.position) {
    case GroundingPosition::input_fusion:
      return AllocationMode::uniform;
    case GroundingPosition::decoder_fusion:
      return AllocationMode::global;
    case GroundingPosition::pre_reasoning:
      break;
  }
  return head.mode;
}

Tensor2D route(const VisualTokens& tokens, const GroundingHead& head) {
  if (tokens.d_model() != head.router_w.cols()) {
    throw DimensionError("route: token dim " + std::to_string(tokens.d_model()) + " != router input dim " +
                         std::to_string(head.router_w.cols()));
  }
  Tensor2D logits;
  linear_forward(tokens.matrix, head.router_w, &head.router_b, logits);
  return logits;
}

SparseAllocation sparse_allocate(std::span<const double> logits, std::size_t top_k) {
  if (logits.empty()) throw DimensionError("sparse_allocate: empty logits");
  if (top_k < 1) throw ConfigError("sparse_allocate: top_k must be >= 1");
  const std::size_t n = logits.size();
  const std::size_t k = std::min(top_k, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });

  SparseAllocation alloc;
  alloc.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<double> picked(k);
  for (std::size_t j = 0; j < k; ++j) picked[j] = logits[alloc.selected[j]];
  const std::vector<double> probs = softmax(picked);
  alloc.weights.assign(n, 0.0);
  for (std::size_t j = 0; j < k; ++j) alloc.weights[alloc.selected[j]] = probs[j];
  return alloc;
}

std::vector<double> sparse_allocate_backward(const SparseAllocation& alloc, std::span<const double> grad_weights) {
  if (grad_weights.size() != alloc.weights.size()) throw DimensionError("sparse_allocate_backward: length mismatch");
  const std::size_t k = alloc.selected.size();
  std::vector<double> probs(k);
  std::vector<double> grads(k);
  for (std::size_t j = 0; j < k; ++j) {
    probs[j] = alloc.weights[alloc.selected[j]];
    grads[j] = grad_weights[alloc.selected[j]];
  }
  const std::vector<double> sub = softmax_backward(probs, grads);
  std::vector<double> out(alloc.weights.size(), 0.0);
  for (std::size_t j = 0; j < k; ++j) out[alloc.selected[j]] = sub[j];
  return out;
}

std::vector<double> aggregate_evidence(std::span<const double> weights, const GeometryBank& bank, std::size_t token) {
  if (weights.size() != bank.num_layers()) {
    throw DimensionError("aggregate_evidence: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(bank.num_layers()) + " layers");
  }
  if (token >= bank.token_count()) {
    throw IndexError("aggregate_evidence: token " + std::to_string(token) + " out of range [0, " +
                     std::to_string(bank.token_count()) + ")");
  }
  std::vector<double> g(bank.d_model, 0.0);
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l] == 0.0) continue;
    const auto row = bank.layers[l].row(token);
    for (std::size_t c = 0; c < g.size(); ++c) g[c] += weights[l] * row[c];
  }
  return g;
}

std::vector<double> residual_ground(std::span<const double> v, std::span<const double> g, const Tensor2D& out_proj) {
  if (v.size() != g.size() || out_proj.rows() != v.size() || out_proj.cols() != g.size()) {
    throw DimensionError("residual_ground: dimension mismatch");
  }
  std::vector<double> out(v.begin(), v.end());
  for (std::size_t r = 0; r < out.size(); ++r) {
    double acc = 0.0;
    const auto w = out_proj.row(r);
    for (std::size_t c = 0; c < g.size(); ++c) acc += w[c] * g[c];
    out[r] += acc;
  }
  return out;
}

RoutingWeights allocate(const VisualTokens& tokens, const GroundingHead& head) {
  if (head.top_k < 1) throw ConfigError("allocate: top_k must be >= 1");
  const std::size_t n = tokens.token_count();
  const std::size_t layers = head.num_layers();
  RoutingWeights routing;
  routing.weights = Tensor2D(n, layers);
  routing.selected.resize(n);
  const AllocationMode mode = effective_mode(head);
  switch (mode) {
    case AllocationMode::token_adaptive:
      routing.logits = route(tokens, head);
      break;
    case AllocationMode::global:
      if (head.global_logits.size() != layers) throw DimensionError("allocate: global_logits length mismatch");
      routing.logits = Tensor2D(n, layers);
      for (std::size_t i = 0; i < n; ++i) {
        std::copy(head.global_logits.values().begin(), head.global_logits.values().end(), routing.logits.row(i).begin());
      }
      break;
    case AllocationMode::uniform:
      routing.logits = Tensor2D(n, layers);
      break;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (mode == AllocationMode::uniform) {
      routing.selected[i].resize(layers);
      std::iota(routing.selected[i].begin(), routing.selected[i].end(), 0);
      for (std::size_t l = 0; l < layers; ++l) routing.weights(i, l) = 1.0 / static_cast<double>(layers);
    } else {
      SparseAllocation alloc = sparse_allocate(routing.logits.row(i), head.top_k);
      routing.selected[i] = std::move(alloc.selected);
      std::copy(alloc.weights.begin(), alloc.weights.end(), routing.weights.row(i).begin());
    }
  }
  return routing;
}

GroundingResult ground_tokens(const VisualTokens& tokens, const GeometryBank& bank, const GroundingHead& head) {
  const std::size_t n = tokens.token_count();
  const std::size_t layers = bank.num_layers();
  if (n != bank.token_count()) {
    throw DimensionError("ground_tokens: " + std::to_string(n) + " visual tokens vs " +
                         std::to_string(bank.token_count()) + " bank tokens");
  }
  if (tokens.d_model() != bank.d_model || head.d_model() != bank.d_model) {
    throw DimensionError("ground_tokens: hidden dim mismatch");
  }
  if (head.num_layers() != layers) {
    throw DimensionError("ground_tokens: router covers " + std::to_string(head.num_layers()) + " layers, bank has " +
                         std::to_string(layers));
  }
  GroundingResult result;
  result.routing = allocate(tokens, head);
  const RoutingWeights& routing = result.routing;

  result.evidence = Tensor2D(n, bank.d_model);
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = aggregate_evidence(routing.weights.row(i), bank, i);
    std::copy(g.begin(), g.end(), result.evidence.row(i).begin());
  }

  GroundedTokens& grounded = result.grounded;
  grounded.matrix = tokens.matrix;
  switch (head.position) {
    case GroundingPosition::pre_reasoning:
      for (std::size_t i = 0; i < n; ++i) {
        const auto v = residual_ground(tokens.matrix.row(i), result.evidence.row(i), head.out_proj);
        std::copy(v.begin(), v.end(), grounded.matrix.row(i).begin());
      }
      break;
    case GroundingPosition::input_fusion:
      for (std::size_t i = 0; i < grounded.matrix.size(); ++i) {
        grounded.matrix.values()[i] += result.evidence.values()[i];
      }
      break;
    case GroundingPosition::decoder_fusion:
      linear_forward(result.evidence, head.out_proj, nullptr, grounded.late_evidence);
      break;
  }
  return result;
}

GroundingGradients ground_tokens_backward(const VisualTokens& tokens, const GeometryBank& bank,
                                          const GroundingHead& head, const GroundingResult& result,
                                          const Tensor2D& grad_grounded, const Tensor2D& grad_late) {
  const std::size_t n = tokens.token_count();
  const std::size_t layers = bank.num_layers();
  if (!grad_grounded.same_shape(tokens.matrix)) throw DimensionError("ground_tokens_backward: gradient shape mismatch");

  GroundingGradients grads;
  grads.head = head.zeros_like();
  grads.tokens = grad_grounded;
  grads.bank.assign(layers, Tensor2D(bank.token_count(), bank.d_model));

  Tensor2D grad_evidence(n, bank.d_model);
  switch (head.position) {
    case GroundingPosition::pre_reasoning:
      linear_backward(result.evidence, head.out_proj, grad_grounded, &grad_evidence, &grads.head.out_proj, nullptr);
      break;
    case GroundingPosition::input_fusion:
      grad_evidence = grad_grounded;
      break;
    case GroundingPosition::decoder_fusion:
      if (!grad_late.same_shape(result.evidence)) throw DimensionError("ground_tokens_backward: late gradient shape");
      linear_backward(result.evidence, head.out_proj, grad_late, &grad_evidence, &grads.head.out_proj, nullptr);
      break;
  }

  const AllocationMode mode = effective_mode(head);
  Tensor2D grad_logits(n, layers);
  std::vector<double> grad_weights(layers);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ge = grad_evidence.row(i);
    for (std::size_t l = 0; l < layers; ++l) {
      const double w = result.routing.weights(i, l);
      const auto row = bank.layers[l].row(i);
      double dot = 0.0;
      for (std::size_t c = 0; c < ge.size(); ++c) dot += ge[c] * row[c];
      grad_weights[l] = dot;
      if (w != 0.0) {
        auto gb = grads.bank[l].row(i);
        for (std::size_t c = 0; c < ge.size(); ++c) gb[c] += w * ge[c];
      }
    }
    if (mode == AllocationMode::uniform) continue;
    SparseAllocation alloc;
    alloc.selected = result.routing.selected[i];
    alloc.weights.assign(result.routing.weights.row(i).begin(), result.routing.weights.row(i).end());
    const auto gl = sparse_allocate_backward(alloc, grad_weights);
    std::copy(gl.begin(), gl.end(), grad_logits.row(i).begin());
  }

  if (mode == AllocationMode::token_adaptive) {
    Tensor2D grad_tokens_router;
    linear_backward(tokens.matrix, head.router_w, grad_logits, &grad_tokens_router, &grads.head.router_w,
                    &grads.head.router_b);
    for (std::size_t i = 0; i < grads.tokens.size(); ++i) grads.tokens.values()[i] += grad_tokens_router.values()[i];
  } else if (mode == AllocationMode::global) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t l = 0; l < layers; ++l) grads.head.global_logits(0, l) += grad_logits(i, l);
    }
  }
  return grads;
}

}  // namespace geoweaver
