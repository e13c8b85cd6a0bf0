// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geoweaver/geometry_bank.hpp"
#include "geoweaver/grounding.hpp"
#include "geoweaver/numerics.hpp"
#include "geoweaver/proxy_task.hpp"

namespace geoweaver {

struct ModelOptions {
  AllocationMode mode = AllocationMode::token_adaptive;
  std::size_t top_k = 2;
  GroundingPosition position = GroundingPosition::pre_reasoning;
  double router_std = 0.02;
};

// Every trainable tensor of one run. Raw geometry features are data, not
// parameters, so they never appear here.
struct GroundingModel {
  BankParams bank;
  GroundingHead head;
  ProbeHead probe;

  static GroundingModel init(std::size_t num_layers, std::size_t d_geo, std::size_t d_model, std::size_t num_classes,
                             MergeMode merge, const ModelOptions& options, std::mt19937_64& rng);
  // Same shapes, all zeros; used as a gradient accumulator.
  GroundingModel zeros_like() const;

  // Parameter names, in store order.
  static const std::vector<std::string>& parameter_names();
  ParamStore to_store() const;
  void load(const ParamStore& store);
  // Copies gradient tensors (shaped like this model) into the store's slots.
  static void write_grads(const GroundingModel& grads, ParamStore& store);
};

struct BatchPass {
  double loss = 0.0;
  long double precise_loss = 0.0L;  // see ProbeOutput::precise_loss
  Tensor2D logits;          // tokens x C, samples stacked in order
  RoutingWeights routing;   // same token order
  std::vector<int> labels;
  std::vector<int> roles;
};

// Mean cross-entropy over every token of the batch. Bank rows are evaluated
// only for selected (token, layer) pairs. When `grads` is non-null it must be
// shaped like `model` and receives accumulated gradients.
BatchPass batch_forward(const GroundingModel& model, std::span<const ProxySample* const> batch,
                        GroundingModel* grads = nullptr);

struct EvalMetrics {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t tokens = 0;
  std::vector<std::size_t> selection_counts;  // per bank position
  std::vector<double> selection_frequency;    // counts / tokens
  // Fraction of tokens whose top-1 selected position equals the role's signal
  // position (0 for roles whose signal layer is absent from the bank).
  double agreement = 0.0;
  std::vector<double> agreement_per_role;
  // Fraction of tokens whose two largest logits are exactly equal, in which
  // case the top-1 pick comes from the tie rule, not the router.
  double tie_fraction = 0.0;
  bool degenerate_ties() const { return tie_fraction > 0.5; }
};

EvalMetrics evaluate(const GroundingModel& model, std::span<const ProxySample> samples,
                     std::span<const int> signal_positions, std::size_t chunk = 32);

struct TracePoint {
  std::size_t step = 0;
  double batch_loss = 0.0;
};

struct TrainResult {
  GroundingModel model;
  std::vector<TracePoint> trace;
  EvalMetrics initial_test;
  EvalMetrics train;
  EvalMetrics test;
  std::vector<int> signal_positions;
  std::vector<std::uint32_t> bank_layers;
};

// Adam over uniformly drawn minibatches. Throws TrainingError on a non-finite
// loss.
TrainResult train(const ProxyConfig& config, const ProxyDataset& data, const ModelOptions& options,
                  std::uint64_t seed);

}  // namespace geoweaver
