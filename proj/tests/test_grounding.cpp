// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "geoweaver/grounding.hpp"

namespace geoweaver {
namespace {

// softmax([2, 1]) from mpmath.
constexpr double kHigh = 0.73105857863000487925;
constexpr double kLow = 0.26894142136999512075;

Tensor2D random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  Tensor2D t(rows, cols);
  for (double& x : t.values()) x = n(rng);
  return t;
}

GeometryBank random_bank(std::size_t layers, std::size_t tokens, std::size_t d, std::mt19937_64& rng) {
  GeometryBank bank;
  bank.num_frames = 1;
  bank.tokens_per_frame = tokens;
  bank.d_model = d;
  for (std::size_t l = 0; l < layers; ++l) {
    bank.layer_indices.push_back(static_cast<std::uint32_t>(10 + l));
    bank.layers.push_back(random_matrix(tokens, d, rng));
  }
  return bank;
}

VisualTokens random_tokens(std::size_t tokens, std::size_t d, std::mt19937_64& rng) {
  return VisualTokens{1, tokens, random_matrix(tokens, d, rng)};
}

bool bitwise_equal(const Tensor2D& a, const Tensor2D& b) {
  return a.same_shape(b) && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

TEST(SparseAllocate, TopTwoOracle) {
  const std::vector<double> r = {2.0, 1.0, 0.5, -1.0};
  const SparseAllocation a = sparse_allocate(r, 2);
  EXPECT_EQ(a.selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(a.weights[0], kHigh, 1e-15);
  EXPECT_NEAR(a.weights[1], kLow, 1e-15);
  EXPECT_EQ(a.weights[2], 0.0);
  EXPECT_EQ(a.weights[3], 0.0);
}

TEST(SparseAllocate, SelectionOrderFollowsLogits) {
  const std::vector<double> r = {1.0, 3.0, 2.0};
  const SparseAllocation a = sparse_allocate(r, 2);
  EXPECT_EQ(a.selected, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(a.weights[0], 0.0);
  EXPECT_NEAR(a.weights[1], kHigh, 1e-15);
  EXPECT_NEAR(a.weights[2], kLow, 1e-15);
}

TEST(SparseAllocate, TiesGoToLowerPosition) {
  const std::vector<double> r(5, 0.3);
  const SparseAllocation a = sparse_allocate(r, 2);
  EXPECT_EQ(a.selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(a.weights, (std::vector<double>{0.5, 0.5, 0.0, 0.0, 0.0}));
}

TEST(SparseAllocate, FullTopKMatchesDenseSoftmax) {
  const std::vector<double> r = {0.3, -2.0, 1.7, 0.0};
  const auto dense = softmax(r);
  for (std::size_t k : {4u, 9u}) {
    const SparseAllocation a = sparse_allocate(r, k);
    ASSERT_EQ(a.selected.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.weights[i], dense[i], 1e-12);
  }
}

TEST(SparseAllocate, EmptyLogitsAndZeroKThrow) {
  EXPECT_THROW(sparse_allocate(std::vector<double>{}, 1), DimensionError);
  EXPECT_THROW(sparse_allocate(std::vector<double>{1.0}, 0), ConfigError);
}

TEST(SparseAllocate, BackwardMasksUnselected) {
  const std::vector<double> r = {2.0, 1.0, 0.5, -1.0};
  const SparseAllocation a = sparse_allocate(r, 2);
  const std::vector<double> g = {1.0, -1.0, 5.0, 7.0};
  const auto dr = sparse_allocate_backward(a, g);
  EXPECT_EQ(dr[2], 0.0);
  EXPECT_EQ(dr[3], 0.0);
  // Two-way softmax: d/dr0 = p0 p1 (g0 - g1).
  EXPECT_NEAR(dr[0], kHigh * kLow * 2.0, 1e-15);
  EXPECT_NEAR(dr[1], -kHigh * kLow * 2.0, 1e-15);
}

TEST(Route, ZeroRouterAndIdentityRows) {
  std::mt19937_64 rng(1);
  GroundingHead head = GroundingHead::init(3, 3, AllocationMode::token_adaptive, 2, GroundingPosition::pre_reasoning,
                                           rng);
  head.router_w.fill(0.0);
  const VisualTokens v = random_tokens(4, 3, rng);
  EXPECT_EQ(route(v, head), Tensor2D(4, 3, 0.0));

  head.router_w = Tensor2D(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const VisualTokens one_hot{1, 1, Tensor2D(1, 3, {0.0, 4.0, 0.0})};
  EXPECT_EQ(route(one_hot, head), Tensor2D(1, 3, {0.0, 4.0, 0.0}));

  const VisualTokens wrong{1, 1, Tensor2D(1, 5)};
  EXPECT_THROW(route(wrong, head), DimensionError);
}

TEST(AggregateEvidence, WeightedSumAndOneHot) {
  GeometryBank bank;
  bank.num_frames = 1;
  bank.tokens_per_frame = 1;
  bank.d_model = 2;
  bank.layer_indices = {0, 1};
  bank.layers = {Tensor2D(1, 2, {1.0, 0.0}), Tensor2D(1, 2, {0.0, 2.0})};
  EXPECT_EQ(aggregate_evidence(std::vector<double>{0.75, 0.25}, bank, 0), (std::vector<double>{0.75, 0.5}));
  EXPECT_EQ(aggregate_evidence(std::vector<double>{0.0, 1.0}, bank, 0), (std::vector<double>{0.0, 2.0}));
  EXPECT_THROW(aggregate_evidence(std::vector<double>{1.0, 0.0}, bank, 1), IndexError);
}

TEST(AggregateEvidence, LinearInBank) {
  std::mt19937_64 rng(2);
  const GeometryBank b1 = random_bank(3, 2, 4, rng), b2 = random_bank(3, 2, 4, rng);
  GeometryBank mix = b1;
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t i = 0; i < mix.layers[l].size(); ++i) {
      mix.layers[l].values()[i] = 2.0 * b1.layers[l].values()[i] - 0.5 * b2.layers[l].values()[i];
    }
  }
  const std::vector<double> alpha = {0.2, 0.0, 0.8};
  const auto g1 = aggregate_evidence(alpha, b1, 1), g2 = aggregate_evidence(alpha, b2, 1);
  const auto g = aggregate_evidence(alpha, mix, 1);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(g[c], 2.0 * g1[c] - 0.5 * g2[c], 1e-14);
}

TEST(ResidualGround, ZeroAndIdentityProjection) {
  const std::vector<double> v = {0.1, -0.2, 0.3}, g = {1.0, 2.0, 3.0};
  EXPECT_EQ(residual_ground(v, g, Tensor2D(3, 3, 0.0)), v);
  EXPECT_EQ(residual_ground(v, std::vector<double>(3, 0.0), Tensor2D(3, 3, 1.0)), v);
  EXPECT_EQ(residual_ground(v, g, Tensor2D(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1})), (std::vector<double>{1.1, 1.8, 3.3}));
  EXPECT_THROW(residual_ground(v, g, Tensor2D(2, 2)), DimensionError);
}

TEST(EffectiveMode, PositionOverridesMode) {
  GroundingHead head;
  head.mode = AllocationMode::token_adaptive;
  head.position = GroundingPosition::pre_reasoning;
  EXPECT_EQ(effective_mode(head), AllocationMode::token_adaptive);
  head.position = GroundingPosition::input_fusion;
  EXPECT_EQ(effective_mode(head), AllocationMode::uniform);
  head.position = GroundingPosition::decoder_fusion;
  EXPECT_EQ(effective_mode(head), AllocationMode::global);
}

class GroundTokensByMode : public ::testing::TestWithParam<AllocationMode> {};

TEST_P(GroundTokensByMode, ZeroOutProjIsIdentity) {
  std::mt19937_64 rng(3);
  const GeometryBank bank = random_bank(4, 6, 5, rng);
  const VisualTokens v = random_tokens(6, 5, rng);
  GroundingHead head = GroundingHead::init(4, 5, GetParam(), 2, GroundingPosition::pre_reasoning, rng, 0.5);
  head.global_logits = random_matrix(1, 4, rng);
  const GroundingResult r = ground_tokens(v, bank, head);
  EXPECT_TRUE(bitwise_equal(r.grounded.matrix, v.matrix));
}

TEST_P(GroundTokensByMode, SparsityContract) {
  std::mt19937_64 rng(4);
  const GeometryBank bank = random_bank(5, 8, 4, rng);
  const VisualTokens v = random_tokens(8, 4, rng);
  GroundingHead head = GroundingHead::init(5, 4, GetParam(), 3, GroundingPosition::pre_reasoning, rng, 0.5);
  head.global_logits = random_matrix(1, 5, rng);
  const RoutingWeights w = allocate(v, head);
  const std::size_t expected = GetParam() == AllocationMode::uniform ? 5 : 3;
  for (std::size_t t = 0; t < w.token_count(); ++t) {
    std::size_t nonzero = 0;
    double sum = 0.0;
    for (double a : w.weights.row(t)) {
      EXPECT_GE(a, 0.0);
      nonzero += a > 0.0;
      sum += a;
    }
    EXPECT_EQ(nonzero, expected);
    EXPECT_EQ(w.selected[t].size(), expected);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

INSTANTIATE_TEST_SUITE_P(AllModes, GroundTokensByMode,
                         ::testing::Values(AllocationMode::token_adaptive, AllocationMode::global,
                                           AllocationMode::uniform));

TEST(GroundTokens, IdentityOutProjAddsEvidence) {
  std::mt19937_64 rng(5);
  const GeometryBank bank = random_bank(3, 4, 3, rng);
  const VisualTokens v = random_tokens(4, 3, rng);
  GroundingHead head = GroundingHead::init(3, 3, AllocationMode::token_adaptive, 2, GroundingPosition::pre_reasoning,
                                           rng, 0.5);
  head.out_proj = Tensor2D(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const GroundingResult r = ground_tokens(v, bank, head);
  for (std::size_t t = 0; t < 4; ++t) {
    const auto g = aggregate_evidence(r.routing.weights.row(t), bank, t);
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_NEAR(r.grounded.matrix(t, c), v.matrix(t, c) + g[c], 1e-15);
      EXPECT_EQ(r.evidence(t, c), g[c]);
    }
  }
}

TEST(GroundTokens, UniformEqualsZeroRouterFullTopK) {
  std::mt19937_64 rng(6);
  const GeometryBank bank = random_bank(4, 5, 3, rng);
  const VisualTokens v = random_tokens(5, 3, rng);
  GroundingHead uniform = GroundingHead::init(4, 3, AllocationMode::uniform, 2, GroundingPosition::pre_reasoning, rng);
  uniform.out_proj = random_matrix(3, 3, rng);
  GroundingHead adaptive = uniform;
  adaptive.mode = AllocationMode::token_adaptive;
  adaptive.top_k = 4;
  adaptive.router_w.fill(0.0);
  const GroundingResult a = ground_tokens(v, bank, uniform), b = ground_tokens(v, bank, adaptive);
  EXPECT_TRUE(bitwise_equal(a.grounded.matrix, b.grounded.matrix));
  EXPECT_TRUE(bitwise_equal(a.routing.weights, b.routing.weights));
}

TEST(GroundTokens, GlobalModeSharesRows) {
  std::mt19937_64 rng(7);
  const GeometryBank bank = random_bank(4, 6, 3, rng);
  const VisualTokens v = random_tokens(6, 3, rng);
  GroundingHead head = GroundingHead::init(4, 3, AllocationMode::global, 2, GroundingPosition::pre_reasoning, rng);
  head.global_logits = Tensor2D(1, 4, {0.0, 1.0, -1.0, 2.0});
  const RoutingWeights w = allocate(v, head);
  for (std::size_t t = 1; t < 6; ++t) {
    EXPECT_TRUE(std::equal(w.weights.row(t).begin(), w.weights.row(t).end(), w.weights.row(0).begin()));
  }
  EXPECT_EQ(w.selected[0], (std::vector<std::size_t>{3, 1}));
  EXPECT_NEAR(w.weights(0, 3), kHigh, 1e-15);
}

TEST(GroundTokens, ShiftInvariance) {
  std::mt19937_64 rng(8);
  VisualTokens v = random_tokens(5, 3, rng);
  GroundingHead head = GroundingHead::init(4, 3, AllocationMode::token_adaptive, 2, GroundingPosition::pre_reasoning,
                                           rng, 0.5);
  // Dyadic weights keep the shifted logits exact.
  for (double& w : head.router_w.values()) w = std::round(w * 8.0) / 8.0;
  for (double& x : v.matrix.values()) x = std::round(x * 8.0) / 8.0;
  const RoutingWeights base = allocate(v, head);
  head.router_b.fill(4.0);
  const RoutingWeights shifted = allocate(v, head);
  EXPECT_EQ(base.selected, shifted.selected);
  EXPECT_TRUE(bitwise_equal(base.weights, shifted.weights));
}

TEST(GroundTokens, LayerPermutationEquivariance) {
  std::mt19937_64 rng(9);
  const GeometryBank bank = random_bank(4, 6, 3, rng);
  const VisualTokens v = random_tokens(6, 3, rng);
  GroundingHead head = GroundingHead::init(4, 3, AllocationMode::token_adaptive, 2, GroundingPosition::pre_reasoning,
                                           rng, 0.5);
  head.router_b = random_matrix(1, 4, rng);
  head.out_proj = random_matrix(3, 3, rng);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  GeometryBank permuted = bank;
  GroundingHead permuted_head = head;
  for (std::size_t l = 0; l < 4; ++l) {
    permuted.layers[l] = bank.layers[perm[l]];
    for (std::size_t c = 0; c < 3; ++c) permuted_head.router_w(l, c) = head.router_w(perm[l], c);
    permuted_head.router_b(0, l) = head.router_b(0, perm[l]);
  }
  const GroundingResult a = ground_tokens(v, bank, head), b = ground_tokens(v, permuted, permuted_head);
  for (std::size_t i = 0; i < a.grounded.matrix.size(); ++i) {
    EXPECT_NEAR(a.grounded.matrix.values()[i], b.grounded.matrix.values()[i], 1e-12);
  }
}

TEST(GroundTokens, InputFusionAddsMeanEvidence) {
  std::mt19937_64 rng(10);
  const GeometryBank bank = random_bank(3, 4, 2, rng);
  const VisualTokens v = random_tokens(4, 2, rng);
  const GroundingHead head = GroundingHead::init(3, 2, AllocationMode::token_adaptive, 1,
                                                 GroundingPosition::input_fusion, rng);
  const GroundingResult r = ground_tokens(v, bank, head);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 2; ++c) {
      const double mean = (bank.layers[0](t, c) + bank.layers[1](t, c) + bank.layers[2](t, c)) / 3.0;
      EXPECT_NEAR(r.grounded.matrix(t, c), v.matrix(t, c) + mean, 1e-15);
    }
  }
}

TEST(GroundTokens, DecoderFusionLeavesTokensAndDefersEvidence) {
  std::mt19937_64 rng(11);
  const GeometryBank bank = random_bank(3, 4, 2, rng);
  const VisualTokens v = random_tokens(4, 2, rng);
  GroundingHead head = GroundingHead::init(3, 2, AllocationMode::token_adaptive, 2,
                                           GroundingPosition::decoder_fusion, rng);
  head.out_proj = Tensor2D(2, 2, {1, 0, 0, 1});
  const GroundingResult r = ground_tokens(v, bank, head);
  EXPECT_TRUE(bitwise_equal(r.grounded.matrix, v.matrix));
  ASSERT_EQ(r.grounded.late_evidence.rows(), 4u);
  for (std::size_t i = 0; i < r.evidence.size(); ++i) {
    EXPECT_NEAR(r.grounded.late_evidence.values()[i], r.evidence.values()[i], 1e-15);
  }
}

TEST(GroundTokens, TokenCountMismatchThrows) {
  std::mt19937_64 rng(12);
  const GeometryBank bank = random_bank(3, 4, 2, rng);
  const VisualTokens v = random_tokens(5, 2, rng);
  const GroundingHead head = GroundingHead::init(3, 2, AllocationMode::token_adaptive, 2,
                                                 GroundingPosition::pre_reasoning, rng);
  EXPECT_THROW(ground_tokens(v, bank, head), DimensionError);
}

}  // namespace
}  // namespace geoweaver
