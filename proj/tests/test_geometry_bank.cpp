// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "geoweaver/geometry_bank.hpp"

namespace geoweaver {
namespace {

using Indices = std::vector<std::uint32_t>;

Indices range(std::uint32_t first, std::uint32_t count, std::uint32_t step = 1) {
  Indices out;
  for (std::uint32_t i = 0; i < count; ++i) out.push_back(first + i * step);
  return out;
}

RawLayerStack random_stack(std::size_t layers, std::size_t frames, std::size_t h, std::size_t w, std::size_t d,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  RawLayerStack raw;
  raw.num_frames = frames;
  raw.grid_h = h;
  raw.grid_w = w;
  raw.d_geo = d;
  for (std::size_t l = 0; l < layers; ++l) {
    raw.layer_indices.push_back(static_cast<std::uint32_t>(l));
    Tensor2D t(frames * h * w, d);
    for (double& x : t.values()) x = n(rng);
    raw.layers.push_back(std::move(t));
  }
  return raw;
}

TEST(SelectLayers, Strategies) {
  EXPECT_EQ(select_layers(24, LayerStrategy::latter_half, 12), range(12, 12));
  EXPECT_EQ(select_layers(24, LayerStrategy::first_half, 12), range(0, 12));
  EXPECT_EQ(select_layers(24, LayerStrategy::uniform, 12), range(1, 12, 2));
  EXPECT_EQ(select_layers(24, LayerStrategy::uniform, 4), (Indices{5, 11, 17, 23}));
  EXPECT_EQ(select_layers(24, LayerStrategy::latter_half, 24), range(0, 24));
  const Indices chosen = {3, 9, 20};
  EXPECT_EQ(select_layers(24, LayerStrategy::explicit_list, 3, chosen), chosen);
}

TEST(SelectLayers, OutOfRangeIsConfigError) {
  EXPECT_THROW(select_layers(24, LayerStrategy::latter_half, 0), ConfigError);
  EXPECT_THROW(select_layers(24, LayerStrategy::uniform, 25), ConfigError);
  const Indices unsorted = {4, 2};
  EXPECT_THROW(select_layers(24, LayerStrategy::explicit_list, 2, unsorted), ConfigError);
  const Indices too_deep = {1, 24};
  EXPECT_THROW(select_layers(24, LayerStrategy::explicit_list, 2, too_deep), ConfigError);
}

TEST(NormalizeLayer, ConstantTokensGoToBeta) {
  const Tensor2D z(4, 3, 2.5);
  const std::vector<double> gamma = {1.0, 2.0, 3.0}, beta(3, 0.0);
  EXPECT_EQ(normalize_layer(z, gamma, beta), Tensor2D(4, 3, 0.0));
}

TEST(NormalizeLayer, OracleWithoutEpsilon) {
  const Tensor2D z(1, 3, {1.0, 2.0, 3.0});
  const std::vector<double> gamma(3, 1.0), beta(3, 0.0);
  const Tensor2D y = normalize_layer(z, gamma, beta, 0.0);
  // sqrt(3/2) from mpmath.
  EXPECT_NEAR(y(0, 0), -1.22474487139158904909, 1e-15);
  EXPECT_EQ(y(0, 1), 0.0);
  EXPECT_NEAR(y(0, 2), 1.22474487139158904909, 1e-15);
}

TEST(NormalizeLayer, DistinctAffinesGiveDistinctOutputs) {
  const Tensor2D z(2, 3, {1, 5, 2, -1, 0, 4});
  const std::vector<double> g1(3, 1.0), g2(3, 2.0), beta(3, 0.0);
  EXPECT_NE(normalize_layer(z, g1, beta), normalize_layer(z, g2, beta));
}

TEST(NormalizeLayer, DimMismatchThrows) {
  const Tensor2D z(2, 3);
  const std::vector<double> gamma(4, 1.0), beta(4, 0.0);
  EXPECT_THROW(normalize_layer(z, gamma, beta), DimensionError);
}

TEST(SpatialMerge, ShapeAndBlockOrder) {
  Tensor2D grid(16, 16);
  for (std::size_t t = 0; t < 16; ++t) grid.row(t)[0] = static_cast<double>(t);
  const Tensor2D merged = spatial_merge_2x2(grid, 1, 4, 4);
  ASSERT_EQ(merged.rows(), 4u);
  ASSERT_EQ(merged.cols(), 64u);
  // Merged token 1 covers rows 0-1, cols 2-3: raw tokens 2, 3, 6, 7.
  EXPECT_EQ(merged(1, 0), 2.0);
  EXPECT_EQ(merged(1, 16), 3.0);
  EXPECT_EQ(merged(1, 32), 6.0);
  EXPECT_EQ(merged(1, 48), 7.0);
}

TEST(SpatialMerge, IdenticalBlockRepeatsVector) {
  Tensor2D grid(4, 2);
  for (std::size_t t = 0; t < 4; ++t) {
    grid(t, 0) = 1.5;
    grid(t, 1) = -2.0;
  }
  EXPECT_EQ(spatial_merge_2x2(grid, 1, 2, 2), Tensor2D(1, 8, {1.5, -2, 1.5, -2, 1.5, -2, 1.5, -2}));
  EXPECT_EQ(spatial_merge_2x2(grid, 1, 2, 2, MergeMode::mean), Tensor2D(1, 2, {1.5, -2}));
}

TEST(SpatialMerge, FramesAreIndependent) {
  const RawLayerStack raw = random_stack(1, 2, 4, 4, 3, 5);
  const Tensor2D& grid = raw.layers[0];
  Tensor2D swapped(grid.rows(), grid.cols());
  for (std::size_t t = 0; t < 16; ++t) {
    std::copy(grid.row(t).begin(), grid.row(t).end(), swapped.row(t + 16).begin());
    std::copy(grid.row(t + 16).begin(), grid.row(t + 16).end(), swapped.row(t).begin());
  }
  const Tensor2D a = spatial_merge_2x2(grid, 2, 4, 4);
  const Tensor2D b = spatial_merge_2x2(swapped, 2, 4, 4);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_TRUE(std::equal(a.row(t).begin(), a.row(t).end(), b.row(t + 4).begin()));
    EXPECT_TRUE(std::equal(a.row(t + 4).begin(), a.row(t + 4).end(), b.row(t).begin()));
  }
}

TEST(SpatialMerge, OddGridThrows) {
  const Tensor2D grid(12, 2);
  EXPECT_THROW(spatial_merge_2x2(grid, 1, 3, 4), DimensionError);
}

TEST(ProjectLayer, ZeroWeightsGiveBias) {
  Projector phi = Projector::zeros(8, 5, 3);
  phi.b2 = Tensor2D(1, 3, {0.5, -1.0, 2.0});
  const Tensor2D merged(6, 8, 3.0);
  const Tensor2D out = project_layer(merged, phi);
  for (std::size_t t = 0; t < 6; ++t) {
    EXPECT_TRUE(std::equal(out.row(t).begin(), out.row(t).end(), phi.b2.row(0).begin()));
  }
}

TEST(ProjectLayer, TokenwiseAndDeterministic) {
  std::mt19937_64 rng(11);
  const Projector phi = Projector::random(8, 6, 4, rng);
  const RawLayerStack raw = random_stack(1, 1, 1, 4, 8, 2);
  Tensor2D edited = raw.layers[0];
  edited(3, 2) += 1.0;
  const Tensor2D a = project_layer(raw.layers[0], phi);
  const Tensor2D b = project_layer(edited, phi);
  EXPECT_EQ(a, project_layer(raw.layers[0], phi));
  for (std::size_t t = 0; t < 3; ++t) EXPECT_TRUE(std::equal(a.row(t).begin(), a.row(t).end(), b.row(t).begin()));
  EXPECT_FALSE(std::equal(a.row(3).begin(), a.row(3).end(), b.row(3).begin()));
}

TEST(ProjectLayer, DimMismatchThrows) {
  const Projector phi = Projector::zeros(8, 4, 4);
  EXPECT_THROW(project_layer(Tensor2D(2, 7), phi), DimensionError);
}

TEST(BuildBank, ShapeArithmetic) {
  std::mt19937_64 rng(1);
  const RawLayerStack raw = random_stack(12, 2, 8, 8, 16, 3);
  const BankParams params = BankParams::init(12, 16, 32, MergeMode::concat, rng);
  const GeometryBank bank = build_bank(raw, params);
  EXPECT_EQ(bank.num_layers(), 12u);
  EXPECT_EQ(bank.tokens_per_frame, 16u);
  EXPECT_EQ(bank.token_count(), 32u);
  EXPECT_EQ(bank.layer_indices, raw.layer_indices);
  for (const Tensor2D& g : bank.layers) {
    EXPECT_EQ(g.rows(), 32u);
    EXPECT_EQ(g.cols(), 32u);
    EXPECT_TRUE(g.all_finite());
  }
  EXPECT_EQ(build_bank(raw, params).layers, bank.layers);
}

TEST(BuildBank, ZeroProjectorGivesBiasEverywhere) {
  std::mt19937_64 rng(1);
  const RawLayerStack raw = random_stack(3, 1, 4, 4, 4, 3);
  BankParams params = BankParams::init(3, 4, 6, MergeMode::concat, rng);
  params.phi = Projector::zeros(16, 6, 6);
  params.phi.b2 = Tensor2D(1, 6, {1, 2, 3, 4, 5, 6});
  for (const Tensor2D& g : build_bank(raw, params).layers) {
    for (std::size_t t = 0; t < g.rows(); ++t) {
      EXPECT_TRUE(std::equal(g.row(t).begin(), g.row(t).end(), params.phi.b2.row(0).begin()));
    }
  }
}

TEST(BuildBank, LayersAreIndependentAndShareProjector) {
  std::mt19937_64 rng(4);
  RawLayerStack raw = random_stack(3, 1, 4, 4, 4, 8);
  BankParams params = BankParams::init(3, 4, 6, MergeMode::concat, rng);
  std::normal_distribution<double> n(0.0, 0.3);
  for (double& g : params.gamma.values()) g += n(rng);
  for (double& b : params.beta.values()) b += n(rng);
  const GeometryBank base = build_bank(raw, params);

  RawLayerStack edited = raw;
  edited.layers[1](5, 2) += 2.0;
  const GeometryBank changed = build_bank(edited, params);
  EXPECT_EQ(changed.layers[0], base.layers[0]);
  EXPECT_NE(changed.layers[1], base.layers[1]);
  EXPECT_EQ(changed.layers[2], base.layers[2]);

  // Swap features and affines of layers 0 and 2: bank layers swap exactly.
  RawLayerStack swapped = raw;
  std::swap(swapped.layers[0], swapped.layers[2]);
  BankParams swapped_params = params;
  for (std::size_t c = 0; c < 4; ++c) {
    std::swap(swapped_params.gamma(0, c), swapped_params.gamma(2, c));
    std::swap(swapped_params.beta(0, c), swapped_params.beta(2, c));
  }
  const GeometryBank swapped_bank = build_bank(swapped, swapped_params);
  EXPECT_EQ(swapped_bank.layers[0], base.layers[2]);
  EXPECT_EQ(swapped_bank.layers[2], base.layers[0]);
}

TEST(BuildBank, AffineCountMismatchThrows) {
  std::mt19937_64 rng(1);
  const RawLayerStack raw = random_stack(3, 1, 4, 4, 4, 3);
  const BankParams params = BankParams::init(2, 4, 6, MergeMode::concat, rng);
  EXPECT_THROW(build_bank(raw, params), DimensionError);
}

TEST(RawLayerStack, ValidateRejectsBadShapes) {
  RawLayerStack raw = random_stack(2, 1, 4, 4, 4, 3);
  EXPECT_NO_THROW(raw.validate());
  RawLayerStack descending = raw;
  descending.layer_indices = {3, 1};
  EXPECT_THROW(descending.validate(), DimensionError);
  RawLayerStack odd = random_stack(1, 1, 3, 4, 4, 3);
  EXPECT_THROW(odd.validate(), DimensionError);
  RawLayerStack ragged = raw;
  ragged.layers[1] = Tensor2D(16, 5);
  EXPECT_THROW(ragged.validate(), DimensionError);
}

TEST(SparseBankProjection, MatchesBuildBankRows) {
  std::mt19937_64 rng(6);
  const RawLayerStack raw = random_stack(3, 2, 4, 4, 4, 12);
  const BankParams params = BankParams::init(3, 4, 6, MergeMode::concat, rng);
  const GeometryBank bank = build_bank(raw, params);
  std::vector<BankQuery> queries;
  for (std::size_t t = 0; t < bank.token_count(); ++t) queries.push_back({&raw, t, (t * 7) % 3});
  SparseBankProjection sparse;
  const Tensor2D& rows = sparse.forward(queries, params);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto expected = bank.layers[queries[q].layer].row(queries[q].token);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(rows(q, c), expected[c], 1e-14);
  }
}

// Loss = sum_l <W_l, G^(l)> with fixed random weights; compared against
// central differences over every parameter entry.
TEST(BuildBankBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  const RawLayerStack raw = random_stack(3, 1, 4, 4, 4, 22);
  BankParams params = BankParams::init(3, 4, 6, MergeMode::concat, rng);
  std::normal_distribution<double> n(0.0, 0.3);
  for (double& g : params.gamma.values()) g += n(rng);
  for (double& b : params.beta.values()) b += n(rng);

  std::vector<Tensor2D> weights;
  for (std::size_t l = 0; l < 3; ++l) {
    Tensor2D w(4, 6);
    for (double& x : w.values()) x = n(rng);
    weights.push_back(std::move(w));
  }
  auto loss = [&](const BankParams& p) {
    const GeometryBank bank = build_bank(raw, p);
    long double s = 0.0L;
    for (std::size_t l = 0; l < 3; ++l) {
      for (std::size_t i = 0; i < weights[l].size(); ++i) s += weights[l].values()[i] * bank.layers[l].values()[i];
    }
    return s;
  };
  BankParams grads = params.zeros_like();
  build_bank_backward(raw, params, weights, grads);

  auto check = [&](Tensor2D BankParams::*outer, Tensor2D Projector::*inner, const char* name) {
    Tensor2D& value = inner ? params.phi.*inner : params.*outer;
    const Tensor2D& grad = inner ? grads.phi.*inner : grads.*outer;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value.values()[i];
      const double h = 1e-5;
      value.values()[i] = saved + h;
      const long double up = loss(params);
      value.values()[i] = saved - h;
      const long double down = loss(params);
      value.values()[i] = saved;
      const double numeric = static_cast<double>((up - down) / (2 * h));
      EXPECT_NEAR(grad.values()[i], numeric, 1e-7 * std::max(1.0, std::abs(numeric))) << name << "[" << i << "]";
    }
  };
  check(&BankParams::gamma, nullptr, "gamma");
  check(&BankParams::beta, nullptr, "beta");
  check(nullptr, &Projector::w1, "w1");
  check(nullptr, &Projector::b1, "b1");
  check(nullptr, &Projector::w2, "w2");
  check(nullptr, &Projector::b2, "b2");
}

}  // namespace
}  // namespace geoweaver
