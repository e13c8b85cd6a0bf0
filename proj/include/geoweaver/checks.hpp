// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "geoweaver/proxy_task.hpp"
#include "geoweaver/training.hpp"

namespace geoweaver {

// Outcome of one invariant check, shared by `selftest`, `gradcheck` and the
// acceptance runner.
struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// Tiny task used by the structural checks: |S| = 3, one 4x4 frame, d_geo 4,
// d_model 6, three roles and classes.
ProxyConfig small_check_task();

// Each (mode, position) combination that the pipeline distinguishes.
struct HeadVariant {
  AllocationMode mode;
  GroundingPosition position;
};
std::vector<HeadVariant> all_head_variants();

// W_o = 0 leaves V' bitwise equal to V (pre_reasoning in every mode, and
// decoder_fusion). input_fusion has no W_o and is out of scope.
CheckResult check_identity_at_init(std::size_t draws = 20, std::uint64_t seed = 0);

// Top-k count, normalization, dense-softmax agreement at k = |S| and bitwise
// shift invariance, over random logit vectors.
CheckResult check_sparse_allocation(std::size_t vectors = 1000, std::uint64_t seed = 0);

// Central differences against analytic gradients of the full training loss
// for every head variant, with all parameters randomized (W_o included).
CheckResult check_pipeline_gradients(std::size_t seeds = 5, double h = 1e-5, double tol = 1e-5);

// With W_o = 0, router, global_logits, phi and bank affine gradients are
// exactly zero while the W_o gradient is not.
CheckResult check_init_gradient_structure(std::uint64_t seed = 0);

// Bitwise float32 round trip over random stack shapes, in memory and on disk.
CheckResult check_geobank_roundtrip(std::size_t shapes = 50, std::uint64_t seed = 0);

// Targeted header corruptions plus an exhaustive single-byte sweep of the
// header; every invalid file must raise FormatError. When `fixtures` names a
// directory, its bad_*.geobank files must be rejected and valid_*.geobank
// accepted.
CheckResult check_geobank_corruption(const std::filesystem::path& fixtures = {});

// Structural suite used by `selftest` (everything except gradients).
std::vector<CheckResult> selftest_suite(const std::filesystem::path& fixtures = {});

std::string render_check(const CheckResult& result);

}  // namespace geoweaver
