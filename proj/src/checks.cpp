// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <sstream>

#include "geoweaver/bank_io.hpp"

namespace geoweaver {

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string variant_name(const HeadVariant& v) { return to_string(v.mode) + "/" + to_string(v.position); }

void add_noise(Tensor2D& t, double stddev, std::mt19937_64& rng, double offset = 0.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& x : t.values()) x = offset + dist(rng);
}

// Model with every tensor away from its init value, so no gradient path is
// trivially zero. W_o is left at zero when `zero_out_proj` is set.
GroundingModel random_model(const ProxyConfig& task, const HeadVariant& variant, std::size_t top_k,
                            bool zero_out_proj, std::mt19937_64& rng) {
  const ModelOptions options{variant.mode, top_k, variant.position, 0.5};
  GroundingModel m = GroundingModel::init(task.effective_bank_size(), task.d_geo, task.d_model, task.num_classes,
                                          task.merge, options, rng);
  add_noise(m.bank.gamma, 0.3, rng, 1.0);
  add_noise(m.bank.beta, 0.3, rng);
  add_noise(m.head.router_b, 0.5, rng);
  add_noise(m.head.global_logits, 1.0, rng);
  if (!zero_out_proj) add_noise(m.head.out_proj, 0.5, rng);
  return m;
}

// Smallest gap between the k-th and (k+1)-th largest logit over all tokens;
// infinite when nothing is masked.
double selection_margin(const GroundingModel& m, std::span<const ProxySample* const> batch) {
  double margin = std::numeric_limits<double>::infinity();
  for (const ProxySample* s : batch) {
    const RoutingWeights r = allocate(s->visual, m.head);
    const std::size_t k = r.selected.front().size();
    if (k >= r.num_layers()) continue;
    for (std::size_t i = 0; i < r.token_count(); ++i) {
      std::vector<double> row(r.logits.row(i).begin(), r.logits.row(i).end());
      std::sort(row.begin(), row.end(), std::greater<>());
      margin = std::min(margin, row[k - 1] - row[k]);
    }
  }
  return margin;
}

double norm_of(const Tensor2D& t) {
  double s = 0.0;
  for (double x : t.values()) s += x * x;
  return std::sqrt(s);
}

RawLayerStack random_stack(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::uint32_t> layers(1, 5), first(0, 30), stride(1, 3), frames(1, 3), half_grid(1, 4),
      geo(1, 8);
  std::normal_distribution<float> value(0.0f, 10.0f);
  RawLayerStack raw;
  const std::uint32_t n = layers(rng);
  const std::uint32_t f = first(rng);
  const std::uint32_t s = stride(rng);
  for (std::uint32_t l = 0; l < n; ++l) raw.layer_indices.push_back(f + l * s);
  raw.num_frames = frames(rng);
  raw.grid_h = 2 * half_grid(rng);
  raw.grid_w = 2 * half_grid(rng);
  raw.d_geo = geo(rng);
  for (std::uint32_t l = 0; l < n; ++l) {
    Tensor2D t(raw.num_frames * raw.grid_h * raw.grid_w, raw.d_geo);
    for (double& x : t.values()) x = static_cast<double>(value(rng));
    raw.layers.push_back(std::move(t));
  }
  return raw;
}

bool stacks_bitwise_equal(const RawLayerStack& a, const RawLayerStack& b) {
  if (a.layer_indices != b.layer_indices || a.num_frames != b.num_frames || a.grid_h != b.grid_h ||
      a.grid_w != b.grid_w || a.d_geo != b.d_geo || a.layers.size() != b.layers.size()) {
    return false;
  }
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    if (!a.layers[l].same_shape(b.layers[l])) return false;
    for (std::size_t i = 0; i < a.layers[l].size(); ++i) {
      const auto x = static_cast<float>(a.layers[l].values()[i]);
      const auto y = static_cast<float>(b.layers[l].values()[i]);
      if (std::memcmp(&x, &y, sizeof x) != 0) return false;
    }
  }
  return true;
}

void put_u32(std::vector<std::uint8_t>& bytes, std::size_t offset, std::uint32_t v) {
  for (std::size_t i = 0; i < 4; ++i) bytes[offset + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace

ProxyConfig small_check_task() {
  ProxyConfig t;
  t.num_layers = 3;
  t.encoder_layers = 3;
  t.bank_strategy = LayerStrategy::latter_half;
  t.num_frames = 1;
  t.grid_h = 4;
  t.grid_w = 4;
  t.d_geo = 4;
  t.d_model = 6;
  t.num_roles = 3;
  t.num_classes = 3;
  t.signal_layer_map = {0, 1, 2};
  t.second_signal_layer_map = {};
  t.role_weights = {1.0, 1.0, 1.0};
  t.train_samples = 2;
  t.test_samples = 1;
  t.batch_size = 2;
  return t;
}

std::vector<HeadVariant> all_head_variants() {
  return {{AllocationMode::token_adaptive, GroundingPosition::pre_reasoning},
          {AllocationMode::global, GroundingPosition::pre_reasoning},
          {AllocationMode::uniform, GroundingPosition::pre_reasoning},
          {AllocationMode::token_adaptive, GroundingPosition::input_fusion},
          {AllocationMode::token_adaptive, GroundingPosition::decoder_fusion}};
}

CheckResult check_identity_at_init(std::size_t draws, std::uint64_t seed) {
  const Stopwatch clock;
  CheckResult result{"identity_at_init", true, "", 0.0};
  const ProxyConfig task = small_check_task();
  std::size_t cases = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    const ProxyDataset data = generate_task(task, seed + d);
    std::mt19937_64 rng(seed * 1000 + d);
    for (const HeadVariant& v : all_head_variants()) {
      if (v.position == GroundingPosition::input_fusion) continue;
      GroundingModel m = random_model(task, v, 2, /*zero_out_proj=*/true, rng);
      for (const ProxySample& s : data.train) {
        // Large visual values make any stray rounding visible.
        VisualTokens visual = s.visual;
        add_noise(visual.matrix, 100.0, rng);
        const GroundingResult g = ground_tokens(visual, build_bank(s.raw, m.bank), m.head);
        const double diff = max_abs_diff(g.grounded.matrix, visual.matrix);
        if (diff != 0.0 || std::memcmp(g.grounded.matrix.data(), visual.matrix.data(),
                                       sizeof(double) * visual.matrix.size()) != 0) {
          result.pass = false;
          result.detail = variant_name(v) + " draw " + std::to_string(d) + ": max|V'-V| = " + format_double(diff, 17);
          result.seconds = clock.seconds();
          return result;
        }
        ++cases;
      }
    }
  }
  result.detail = std::to_string(cases) + " token matrices, max|V'-V| = 0 (input_fusion has no W_o and is excluded)";
  result.seconds = clock.seconds();
  return result;
}

CheckResult check_sparse_allocation(std::size_t vectors, std::uint64_t seed) {
  const Stopwatch clock;
  CheckResult result{"sparse_allocation", true, "", 0.0};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> length(1, 16);
  std::normal_distribution<double> gauss(0.0, 3.0);
  std::uniform_int_distribution<int> eighths(-128, 128), shift(-64, 64);
  double worst_sum = 0.0;
  double worst_dense = 0.0;
  auto fail = [&](const std::string& why) {
    result.pass = false;
    if (result.detail.empty()) result.detail = why;
  };
  for (std::size_t v = 0; v < vectors && result.pass; ++v) {
    const std::size_t n = length(rng);
    std::vector<double> logits(n);
    for (double& x : logits) x = gauss(rng);
    // Dyadic logits and integer shifts: max-subtraction is then exact, so
    // shifted allocations must match bit for bit.
    std::vector<double> dyadic(n);
    for (double& x : dyadic) x = eighths(rng) / 8.0;
    const double c = shift(rng);
    std::vector<double> shifted(n);
    for (std::size_t i = 0; i < n; ++i) shifted[i] = dyadic[i] + c;

    for (std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{3}, n}) {
      const SparseAllocation a = sparse_allocate(logits, k);
      const auto nonzero = static_cast<std::size_t>(
          std::count_if(a.weights.begin(), a.weights.end(), [](double w) { return w != 0.0; }));
      if (nonzero != std::min(k, n)) fail("vector " + std::to_string(v) + ": nonzero count " + std::to_string(nonzero));
      double sum = 0.0;
      for (double w : a.weights) sum += w;
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      if (std::abs(sum - 1.0) > 1e-12) fail("vector " + std::to_string(v) + ": weights sum to " + format_double(sum, 17));
      if (k >= n) {
        const std::vector<double> dense = softmax(logits);
        for (std::size_t i = 0; i < n; ++i) worst_dense = std::max(worst_dense, std::abs(dense[i] - a.weights[i]));
        if (worst_dense > 1e-12) fail("vector " + std::to_string(v) + ": differs from dense softmax");
      }
      const SparseAllocation base = sparse_allocate(dyadic, k);
      const SparseAllocation moved = sparse_allocate(shifted, k);
      if (base.selected != moved.selected ||
          std::memcmp(base.weights.data(), moved.weights.data(), sizeof(double) * n) != 0) {
        fail("vector " + std::to_string(v) + ": shift by " + format_double(c, 1) + " changed the allocation");
      }
    }
  }
  if (result.pass) {
    std::ostringstream d;
    d << vectors << " vectors x top_k {1,2,3,|S|}; max|sum-1| = " << worst_sum << ", max dense diff = " << worst_dense;
    result.detail = d.str();
  }
  result.seconds = clock.seconds();
  return result;
}

CheckResult check_pipeline_gradients(std::size_t seeds, double h, double tol) {
  const Stopwatch clock;
  CheckResult result{"pipeline_gradients", true, "", 0.0};
  const ProxyConfig task = small_check_task();
  struct Case {
    HeadVariant variant;
    std::size_t top_k;
  };
  std::vector<Case> cases;
  for (const HeadVariant& v : all_head_variants()) cases.push_back({v, 2});
  cases.push_back({{AllocationMode::token_adaptive, GroundingPosition::pre_reasoning}, 3});

  double worst = 0.0;
  std::string worst_where;
  std::size_t runs = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    const ProxyDataset data = generate_task(task, 100 + s);
    std::vector<const ProxySample*> batch;
    for (const ProxySample& sample : data.train) batch.push_back(&sample);
    for (const Case& c : cases) {
      std::mt19937_64 rng(7919 * (s + 1) + runs);
      GroundingModel model = random_model(task, c.variant, c.top_k, false, rng);
      // A perturbation must never flip the selected set; redraw until the
      // top-k boundary has a clear margin.
      for (int tries = 0; selection_margin(model, batch) < 1e-3; ++tries) {
        if (tries == 100) throw NumericError("check_pipeline_gradients: no draw with a clear top-k margin");
        model = random_model(task, c.variant, c.top_k, false, rng);
      }
      ParamStore store = model.to_store();
      // Loss relative to the unperturbed point, differenced in extended
      // precision; the derivative is unchanged.
      const long double reference = batch_forward(model, batch).precise_loss;
      GradCheckTarget target;
      target.loss = [&](const ParamStore& st) {
        GroundingModel m = model;
        m.load(st);
        return static_cast<double>(batch_forward(m, batch).precise_loss - reference);
      };
      target.backward = [&](ParamStore& st) {
        GroundingModel m = model;
        m.load(st);
        GroundingModel grads = m.zeros_like();
        batch_forward(m, batch, &grads);
        GroundingModel::write_grads(grads, st);
      };
      const GradCheckReport report = check_gradients(store, target, h, tol);
      ++runs;
      for (const GradCheckEntry& e : report.entries) {
        if (e.max_rel_error >= worst) {
          worst = e.max_rel_error;
          worst_where = "seed " + std::to_string(s) + " " + variant_name(c.variant) + " k=" +
                        std::to_string(c.top_k) + " " + e.name + "[" + std::to_string(e.worst_index) + "]" +
                        " (analytic " + format_double(e.worst_analytic, 12) + ", numeric " +
                        format_double(e.worst_numeric, 12) + ")";
        }
      }
      if (!report.pass) result.pass = false;
    }
  }
  std::ostringstream d;
  d << runs << " runs (" << seeds << " seeds x " << cases.size() << " head variants), h = " << h
    << ", max rel error " << worst << " at " << worst_where << " (tol " << tol << ")";
  result.detail = d.str();
  result.seconds = clock.seconds();
  return result;
}

CheckResult check_init_gradient_structure(std::uint64_t seed) {
  const Stopwatch clock;
  CheckResult result{"init_gradient_structure", true, "", 0.0};
  const ProxyConfig task = small_check_task();
  const ProxyDataset data = generate_task(task, seed);
  std::vector<const ProxySample*> batch;
  for (const ProxySample& sample : data.train) batch.push_back(&sample);
  std::ostringstream d;
  for (const HeadVariant& hv : all_head_variants()) {
    if (hv.position == GroundingPosition::input_fusion) continue;
    std::mt19937_64 rng(seed + 17);
    const GroundingModel model = random_model(task, hv, 2, /*zero_out_proj=*/true, rng);
    GroundingModel g = model.zeros_like();
    batch_forward(model, batch, &g);
    const double blocked = norm_of(g.head.router_w) + norm_of(g.head.router_b) + norm_of(g.head.global_logits) +
                           norm_of(g.bank.phi.w1) + norm_of(g.bank.phi.b1) + norm_of(g.bank.phi.w2) +
                           norm_of(g.bank.phi.b2) + norm_of(g.bank.gamma) + norm_of(g.bank.beta);
    const double wo = norm_of(g.head.out_proj);
    d << variant_name(hv) << ": blocked-path norm " << blocked << ", |dW_o| " << wo << "; ";
    if (blocked != 0.0 || !(wo > 1e-8)) result.pass = false;
  }
  result.detail = d.str();
  result.seconds = clock.seconds();
  return result;
}

CheckResult check_geobank_roundtrip(std::size_t shapes, std::uint64_t seed) {
  const Stopwatch clock;
  CheckResult result{"geobank_roundtrip", true, "", 0.0};
  std::mt19937_64 rng(seed);
  const std::filesystem::path tmp =
      std::filesystem::temp_directory_path() / ("geoweaver_roundtrip_" + std::to_string(seed) + ".geobank");
  std::size_t bytes = 0;
  for (std::size_t i = 0; i < shapes; ++i) {
    const RawLayerStack raw = random_stack(rng);
    const std::vector<std::uint8_t> encoded = encode_geobank(raw);
    const GeobankHeader header = header_for(raw);
    bytes += encoded.size();
    if (encoded.size() != header.file_bytes() || std::memcmp(encoded.data(), "GEOB", 4) != 0 ||
        !stacks_bitwise_equal(decode_geobank(encoded), raw)) {
      result.pass = false;
      result.detail = "in-memory round trip failed for shape " + std::to_string(i);
      break;
    }
    if (i % 10 == 0) {
      write_geobank(tmp, raw);
      if (!stacks_bitwise_equal(read_geobank(tmp), raw)) {
        result.pass = false;
        result.detail = "file round trip failed for shape " + std::to_string(i);
        break;
      }
    }
  }
  std::error_code ec;
  std::filesystem::remove(tmp, ec);
  if (result.pass) result.detail = std::to_string(shapes) + " shapes, " + std::to_string(bytes) + " bytes, bitwise equal";
  result.seconds = clock.seconds();
  return result;
}

CheckResult check_geobank_corruption(const std::filesystem::path& fixtures) {
  const Stopwatch clock;
  CheckResult result{"geobank_corruption", true, "", 0.0};
  std::mt19937_64 rng(11);
  RawLayerStack raw = random_stack(rng);
  // Needs two layers so a huge first index overflows.
  while (raw.num_layers() < 2) raw = random_stack(rng);
  const std::vector<std::uint8_t> good = encode_geobank(raw);

  std::size_t rejected = 0;
  auto expect_reject = [&](const std::string& what, std::span<const std::uint8_t> bytes) {
    try {
      (void)decode_geobank(bytes);
    } catch (const FormatError&) {
      ++rejected;
      return;
    }
    result.pass = false;
    if (result.detail.empty()) result.detail = what + " was accepted";
  };
  struct Mutation {
    std::string name;
    std::size_t offset;
    std::uint32_t value;
  };
  const std::vector<Mutation> mutations = {
      {"magic", 0, 0x58585858}, {"version 0", 4, 0},      {"version 2", 4, 2},       {"num_layers 0", 8, 0},
      {"num_frames 0", 16, 0},  {"grid_h 0", 20, 0},      {"grid_h odd", 20, 7},     {"grid_w odd", 24, 5},
      {"d_geo 0", 28, 0},       {"dtype 1", 32, 1},       {"layer_stride 0", 36, 0}, {"index overflow", 12, 0xffffffff}};
  for (const Mutation& m : mutations) {
    std::vector<std::uint8_t> bad = good;
    put_u32(bad, m.offset, m.value);
    expect_reject(m.name, bad);
  }
  expect_reject("truncated by 1 byte", std::span(good).first(good.size() - 1));
  expect_reject("header only", std::span(good).first(kGeobankHeaderBytes));
  expect_reject("short header", std::span(good).first(kGeobankHeaderBytes - 1));
  std::vector<std::uint8_t> longer = good;
  longer.push_back(0);
  expect_reject("one extra byte", longer);

  // Exhaustive single-byte sweep: any accepted mutation must still describe
  // a consistent file (its header re-encodes to the mutated bytes).
  std::size_t accepted = 0;
  for (std::size_t offset = 0; offset < kGeobankHeaderBytes && result.pass; ++offset) {
    for (int value = 0; value < 256; ++value) {
      if (value == good[offset]) continue;
      std::vector<std::uint8_t> bad = good;
      bad[offset] = static_cast<std::uint8_t>(value);
      try {
        GeobankHeader h;
        (void)decode_geobank(bad, &h);
        const auto again = encode_geobank_header(h);
        if (!std::equal(again.begin(), again.end(), bad.begin())) {
          result.pass = false;
          result.detail = "byte " + std::to_string(offset) + " = " + std::to_string(value) + " decoded inconsistently";
          break;
        }
        ++accepted;
      } catch (const FormatError&) {
        ++rejected;
      }
    }
  }

  std::size_t fixture_files = 0;
  if (!fixtures.empty()) {
    for (const auto& entry : std::filesystem::directory_iterator(fixtures)) {
      const std::string stem = entry.path().stem().string();
      if (entry.path().extension() != ".geobank") continue;
      ++fixture_files;
      if (stem.rfind("bad_", 0) == 0) {
        try {
          (void)read_geobank(entry.path());
          result.pass = false;
          if (result.detail.empty()) result.detail = "fixture " + stem + " was accepted";
        } catch (const FormatError&) {
          ++rejected;
        }
      } else {
        try {
          (void)read_geobank(entry.path());
        } catch (const std::exception& e) {
          result.pass = false;
          if (result.detail.empty()) result.detail = "fixture " + stem + " was rejected: " + e.what();
        }
      }
    }
  }
  if (result.pass) {
    result.detail = std::to_string(rejected) + " corrupt inputs rejected, " + std::to_string(accepted) +
                    " benign byte flips accepted, " + std::to_string(fixture_files) + " fixture files checked";
  }
  result.seconds = clock.seconds();
  return result;
}

std::vector<CheckResult> selftest_suite(const std::filesystem::path& fixtures) {
  return {check_identity_at_init(), check_sparse_allocation(), check_init_gradient_structure(),
          check_geobank_roundtrip(), check_geobank_corruption(fixtures)};
}

std::string render_check(const CheckResult& r) {
  return std::string(r.pass ? "PASS" : "FAIL") + "  " + r.name + "  (" + format_double(r.seconds, 2) + " s)  " +
         r.detail;
}

}  // namespace geoweaver
