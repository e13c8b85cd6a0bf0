// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <thread>

namespace geoweaver {

namespace {

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

// Sample standard deviation (n - 1); 0 for fewer than two values.
double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

std::string join_layers(const std::vector<std::uint32_t>& layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) out += (i ? " " : "") + std::to_string(layers[i]);
  return out;
}

}  // namespace

void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(count);
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double ExperimentResult::mean_test_accuracy() const {
  std::vector<double> xs;
  for (const auto& r : runs) xs.push_back(r.result.test.accuracy);
  return mean_of(xs);
}

double ExperimentResult::std_test_accuracy() const {
  std::vector<double> xs;
  for (const auto& r : runs) xs.push_back(r.result.test.accuracy);
  return std_of(xs);
}

double ExperimentResult::mean_agreement() const {
  std::vector<double> xs;
  for (const auto& r : runs) xs.push_back(r.result.test.agreement);
  return mean_of(xs);
}

double ExperimentResult::role_balanced_agreement() const {
  std::vector<double> xs;
  for (const auto& r : runs) {
    for (double a : r.result.test.agreement_per_role) xs.push_back(a);
  }
  return mean_of(xs);
}

ExperimentConfig resolve_experiment(ExperimentConfig config) {
  config.validate();
  if (!config.background_geobank.empty() && !config.task.background) {
    config.task.background = std::make_shared<const RawLayerStack>(read_geobank(config.background_geobank));
    config.task.validate();
  }
  return config;
}

SeedRun run_seed(const ExperimentConfig& config, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SeedRun run;
  run.seed = seed;
  const ProxyDataset data = generate_task(config.task, seed);
  run.result = train(config.task, data, config.model, seed);
  run.probe_sample = data.test.front();
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  ExperimentResult result;
  result.config = resolve_experiment(config);
  result.runs.resize(result.config.seeds.size());
  parallel_for(result.runs.size(), options.threads, [&](std::size_t i) {
    result.runs[i] = run_seed(result.config, result.config.seeds[i]);
  });
  return result;
}

std::string metrics_report(const ExperimentResult& result) {
  const ExperimentConfig& c = result.config;
  KeyValueReport r;
  r.add("name", c.name);
  r.add("mode", to_string(c.model.mode));
  r.add("position", to_string(c.model.position));
  r.add("top_k", c.model.top_k);
  r.add("merge", to_string(c.task.merge));
  r.add("bank_layers", result.runs.empty() ? std::string() : join_layers(result.runs.front().result.bank_layers));
  r.add("seeds", result.runs.size());
  r.add("steps", c.task.steps);
  r.add("test_accuracy", result.mean_test_accuracy());
  r.add("test_accuracy_std", result.std_test_accuracy());
  std::vector<double> losses;
  for (const auto& run : result.runs) losses.push_back(run.result.train.loss);
  r.add("train_loss_final", mean_of(losses));
  r.add("agreement", result.mean_agreement());
  r.add("agreement_role_balanced", result.role_balanced_agreement());
  bool degenerate = false;
  for (const auto& run : result.runs) degenerate = degenerate || run.result.test.degenerate_ties();
  r.add("degenerate_ties", std::string(degenerate ? "true" : "false"));
  for (const auto& run : result.runs) {
    const std::string p = "seed." + std::to_string(run.seed) + ".";
    const TrainResult& t = run.result;
    r.add(p + "initial_test_accuracy", t.initial_test.accuracy);
    r.add(p + "test_accuracy", t.test.accuracy);
    r.add(p + "test_loss", t.test.loss);
    r.add(p + "train_accuracy", t.train.accuracy);
    r.add(p + "train_loss_final", t.train.loss);
    r.add(p + "agreement", t.test.agreement);
    for (std::size_t role = 0; role < t.test.agreement_per_role.size(); ++role) {
      r.add(p + "agreement.role" + std::to_string(role), t.test.agreement_per_role[role]);
    }
    r.add(p + "tie_fraction", t.test.tie_fraction);
  }
  return r.render();
}

std::string trace_csv(const ExperimentResult& result) {
  std::ostringstream out;
  out << "seed,step,batch_loss\n";
  for (const auto& run : result.runs) {
    for (const TracePoint& p : run.result.trace) {
      out << run.seed << "," << p.step << "," << format_double(p.batch_loss, 8) << "\n";
    }
  }
  return out.str();
}

std::string routing_csv(const ExperimentResult& result) {
  std::ostringstream out;
  out << "seed,position,encoder_layer,selection_count,selection_frequency,signal_roles\n";
  for (const auto& run : result.runs) {
    const TrainResult& t = run.result;
    for (std::size_t l = 0; l < t.bank_layers.size(); ++l) {
      std::string roles;
      for (std::size_t role = 0; role < t.signal_positions.size(); ++role) {
        if (t.signal_positions[role] == static_cast<int>(l)) roles += (roles.empty() ? "" : " ") + std::to_string(role);
      }
      out << run.seed << "," << l << "," << t.bank_layers[l] << "," << t.test.selection_counts[l] << ","
          << format_double(t.test.selection_frequency[l], 6) << "," << roles << "\n";
    }
  }
  return out.str();
}

std::vector<HeatmapGrid> experiment_heatmaps(const ExperimentResult& result) {
  std::vector<HeatmapGrid> grids;
  if (result.runs.empty()) return grids;
  const SeedRun& run = result.runs.front();
  const ProxyConfig& task = result.config.task;
  const GroundingModel& model = run.result.model;
  const std::vector<std::uint32_t>& layers = run.result.bank_layers;
  const RoutingWeights routing = allocate(run.probe_sample.visual, model.head);
  for (HeatmapKind kind : result.config.heatmaps) {
    HeatmapGrid grid;
    switch (kind) {
      case HeatmapKind::avg_layer_index:
        grid = avg_layer_index_heatmap(routing, layers, task.num_frames, task.grid_h / 2, task.grid_w / 2);
        grid.note = "seed " + std::to_string(run.seed) + ", first test sample";
        break;
      case HeatmapKind::roi_similarity: {
        const GeometryBank bank = build_bank(run.probe_sample.raw, model.bank);
        const std::size_t layer = routing.selected.front().front();
        grid = roi_similarity_heatmap(bank, layer, 0, task.grid_h / 2, task.grid_w / 2);
        grid.note = "seed " + std::to_string(run.seed) + ", first test sample, query token 0, bank position " +
                    std::to_string(layer) + " (its top-1 layer)";
        break;
      }
      case HeatmapKind::layer_histogram:
        grid = layer_histogram(run.result.test.selection_counts, layers);
        grid.note = "seed " + std::to_string(run.seed) + ", all test tokens";
        break;
    }
    grids.push_back(std::move(grid));
  }
  return grids;
}

void write_experiment_outputs(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create output directory: " + ec.message());
  write_text_file(dir / "config.yaml", render_experiment_config(result.config));
  write_text_file(dir / "metrics.txt", metrics_report(result));
  write_text_file(dir / "trace.csv", trace_csv(result));
  write_text_file(dir / "routing.csv", routing_csv(result));
  for (const HeatmapGrid& grid : experiment_heatmaps(result)) {
    write_heatmap(dir / "heatmaps", to_string(grid.kind), grid);
  }
  KeyValueReport timing;
  double total = 0.0;
  for (const auto& run : result.runs) {
    timing.add("seed." + std::to_string(run.seed) + ".seconds", run.seconds, 3);
    total += run.seconds;
  }
  timing.add("total_seconds", total, 3);
  write_text_file(dir / "timing.txt", timing.render());
}

// ---------------------------------------------------------------------------
// Ablations

AblationAxis parse_ablation_axis(const std::string& name) {
  if (name == "bank_construction") return AblationAxis::bank_construction;
  if (name == "bank_size") return AblationAxis::bank_size;
  if (name == "compactness") return AblationAxis::compactness;
  if (name == "allocation") return AblationAxis::allocation;
  if (name == "position") return AblationAxis::position;
  throw ConfigError("axis: unknown ablation axis '" + name +
                    "' (expected bank_construction, bank_size, compactness, allocation or position)");
}

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::bank_construction:
      return "bank_construction";
    case AblationAxis::bank_size:
      return "bank_size";
    case AblationAxis::compactness:
      return "compactness";
    case AblationAxis::allocation:
      return "allocation";
    case AblationAxis::position:
      return "position";
  }
  return "unknown";
}

std::vector<AblationVariant> ablation_variants(AblationAxis axis, const ExperimentConfig& base) {
  std::vector<AblationVariant> out;
  auto add = [&](const std::string& name, auto&& edit) {
    AblationVariant v{name, base};
    edit(v.config);
    v.config.name = base.name + "/" + name;
    out.push_back(std::move(v));
  };
  switch (axis) {
    case AblationAxis::bank_construction:
      for (LayerStrategy s : {LayerStrategy::first_half, LayerStrategy::uniform, LayerStrategy::latter_half}) {
        add(to_string(s), [&](ExperimentConfig& c) {
          c.task.bank_strategy = s;
          c.task.bank_size = c.task.num_layers;
        });
      }
      break;
    case AblationAxis::bank_size: {
      const std::size_t total = base.task.encoder_layers;
      std::vector<std::size_t> sizes;
      for (std::size_t n : {4, 8, 12, 16}) {
        if (n < total) sizes.push_back(n);
      }
      sizes.push_back(total);
      for (std::size_t n : sizes) {
        add(n == total ? "all_" + std::to_string(n) : "latter_" + std::to_string(n), [&](ExperimentConfig& c) {
          c.task.bank_strategy = LayerStrategy::latter_half;
          c.task.bank_size = n;
        });
      }
      break;
    }
    case AblationAxis::compactness: {
      const std::size_t bank = base.task.bank_strategy == LayerStrategy::explicit_list
                                   ? base.task.explicit_layers.size()
                                   : base.task.effective_bank_size();
      for (std::size_t k : {1, 2, 3, 4}) {
        if (k < bank) {
          add("top_k=" + std::to_string(k), [&](ExperimentConfig& c) {
            c.model.mode = AllocationMode::token_adaptive;
            c.model.top_k = k;
          });
        }
      }
      add("all_" + std::to_string(bank), [&](ExperimentConfig& c) {
        c.model.mode = AllocationMode::token_adaptive;
        c.model.top_k = bank;
      });
      break;
    }
    case AblationAxis::allocation:
      for (AllocationMode m : {AllocationMode::uniform, AllocationMode::global, AllocationMode::token_adaptive}) {
        add(to_string(m), [&](ExperimentConfig& c) {
          c.model.mode = m;
          c.model.position = GroundingPosition::pre_reasoning;
        });
      }
      break;
    case AblationAxis::position:
      for (GroundingPosition p :
           {GroundingPosition::input_fusion, GroundingPosition::decoder_fusion, GroundingPosition::pre_reasoning}) {
        add(to_string(p), [&](ExperimentConfig& c) {
          c.model.position = p;
          c.model.mode = AllocationMode::token_adaptive;
        });
      }
      break;
  }
  return out;
}

bool AblationReport::complete() const {
  return std::all_of(rows.begin(), rows.end(), [](const AblationRow& r) { return r.complete; });
}

const AblationRow& AblationReport::row(const std::string& variant) const {
  for (const auto& r : rows) {
    if (r.variant == variant) return r;
  }
  throw IndexError("ablation report has no row '" + variant + "'");
}

std::string AblationReport::render() const {
  std::size_t width = 7;
  for (const auto& r : rows) width = std::max(width, r.variant.size());
  std::ostringstream out;
  out << "axis = " << to_string(axis) << "\n";
  out << "seeds = " << seeds.size() << "\n";
  out << "complete = " << (complete() ? "true" : "false") << "\n\n";
  auto pad = [&](const std::string& s) { return s + std::string(width - s.size(), ' '); };
  out << pad("variant") << "  accuracy_mean  accuracy_std  agreement\n";
  for (const auto& r : rows) {
    if (!r.complete) {
      out << pad(r.variant) << "  incomplete: " << r.error << "\n";
      continue;
    }
    out << pad(r.variant) << "  " << format_double(r.mean_accuracy, 4) << "         " << format_double(r.std_accuracy, 4)
        << "        " << format_double(r.mean_agreement, 4) << "\n";
  }
  return out.str();
}

std::string AblationReport::csv() const {
  std::ostringstream out;
  out << "variant,complete,accuracy_mean,accuracy_std,agreement_mean";
  for (std::uint64_t s : seeds) out << ",accuracy_seed" << s;
  out << "\n";
  for (const auto& r : rows) {
    out << r.variant << "," << (r.complete ? "true" : "false") << "," << format_double(r.mean_accuracy, 6) << ","
        << format_double(r.std_accuracy, 6) << "," << format_double(r.mean_agreement, 6);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      out << "," << (i < r.accuracies.size() ? format_double(r.accuracies[i], 6) : std::string());
    }
    out << "\n";
  }
  return out.str();
}

std::string AblationReport::timing_text() const {
  KeyValueReport t;
  for (const auto& r : rows) t.add(r.variant + ".seconds", r.seconds, 3);
  return t.render();
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const IoError*>(&e)) {
    return 2;
  }
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  return 1;
}

AblationReport run_ablation(AblationAxis axis, const ExperimentConfig& base, const RunOptions& options) {
  const ExperimentConfig resolved = resolve_experiment(base);
  // Variants are validated inside their own jobs, so one invalid variant
  // (say, a bank size the background file cannot serve) only fails its row.
  const std::vector<AblationVariant> variants = ablation_variants(axis, resolved);

  AblationReport report;
  report.axis = axis;
  report.seeds = resolved.seeds;
  const std::size_t n_seeds = resolved.seeds.size();

  // One job per (variant, seed); results land in fixed slots so the report
  // does not depend on scheduling.
  struct Slot {
    double accuracy = 0.0;
    double agreement = 0.0;
    double seconds = 0.0;
    std::exception_ptr error;
  };
  std::vector<Slot> slots(variants.size() * n_seeds);
  parallel_for(slots.size(), options.threads, [&](std::size_t job) {
    Slot& slot = slots[job];
    try {
      const SeedRun run = run_seed(variants[job / n_seeds].config, resolved.seeds[job % n_seeds]);
      slot.accuracy = run.result.test.accuracy;
      slot.agreement = run.result.test.agreement;
      slot.seconds = run.seconds;
    } catch (...) {
      slot.error = std::current_exception();
    }
  });

  for (std::size_t v = 0; v < variants.size(); ++v) {
    AblationRow row;
    row.variant = variants[v].name;
    row.complete = true;
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const Slot& slot = slots[v * n_seeds + s];
      row.seconds += slot.seconds;
      if (slot.error && row.complete) {
        row.complete = false;
        try {
          std::rethrow_exception(slot.error);
        } catch (const std::exception& e) {
          row.error = "seed " + std::to_string(resolved.seeds[s]) + ": " + e.what();
          row.error_exit_code = exit_code_for(e);
        }
      }
    }
    if (row.complete) {
      for (std::size_t s = 0; s < n_seeds; ++s) {
        row.accuracies.push_back(slots[v * n_seeds + s].accuracy);
        row.agreements.push_back(slots[v * n_seeds + s].agreement);
      }
      row.mean_accuracy = mean_of(row.accuracies);
      row.std_accuracy = std_of(row.accuracies);
      row.mean_agreement = mean_of(row.agreements);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

void write_ablation_outputs(const AblationReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create output directory: " + ec.message());
  const std::string stem = "ablation_" + to_string(report.axis);
  write_text_file(dir / (stem + ".txt"), report.render());
  write_text_file(dir / (stem + ".csv"), report.csv());
  write_text_file(dir / (stem + ".timing.txt"), report.timing_text());
}

}  // namespace geoweaver
