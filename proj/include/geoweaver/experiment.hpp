// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "geoweaver/config.hpp"
#include "geoweaver/training.hpp"

namespace geoweaver {

struct RunOptions {
  std::size_t threads = 1;
};

// Runs fn(0..count-1) on up to `threads` workers. Each index is run exactly
// once; the first exception (by index) is rethrown after all workers finish.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn);

struct SeedRun {
  std::uint64_t seed = 0;
  TrainResult result;
  ProxySample probe_sample;  // first test sample, kept for heatmaps
  double seconds = 0.0;
};

struct ExperimentResult {
  ExperimentConfig config;  // with the background stack attached, if any
  std::vector<SeedRun> runs;  // in config.seeds order

  double mean_test_accuracy() const;
  double std_test_accuracy() const;
  double mean_agreement() const;
  // Mean over seeds and roles of the per-role agreement.
  double role_balanced_agreement() const;
};

// Loads the background geobank (if configured) into config.task.
ExperimentConfig resolve_experiment(ExperimentConfig config);

SeedRun run_seed(const ExperimentConfig& config, std::uint64_t seed);

// Trains one model per seed. Throws ConfigError/FormatError/IoError before
// training, TrainingError during it.
ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

// Report bodies; all deterministic given the config.
std::string metrics_report(const ExperimentResult& result);
std::string trace_csv(const ExperimentResult& result);
std::string routing_csv(const ExperimentResult& result);
std::vector<HeatmapGrid> experiment_heatmaps(const ExperimentResult& result);

// Writes config.yaml, metrics.txt, trace.csv, routing.csv, one heatmap pair
// per configured kind, and timing.txt (the only non-deterministic file).
void write_experiment_outputs(const ExperimentResult& result, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Ablations

enum class AblationAxis { bank_construction, bank_size, compactness, allocation, position };

AblationAxis parse_ablation_axis(const std::string& name);
std::string to_string(AblationAxis axis);

struct AblationVariant {
  std::string name;
  ExperimentConfig config;
};

// Variant set for an axis, in report order.
std::vector<AblationVariant> ablation_variants(AblationAxis axis, const ExperimentConfig& base);

struct AblationRow {
  std::string variant;
  std::vector<double> accuracies;  // per seed, empty when the row failed
  std::vector<double> agreements;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double mean_agreement = 0.0;
  double seconds = 0.0;
  bool complete = false;
  std::string error;
  int error_exit_code = 0;
};

struct AblationReport {
  AblationAxis axis = AblationAxis::allocation;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  bool complete() const;
  const AblationRow& row(const std::string& variant) const;
  // Text table plus "complete = ..." line; runtimes are left to timing_text.
  std::string render() const;
  std::string csv() const;
  std::string timing_text() const;
};

// A failing variant leaves its row incomplete; the other rows still run.
AblationReport run_ablation(AblationAxis axis, const ExperimentConfig& base, const RunOptions& options = {});

void write_ablation_outputs(const AblationReport& report, const std::filesystem::path& dir);

// Exit code for an exception escaping a run: 2 for config/format/io, 3 for
// numeric/training, 1 otherwise.
int exit_code_for(const std::exception& e);

}  // namespace geoweaver
