// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "geoweaver/bank_io.hpp"
#include "geoweaver/proxy_task.hpp"
#include "geoweaver/training.hpp"

namespace geoweaver {

struct ExperimentConfig {
  std::string name = "experiment";
  ProxyConfig task;
  ModelOptions model;
  std::vector<std::uint64_t> seeds = {0};
  std::filesystem::path output_dir = "out";
  std::vector<HeatmapKind> heatmaps = {HeatmapKind::avg_layer_index, HeatmapKind::roi_similarity,
                                       HeatmapKind::layer_histogram};
  // Optional .geobank whose layers replace the Gaussian background of every
  // generated sample. Resolved relative to the config file.
  std::filesystem::path background_geobank;
  // Source file, for messages only.
  std::string source = "<string>";

  // Cross-field checks; throws ConfigError naming the field.
  void validate() const;
};

// Parses YAML text. Errors carry "<source>:<line>:<col>: <field>: <reason>".
ExperimentConfig parse_experiment_config(const std::string& text, const std::string& source = "<string>");
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Canonical YAML rendering (every field, fixed order); reparses to an equal
// config.
std::string render_experiment_config(const ExperimentConfig& config);

}  // namespace geoweaver
