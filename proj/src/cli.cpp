// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/cli.hpp"

#include <CLI11.hpp>

#include <optional>
#include <string>

#include "geoweaver/bank_io.hpp"
#include "geoweaver/checks.hpp"
#include "geoweaver/config.hpp"
#include "geoweaver/experiment.hpp"

namespace geoweaver {

namespace {

constexpr int kExitFailedCheck = 3;

struct GlobalFlags {
  std::optional<std::uint64_t> seed_override;
  std::string out_dir;
  std::size_t threads = 1;
};

ExperimentConfig load_with_overrides(const std::string& path, const GlobalFlags& flags) {
  ExperimentConfig config = load_experiment_config(path);
  if (flags.seed_override) config.seeds = {*flags.seed_override};
  if (!flags.out_dir.empty()) config.output_dir = flags.out_dir;
  return config;
}

int run_command(const std::string& path, const GlobalFlags& flags, std::ostream& out) {
  const ExperimentConfig config = load_with_overrides(path, flags);
  const ExperimentResult result = run_experiment(config, RunOptions{flags.threads});
  write_experiment_outputs(result, config.output_dir);
  out << "experiment " << config.name << ": " << result.runs.size() << " seed(s)\n";
  out << "test_accuracy = " << format_double(result.mean_test_accuracy(), 4) << " +- "
      << format_double(result.std_test_accuracy(), 4) << "\n";
  out << "agreement = " << format_double(result.mean_agreement(), 4) << "\n";
  out << "outputs in " << config.output_dir.string() << "\n";
  return 0;
}

int ablate_command(const std::string& axis_name, const std::string& path, const GlobalFlags& flags,
                   std::ostream& out, std::ostream& err) {
  const AblationAxis axis = parse_ablation_axis(axis_name);
  const ExperimentConfig config = load_with_overrides(path, flags);
  const AblationReport report = run_ablation(axis, config, RunOptions{flags.threads});
  write_ablation_outputs(report, config.output_dir);
  out << report.render();
  if (report.complete()) return 0;
  for (const auto& row : report.rows) {
    if (!row.complete) {
      err << "error: variant " << row.variant << ": " << row.error << "\n";
      return row.error_exit_code;
    }
  }
  return 1;
}

int inspect_command(const std::string& path, std::ostream& out) {
  GeobankHeader header;
  const RawLayerStack raw = read_geobank(path, &header);
  out << describe_geobank(header, raw);
  return 0;
}

int report_checks(const std::vector<CheckResult>& results, std::ostream& out) {
  bool pass = true;
  for (const CheckResult& r : results) {
    out << render_check(r) << "\n";
    pass = pass && r.pass;
  }
  return pass ? 0 : kExitFailedCheck;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-routed geometry grounding: experiments, ablations and checks"};
  app.name("geoweaver");
  app.require_subcommand(1);

  GlobalFlags flags;
  std::uint64_t seed_override = 0;
  auto* seed_opt = app.add_option("--seed-override", seed_override, "Run a single seed instead of the config's list");
  app.add_option("--out-dir", flags.out_dir, "Override the configured output directory");
  app.add_option("--threads", flags.threads, "Worker threads for seed/variant runs")->check(CLI::PositiveNumber);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Train and evaluate one experiment config");
  run->add_option("config", config_path, "Experiment YAML")->required();
  run->fallthrough();

  std::string axis;
  auto* ablate = app.add_subcommand("ablate", "Sweep one ablation axis over a base config");
  ablate->add_option("axis", axis, "bank_construction | bank_size | compactness | allocation | position")->required();
  ablate->add_option("config", config_path, "Base experiment YAML")->required();
  ablate->fallthrough();

  std::string geobank_path;
  auto* inspect = app.add_subcommand("inspect", "Print the header and per-layer statistics of a .geobank file");
  inspect->add_option("path", geobank_path, ".geobank file")->required();
  inspect->fallthrough();

  std::size_t grad_seeds = 5;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every analytic gradient");
  gradcheck->add_option("--seeds", grad_seeds, "Number of random seeds")->check(CLI::PositiveNumber);
  gradcheck->fallthrough();

  std::string fixtures;
  auto* selftest = app.add_subcommand("selftest", "Run the structural invariant suite");
  selftest->add_option("--fixtures", fixtures, "Directory of .geobank fixtures to validate as well");
  selftest->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  if (seed_opt->count() > 0) flags.seed_override = seed_override;

  try {
    if (*run) return run_command(config_path, flags, out);
    if (*ablate) return ablate_command(axis, config_path, flags, out, err);
    if (*inspect) return inspect_command(geobank_path, out);
    if (*gradcheck) return report_checks({check_pipeline_gradients(grad_seeds)}, out);
    if (*selftest) return report_checks(selftest_suite(fixtures), out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 1;
}

}  // namespace geoweaver
