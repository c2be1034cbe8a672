// tokenlabel: run, sweep and validate label-search experiments.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "tokenlabel/runspec.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Single-token feature labels by gradient descent in token space"};
  app.require_subcommand(1);

  std::string spec_file;
  std::string grid_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::size_t top_k = 10;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("spec", spec_file, "Run spec (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "Override the run seed");
    cmd->add_option("--output-dir", output_dir, "Directory for trajectory and manifest files");
    cmd->add_option("--top-k", top_k, "Tokens traced per step")->check(CLI::PositiveNumber);
  };

  auto* run = app.add_subcommand("run", "Train a label and write its trajectory");
  add_common(run);
  auto* sweep = app.add_subcommand("sweep", "Run a hyperparameter grid");
  add_common(sweep);
  sweep->add_option("--grid", grid_file, "Sweep grid (JSON)")->required()->check(CLI::ExistingFile);
  auto* validate = app.add_subcommand("validate", "Check a spec without training");
  validate->add_option("spec", spec_file, "Run spec (JSON)")->required();

  app.footer("Exit codes: 0 converged, 2 finished without converging, 1 error.\n"
             "Set " + std::string(tokenlabel::kEvaluatorAddressEnv) +
             " to override an external evaluator address.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : tokenlabel::kExitError;
  }

  tokenlabel::RunOverrides overrides;
  overrides.seed = seed;
  if (output_dir) overrides.output_dir = *output_dir;

  if (*run) {
    if (run->count("--top-k")) overrides.top_k = top_k;
    return tokenlabel::run_command(spec_file, overrides, std::cout);
  }
  if (*sweep) {
    if (sweep->count("--top-k")) overrides.top_k = top_k;
    return tokenlabel::sweep_command(spec_file, grid_file, overrides, std::cout);
  }
  const auto report = tokenlabel::validate_run_spec(spec_file);
  std::cout << report.text() << (report.ok() ? "\n" : "");
  return report.ok() ? 0 : tokenlabel::kExitError;
}
