#pragma once

// Run specs: a JSON document naming a dataset, an evaluator and a training
// config. Schema version 1; see README.md for the field reference.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "tokenlabel/evaluator.hpp"
#include "tokenlabel/external.hpp"
#include "tokenlabel/sweep.hpp"
#include "tokenlabel/training.hpp"

namespace tokenlabel {

inline constexpr int kRunSpecSchema = 1;
/// Overrides the address of an external evaluator when set.
inline constexpr const char* kEvaluatorAddressEnv = "TOKENLABEL_EVALUATOR_ADDRESS";

struct OracleEvaluatorSpec {
  std::filesystem::path agreement_file;  // empty when given inline
  AgreementSpec agreement;
};

struct SimilarityEvaluatorSpec {
  std::filesystem::path agreement_file;
  AgreementSpec agreement;
  SimilarityParams params;
};

struct ExternalEvaluatorSpec {
  std::string address;
  ExternalOptions options;
};

using EvaluatorSpec =
    std::variant<OracleEvaluatorSpec, SimilarityEvaluatorSpec, ExternalEvaluatorSpec>;

struct RunSpec {
  std::string name;
  std::filesystem::path source;  // the spec file, if loaded from disk
  std::filesystem::path dataset;
  /// Candidate label tokens appended to the corpus vocabulary.
  std::vector<std::string> labels;
  EvaluatorSpec evaluator;
  TrainConfig train;
  std::filesystem::path output_dir;
};

/// Relative paths resolve against `base_dir`. Throws ParseError.
RunSpec parse_run_spec(const std::string& text, const std::filesystem::path& base_dir);
RunSpec load_run_spec(const std::filesystem::path& spec_file);

AgreementSpec parse_agreement_spec(const std::string& text);
AgreementSpec load_agreement_spec(const std::filesystem::path& file);

std::string evaluator_type(const EvaluatorSpec& spec);

Corpus load_run_corpus(const RunSpec& spec);

/// Builds the evaluator; an external address may be overridden through
/// kEvaluatorAddressEnv.
std::unique_ptr<Evaluator> make_evaluator(const RunSpec& spec, const Corpus& corpus);

struct ValidationReport {
  std::vector<std::string> findings;
  bool ok() const { return findings.empty(); }
  /// "OK" or one finding per line.
  std::string text() const;
};

/// Parses and cross-checks a spec without training.
ValidationReport validate_run_spec(const std::filesystem::path& spec_file);

struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::size_t> top_k;
};

void apply_overrides(RunSpec& spec, const RunOverrides& overrides);

/// Exit codes of the run and sweep commands.
inline constexpr int kExitConverged = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitNotConverged = 2;

/// Hex SHA-256 of a file's bytes.
std::string file_sha256(const std::filesystem::path& file);

struct RunOutcome {
  TrainResult result;
  std::filesystem::path output_dir;
  int exit_code = kExitError;
};

/// Trains and writes trajectory.jsonl, trajectory.csv and manifest.json.
RunOutcome execute_run(const RunSpec& spec, std::ostream& log);

/// Full `run` command: never throws, returns the exit code.
int run_command(const std::filesystem::path& spec_file, const RunOverrides& overrides,
                std::ostream& log);

struct SweepPlan {
  SweepGrid grid;
  SweepAcceptance acceptance;
  SweepOptions options;
};

SweepPlan load_sweep_plan(const std::filesystem::path& grid_file);

/// Full `sweep` command: writes sweep_report.json and sweep_report.csv.
/// Exit 0 when some configuration was accepted, 2 when none was.
int sweep_command(const std::filesystem::path& spec_file, const std::filesystem::path& grid_file,
                  const RunOverrides& overrides, std::ostream& log);

}  // namespace tokenlabel
