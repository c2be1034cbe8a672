#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "tokenlabel/training.hpp"

namespace tokenlabel {

/// Values to try per hyperparameter. An empty list keeps the base config's
/// value for that field.
struct SweepGrid {
  std::vector<double> learning_rates;
  std::vector<double> lambda_ents;
  std::vector<double> lambda_kls;
  std::vector<std::size_t> batch_sizes;
};

/// A run is accepted when it converged to a single token and ends with low
/// entropy and low corpus-wide accuracy loss.
struct SweepAcceptance {
  double entropy_max = 0.5;
  double acc_max = 0.1;
};

struct SweepRow {
  std::size_t grid_index = 0;
  TrainConfig config;
  StopReason stop_reason = StopReason::completed;
  bool converged = false;
  bool accepted = false;
  double final_acc = 0.0;
  double final_entropy = 0.0;
  std::string argmax_token;
  double p_max = 0.0;
  std::size_t steps = 0;
  /// Why the run was skipped, for invalid grid points.
  std::string problem;
};

struct SweepReport {
  /// Ranked: converged first, then lower final_acc, then lower final_entropy,
  /// then grid order.
  std::vector<SweepRow> rows;
  /// Index into rows of the chosen config: the first accepted run in grid
  /// order, or the top-ranked row when nothing was accepted.
  std::size_t best = 0;
  bool any_accepted = false;
};

struct SweepOptions {
  /// Stop launching runs once one is accepted.
  bool stop_at_first_accepted = true;
};

/// Cartesian product in the order learning_rate, lambda_ent, lambda_kl,
/// batch_size (last varies fastest). Throws Error when every list is empty.
std::vector<TrainConfig> expand_grid(const TrainConfig& base, const SweepGrid& grid);

/// Scores one finished run the way sweep() does.
SweepRow score_run(const Corpus& corpus, const Evaluator& evaluator, const TrainConfig& config,
                   const TrainResult& result, const SweepAcceptance& acceptance);

SweepReport sweep(const Corpus& corpus, const Evaluator& evaluator, const TrainConfig& base,
                  const SweepGrid& grid, const SweepAcceptance& acceptance,
                  const SweepOptions& options = {});

}  // namespace tokenlabel
