#include "tokenlabel/sweep.hpp"

#include <algorithm>
#include <limits>

#include "tokenlabel/error.hpp"

namespace tokenlabel {

namespace {

template <typename T>
std::vector<T> or_base(const std::vector<T>& values, T base) {
  return values.empty() ? std::vector<T>{base} : values;
}

}  // namespace

std::vector<TrainConfig> expand_grid(const TrainConfig& base, const SweepGrid& grid) {
  if (grid.learning_rates.empty() && grid.lambda_ents.empty() && grid.lambda_kls.empty() &&
      grid.batch_sizes.empty()) {
    throw Error("sweep grid is empty");
  }
  std::vector<TrainConfig> configs;
  for (const double lr : or_base(grid.learning_rates, base.learning_rate)) {
    for (const double ent : or_base(grid.lambda_ents, base.weights.lambda_ent)) {
      for (const double kl : or_base(grid.lambda_kls, base.weights.lambda_kl)) {
        for (const std::size_t bs : or_base(grid.batch_sizes, base.batch_size)) {
          TrainConfig config = base;
          config.learning_rate = lr;
          config.weights = {ent, kl};
          config.batch_size = bs;
          configs.push_back(config);
        }
      }
    }
  }
  return configs;
}

SweepRow score_run(const Corpus& corpus, const Evaluator& evaluator, const TrainConfig& config,
                   const TrainResult& result, const SweepAcceptance& acceptance) {
  SweepRow row;
  row.config = config;
  row.stop_reason = result.stop_reason;
  row.converged = result.stop_reason == StopReason::converged;
  row.steps = result.trajectory.size();
  const ProbDist p = softmax_label(result.state);
  row.final_entropy = entropy_of(p);
  row.final_acc = balanced_accuracy_loss(corpus, corpus_predictions(corpus, evaluator, p));
  const auto top = top_k(p, 1).front();
  row.argmax_token = corpus.vocab().token(top.first);
  row.p_max = top.second;
  row.accepted = row.converged && row.final_entropy <= acceptance.entropy_max &&
                 row.final_acc <= acceptance.acc_max;
  return row;
}

SweepReport sweep(const Corpus& corpus, const Evaluator& evaluator, const TrainConfig& base,
                  const SweepGrid& grid, const SweepAcceptance& acceptance,
                  const SweepOptions& options) {
  const auto configs = expand_grid(base, grid);
  SweepReport report;
  std::optional<std::size_t> first_accepted;
  for (std::size_t g = 0; g < configs.size(); ++g) {
    SweepRow row;
    if (auto problems = config_problems(configs[g]); !problems.empty()) {
      // Invalid combinations are reported as failed rows.
      row.config = configs[g];
      row.problem = problems.front();
      row.stop_reason = StopReason::evaluator_error;
      row.final_acc = std::numeric_limits<double>::infinity();
      row.final_entropy = std::numeric_limits<double>::infinity();
    } else {
      row = score_run(corpus, evaluator, configs[g], train(corpus, evaluator, configs[g]),
                      acceptance);
    }
    row.grid_index = g;
    if (row.accepted && !first_accepted) first_accepted = g;
    report.rows.push_back(std::move(row));
    if (first_accepted && options.stop_at_first_accepted) break;
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const SweepRow& a, const SweepRow& b) {
                     if (a.converged != b.converged) return a.converged;
                     if (a.final_acc != b.final_acc) return a.final_acc < b.final_acc;
                     if (a.final_entropy != b.final_entropy) return a.final_entropy < b.final_entropy;
                     return a.grid_index < b.grid_index;
                   });
  report.any_accepted = first_accepted.has_value();
  report.best = 0;
  if (first_accepted) {
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
      if (report.rows[i].grid_index == *first_accepted) report.best = i;
    }
  }
  return report;
}

}  // namespace tokenlabel
