#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokenlabel/core.hpp"
#include "tokenlabel/evaluator.hpp"
#include "tokenlabel/label.hpp"
#include "tokenlabel/sampling.hpp"

namespace tokenlabel {

/// Floor applied to p inside the entropy and KL logarithms.
inline constexpr double kProbFloor = 1e-12;

/// The accuracy term always has weight 1.
struct LossWeights {
  double lambda_ent = 0.0;
  double lambda_kl = 0.0;
};

struct LossBreakdown {
  double acc = 0.0;
  double ent = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct LossTerm {
  double value = 0.0;
  std::vector<double> grad;
};

/// Mean binary cross-entropy over the batch; grad is dL/dm per item.
/// Throws Error for a prediction outside the open interval (0, 1).
LossTerm accuracy_loss(const Batch& batch, std::span<const double> predictions);

/// -sum p ln p (0 ln 0 = 0); grad is dL/dp.
LossTerm entropy_loss(const ProbDist& p);

/// sum p ln(p/q); grad is dL/dp. Throws Error if q has a non-positive entry.
LossTerm kl_loss(const ProbDist& p, const PriorDist& q);

LossBreakdown total_loss(const Batch& batch, std::span<const double> predictions,
                         const ProbDist& p, const PriorDist& q, const LossWeights& weights);

/// dL/dv through the softmax. Throws CapabilityError when a result lacks
/// grad_m.
std::vector<double> assemble_gradient(const Batch& batch, std::span<const EvalResult> results,
                                      const ProbDist& p, const PriorDist& q,
                                      const LossWeights& weights);

/// Mean of the per-sentence priors of the batch items.
PriorDist batch_prior(const Batch& batch, std::span<const PriorDist> sentence_priors);

enum class OptimizerKind { sgd, adam };

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::span<double> params, std::span<const double> grad) = 0;
};

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double learning_rate) : lr_(learning_rate) {}
  void step(std::span<double> params, std::span<const double> grad) override;

 private:
  double lr_;
};

class Adam final : public Optimizer {
 public:
  Adam(std::size_t size, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8);
  void step(std::span<double> params, std::span<const double> grad) override;

 private:
  double lr_, beta1_, beta2_, epsilon_;
  double beta1_power_ = 1.0;
  double beta2_power_ = 1.0;
  std::vector<double> m_, v_;
};

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double learning_rate,
                                          std::size_t size);

struct ConvergenceCriteria {
  double p_threshold = 0.9;
  std::size_t patience = 25;
};

struct TrainConfig {
  double learning_rate = 0.03;
  std::size_t epochs = 1;
  std::size_t batch_size = 10;
  LossWeights weights;
  OptimizerKind optimizer = OptimizerKind::adam;
  SamplerMode sampler = SamplerMode::balanced;
  /// See SamplerConfig::balance_odd_batches.
  bool balance_odd_batches = false;
  std::uint64_t seed = 0;
  ConvergenceCriteria convergence;
  std::size_t top_k = 10;
  LabelInit init = LabelInit::zeros;
  /// Hard cap on optimizer steps; 0 means epochs * batches_per_epoch.
  std::size_t max_steps = 0;
};

/// Human-readable invariant violations; empty when the config is usable.
std::vector<std::string> config_problems(const TrainConfig& config);

struct TopToken {
  std::string token;
  double prob = 0.0;
};

struct TrajectoryRecord {
  std::size_t step = 0;
  LossBreakdown loss;
  std::vector<TopToken> top_tokens;
  std::string argmax_token;
  double p_max = 0.0;
};

enum class StopReason { converged, completed, evaluator_error };

std::string_view stop_reason_name(StopReason reason);

struct TrainResult {
  LabelState state;
  std::vector<TrajectoryRecord> trajectory;
  StopReason stop_reason = StopReason::completed;
  std::string error;
};

/// Called after each recorded step.
using StepObserver = std::function<void(const TrajectoryRecord&)>;

/// Runs epochs x batches_per_epoch optimizer steps, stopping early once
/// max p >= p_threshold holds for `patience` consecutive steps. Each record
/// describes the state before that step's update. Evaluator failures end the
/// run with StopReason::evaluator_error and keep the trajectory so far.
TrainResult train(const Corpus& corpus, const Evaluator& evaluator, const TrainConfig& config,
                  const StepObserver& observer = {});

/// m for every corpus token, flat order, without gradients.
std::vector<double> corpus_predictions(const Corpus& corpus, const Evaluator& evaluator,
                                       const ProbDist& p);

/// Class-balanced BCE over the whole corpus: the mean over active tokens and
/// the mean over inactive tokens, averaged.
double balanced_accuracy_loss(const Corpus& corpus, std::span<const double> predictions);

// Trajectory files.
std::string trajectory_json_line(const TrajectoryRecord& record);
void write_trajectory_jsonl(std::ostream& out, std::span<const TrajectoryRecord> records);
void write_trajectory_csv(std::ostream& out, std::span<const TrajectoryRecord> records);

}  // namespace tokenlabel
