#include "tokenlabel/training.hpp"

#include <algorithm>
#include <cmath>

#include "tokenlabel/error.hpp"

namespace tokenlabel {

LossTerm accuracy_loss(const Batch& batch, std::span<const double> predictions) {
  const std::size_t n = batch.size();
  if (n == 0) throw Error("accuracy_loss: empty batch");
  if (predictions.size() != n) throw Error("accuracy_loss: one prediction per item required");
  LossTerm out;
  out.grad.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double m = predictions[t];
    if (!(m > 0.0 && m < 1.0)) {
      throw Error("accuracy_loss: prediction " + std::to_string(m) + " is not clamped into (0, 1)");
    }
    const double f = batch.items[t].activation;
    out.value -= f * std::log(m) + (1.0 - f) * std::log1p(-m);
    out.grad[t] = -inv_n * (f / m - (1.0 - f) / (1.0 - m));
  }
  out.value *= inv_n;
  return out;
}

LossTerm entropy_loss(const ProbDist& p) {
  LossTerm out;
  out.grad.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) out.value -= p[i] * std::log(p[i]);
    out.grad[i] = -(std::log(std::max(p[i], kProbFloor)) + 1.0);
  }
  return out;
}

LossTerm kl_loss(const ProbDist& p, const PriorDist& q) {
  if (p.size() != q.q.size()) throw Error("kl_loss: dimension mismatch");
  LossTerm out;
  out.grad.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double qi = q.q[i];
    if (!(qi > 0.0)) throw Error("kl_loss: prior entry " + std::to_string(i) + " is not positive");
    if (p[i] > 0.0) out.value += p[i] * std::log(p[i] / qi);
    out.grad[i] = std::log(std::max(p[i], kProbFloor) / qi) + 1.0;
  }
  // Rounding can leave a tiny negative value for p == q.
  out.value = std::max(out.value, 0.0);
  return out;
}

LossBreakdown total_loss(const Batch& batch, std::span<const double> predictions,
                         const ProbDist& p, const PriorDist& q, const LossWeights& weights) {
  LossBreakdown loss;
  loss.acc = accuracy_loss(batch, predictions).value;
  loss.ent = entropy_loss(p).value;
  loss.kl = kl_loss(p, q).value;
  loss.total = loss.acc + weights.lambda_ent * loss.ent + weights.lambda_kl * loss.kl;
  return loss;
}

std::vector<double> assemble_gradient(const Batch& batch, std::span<const EvalResult> results,
                                      const ProbDist& p, const PriorDist& q,
                                      const LossWeights& weights) {
  if (results.size() != batch.size()) throw Error("assemble_gradient: one result per item required");
  std::vector<double> predictions(results.size());
  for (std::size_t t = 0; t < results.size(); ++t) predictions[t] = results[t].m;
  const LossTerm acc = accuracy_loss(batch, predictions);

  std::vector<double> grad_p(p.size(), 0.0);
  for (std::size_t t = 0; t < results.size(); ++t) {
    const auto& grad_m = results[t].grad_m;
    if (!grad_m) throw CapabilityError("evaluator result has no gradient; cannot train on it");
    if (grad_m->size() != p.size()) throw Error("assemble_gradient: gradient dimension mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) grad_p[i] += acc.grad[t] * (*grad_m)[i];
  }
  if (weights.lambda_ent != 0.0) {
    const LossTerm ent = entropy_loss(p);
    for (std::size_t i = 0; i < p.size(); ++i) grad_p[i] += weights.lambda_ent * ent.grad[i];
  }
  if (weights.lambda_kl != 0.0) {
    const LossTerm kl = kl_loss(p, q);
    for (std::size_t i = 0; i < p.size(); ++i) grad_p[i] += weights.lambda_kl * kl.grad[i];
  }
  return softmax_backward(p, grad_p);
}

PriorDist batch_prior(const Batch& batch, std::span<const PriorDist> sentence_priors) {
  if (batch.size() == 0) throw Error("batch_prior: empty batch");
  std::vector<double> q;
  for (const auto& item : batch.items) {
    const auto& prior = sentence_priors[item.sentence_index].q.probs;
    if (q.empty()) q.assign(prior.size(), 0.0);
    for (std::size_t i = 0; i < q.size(); ++i) q[i] += prior[i];
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (auto& x : q) x *= inv_n;
  return PriorDist{ProbDist{std::move(q)}};
}

void Sgd::step(std::span<double> params, std::span<const double> grad) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr_ * grad[i];
}

Adam::Adam(std::size_t size, double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), epsilon_(epsilon), m_(size), v_(size) {}

void Adam::step(std::span<double> params, std::span<const double> grad) {
  beta1_power_ *= beta1_;
  beta2_power_ *= beta2_;
  const double correction1 = 1.0 - beta1_power_;
  const double correction2 = 1.0 - beta2_power_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    const double m_hat = m_[i] / correction1;
    const double v_hat = v_[i] / correction2;
    params[i] -= lr_ * m_hat / (std::sqrt(v_hat) + epsilon_);
  }
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double learning_rate,
                                          std::size_t size) {
  if (kind == OptimizerKind::sgd) return std::make_unique<Sgd>(learning_rate);
  return std::make_unique<Adam>(size, learning_rate);
}

std::vector<std::string> config_problems(const TrainConfig& config) {
  std::vector<std::string> problems;
  if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate)) {
    problems.push_back("learning_rate must be a finite non-negative number");
  }
  if (config.epochs == 0) problems.push_back("epochs must be at least 1");
  if (config.sampler == SamplerMode::balanced &&
      (config.batch_size < 2 || (config.batch_size % 2 != 0 && !config.balance_odd_batches))) {
    problems.push_back("batch_size must be even and >= 2 for balanced sampling "
                       "(or set balance_odd_batches)");
  }
  if (config.sampler == SamplerMode::stratified &&
      (config.batch_size == 0 || config.batch_size % 4 != 0)) {
    problems.push_back("batch_size must be a positive multiple of 4 for stratified sampling");
  }
  for (const double w : {config.weights.lambda_ent, config.weights.lambda_kl}) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      problems.push_back("loss weights must be finite and non-negative");
      break;
    }
  }
  if (!(config.convergence.p_threshold > 0.0 && config.convergence.p_threshold <= 1.0)) {
    problems.push_back("p_threshold must lie in (0, 1]");
  }
  if (config.convergence.patience == 0) problems.push_back("patience must be at least 1");
  if (config.top_k == 0) problems.push_back("top_k must be at least 1");
  return problems;
}

std::string_view stop_reason_name(StopReason reason) {
  switch (reason) {
    case StopReason::converged: return "converged";
    case StopReason::completed: return "completed";
    case StopReason::evaluator_error: return "evaluator_error";
  }
  return "unknown";
}

std::vector<double> corpus_predictions(const Corpus& corpus, const Evaluator& evaluator,
                                       const ProbDist& p) {
  std::vector<double> out;
  out.reserve(corpus.token_count());
  for (const auto& rec : corpus.activations()) {
    const EvalQuery query{rec.sentence_index, corpus.sentences()[rec.sentence_index],
                          rec.token_position, p};
    out.push_back(evaluator.predict(query, false).m);
  }
  return out;
}

double balanced_accuracy_loss(const Corpus& corpus, std::span<const double> predictions) {
  if (predictions.size() != corpus.token_count()) {
    throw Error("balanced_accuracy_loss: one prediction per corpus token required");
  }
  double active = 0.0;
  double inactive = 0.0;
  for (std::size_t t = 0; t < predictions.size(); ++t) {
    const double m = clamp_prediction(predictions[t]);
    if (corpus.record(t).activation) {
      active -= std::log(m);
    } else {
      inactive -= std::log1p(-m);
    }
  }
  return 0.5 * (active / static_cast<double>(corpus.active_count()) +
                inactive / static_cast<double>(corpus.inactive_count()));
}

namespace {

TrajectoryRecord make_record(std::size_t step, const LossBreakdown& loss, const ProbDist& p,
                             const Vocab& vocab, std::size_t k) {
  TrajectoryRecord rec;
  rec.step = step;
  rec.loss = loss;
  for (const auto& [id, prob] : top_k(p, std::min(k, p.size()))) {
    rec.top_tokens.push_back({vocab.token(id), prob});
  }
  rec.argmax_token = rec.top_tokens.front().token;
  rec.p_max = rec.top_tokens.front().prob;
  return rec;
}

}  // namespace

TrainResult train(const Corpus& corpus, const Evaluator& evaluator, const TrainConfig& config,
                  const StepObserver& observer) {
  if (auto problems = config_problems(config); !problems.empty()) {
    throw Error("invalid training config: " + problems.front());
  }
  if (!evaluator.supports_gradient()) {
    throw CapabilityError("evaluator does not supply gradients; it can score labels but not train");
  }
  const Vocab& vocab = corpus.vocab();
  if (evaluator.vocab_size() != vocab.size()) throw Error("evaluator and corpus vocabularies differ");

  TrainResult result;
  result.state = init_label(vocab.size(), config.init, config.seed);
  const SamplerConfig sampler_config{config.sampler, config.batch_size, config.seed,
                                     config.balance_odd_batches};
  std::optional<BalancedSampler> balanced;
  std::optional<StratifiedSampler> stratified;
  std::size_t per_epoch = 0;
  if (config.sampler == SamplerMode::balanced) {
    balanced.emplace(corpus, sampler_config);
    per_epoch = balanced->batches_per_epoch();
  } else {
    stratified.emplace(corpus, sampler_config);
    per_epoch = stratified->batches_per_epoch();
  }
  std::size_t total_steps = config.epochs * per_epoch;
  if (config.max_steps > 0) total_steps = std::min(total_steps, config.max_steps);

  auto optimizer = make_optimizer(config.optimizer, config.learning_rate, vocab.size());
  std::vector<PriorDist> priors(corpus.sentences().size());
  std::vector<bool> have_prior(priors.size(), false);
  std::size_t streak = 0;

  try {
    for (std::size_t step = 0; step < total_steps; ++step) {
      const ProbDist p = softmax_label(result.state);
      const Batch batch = balanced ? balanced->next()
                                   : stratified->next(corpus_predictions(corpus, evaluator, p));

      std::vector<EvalResult> results;
      results.reserve(batch.size());
      std::vector<double> predictions;
      predictions.reserve(batch.size());
      for (const auto& item : batch.items) {
        const auto& sentence = corpus.sentences()[item.sentence_index];
        if (!have_prior[item.sentence_index]) {
          priors[item.sentence_index] = label_prior(evaluator, sentence);
          have_prior[item.sentence_index] = true;
        }
        results.push_back(
            evaluator.predict({item.sentence_index, sentence, item.token_position, p}, true));
        predictions.push_back(results.back().m);
      }
      const PriorDist q = batch_prior(batch, priors);
      const LossBreakdown loss = total_loss(batch, predictions, p, q, config.weights);
      const std::vector<double> grad = assemble_gradient(batch, results, p, q, config.weights);

      result.trajectory.push_back(make_record(step, loss, p, vocab, config.top_k));
      if (observer) observer(result.trajectory.back());

      streak = result.trajectory.back().p_max >= config.convergence.p_threshold ? streak + 1 : 0;
      if (streak >= config.convergence.patience) {
        result.stop_reason = StopReason::converged;
        return result;
      }
      optimizer->step(result.state.logits, grad);
    }
  } catch (const std::exception& e) {
    result.stop_reason = StopReason::evaluator_error;
    result.error = e.what();
    return result;
  }
  result.stop_reason = StopReason::completed;
  return result;
}

}  // namespace tokenlabel
