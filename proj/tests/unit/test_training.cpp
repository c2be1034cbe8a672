#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

#include "../support/gradcheck.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"
#include "tokenlabel/error.hpp"
#include "tokenlabel/training.hpp"

using namespace tokenlabel;

namespace {

Batch make_batch(std::initializer_list<int> activations) {
  Batch b;
  std::size_t pos = 0;
  for (int f : activations) b.items.push_back({0, pos++, static_cast<std::uint8_t>(f)});
  return b;
}

PriorDist uniform_prior(std::size_t n) {
  return PriorDist{ProbDist{std::vector<double>(n, 1.0 / static_cast<double>(n))}};
}

const std::vector<std::string>& animal_labels() {
  static const std::vector<std::string> labels = {"animal", "Anim", "pet", "creature", "mamm"};
  return labels;
}

struct AnimalSetup {
  Corpus corpus;
  AgreementMatrix matrix;
};

AnimalSetup animal_setup() {
  Corpus corpus =
      load_corpus(testutil::source_path("datasets/animal_text.txt"), animal_labels());
  AgreementSpec spec;
  spec.epsilon = 0.01;
  std::vector<std::string> animals;
  for (const auto& rec : corpus.activations()) {
    if (rec.activation) {
      animals.push_back(corpus.vocab().token(corpus.token_at(
          corpus.flat_index(rec.sentence_index, rec.token_position))));
    }
  }
  spec.rules["animal"] = animals;
  spec.rules["creature"] = {animals.begin(), animals.begin() + animals.size() / 2};
  auto matrix = expand_agreement(spec, corpus);
  return {std::move(corpus), std::move(matrix)};
}

TrainConfig row_a() {
  TrainConfig c;
  c.batch_size = 10;
  c.epochs = 50;
  c.learning_rate = 0.03;
  c.weights = {0.2, 0.2};
  return c;
}

}  // namespace

TEST_CASE("accuracy loss: near-perfect and maximally uncertain predictions") {
  const double eps = kPredictionClamp;
  const auto batch = make_batch({1, 0, 1, 0});
  const std::vector<double> perfect = {1 - eps, eps, 1 - eps, eps};
  CHECK(accuracy_loss(batch, perfect).value == doctest::Approx(-std::log1p(-eps)).epsilon(1e-12));
  CHECK(accuracy_loss(batch, perfect).value == doctest::Approx(1e-7).epsilon(1e-6));
  const std::vector<double> half(4, 0.5);
  CHECK(std::abs(accuracy_loss(batch, half).value - std::log(2.0)) < 1e-12);
}

TEST_CASE("accuracy loss matches the direct BCE oracle") {
  const auto batch = make_batch({1, 0, 1});
  const std::vector<double> m = {0.9, 0.2, 0.6};
  const auto term = accuracy_loss(batch, m);
  CHECK(std::abs(term.value - 0.27977656357934225547) < 1e-12);
  CHECK(term.grad[0] == doctest::Approx(-(1.0 / 3) / 0.9).epsilon(1e-14));
  CHECK(term.grad[1] == doctest::Approx((1.0 / 3) / 0.8).epsilon(1e-14));
  const double h = 1e-7;
  for (std::size_t t = 0; t < 3; ++t) {
    auto up = m, down = m;
    up[t] += h;
    down[t] -= h;
    const double fd = (accuracy_loss(batch, up).value - accuracy_loss(batch, down).value) / (2 * h);
    CHECK(testutil::rel_err(fd, term.grad[t]) < 1e-6);
  }
}

TEST_CASE("accuracy loss rejects unclamped predictions") {
  const auto batch = make_batch({1, 0});
  CHECK_THROWS_AS(accuracy_loss(batch, std::vector<double>{1.0, 0.5}), Error);
  CHECK_THROWS_AS(accuracy_loss(batch, std::vector<double>{0.5, 0.0}), Error);
  CHECK_THROWS_AS(accuracy_loss(batch, std::vector<double>{0.5}), Error);
}

TEST_CASE("entropy loss") {
  CHECK(entropy_loss({{0, 1, 0}}).value == 0.0);
  CHECK(std::abs(entropy_loss({std::vector<double>(8, 0.125)}).value - std::log(8.0)) < 1e-12);
  CHECK(std::abs(entropy_loss({{0.7, 0.2, 0.1}}).value - 0.80181855254333735113) < 1e-12);
  const auto g = entropy_loss({{0.5, 0.5, 0.0}}).grad;
  CHECK(g[0] == doctest::Approx(-(std::log(0.5) + 1)).epsilon(1e-14));
  CHECK(g[2] == doctest::Approx(-(std::log(kProbFloor) + 1)).epsilon(1e-14));
}

TEST_CASE("KL loss") {
  const ProbDist p{{0.05, 0.1, 0.15, 0.2, 0.22, 0.28}};
  CHECK(kl_loss(p, PriorDist{p}).value == 0.0);
  CHECK(std::abs(kl_loss(p, PriorDist{{{0.3, 0.1, 0.2, 0.05, 0.15, 0.2}}}).value -
                 0.32298910964509116091) < 1e-12);
  CHECK(std::abs(kl_loss({{0, 0, 1, 0, 0}}, uniform_prior(5)).value - std::log(5.0)) < 1e-12);
  CHECK_THROWS_AS(kl_loss(p, PriorDist{{{0.5, 0.5, 0, 0, 0, 0}}}), Error);
  const auto g = kl_loss(p, uniform_prior(6)).grad;
  CHECK(g[3] == doctest::Approx(std::log(0.2 * 6) + 1).epsilon(1e-14));
}

TEST_CASE("loss breakdown identities on random instances") {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> unit(0.01, 0.99), weight(0.0, 2.0);
  std::bernoulli_distribution coin;
  for (int trial = 0; trial < 1000; ++trial) {
    Batch batch;
    std::vector<double> m;
    for (std::size_t t = 0; t < 6; ++t) {
      batch.items.push_back({0, t, static_cast<std::uint8_t>(coin(rng))});
      m.push_back(unit(rng));
    }
    const auto p = testutil::random_dist(rng, 9);
    const PriorDist q{testutil::random_dist(rng, 9)};
    const LossWeights w{weight(rng), weight(rng)};
    const auto loss = total_loss(batch, m, p, q, w);
    CHECK(std::abs(loss.total - (loss.acc + w.lambda_ent * loss.ent + w.lambda_kl * loss.kl)) <
          1e-9);
    CHECK(loss.kl >= 0.0);
    CHECK(loss.ent >= 0.0);
    CHECK(loss.ent <= std::log(9.0) + 1e-12);
    CHECK(loss.acc >= 0.0);
  }
}

TEST_CASE("zero regularizer weights leave only the accuracy term") {
  const auto batch = make_batch({1, 0});
  const std::vector<double> m = {0.7, 0.4};
  const auto loss = total_loss(batch, m, {{0.3, 0.7}}, uniform_prior(2), {0, 0});
  CHECK(loss.total == loss.acc);
}

TEST_CASE("one-hot on the correct oracle label: closed-form total") {
  const auto setup = animal_setup();
  const Corpus& c = setup.corpus;
  const OracleEvaluator ev(c, setup.matrix);
  const std::size_t n = c.vocab().size();
  ProbDist p{std::vector<double>(n, 0.0)};
  p.probs[c.vocab().id("animal").index] = 1.0;
  BalancedSampler sampler(c, {SamplerMode::balanced, 10, 0});
  const auto batch = sampler.next();
  testsupport::LossProblem problem{&c, &ev, batch, uniform_prior(n), {0.2, 0.2}};
  std::vector<double> m;
  for (const auto& r : testsupport::evaluate(problem, p, false)) m.push_back(r.m);
  const auto loss = total_loss(batch, m, p, problem.q, problem.weights);
  CHECK(std::abs(loss.total - (-std::log1p(-0.01) + 0.2 * std::log(static_cast<double>(n)))) <
        1e-9);
  // animal weights (1, 0.2, 0.2) with acc 0.5, ent 1.0, kl 0.3
  const LossBreakdown composed{0.5, 1.0, 0.3, 0.5 + 0.2 * 1.0 + 0.2 * 0.3};
  CHECK(composed.total == doctest::Approx(0.76).epsilon(1e-15));
}

TEST_CASE("assemble_gradient: one-item batch under the linear oracle") {
  AgreementMatrix A(4, 1, 0.01);
  A.set(TokenId{2}, 0, true);
  const ProbDist p = softmax_label({{0.1, -0.3, 0.5, 0.0}});
  const auto r = oracle_predict(A, 0, p);
  const auto batch = make_batch({1});
  const auto grad = assemble_gradient(batch, std::vector<EvalResult>{r}, p, uniform_prior(4), {0, 0});
  const double dLdm = -1.0 / r.m;
  double mean = 0.0;
  for (std::size_t i = 0; i < 4; ++i) mean += p[i] * dLdm * A.value(TokenId{i}, 0);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(grad[j] == doctest::Approx(p[j] * (dLdm * A.value(TokenId{j}, 0) - mean)).epsilon(1e-13));
  }
  CHECK(std::abs(std::accumulate(grad.begin(), grad.end(), 0.0)) < 1e-12);
}

TEST_CASE("constant dm/dp contributes no logit gradient") {
  const ProbDist p = softmax_label({{0.4, 1.0, -2.0}});
  EvalResult r{0.3, std::vector<double>(3, 0.8)};
  const auto grad = assemble_gradient(make_batch({1}), std::vector<EvalResult>{r}, p,
                                      uniform_prior(3), {0, 0});
  for (double g : grad) CHECK(std::abs(g) < 1e-15);
}

TEST_CASE("assemble_gradient needs evaluator gradients") {
  const ProbDist p{{0.5, 0.5}};
  EvalResult r{0.3, std::nullopt};
  CHECK_THROWS_AS(assemble_gradient(make_batch({1}), std::vector<EvalResult>{r}, p,
                                    uniform_prior(2), {0, 0}),
                  CapabilityError);
}

TEST_CASE("end-to-end gradient matches finite differences") {
  const auto setup = animal_setup();
  const Corpus& c = setup.corpus;
  const std::size_t n = c.vocab().size();
  const OracleEvaluator oracle(c, setup.matrix);
  SimilarityParams params;
  params.sharpness = 2.0;
  params.seed = 8;
  const auto sim = SimilarityEvaluator::clustered(c, setup.matrix, params);
  const LossWeights weights[] = {{0, 0}, {0.2, 0}, {0, 0.2}, {0.2, 0.2}, {0.25, 0.05}};

  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Evaluator* ev = trial % 2 ? static_cast<const Evaluator*>(&sim) : &oracle;
    BalancedSampler sampler(c, {SamplerMode::balanced, 6, static_cast<std::uint64_t>(trial)});
    const PriorDist q = floor_prior(testutil::random_dist(rng, n).probs);
    LabelState v;
    for (std::size_t i = 0; i < n; ++i) v.logits.push_back(normal(rng));
    v.logits[c.vocab().id("animal").index] += 2.0;
    const testsupport::LossProblem problem{&c, ev, sampler.next(), q, weights[trial % 5]};
    const auto analytic = testsupport::analytic_gradient(problem, v);
    const auto numeric = testsupport::numeric_gradient(problem, v);
    CAPTURE(trial);
    CHECK(testsupport::gradient_error(analytic, numeric) <= 1e-4);
    CHECK(std::abs(std::accumulate(analytic.begin(), analytic.end(), 0.0)) < 1e-9);
  }
}

TEST_CASE("training converges to the oracle's unique zero-loss label") {
  const auto setup = animal_setup();
  const OracleEvaluator ev(setup.corpus, setup.matrix);
  const auto result = train(setup.corpus, ev, row_a());
  CHECK(result.stop_reason == StopReason::converged);
  CHECK(result.trajectory.back().argmax_token == "animal");
  CHECK(result.trajectory.back().p_max >= 0.9);
  for (std::size_t k = 0; k < result.trajectory.size(); ++k) {
    const auto& rec = result.trajectory[k];
    CHECK(rec.step == k);
    CHECK(rec.top_tokens.size() == 10);
    CHECK(std::abs(rec.loss.total - (rec.loss.acc + 0.2 * rec.loss.ent + 0.2 * rec.loss.kl)) <
          1e-9);
    for (std::size_t i = 1; i < rec.top_tokens.size(); ++i) {
      CHECK(rec.top_tokens[i - 1].prob >= rec.top_tokens[i].prob);
    }
    CHECK(rec.top_tokens.front().prob <= 1.0);
  }
  const auto& tail = result.trajectory;
  for (std::size_t k = tail.size() - 25; k < tail.size(); ++k) CHECK(tail[k].p_max >= 0.9);
}

TEST_CASE("a heavy entropy weight drives the label to near one-hot") {
  const auto setup = animal_setup();
  const OracleEvaluator ev(setup.corpus, setup.matrix);
  auto cfg = row_a();
  cfg.weights.lambda_ent = 10.0;
  cfg.convergence.p_threshold = 0.995;
  const auto result = train(setup.corpus, ev, cfg);
  REQUIRE(result.stop_reason == StopReason::converged);
  CHECK(entropy_of(softmax_label(result.state)) <= 0.05);
}

TEST_CASE("training is deterministic and zero learning rate never converges") {
  const auto setup = animal_setup();
  const OracleEvaluator ev(setup.corpus, setup.matrix);
  auto cfg = row_a();
  cfg.max_steps = 120;
  const auto a = train(setup.corpus, ev, cfg);
  const auto b = train(setup.corpus, ev, cfg);
  std::ostringstream ja, jb;
  write_trajectory_jsonl(ja, a.trajectory);
  write_trajectory_jsonl(jb, b.trajectory);
  CHECK(ja.str() == jb.str());
  CHECK(a.state.logits == b.state.logits);

  cfg.learning_rate = 0.0;
  cfg.epochs = 2;
  cfg.max_steps = 0;
  const auto still = train(setup.corpus, ev, cfg);
  CHECK(still.stop_reason == StopReason::completed);
  BalancedSampler sampler(setup.corpus, {SamplerMode::balanced, 10, 0});
  CHECK(still.trajectory.size() == 2 * sampler.batches_per_epoch());
}

TEST_CASE("small-step SGD decreases the expected loss over 100-step windows") {
  const auto setup = animal_setup();
  const Corpus& c = setup.corpus;
  const OracleEvaluator ev(c, setup.matrix);
  const PriorDist q = label_prior(ev, c.sentences()[0]);
  const LossWeights w{0.2, 0.2};
  auto objective = [&](const LabelState& v) {
    const auto p = softmax_label(v);
    return balanced_accuracy_loss(c, corpus_predictions(c, ev, p)) +
           w.lambda_ent * entropy_loss(p).value + w.lambda_kl * kl_loss(p, q).value;
  };
  int good = 0;
  const int seeds = 20;
  for (int seed = 0; seed < seeds; ++seed) {
    TrainConfig cfg = row_a();
    cfg.optimizer = OptimizerKind::sgd;
    cfg.learning_rate = 1e-3;
    cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.init = LabelInit::gaussian;
    bool all_windows = true;
    for (std::size_t window = 1; window <= 3; ++window) {
      auto before = cfg, after = cfg;
      before.max_steps = (window - 1) * 100;
      after.max_steps = window * 100;
      const double lo = before.max_steps == 0 ? objective(init_label(c.vocab().size(), cfg.init, cfg.seed))
                                              : objective(train(c, ev, before).state);
      const double hi = objective(train(c, ev, after).state);
      all_windows = all_windows && hi < lo;
    }
    good += all_windows;
  }
  CHECK(good >= 0.95 * seeds);
}

TEST_CASE("shifting all logits changes no argmax or ordering") {
  const auto setup = animal_setup();
  const OracleEvaluator ev(setup.corpus, setup.matrix);
  auto cfg = row_a();
  cfg.max_steps = 60;
  const auto result = train(setup.corpus, ev, cfg);
  LabelState shifted = result.state;
  for (double& x : shifted.logits) x += 123.0;
  const auto a = top_k(softmax_label(result.state), 10);
  const auto b = top_k(softmax_label(shifted), 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(a[i].first == b[i].first);
}

namespace {

class FailingEvaluator final : public Evaluator {
 public:
  FailingEvaluator(const Evaluator& inner, int fail_after) : inner_(inner), left_(fail_after) {}
  EvalResult predict(const EvalQuery& q, bool g) const override {
    if (left_-- <= 0) throw TransportError("connection reset");
    return inner_.predict(q, g);
  }
  bool supports_gradient() const override { return true; }
  bool supports_prior() const override { return true; }
  std::vector<double> raw_prior(const Sentence& s) const override { return inner_.raw_prior(s); }
  std::size_t vocab_size() const override { return inner_.vocab_size(); }

 private:
  const Evaluator& inner_;
  mutable std::atomic<int> left_;
};

}  // namespace

TEST_CASE("an evaluator failure keeps the trajectory so far") {
  const auto setup = animal_setup();
  const OracleEvaluator ev(setup.corpus, setup.matrix);
  const FailingEvaluator failing(ev, 35);
  const auto result = train(setup.corpus, failing, row_a());
  CHECK(result.stop_reason == StopReason::evaluator_error);
  CHECK(result.trajectory.size() == 3);
  CHECK(result.error.find("connection reset") != std::string::npos);
}

TEST_CASE("config problems and capability checks") {
  TrainConfig cfg;
  cfg.batch_size = 15;
  CHECK(config_problems(cfg).size() == 1);
  cfg.balance_odd_batches = true;
  CHECK(config_problems(cfg).empty());
  cfg.sampler = SamplerMode::stratified;
  CHECK_FALSE(config_problems(cfg).empty());
  cfg.batch_size = 12;
  CHECK(config_problems(cfg).empty());
  cfg.learning_rate = -1.0;
  CHECK_FALSE(config_problems(cfg).empty());

  const auto setup = animal_setup();
  struct Scoring final : Evaluator {
    EvalResult predict(const EvalQuery&, bool) const override { return {}; }
    bool supports_gradient() const override { return false; }
    bool supports_prior() const override { return false; }
    std::vector<double> raw_prior(const Sentence&) const override { return {}; }
    std::size_t vocab_size() const override { return 0; }
  } scoring;
  CHECK_THROWS_AS(train(setup.corpus, scoring, TrainConfig{}), CapabilityError);
}

TEST_CASE("batch prior is the mean of the items' sentence priors") {
  const std::vector<PriorDist> priors = {PriorDist{{{0.5, 0.5}}}, PriorDist{{{0.9, 0.1}}}};
  Batch b;
  b.items = {{0, 0, 1}, {1, 0, 0}, {1, 1, 0}, {1, 2, 0}};
  const auto q = batch_prior(b, priors);
  CHECK(q.q[0] == doctest::Approx((0.5 + 3 * 0.9) / 4).epsilon(1e-14));
}

TEST_CASE("optimizers") {
  std::vector<double> x = {1.0, -2.0};
  Sgd(0.5).step(x, std::vector<double>{2.0, -2.0});
  CHECK(x == std::vector<double>{0.0, -1.0});

  // First Adam step moves every coordinate by lr against the gradient sign.
  std::vector<double> y = {0.0, 0.0, 0.0};
  Adam adam(3, 0.1);
  adam.step(y, std::vector<double>{3.0, -0.001, 0.0});
  CHECK(y[0] == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(0.1).epsilon(1e-4));
  CHECK(y[2] == 0.0);
}

TEST_CASE("trajectory files") {
  TrajectoryRecord rec;
  rec.step = 3;
  rec.loss = {0.5, 1.0, 0.25, 0.75};
  rec.top_tokens = {{"animal", 0.41}, {"say \"hi\", ok", 0.2}};
  rec.argmax_token = "animal";
  rec.p_max = 0.41;
  const auto line = trajectory_json_line(rec);
  CHECK(line == R"({"step":3,"acc":0.5,"ent":1.0,"kl":0.25,"total":0.75,"top":[["animal",0.41],["say \"hi\", ok",0.2]]})");

  std::ostringstream csv;
  rec.argmax_token = "a,b";
  write_trajectory_csv(csv, std::vector<TrajectoryRecord>{rec});
  CHECK(csv.str() == "step,total,acc,ent,kl,p_max,argmax\n3,0.75,0.5,1,0.25,0.41,\"a,b\"\n");
}
