#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "test_util.hpp"
#include "tokenlabel/error.hpp"
#include "tokenlabel/evaluator.hpp"

using namespace tokenlabel;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Corpus small_corpus() {
  const std::vector<std::string> extra = {"animal", "mamm"};
  return parse_corpus("The **cat** chased a **bird** .\nA **dog** slept .\n", extra);
}

AgreementSpec small_spec() {
  AgreementSpec spec;
  spec.epsilon = 0.01;
  spec.rules["animal"] = {"cat", "bird", "dog"};
  spec.rules["mamm"] = {"cat", "dog"};
  return spec;
}

}  // namespace

TEST_CASE("oracle one-hot selects the matrix entry") {
  const Corpus c = small_corpus();
  const auto A = expand_agreement(small_spec(), c);
  const std::size_t cat = c.flat_index(0, 1);
  ProbDist p{std::vector<double>(c.vocab().size(), 0.0)};
  p.probs[c.vocab().id("animal").index] = 1.0;
  const auto r = oracle_predict(A, cat, p);
  CHECK(r.m == doctest::Approx(0.99).epsilon(1e-14));
  REQUIRE(r.grad_m.has_value());
  for (std::size_t i = 0; i < p.size(); ++i) CHECK((*r.grad_m)[i] == A.value(TokenId{i}, cat));
}

TEST_CASE("oracle: uniform over a correct and an incorrect label gives 0.5") {
  const Corpus c = small_corpus();
  const auto A = expand_agreement(small_spec(), c);
  const std::size_t bird = c.flat_index(0, 4);
  ProbDist p{std::vector<double>(c.vocab().size(), 0.0)};
  p.probs[c.vocab().id("animal").index] = 0.5;
  p.probs[c.vocab().id("mamm").index] = 0.5;
  CHECK(oracle_predict(A, bird, p).m == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("oracle matches a dot product and is linear in p") {
  std::mt19937_64 rng(3);
  const std::size_t vocab = 12, tokens = 9;
  for (int trial = 0; trial < 100; ++trial) {
    AgreementMatrix A(vocab, tokens, 0.01);
    std::bernoulli_distribution coin(0.4);
    for (std::size_t i = 0; i < vocab; ++i)
      for (std::size_t t = 0; t < tokens; ++t) A.set(TokenId{i}, t, coin(rng));
    const auto p1 = testutil::random_dist(rng, vocab);
    const auto p2 = testutil::random_dist(rng, vocab);
    const std::size_t t = trial % tokens;
    double dot = 0.0;
    for (std::size_t i = 0; i < vocab; ++i) dot += p1[i] * A.value(TokenId{i}, t);
    CHECK(std::abs(oracle_predict(A, t, p1).m - dot) < 1e-12);

    const double a = 0.3;
    ProbDist mixed;
    for (std::size_t i = 0; i < vocab; ++i) mixed.probs.push_back(a * p1[i] + (1 - a) * p2[i]);
    const double lhs = oracle_predict(A, t, mixed, false).m;
    const double rhs = a * oracle_predict(A, t, p1).m + (1 - a) * oracle_predict(A, t, p2).m;
    CHECK(std::abs(lhs - rhs) < 1e-12);
  }
  AgreementMatrix A(3, 2, 0.01);
  CHECK_THROWS_AS(oracle_predict(A, 2, {{1, 0, 0}}), Error);
  CHECK_THROWS_AS(AgreementMatrix(3, 2, 0.5), Error);
}

TEST_CASE("oracle is invariant to relabeling the vocabulary") {
  std::mt19937_64 rng(9);
  const std::size_t vocab = 8, tokens = 5;
  AgreementMatrix A(vocab, tokens, 0.05), B(vocab, tokens, 0.05);
  std::vector<std::size_t> perm(vocab);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < vocab; ++i) {
    for (std::size_t t = 0; t < tokens; ++t) {
      const bool bit = coin(rng);
      A.set(TokenId{i}, t, bit);
      B.set(TokenId{perm[i]}, t, bit);
    }
  }
  const auto p = testutil::random_dist(rng, vocab);
  ProbDist pp{std::vector<double>(vocab)};
  for (std::size_t i = 0; i < vocab; ++i) pp.probs[perm[i]] = p[i];
  for (std::size_t t = 0; t < tokens; ++t) {
    CHECK(std::abs(oracle_predict(A, t, p).m - oracle_predict(B, t, pp).m) < 1e-12);
  }
}

TEST_CASE("expand_agreement applies identity, rules and names unknown tokens") {
  const Corpus c = small_corpus();
  auto spec = small_spec();
  const auto A = expand_agreement(spec, c);
  const auto cat = c.flat_index(0, 1), bird = c.flat_index(0, 4), dog = c.flat_index(1, 1);
  const auto animal = c.vocab().id("animal"), mamm = c.vocab().id("mamm");
  CHECK(A.agrees(animal, bird));
  CHECK_FALSE(A.agrees(mamm, bird));
  CHECK(A.agrees(mamm, dog));
  CHECK(A.agrees(c.vocab().id("cat"), cat));
  CHECK_FALSE(A.agrees(c.vocab().id("cat"), dog));
  for (std::size_t i = 0; i < c.vocab().size(); ++i) {
    for (std::size_t t = 0; t < c.token_count(); ++t) {
      const double v = A.value(TokenId{i}, t);
      CHECK((v == 0.01 || v == 0.99));
    }
  }

  spec.identity = false;
  CHECK_FALSE(expand_agreement(spec, c).agrees(c.vocab().id("cat"), cat));

  spec.rules["animal"].push_back("unicorn");
  CHECK(unknown_tokens(spec, c.vocab()) == std::vector<std::string>{"unicorn"});
  CHECK_THROWS_WITH_AS(expand_agreement(spec, c), doctest::Contains("\"unicorn\""), ParseError);
}

TEST_CASE("agreement noise is seeded and flips roughly the requested share") {
  const Corpus c = load_corpus(testutil::source_path("datasets/palindrome_text.txt"),
                               std::vector<std::string>{"palindrome"});
  AgreementSpec spec;
  spec.epsilon = 0.01;
  spec.identity = false;
  spec.noise["palindrome"] = 0.5;
  spec.seed = 4;
  const auto a = expand_agreement(spec, c);
  const auto b = expand_agreement(spec, c);
  const auto label = c.vocab().id("palindrome");
  std::size_t flipped = 0;
  for (std::size_t t = 0; t < c.token_count(); ++t) {
    CHECK(a.agrees(label, t) == b.agrees(label, t));
    flipped += a.agrees(label, t);
  }
  CHECK(flipped > c.token_count() / 4);
  CHECK(flipped < 3 * c.token_count() / 4);
}

TEST_CASE("oracle default prior is uniform; weighted priors normalize") {
  const Corpus c = small_corpus();
  const OracleEvaluator ev(c, expand_agreement(small_spec(), c));
  const auto q = label_prior(ev, c.sentences()[0]);
  for (double x : q.q.probs) CHECK(x == doctest::Approx(1.0 / c.vocab().size()).epsilon(1e-12));

  const auto w = prior_from_weights({{"animal", 3.0}}, c.vocab());
  CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w[c.vocab().id("animal").index] == doctest::Approx(3 * w[0]).epsilon(1e-12));
  CHECK_THROWS_AS(prior_from_weights({{"animal", 0.0}}, c.vocab()), ParseError);
}

TEST_CASE("floor_prior floors zeros and renormalizes") {
  const auto q = floor_prior({0.5, 0.0, 0.5});
  CHECK(q.q[1] == doctest::Approx(1e-9 / (1 + 1e-9)).epsilon(1e-12));
  CHECK(std::abs(q.q[0] + q.q[1] + q.q[2] - 1.0) < 1e-9);
  CHECK(q.q[0] == doctest::Approx(0.5 / (1 + 1e-9)).epsilon(1e-14));
  CHECK_THROWS_AS(floor_prior({0.5, -0.1}), Error);
}

TEST_CASE("clamp_prediction keeps m inside [eps, 1 - eps]") {
  CHECK(clamp_prediction(0.0) == kPredictionClamp);
  CHECK(clamp_prediction(1.0) == 1.0 - kPredictionClamp);
  CHECK(clamp_prediction(0.3) == 0.3);
  CHECK_THROWS_AS(clamp_prediction(NAN), Error);
}

namespace {

struct NoPrior final : Evaluator {
  EvalResult predict(const EvalQuery&, bool) const override { return {}; }
  bool supports_gradient() const override { return false; }
  bool supports_prior() const override { return false; }
  std::vector<double> raw_prior(const Sentence&) const override { return {}; }
  std::size_t vocab_size() const override { return 2; }
};

}  // namespace

TEST_CASE("label_prior reports a missing capability") {
  const Corpus c = small_corpus();
  CHECK_THROWS_AS(label_prior(NoPrior{}, c.sentences()[0]), CapabilityError);
}

TEST_CASE("similarity: logistic at +4 and at the midpoint") {
  const double beta = 8.0, b = 0.5;
  // Row 0 equals c_t with <c_t, c_t> = b + 4 / beta = 1.
  const auto E = EmbeddingMatrix::from_rows({{0.6, 0.8}, {0.0, 0.0}});
  const std::vector<double> ct = {0.6, 0.8};
  const auto r = similarity_predict(E, ct, {{1.0, 0.0}}, beta, b);
  CHECK(r.m == doctest::Approx(sigmoid(4.0)).epsilon(1e-14));
  CHECK(r.m == doctest::Approx(0.982).epsilon(1e-3));

  // <e, c_t> = 0.5 * 1 + 0.5 * 0 = b.
  CHECK(similarity_predict(E, ct, {{0.5, 0.5}}, beta, b).m == doctest::Approx(0.5).epsilon(1e-14));
  CHECK_THROWS_AS(similarity_predict(E, std::vector<double>{1.0}, {{1.0, 0.0}}, beta, b), Error);
}

TEST_CASE("similarity gradient matches finite differences on random instances") {
  std::mt19937_64 rng(29);
  std::normal_distribution<double> normal(0.0, 0.4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t vocab = 6, d = 4;
    std::vector<std::vector<double>> rows(vocab, std::vector<double>(d));
    for (auto& r : rows) for (double& x : r) x = normal(rng);
    const auto E = EmbeddingMatrix::from_rows(rows);
    std::vector<double> ct(d);
    for (double& x : ct) x = normal(rng);
    const auto p = testutil::random_dist(rng, vocab, 1.0);
    const double beta = 2.0, b = 0.1;
    const auto r = similarity_predict(E, ct, p, beta, b);
    REQUIRE(r.grad_m.has_value());
    const double h = 1e-6;
    for (std::size_t i = 0; i < vocab; ++i) {
      ProbDist up = p, down = p;
      up.probs[i] += h;
      down.probs[i] -= h;
      const double fd = (similarity_predict(E, ct, up, beta, b, false).m -
                         similarity_predict(E, ct, down, beta, b, false).m) /
                        (2 * h);
      CHECK(testutil::rel_err(fd, (*r.grad_m)[i]) < 1e-5);
    }
  }
}

TEST_CASE("clustered similarity evaluator separates agreeing labels") {
  const Corpus c = small_corpus();
  const auto A = expand_agreement(small_spec(), c);
  SimilarityParams params;
  params.seed = 1;
  const auto ev = SimilarityEvaluator::clustered(c, A, params);
  const auto again = SimilarityEvaluator::clustered(c, A, params);
  const auto bird = c.flat_index(0, 4);
  ProbDist animal{std::vector<double>(c.vocab().size(), 0.0)};
  animal.probs[c.vocab().id("animal").index] = 1.0;
  ProbDist mamm{std::vector<double>(c.vocab().size(), 0.0)};
  mamm.probs[c.vocab().id("mamm").index] = 1.0;
  const EvalQuery qa{0, c.sentences()[0], 4, animal};
  const EvalQuery qm{0, c.sentences()[0], 4, mamm};
  CHECK(ev.predict(qa, false).m > 0.9);
  CHECK(ev.predict(qm, false).m < 0.1);
  CHECK(ev.predict(qa, false).m == again.predict(qa, false).m);
  for (std::size_t d = 0; d < params.d_model; ++d) {
    CHECK(ev.context(bird)[d] == again.context(bird)[d]);
  }
}

TEST_CASE("every evaluator clamps its predictions") {
  const Corpus c = small_corpus();
  const auto A = expand_agreement(small_spec(), c);
  const OracleEvaluator oracle(c, A);
  const auto E = EmbeddingMatrix(c.vocab().size(), 1, std::vector<double>(c.vocab().size(), 1.0));
  const SimilarityEvaluator sim(c, E, std::vector<std::vector<double>>(c.token_count(), {1e6}),
                                50.0, 0.0);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = testutil::random_dist(rng, c.vocab().size(), 4.0);
    for (std::size_t s = 0; s < c.sentences().size(); ++s) {
      for (std::size_t pos = 0; pos < c.sentences()[s].token_ids.size(); ++pos) {
        const EvalQuery q{s, c.sentences()[s], pos, p};
        for (const Evaluator* ev : {static_cast<const Evaluator*>(&oracle),
                                    static_cast<const Evaluator*>(&sim)}) {
          const double m = ev->predict(q, false).m;
          CHECK(m >= kPredictionClamp);
          CHECK(m <= 1.0 - kPredictionClamp);
        }
      }
    }
  }
  const auto uniform = testutil::random_dist(rng, c.vocab().size());
  const EvalQuery bad{0, c.sentences()[0], 99, uniform};
  CHECK_THROWS_AS(oracle.predict(bad, false), Error);
}
