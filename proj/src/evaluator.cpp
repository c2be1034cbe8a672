#include "tokenlabel/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "tokenlabel/error.hpp"

namespace tokenlabel {

namespace {

std::vector<std::size_t> sentence_offsets(const Corpus& corpus) {
  std::vector<std::size_t> offsets;
  offsets.reserve(corpus.sentences().size());
  std::size_t total = 0;
  for (const auto& s : corpus.sentences()) {
    offsets.push_back(total);
    total += s.token_ids.size();
  }
  return offsets;
}

std::size_t flat_of(const std::vector<std::size_t>& offsets, const EvalQuery& query,
                    std::size_t token_count) {
  if (query.sentence_index >= offsets.size() ||
      query.target_position >= query.sentence.token_ids.size()) {
    throw Error("query target (" + std::to_string(query.sentence_index) + ", " +
                std::to_string(query.target_position) + ") is not covered by the evaluator");
  }
  const std::size_t flat = offsets[query.sentence_index] + query.target_position;
  if (flat >= token_count) throw Error("query target is not covered by the evaluator");
  return flat;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Uniform double in [0, 1) from the top 53 bits; independent of the
// standard library's distribution implementations.
double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::vector<double> uniform_prior(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

}  // namespace

double clamp_prediction(double m, double eps) {
  if (std::isnan(m)) throw Error("prediction is NaN");
  return std::clamp(m, eps, 1.0 - eps);
}

PriorDist floor_prior(std::vector<double> q, double floor) {
  if (q.empty()) throw Error("empty prior");
  double sum = 0.0;
  for (auto& x : q) {
    if (!std::isfinite(x) || x < 0.0) throw Error("prior entry out of range");
    x = std::max(x, floor);
    sum += x;
  }
  for (auto& x : q) x /= sum;
  return PriorDist{ProbDist{std::move(q)}};
}

PriorDist label_prior(const Evaluator& evaluator, const Sentence& sentence) {
  if (!evaluator.supports_prior()) {
    throw CapabilityError("evaluator does not provide a label prior");
  }
  auto raw = evaluator.raw_prior(sentence);
  if (raw.size() != evaluator.vocab_size()) {
    throw Error("prior has " + std::to_string(raw.size()) + " entries, expected " +
                std::to_string(evaluator.vocab_size()));
  }
  return floor_prior(std::move(raw));
}

AgreementMatrix::AgreementMatrix(std::size_t vocab_size, std::size_t token_count, double epsilon)
    : vocab_size_(vocab_size),
      token_count_(token_count),
      epsilon_(epsilon),
      bits_(vocab_size * token_count, 0) {
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw Error("agreement epsilon must lie in (0, 0.5)");
}

void AgreementMatrix::set(TokenId label, std::size_t flat_token, bool agrees) {
  if (label.index >= vocab_size_ || flat_token >= token_count_) {
    throw Error("agreement entry out of range");
  }
  bits_[flat_token * vocab_size_ + label.index] = agrees ? 1 : 0;
}

bool AgreementMatrix::agrees(TokenId label, std::size_t flat_token) const {
  if (label.index >= vocab_size_ || flat_token >= token_count_) {
    throw Error("agreement entry out of range");
  }
  return bits_[flat_token * vocab_size_ + label.index] != 0;
}

std::vector<std::string> unknown_tokens(const AgreementSpec& spec, const Vocab& vocab) {
  std::set<std::string> missing;
  auto check = [&](const std::string& token) {
    if (!vocab.find(token)) missing.insert(token);
  };
  for (const auto& [label, members] : spec.rules) {
    check(label);
    for (const auto& m : members) check(m);
  }
  for (const auto& [label, _] : spec.noise) check(label);
  for (const auto& [label, _] : spec.prior_weights) check(label);
  return {missing.begin(), missing.end()};
}

AgreementMatrix expand_agreement(const AgreementSpec& spec, const Corpus& corpus) {
  if (auto missing = unknown_tokens(spec, corpus.vocab()); !missing.empty()) {
    throw ParseError("agreement spec names token \"" + missing.front() +
                     "\" which is not in the vocabulary");
  }
  const Vocab& vocab = corpus.vocab();
  AgreementMatrix matrix(vocab.size(), corpus.token_count(), spec.epsilon);

  // Occurrences of each vocabulary token.
  std::vector<std::vector<std::size_t>> occurrences(vocab.size());
  for (std::size_t t = 0; t < corpus.token_count(); ++t) {
    occurrences[corpus.token_at(t).index].push_back(t);
  }
  if (spec.identity) {
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      for (const auto t : occurrences[i]) matrix.set(TokenId{i}, t, true);
    }
  }
  for (const auto& [label, members] : spec.rules) {
    const TokenId label_id = vocab.id(label);
    for (const auto& member : members) {
      for (const auto t : occurrences[vocab.id(member).index]) matrix.set(label_id, t, true);
    }
  }
  std::mt19937_64 rng(spec.seed);
  for (const auto& [label, rate] : spec.noise) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ParseError("noise rate for \"" + label + "\" out of [0,1]");
    const TokenId label_id = vocab.id(label);
    for (std::size_t t = 0; t < corpus.token_count(); ++t) {
      if (unit_uniform(rng) < rate) matrix.set(label_id, t, !matrix.agrees(label_id, t));
    }
  }
  return matrix;
}

std::vector<double> prior_from_weights(const std::map<std::string, double>& weights,
                                       const Vocab& vocab) {
  std::vector<double> q(vocab.size(), 1.0);
  for (const auto& [token, weight] : weights) {
    if (!(weight > 0.0) || !std::isfinite(weight)) {
      throw ParseError("prior weight for \"" + token + "\" must be positive");
    }
    q[vocab.id(token).index] = weight;
  }
  double sum = 0.0;
  for (const double x : q) sum += x;
  for (auto& x : q) x /= sum;
  return q;
}

EvalResult oracle_predict(const AgreementMatrix& matrix, std::size_t flat_token,
                          const ProbDist& p, bool want_grad) {
  if (flat_token >= matrix.token_count()) throw Error("token not covered by the agreement matrix");
  if (p.size() != matrix.vocab_size()) throw Error("oracle_predict: dimension mismatch");
  EvalResult result;
  double m = 0.0;
  std::vector<double> grad(want_grad ? p.size() : 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = matrix.value(TokenId{i}, flat_token);
    m += p[i] * a;
    if (want_grad) grad[i] = a;
  }
  result.m = clamp_prediction(m);
  if (want_grad) result.grad_m = std::move(grad);
  return result;
}

OracleEvaluator::OracleEvaluator(const Corpus& corpus, AgreementMatrix matrix,
                                 std::vector<double> prior)
    : offsets_(sentence_offsets(corpus)), matrix_(std::move(matrix)), prior_(std::move(prior)) {
  if (matrix_.vocab_size() != corpus.vocab().size() ||
      matrix_.token_count() != corpus.token_count()) {
    throw Error("agreement matrix does not match the corpus");
  }
  if (prior_.empty()) prior_ = uniform_prior(matrix_.vocab_size());
  if (prior_.size() != matrix_.vocab_size()) throw Error("oracle prior has the wrong size");
}

EvalResult OracleEvaluator::predict(const EvalQuery& query, bool want_grad) const {
  return oracle_predict(matrix_, flat_of(offsets_, query, matrix_.token_count()), query.label,
                        want_grad);
}

std::vector<double> OracleEvaluator::raw_prior(const Sentence&) const { return prior_; }

EvalResult similarity_predict(const EmbeddingMatrix& embeddings, std::span<const double> context,
                              const ProbDist& p, double sharpness, double bias, bool want_grad) {
  if (context.size() != embeddings.cols()) throw Error("similarity_predict: dimension mismatch");
  const LabelEmbedding e = mix_embedding(p, embeddings);
  double score = 0.0;
  for (std::size_t d = 0; d < e.size(); ++d) score += e[d] * context[d];
  const double s = sigmoid(sharpness * (score - bias));
  EvalResult result;
  result.m = clamp_prediction(s);
  if (want_grad) {
    const double scale = s * (1.0 - s) * sharpness;
    std::vector<double> grad(embeddings.rows());
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const auto row = embeddings.row(i);
      double dot = 0.0;
      for (std::size_t d = 0; d < row.size(); ++d) dot += row[d] * context[d];
      grad[i] = scale * dot;
    }
    result.grad_m = std::move(grad);
  }
  return result;
}

SimilarityEvaluator::SimilarityEvaluator(const Corpus& corpus, EmbeddingMatrix embeddings,
                                         std::vector<std::vector<double>> context_vectors,
                                         double sharpness, double bias, std::vector<double> prior)
    : offsets_(sentence_offsets(corpus)),
      embeddings_(std::move(embeddings)),
      contexts_(std::move(context_vectors)),
      sharpness_(sharpness),
      bias_(bias),
      prior_(std::move(prior)) {
  if (embeddings_.rows() != corpus.vocab().size()) {
    throw Error("embedding matrix rows do not match the vocabulary");
  }
  if (contexts_.size() != corpus.token_count()) {
    throw Error("need one context vector per corpus token");
  }
  if (!(sharpness_ > 0.0) || !std::isfinite(bias_)) throw Error("invalid sharpness or bias");
  scores_.reserve(contexts_.size());
  for (const auto& c : contexts_) {
    if (c.size() != embeddings_.cols()) throw Error("context vector dimension mismatch");
    std::vector<double> row(embeddings_.rows());
    for (std::size_t i = 0; i < row.size(); ++i) {
      const auto e = embeddings_.row(i);
      double dot = 0.0;
      for (std::size_t d = 0; d < e.size(); ++d) dot += e[d] * c[d];
      row[i] = dot;
    }
    scores_.push_back(std::move(row));
  }
  if (prior_.empty()) prior_ = uniform_prior(embeddings_.rows());
  if (prior_.size() != embeddings_.rows()) throw Error("similarity prior has the wrong size");
}

SimilarityEvaluator SimilarityEvaluator::clustered(const Corpus& corpus,
                                                   const AgreementMatrix& agreement,
                                                   const SimilarityParams& params,
                                                   std::vector<double> prior) {
  if (params.d_model == 0) throw Error("d_model must be positive");
  const std::size_t vocab = corpus.vocab().size();
  std::mt19937_64 rng(params.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> values(vocab * params.d_model);
  for (std::size_t i = 0; i < vocab; ++i) {
    double norm = 0.0;
    for (std::size_t d = 0; d < params.d_model; ++d) {
      const double x = normal(rng);
      values[i * params.d_model + d] = x;
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < params.d_model; ++d) values[i * params.d_model + d] /= norm;
  }
  EmbeddingMatrix embeddings(vocab, params.d_model, std::move(values));

  const double noise_scale = params.context_noise / std::sqrt(static_cast<double>(params.d_model));
  std::vector<std::vector<double>> contexts(corpus.token_count(),
                                            std::vector<double>(params.d_model, 0.0));
  for (std::size_t t = 0; t < corpus.token_count(); ++t) {
    auto& c = contexts[t];
    for (std::size_t i = 0; i < vocab; ++i) {
      if (!agreement.agrees(TokenId{i}, t)) continue;
      const auto row = embeddings.row(i);
      for (std::size_t d = 0; d < c.size(); ++d) c[d] += row[d];
    }
    for (auto& x : c) x += noise_scale * normal(rng);
  }
  return SimilarityEvaluator(corpus, std::move(embeddings), std::move(contexts), params.sharpness,
                             params.bias, std::move(prior));
}

EvalResult SimilarityEvaluator::predict(const EvalQuery& query, bool want_grad) const {
  const std::size_t flat = flat_of(offsets_, query, contexts_.size());
  if (query.label.size() != embeddings_.rows()) throw Error("similarity: dimension mismatch");
  const auto& scores = scores_[flat];
  double score = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) score += query.label[i] * scores[i];
  const double s = sigmoid(sharpness_ * (score - bias_));
  EvalResult result;
  result.m = clamp_prediction(s);
  if (want_grad) {
    const double scale = s * (1.0 - s) * sharpness_;
    std::vector<double> grad(scores.size());
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = scale * scores[i];
    result.grad_m = std::move(grad);
  }
  return result;
}

std::vector<double> SimilarityEvaluator::raw_prior(const Sentence&) const { return prior_; }

}  // namespace tokenlabel
