#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokenlabel/core.hpp"
#include "tokenlabel/label.hpp"

namespace tokenlabel {

/// Predictions are clamped to [kPredictionClamp, 1 - kPredictionClamp].
inline constexpr double kPredictionClamp = 1e-7;
/// Prior entries are floored at kPriorFloor and renormalized.
inline constexpr double kPriorFloor = 1e-9;

/// "Does the token at target_position match the label distribution?"
struct EvalQuery {
  std::size_t sentence_index;
  const Sentence& sentence;
  std::size_t target_position;
  const ProbDist& label;
};

struct EvalResult {
  double m = 0.5;
  /// dm/dp_i over the whole vocabulary, when requested and available.
  std::optional<std::vector<double>> grad_m;
};

struct PriorDist {
  ProbDist q;
};

double clamp_prediction(double m, double eps = kPredictionClamp);

/// Floors every entry at `floor` then renormalizes.
PriorDist floor_prior(std::vector<double> q, double floor = kPriorFloor);

/// A differentiable discriminator m(t, p) plus its label-slot prior q.
/// Implementations are read-only after construction and safe to call from
/// several threads.
class Evaluator {
 public:
  virtual ~Evaluator() = default;

  virtual EvalResult predict(const EvalQuery& query, bool want_grad) const = 0;
  virtual bool supports_gradient() const = 0;
  virtual bool supports_prior() const = 0;
  /// Unfloored prior; only meaningful when supports_prior().
  virtual std::vector<double> raw_prior(const Sentence& sentence) const = 0;
  virtual std::size_t vocab_size() const = 0;
};

/// Floored, renormalized prior. Throws CapabilityError if unsupported.
PriorDist label_prior(const Evaluator& evaluator, const Sentence& sentence);

/// Binary agreement between every label token and every corpus token
/// occurrence; entries are either epsilon or 1 - epsilon.
class AgreementMatrix {
 public:
  AgreementMatrix(std::size_t vocab_size, std::size_t token_count, double epsilon);

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t token_count() const { return token_count_; }
  double epsilon() const { return epsilon_; }

  void set(TokenId label, std::size_t flat_token, bool agrees);
  bool agrees(TokenId label, std::size_t flat_token) const;
  double value(TokenId label, std::size_t flat_token) const {
    return agrees(label, flat_token) ? 1.0 - epsilon_ : epsilon_;
  }

 private:
  std::size_t vocab_size_;
  std::size_t token_count_;
  double epsilon_;
  std::vector<std::uint8_t> bits_;  // column-major: [token][label]
};

/// Compact description of an agreement matrix.
struct AgreementSpec {
  double epsilon = kPredictionClamp;
  /// Every vocabulary token agrees with its own occurrences.
  bool identity = true;
  /// label token -> corpus token strings it correctly describes.
  std::map<std::string, std::vector<std::string>> rules;
  /// label token -> probability of flipping each of its entries.
  std::map<std::string, double> noise;
  /// Unnormalized prior weights; unlisted tokens weigh 1.
  std::map<std::string, double> prior_weights;
  std::uint64_t seed = 0;
};

/// Tokens named by the spec that are missing from the vocabulary.
std::vector<std::string> unknown_tokens(const AgreementSpec& spec, const Vocab& vocab);

/// Throws ParseError naming the first unknown token.
AgreementMatrix expand_agreement(const AgreementSpec& spec, const Corpus& corpus);

/// Normalized prior from weights; uniform when `weights` is empty.
std::vector<double> prior_from_weights(const std::map<std::string, double>& weights,
                                       const Vocab& vocab);

/// m = sum_i p_i a[i][t]; dm/dp_i = a[i][t].
EvalResult oracle_predict(const AgreementMatrix& matrix, std::size_t flat_token,
                          const ProbDist& p, bool want_grad = true);

/// Linear evaluator backed by an agreement matrix; has a known optimum.
class OracleEvaluator final : public Evaluator {
 public:
  OracleEvaluator(const Corpus& corpus, AgreementMatrix matrix, std::vector<double> prior = {});

  EvalResult predict(const EvalQuery& query, bool want_grad) const override;
  bool supports_gradient() const override { return true; }
  bool supports_prior() const override { return true; }
  std::vector<double> raw_prior(const Sentence& sentence) const override;
  std::size_t vocab_size() const override { return matrix_.vocab_size(); }

  const AgreementMatrix& matrix() const { return matrix_; }

 private:
  std::vector<std::size_t> offsets_;
  AgreementMatrix matrix_;
  std::vector<double> prior_;
};

/// m = sigmoid(sharpness * (<E p, context> - bias)) with its gradient in p.
EvalResult similarity_predict(const EmbeddingMatrix& embeddings, std::span<const double> context,
                              const ProbDist& p, double sharpness, double bias,
                              bool want_grad = true);

struct SimilarityParams {
  std::size_t d_model = 64;
  double sharpness = 8.0;
  double bias = 0.5;
  double context_noise = 0.05;
  std::uint64_t seed = 0;
};

/// Geometric evaluator: label tokens and context vectors live in a shared
/// embedding space and agreement is a thresholded inner product.
class SimilarityEvaluator final : public Evaluator {
 public:
  /// `context_vectors` holds one vector per corpus token occurrence.
  SimilarityEvaluator(const Corpus& corpus, EmbeddingMatrix embeddings,
                      std::vector<std::vector<double>> context_vectors, double sharpness,
                      double bias, std::vector<double> prior = {});

  /// Seeded clustered construction: each token gets a random unit direction
  /// and each occurrence's context is the sum of the directions of every
  /// label that agrees with it, plus a little noise.
  static SimilarityEvaluator clustered(const Corpus& corpus, const AgreementMatrix& agreement,
                                       const SimilarityParams& params,
                                       std::vector<double> prior = {});

  EvalResult predict(const EvalQuery& query, bool want_grad) const override;
  bool supports_gradient() const override { return true; }
  bool supports_prior() const override { return true; }
  std::vector<double> raw_prior(const Sentence& sentence) const override;
  std::size_t vocab_size() const override { return embeddings_.rows(); }

  const EmbeddingMatrix& embeddings() const { return embeddings_; }
  std::span<const double> context(std::size_t flat_token) const { return contexts_[flat_token]; }
  double sharpness() const { return sharpness_; }
  double bias() const { return bias_; }

 private:
  std::vector<std::size_t> offsets_;
  EmbeddingMatrix embeddings_;
  std::vector<std::vector<double>> contexts_;
  std::vector<std::vector<double>> scores_;  // [token][label] = <E_label, c_token>
  double sharpness_;
  double bias_;
  std::vector<double> prior_;
};

}  // namespace tokenlabel
