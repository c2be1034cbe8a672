#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tokenlabel/core.hpp"

namespace tokenlabel {

/// The optimized parameter: one logit per vocabulary token.
struct LabelState {
  std::vector<double> logits;
};

/// Probability distribution over the vocabulary.
struct ProbDist {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }
};

/// Throws Error unless entries are non-negative and sum to 1 within `tol`.
void check_distribution(const ProbDist& p, double tol = 1e-9);

/// Row-major d_vocab x d_model matrix; row i is the embedding of token i.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static EmbeddingMatrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::span<const double> row(std::size_t i) const {
    return {values_.data() + i * cols_, cols_};
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

using LabelEmbedding = std::vector<double>;

enum class LabelInit { zeros, gaussian };

/// Zero logits, or N(0, 0.01^2) noise under `seed` for tie-breaking studies.
LabelState init_label(std::size_t vocab_size, LabelInit init = LabelInit::zeros,
                      std::uint64_t seed = 0);

/// Max-shifted softmax. Throws Error on a non-finite logit.
ProbDist softmax_label(const LabelState& state);

/// e = sum_i p_i * E_i.
LabelEmbedding mix_embedding(const ProbDist& p, const EmbeddingMatrix& embeddings);

/// Vector-Jacobian product of the softmax:
/// grad_v_j = p_j * (grad_p_j - sum_k p_k grad_p_k).
std::vector<double> softmax_backward(const ProbDist& p, std::span<const double> grad_p);

/// The k most probable tokens, descending; ties go to the lower index.
std::vector<std::pair<TokenId, double>> top_k(const ProbDist& p, std::size_t k);

double entropy_of(const ProbDist& p);

}  // namespace tokenlabel
