#include "tokenlabel/label.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "tokenlabel/error.hpp"

namespace tokenlabel {

void check_distribution(const ProbDist& p, double tol) {
  if (p.probs.empty()) throw Error("empty probability distribution");
  double sum = 0.0;
  for (const double x : p.probs) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw Error("probability entry out of range");
    sum += x;
  }
  if (std::abs(sum - 1.0) > tol) {
    throw Error("probabilities sum to " + std::to_string(sum) + ", not 1");
  }
}

EmbeddingMatrix::EmbeddingMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows_ * cols_) throw Error("embedding matrix is not rectangular");
  for (const double x : values_) {
    if (!std::isfinite(x)) throw Error("embedding matrix has a non-finite entry");
  }
}

EmbeddingMatrix EmbeddingMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t cols = rows.empty() ? 0 : rows.front().size();
  std::vector<double> values;
  values.reserve(rows.size() * cols);
  for (const auto& row : rows) {
    if (row.size() != cols) throw Error("embedding matrix is not rectangular");
    values.insert(values.end(), row.begin(), row.end());
  }
  return EmbeddingMatrix(rows.size(), cols, std::move(values));
}

LabelState init_label(std::size_t vocab_size, LabelInit init, std::uint64_t seed) {
  if (vocab_size < 2) throw Error("label vocabulary needs at least 2 tokens");
  LabelState state{std::vector<double>(vocab_size, 0.0)};
  if (init == LabelInit::gaussian) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.01);
    for (auto& v : state.logits) v = noise(rng);
  }
  return state;
}

ProbDist softmax_label(const LabelState& state) {
  const auto& v = state.logits;
  if (v.empty()) throw Error("empty logit vector");
  for (const double x : v) {
    if (!std::isfinite(x)) throw Error("non-finite label logit");
  }
  const double max = *std::max_element(v.begin(), v.end());
  ProbDist p{std::vector<double>(v.size())};
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    p.probs[i] = std::exp(v[i] - max);
    sum += p.probs[i];
  }
  for (auto& x : p.probs) x /= sum;
  return p;
}

LabelEmbedding mix_embedding(const ProbDist& p, const EmbeddingMatrix& embeddings) {
  if (p.size() != embeddings.rows()) {
    throw Error("distribution has " + std::to_string(p.size()) + " entries but the matrix has " +
                std::to_string(embeddings.rows()) + " rows");
  }
  LabelEmbedding e(embeddings.cols(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    const auto row = embeddings.row(i);
    for (std::size_t d = 0; d < e.size(); ++d) e[d] += p[i] * row[d];
  }
  return e;
}

std::vector<double> softmax_backward(const ProbDist& p, std::span<const double> grad_p) {
  if (p.size() != grad_p.size()) throw Error("softmax_backward: dimension mismatch");
  double inner = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) inner += p[k] * grad_p[k];
  std::vector<double> grad_v(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) grad_v[j] = p[j] * (grad_p[j] - inner);
  return grad_v;
}

std::vector<std::pair<TokenId, double>> top_k(const ProbDist& p, std::size_t k) {
  if (k < 1 || k > p.size()) {
    throw Error("top_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(p.size()) + "]");
  }
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (p[a] != p[b]) return p[a] > p[b];
                      return a < b;
                    });
  std::vector<std::pair<TokenId, double>> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(TokenId{order[i]}, p[order[i]]);
  return out;
}

double entropy_of(const ProbDist& p) {
  double h = 0.0;
  for (const double x : p.probs) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

}  // namespace tokenlabel
