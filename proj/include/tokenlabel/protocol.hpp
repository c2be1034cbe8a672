#pragma once

// Newline-delimited JSON messages exchanged with an external evaluator.
// Every message is one line and carries "v":1. See docs/protocol.md.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tokenlabel/label.hpp"

namespace tokenlabel::protocol {

inline constexpr int kVersion = 1;

/// (token id, value) pairs.
using SparseVector = std::vector<std::pair<std::size_t, double>>;

/// The `top_n` most probable entries of p, renormalized to sum to 1.
SparseVector sparsify(const ProbDist& p, std::size_t top_n);

/// exp(z1) / (exp(z0) + exp(z1)).
double two_way_softmax(double z0, double z1);

/// Dense vector with the named entries and zeros elsewhere.
std::vector<double> densify(const SparseVector& sparse, std::size_t size);

/// Dense prior: named entries kept, the leftover mass 1 - sum(named) spread
/// evenly across unnamed entries (none when the named mass is >= 1).
std::vector<double> densify_prior(const SparseVector& sparse, std::size_t size);

// Client side.
std::string encode_vocab(std::span<const std::string> tokens);
std::string encode_predict(std::string_view sentence, std::size_t target,
                           const SparseVector& label, bool want_grad);
std::string encode_prior(std::string_view sentence);

struct PredictReply {
  double m = 0.5;
  std::optional<SparseVector> grad;
};

/// Accepts either "m" or "logits":[z0,z1] (two-way softmax). Throws
/// TransportError quoting the payload on malformed or error replies.
PredictReply decode_predict(std::string_view line);
SparseVector decode_prior(std::string_view line);
void decode_ack(std::string_view line);

// Server side.
struct Request {
  std::string op;
  std::string sentence;
  std::size_t target = 0;
  SparseVector label;
  bool want_grad = false;
  std::vector<std::string> tokens;
};

Request decode_request(std::string_view line);
std::string encode_ack();
std::string encode_predict_reply(double m, const std::optional<SparseVector>& grad);
std::string encode_logits_reply(double z0, double z1, const std::optional<SparseVector>& grad);
std::string encode_prior_reply(const SparseVector& q);
std::string encode_error_reply(std::string_view message);

}  // namespace tokenlabel::protocol
