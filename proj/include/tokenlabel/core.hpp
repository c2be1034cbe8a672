#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tokenlabel {

struct TokenId {
  std::size_t index = 0;
  auto operator<=>(const TokenId&) const = default;
};

/// Ordered set of distinct token strings. Index order is first-seen order and
/// is stable for a given input.
class Vocab {
 public:
  Vocab() = default;
  /// Throws ParseError on duplicate tokens.
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  /// Throws ParseError naming the token when it is absent.
  TokenId id(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Splits text into word tokens. Whitespace separates tokens; ASCII and CJK
/// punctuation and every CJK character stand alone. Case is preserved.
std::vector<std::string> split_tokens(std::string_view text);

/// Split tokens joined by single spaces; what detokenize() reproduces.
std::string normalize_text(std::string_view text);

Vocab build_vocab(std::span<const std::string> sentences,
                  std::span<const std::string> extra_tokens);

std::vector<TokenId> tokenize(const Vocab& vocab, std::string_view text);
std::string detokenize(const Vocab& vocab, std::span<const TokenId> ids);

struct Sentence {
  std::string text;  // normalized
  std::vector<TokenId> token_ids;
};

struct ActivationRecord {
  std::size_t sentence_index = 0;
  std::size_t token_position = 0;
  std::uint8_t activation = 0;
};

/// Tokenized sentences with exactly one binary activation per token
/// occurrence. Immutable after construction.
class Corpus {
 public:
  /// Validates every invariant; throws ParseError on violation, including a
  /// corpus with no active or no inactive token.
  Corpus(Vocab vocab, std::vector<Sentence> sentences,
         std::vector<ActivationRecord> activations);

  const Vocab& vocab() const { return vocab_; }
  const std::vector<Sentence>& sentences() const { return sentences_; }
  /// Sorted by (sentence, position); index i is the flat token index.
  const std::vector<ActivationRecord>& activations() const { return activations_; }

  std::size_t token_count() const { return activations_.size(); }
  std::size_t flat_index(std::size_t sentence, std::size_t position) const;
  const ActivationRecord& record(std::size_t flat) const { return activations_.at(flat); }
  TokenId token_at(std::size_t flat) const;
  std::size_t active_count() const { return active_count_; }
  std::size_t inactive_count() const { return token_count() - active_count_; }

 private:
  Vocab vocab_;
  std::vector<Sentence> sentences_;
  std::vector<ActivationRecord> activations_;
  std::vector<std::size_t> offsets_;
  std::size_t active_count_ = 0;
};

/// Parses dataset text: one sentence per line, active tokens wrapped in
/// `**...**`, blank lines and `#` comment lines skipped. The vocabulary is the
/// corpus tokens in first-seen order followed by extra_tokens.
Corpus parse_corpus(std::string_view contents,
                    std::span<const std::string> extra_tokens = {});
Corpus load_corpus(const std::filesystem::path& dataset_file,
                   std::span<const std::string> extra_tokens = {});

}  // namespace tokenlabel
