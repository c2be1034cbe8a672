#include "tokenlabel/core.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "tokenlabel/error.hpp"

namespace tokenlabel {

namespace {

enum class CharClass { space, punct, standalone, word };

struct CodePoint {
  char32_t value;
  std::size_t length;
};

CodePoint decode_utf8(std::string_view text, std::size_t pos) {
  const auto byte = [&](std::size_t i) { return static_cast<unsigned char>(text[i]); };
  const unsigned char lead = byte(pos);
  std::size_t length = 0;
  char32_t value = 0;
  if (lead < 0x80) {
    return {lead, 1};
  } else if ((lead & 0xE0) == 0xC0) {
    length = 2;
    value = lead & 0x1F;
  } else if ((lead & 0xF0) == 0xE0) {
    length = 3;
    value = lead & 0x0F;
  } else if ((lead & 0xF8) == 0xF0) {
    length = 4;
    value = lead & 0x07;
  } else {
    throw ParseError("invalid UTF-8 lead byte at offset " + std::to_string(pos));
  }
  if (pos + length > text.size()) {
    throw ParseError("truncated UTF-8 sequence at offset " + std::to_string(pos));
  }
  for (std::size_t i = 1; i < length; ++i) {
    if ((byte(pos + i) & 0xC0) != 0x80) {
      throw ParseError("invalid UTF-8 continuation at offset " + std::to_string(pos + i));
    }
    value = (value << 6) | (byte(pos + i) & 0x3F);
  }
  return {value, length};
}

CharClass classify(char32_t c) {
  if (c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v') {
    return CharClass::space;
  }
  if (c < 0x80) {
    const bool punct = (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) ||
                       (c >= 0x5B && c <= 0x60) || (c >= 0x7B && c <= 0x7E);
    return punct ? CharClass::punct : CharClass::word;
  }
  if (c == 0x3000) return CharClass::space;
  // CJK symbols and punctuation, fullwidth forms, unified ideographs.
  if ((c >= 0x3001 && c <= 0x303F) || (c >= 0x3400 && c <= 0x4DBF) ||
      (c >= 0x4E00 && c <= 0x9FFF) || (c >= 0xF900 && c <= 0xFAFF) ||
      (c >= 0xFF00 && c <= 0xFFEF) || (c >= 0x20000 && c <= 0x2FFFF)) {
    return CharClass::standalone;
  }
  return CharClass::word;
}

// Class of the code point ending just before `pos`, or space at the start.
CharClass class_before(std::string_view text, std::size_t pos) {
  if (pos == 0) return CharClass::space;
  std::size_t start = pos - 1;
  while (start > 0 && (static_cast<unsigned char>(text[start]) & 0xC0) == 0x80) --start;
  return classify(decode_utf8(text, start).value);
}

CharClass class_at(std::string_view text, std::size_t pos) {
  if (pos >= text.size()) return CharClass::space;
  return classify(decode_utf8(text, pos).value);
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) {
      throw ParseError("duplicate vocabulary token \"" + tokens_[i] + "\"");
    }
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id.index >= tokens_.size()) {
    throw Error("token id " + std::to_string(id.index) + " out of range");
  }
  return tokens_[id.index];
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return TokenId{it->second};
}

TokenId Vocab::id(std::string_view token) const {
  if (auto found = find(token)) return *found;
  throw ParseError("out-of-vocabulary token \"" + std::string(token) + "\"");
}

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t pos = 0; pos < text.size();) {
    const CodePoint cp = decode_utf8(text, pos);
    const auto piece = text.substr(pos, cp.length);
    switch (classify(cp.value)) {
      case CharClass::space:
        flush();
        break;
      case CharClass::punct:
      case CharClass::standalone:
        flush();
        tokens.emplace_back(piece);
        break;
      case CharClass::word:
        current.append(piece);
        break;
    }
    pos += cp.length;
  }
  flush();
  return tokens;
}

std::string normalize_text(std::string_view text) { return join(split_tokens(text)); }

Vocab build_vocab(std::span<const std::string> sentences,
                  std::span<const std::string> extra_tokens) {
  if (sentences.empty()) throw ParseError("empty corpus");
  std::vector<std::string> ordered;
  std::unordered_map<std::string, std::size_t> seen;
  auto add = [&](const std::string& token) {
    if (seen.emplace(token, ordered.size()).second) ordered.push_back(token);
  };
  for (const auto& sentence : sentences) {
    for (const auto& token : split_tokens(sentence)) add(token);
  }
  for (const auto& token : extra_tokens) {
    if (token.empty()) throw ParseError("empty extra token");
    add(token);
  }
  return Vocab(std::move(ordered));
}

std::vector<TokenId> tokenize(const Vocab& vocab, std::string_view text) {
  std::vector<TokenId> ids;
  for (const auto& token : split_tokens(text)) ids.push_back(vocab.id(token));
  return ids;
}

std::string detokenize(const Vocab& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

Corpus::Corpus(Vocab vocab, std::vector<Sentence> sentences,
               std::vector<ActivationRecord> activations)
    : vocab_(std::move(vocab)), sentences_(std::move(sentences)) {
  offsets_.reserve(sentences_.size() + 1);
  offsets_.push_back(0);
  for (std::size_t s = 0; s < sentences_.size(); ++s) {
    const auto& sentence = sentences_[s];
    if (sentence.token_ids.empty()) {
      throw ParseError("sentence " + std::to_string(s) + " has no tokens");
    }
    for (const auto id : sentence.token_ids) {
      if (id.index >= vocab_.size()) {
        throw ParseError("sentence " + std::to_string(s) + " references token id " +
                         std::to_string(id.index) + " outside the vocabulary");
      }
    }
    offsets_.push_back(offsets_.back() + sentence.token_ids.size());
  }

  const std::size_t total = offsets_.back();
  std::vector<std::uint8_t> filled(total, 0);
  activations_.resize(total);
  for (const auto& rec : activations) {
    if (rec.sentence_index >= sentences_.size() ||
        rec.token_position >= sentences_[rec.sentence_index].token_ids.size()) {
      throw ParseError("activation at (" + std::to_string(rec.sentence_index) + ", " +
                       std::to_string(rec.token_position) + ") is out of range");
    }
    if (rec.activation > 1) {
      throw ParseError("activation must be 0 or 1");
    }
    const std::size_t flat = offsets_[rec.sentence_index] + rec.token_position;
    if (filled[flat]) {
      throw ParseError("duplicate activation at (" + std::to_string(rec.sentence_index) + ", " +
                       std::to_string(rec.token_position) + ")");
    }
    filled[flat] = 1;
    activations_[flat] = rec;
    active_count_ += rec.activation;
  }
  if (std::find(filled.begin(), filled.end(), 0) != filled.end()) {
    throw ParseError("every token occurrence needs exactly one activation");
  }
  if (total == 0) throw ParseError("empty corpus");
  if (active_count_ == 0 || active_count_ == total) {
    throw ParseError("degenerate corpus: need at least one active and one inactive token");
  }
}

std::size_t Corpus::flat_index(std::size_t sentence, std::size_t position) const {
  if (sentence >= sentences_.size() || position >= sentences_[sentence].token_ids.size()) {
    throw Error("token (" + std::to_string(sentence) + ", " + std::to_string(position) +
                ") is not in the corpus");
  }
  return offsets_[sentence] + position;
}

TokenId Corpus::token_at(std::size_t flat) const {
  const auto& rec = activations_.at(flat);
  return sentences_[rec.sentence_index].token_ids[rec.token_position];
}

namespace {

struct MarkedLine {
  std::vector<std::string> tokens;
  std::vector<std::uint8_t> active;
};

MarkedLine parse_marked_line(std::string_view line, std::size_t line_no) {
  const auto where = [&] { return "line " + std::to_string(line_no) + ": "; };
  MarkedLine out;
  bool bold = false;
  std::size_t segment_start = 0;
  std::size_t open_at = 0;
  auto emit = [&](std::size_t end) {
    for (auto& token : split_tokens(line.substr(segment_start, end - segment_start))) {
      out.tokens.push_back(std::move(token));
      out.active.push_back(bold ? 1 : 0);
    }
  };
  for (std::size_t pos = line.find("**"); pos != std::string_view::npos;
       pos = line.find("**", segment_start)) {
    // A delimiter must sit on a token boundary, otherwise the markup would
    // split a word.
    const CharClass outside = bold ? class_at(line, pos + 2) : class_before(line, pos);
    const CharClass inside = bold ? class_before(line, pos) : class_at(line, pos + 2);
    if (outside == CharClass::word && inside == CharClass::word) {
      throw ParseError(where() + "markup splits a word at column " + std::to_string(pos + 1));
    }
    emit(pos);
    if (bold) {
      if (split_tokens(line.substr(open_at, pos - open_at)).empty()) {
        throw ParseError(where() + "empty bold span at column " + std::to_string(open_at - 1));
      }
    } else {
      open_at = pos + 2;
    }
    bold = !bold;
    segment_start = pos + 2;
  }
  if (bold) throw ParseError(where() + "unterminated ** markup");
  emit(line.size());
  return out;
}

}  // namespace

Corpus parse_corpus(std::string_view contents, std::span<const std::string> extra_tokens) {
  std::vector<MarkedLine> lines;
  std::istringstream in{std::string(contents)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    if (raw.starts_with('#')) continue;
    if (split_tokens(raw).empty() && raw.find("**") == std::string::npos) continue;
    auto marked = parse_marked_line(raw, line_no);
    if (marked.tokens.empty()) {
      throw ParseError("line " + std::to_string(line_no) + ": no tokens");
    }
    lines.push_back(std::move(marked));
  }
  if (lines.empty()) throw ParseError("empty corpus");

  std::vector<std::string> normalized;
  normalized.reserve(lines.size());
  for (const auto& line : lines) normalized.push_back(join(line.tokens));
  Vocab vocab = build_vocab(normalized, extra_tokens);

  std::vector<Sentence> sentences;
  std::vector<ActivationRecord> activations;
  for (std::size_t s = 0; s < lines.size(); ++s) {
    Sentence sentence{normalized[s], {}};
    for (std::size_t pos = 0; pos < lines[s].tokens.size(); ++pos) {
      sentence.token_ids.push_back(vocab.id(lines[s].tokens[pos]));
      activations.push_back({s, pos, lines[s].active[pos]});
    }
    sentences.push_back(std::move(sentence));
  }
  return Corpus(std::move(vocab), std::move(sentences), std::move(activations));
}

Corpus load_corpus(const std::filesystem::path& dataset_file,
                   std::span<const std::string> extra_tokens) {
  std::ifstream in(dataset_file, std::ios::binary);
  if (!in) throw ParseError("cannot open dataset " + dataset_file.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_corpus(buffer.str(), extra_tokens);
  } catch (const ParseError& e) {
    throw ParseError(dataset_file.string() + ": " + e.what());
  }
}

}  // namespace tokenlabel
