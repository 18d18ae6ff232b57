#pragma once

// Lowercasing whitespace/punctuation tokenizer and the vocabulary it feeds.

#include <algorithm>
#include <cctype>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "promptblend/error.hpp"
#include "promptblend/tensor.hpp"

namespace promptblend {

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr TokenId kFirstWordId = 4;

/// Splits text into lowercase word pieces. Every ASCII punctuation character
/// is a token of its own; bytes >= 0x80 are treated as word characters, so
/// UTF-8 sequences stay intact.
inline std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  };
  for (char raw : text) {
    const auto ch = static_cast<unsigned char>(raw);
    if (ch < 0x80 && std::isspace(ch)) {
      flush();
    } else if (ch < 0x80 && std::ispunct(ch)) {
      flush();
      out.emplace_back(1, raw);
    } else {
      current.push_back(ch < 0x80 ? static_cast<char>(std::tolower(ch)) : raw);
    }
  }
  flush();
  return out;
}

class Vocab {
 public:
  Vocab() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} { reindex(); }

  /// Builds a vocabulary from every token of every text. Assignment follows
  /// sorted token order, so the result does not depend on input order.
  static Vocab build(std::span<const std::string> texts) {
    std::set<std::string> words;
    for (const auto& t : texts) {
      for (auto& w : split_tokens(t)) {
        words.insert(std::move(w));
      }
    }
    return from_words(std::vector<std::string>(words.begin(), words.end()));
  }

  /// Restores a vocabulary from word tokens listed in id order (ids from 4 up).
  static Vocab from_words(std::vector<std::string> words) {
    Vocab v;
    for (auto& w : words) {
      if (v.index_.contains(w)) {
        throw ValidationError("vocabulary token listed twice: " + w);
      }
      v.index_.emplace(w, static_cast<TokenId>(v.tokens_.size()));
      v.tokens_.push_back(std::move(w));
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// Word tokens in id order, reserved entries excluded.
  std::vector<std::string> words() const {
    return {tokens_.begin() + kFirstWordId, tokens_.end()};
  }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      index_.emplace(tokens_[i], static_cast<TokenId>(i));
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& w : split_tokens(text)) {
    ids.push_back(vocab.id(w));
  }
  return ids;
}

/// Space-joined token strings; pad ids are skipped.
inline std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == kPadId) {
      continue;
    }
    if (!out.empty()) {
      out.push_back(' ');
    }
    out += vocab.token(id);
  }
  return out;
}

}  // namespace promptblend
