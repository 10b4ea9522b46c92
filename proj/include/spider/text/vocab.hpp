#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "spider/core/error.hpp"

namespace spider::text {

using TokenId = std::uint32_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kEou = 4;
inline constexpr TokenId kMask = 5;
inline constexpr std::size_t kCount = 6;
inline constexpr std::array<std::string_view, kCount> kTokens = {"[PAD]", "[UNK]", "[CLS]",
                                                                  "[SEP]", "[EOU]", "[MASK]"};
}  // namespace special

// Lowercased whitespace split.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

class Vocab {
 public:
  Vocab() {
    for (auto t : special::kTokens) push(std::string(t));
  }

  // Ids follow (frequency desc, token asc) after the reserved block.
  static Vocab build(const std::vector<std::vector<std::string>>& streams, std::size_t min_count) {
    if (streams.empty()) throw InvalidArgument("build_vocab: empty corpus");
    if (min_count < 1) throw InvalidArgument("build_vocab: min_count must be >= 1");
    std::map<std::string, std::size_t> counts;
    for (const auto& s : streams)
      for (const auto& w : s) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [token, n] : ranked) {
      if (n >= min_count && !v.contains(token)) v.push(token);
    }
    return v;
  }

  static Vocab build_from_texts(const std::vector<std::string>& texts, std::size_t min_count) {
    std::vector<std::vector<std::string>> streams;
    streams.reserve(texts.size());
    for (const auto& t : texts) streams.push_back(split_words(t));
    return build(streams, min_count);
  }

  // Restores a vocabulary from its id-ordered token list (reserved block
  // included), as stored in checkpoints.
  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < special::kCount) throw DataError("vocabulary shorter than the reserved block");
    for (std::size_t i = 0; i < special::kCount; ++i) {
      if (tokens[i] != special::kTokens[i]) throw DataError("vocabulary reserved block is corrupt");
    }
    Vocab v;
    for (std::size_t i = special::kCount; i < tokens.size(); ++i) {
      if (v.contains(tokens[i])) throw DataError("duplicate vocabulary token " + tokens[i]);
      v.push(tokens[i]);
    }
    return v;
  }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? special::kUnk : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }
  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static bool is_special(TokenId id) { return id < special::kCount; }

 private:
  void push(std::string token) {
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(token));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct Tokenized {
  std::vector<std::string> words;
  std::vector<TokenId> ids;
  // Index of each word's first subtoken in `ids`.
  std::vector<std::size_t> first_subtoken;
};

// Word-level tokenizer: one subtoken per word, out-of-vocabulary words map to
// [UNK]. The alignment is still explicit so callers index hidden states via
// first subtokens.
inline Tokenized tokenize(const std::vector<std::string>& words, const Vocab& vocab) {
  Tokenized out;
  out.words = words;
  out.ids.reserve(words.size());
  out.first_subtoken.reserve(words.size());
  for (const auto& w : words) {
    out.first_subtoken.push_back(out.ids.size());
    out.ids.push_back(vocab.id(w));
  }
  return out;
}

inline Tokenized tokenize(std::string_view text, const Vocab& vocab) {
  return tokenize(split_words(text), vocab);
}

}  // namespace spider::text
