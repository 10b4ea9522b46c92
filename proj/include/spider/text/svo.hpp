#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "spider/core/error.hpp"
#include "spider/text/dialogue.hpp"

namespace spider::text {

// Closed word classes driving the shallow SVO matcher.
struct SvoLexicon {
  std::set<std::string, std::less<>> verbs;
  std::set<std::string, std::less<>> determiners{"the", "a", "an", "this", "that", "my", "your", "our", "their", "his", "her", "its"};
  // Words that may never fill a noun slot (discourse markers, fillers).
  std::set<std::string, std::less<>> non_nouns;

  bool is_verb(std::string_view w) const { return verbs.count(w) != 0; }
  bool is_determiner(std::string_view w) const { return determiners.count(w) != 0; }
  bool is_noun(std::string_view w) const {
    return !is_verb(w) && !is_determiner(w) && non_nouns.count(w) == 0;
  }
};

// Pattern: [DET] NOUN VERB [DET] NOUN, with the verb drawn from the lexicon.
// Scans left to right; after a match the next clause starts past the object,
// so each clause yields at most one triplet.
inline std::vector<SvoTriplet> extract_svo(const std::vector<std::string>& words, const SvoLexicon& lexicon) {
  std::vector<SvoTriplet> out;
  std::size_t v = 1;
  while (v + 1 < words.size()) {
    if (lexicon.is_verb(words[v]) && lexicon.is_noun(words[v - 1])) {
      std::size_t o = v + 1;
      if (lexicon.is_determiner(words[o])) ++o;
      if (o < words.size() && lexicon.is_noun(words[o])) {
        out.push_back({v - 1, v, o});
        v = o + 2;
        continue;
      }
    }
    ++v;
  }
  return out;
}

// Gold annotations pass through unchanged (after a range check); otherwise
// the heuristic runs when a lexicon is supplied.
inline std::vector<SvoTriplet> extract_svo(const Utterance& u, const SvoLexicon* lexicon,
                                           std::string_view utterance_id = "") {
  const auto words = split_words(u.text);
  if (u.svo) {
    for (const auto& t : *u.svo) {
      if (t.subject >= words.size() || t.verb >= words.size() || t.object >= words.size()) {
        throw DataError("SVO annotation index out of range in utterance " + std::string(utterance_id));
      }
    }
    return *u.svo;
  }
  if (lexicon == nullptr) return {};
  return extract_svo(words, *lexicon);
}

}  // namespace spider::text
