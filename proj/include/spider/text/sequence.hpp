#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spider/core/error.hpp"
#include "spider/text/dialogue.hpp"
#include "spider/text/svo.hpp"
#include "spider/text/vocab.hpp"

namespace spider::text {

// Token range of one utterance: words occupy [begin, eou), the [EOU] marker
// sits at `eou`.
struct UtteranceSpan {
  std::size_t begin = 0;
  std::size_t eou = 0;
  std::size_t token_count() const { return eou + 1 - begin; }
  friend bool operator==(const UtteranceSpan&, const UtteranceSpan&) = default;
};

// Sequence positions (first subtokens) of one SVO triplet.
struct TripletPositions {
  std::size_t subject = 0;
  std::size_t verb = 0;
  std::size_t object = 0;
  std::size_t slot = 0;  // utterance slot that owns the triplet
  friend bool operator==(const TripletPositions&, const TripletPositions&) = default;
};

// [CLS] R [SEP] U1 [EOU] ... UK [EOU] [SEP] [PAD]...
struct InputSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> attention_mask;
  std::vector<std::uint8_t> segment_ids;
  std::vector<std::size_t> eou_positions;
  std::vector<UtteranceSpan> spans;
  // Word index of each token within its response/utterance; -1 for special
  // and padding tokens.
  std::vector<std::int32_t> token_word;
  std::vector<TripletPositions> triplets;
  // Original context index of the utterance occupying each slot.
  std::vector<std::size_t> source_index;
  std::size_t length = 0;  // non-padding tokens
  std::size_t response_length = 0;
  std::size_t context_turns = 0;  // K before the utterance cap

  std::size_t max_len() const { return ids.size(); }
  std::size_t utterance_count() const { return eou_positions.size(); }

  // Copy with trailing padding removed.
  InputSequence unpadded() const {
    InputSequence s = *this;
    s.ids.resize(length);
    s.attention_mask.resize(length);
    s.segment_ids.resize(length);
    s.token_word.resize(length);
    return s;
  }

  // Copy extended with padding up to `new_len`.
  InputSequence padded_to(std::size_t new_len) const {
    if (new_len < ids.size()) throw CapacityError("padded_to: target shorter than sequence");
    InputSequence s = *this;
    s.ids.resize(new_len, special::kPad);
    s.attention_mask.resize(new_len, 0);
    s.segment_ids.resize(new_len, 0);
    s.token_word.resize(new_len, -1);
    return s;
  }
};

struct AssembleOptions {
  std::size_t max_len = 128;
  std::size_t max_utterances = 20;
  // Heuristic SVO extraction for unannotated utterances; null disables it.
  const SvoLexicon* lexicon = nullptr;
};

inline std::size_t minimum_capacity(std::size_t response_words) { return response_words + 3; }

// Lays out response and context, keeping the most recent `max_utterances`
// utterances and trimming "longest first" (one word at a time from the tail
// of the currently longest utterance; ties go to the older one) until the
// sequence fits. Utterances emptied by trimming are dropped oldest first only
// if the [EOU] markers alone still overflow.
inline InputSequence assemble_sequence(const std::vector<std::string>& response_words,
                                       std::span<const Utterance> context, const Vocab& vocab,
                                       const AssembleOptions& options, std::string_view dialogue_id = "") {
  if (options.max_len < 8) throw CapacityError("max_len must be at least 8");
  const std::size_t fixed = minimum_capacity(response_words.size());
  if (fixed > options.max_len) {
    throw CapacityError("max_len " + std::to_string(options.max_len) + " cannot hold a response of " +
                        std::to_string(response_words.size()) + " words");
  }

  const std::size_t first = context.size() > options.max_utterances ? context.size() - options.max_utterances : 0;
  struct Slot {
    std::size_t source;
    Tokenized tok;
    std::vector<SvoTriplet> svo;
    std::size_t keep;
  };
  std::vector<Slot> slots;
  for (std::size_t i = first; i < context.size(); ++i) {
    Slot s{i, tokenize(context[i].text, vocab), {}, 0};
    s.svo = extract_svo(context[i], options.lexicon, std::string(dialogue_id) + "/u" + std::to_string(i));
    s.keep = s.tok.words.size();
    slots.push_back(std::move(s));
  }

  std::size_t total = fixed;
  for (const auto& s : slots) total += s.keep + 1;
  while (total > options.max_len) {
    std::size_t longest = slots.size();
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (slots[i].keep > 0 && (longest == slots.size() || slots[i].keep > slots[longest].keep)) longest = i;
    }
    if (longest < slots.size()) {
      --slots[longest].keep;
    } else {
      slots.erase(slots.begin());
    }
    --total;
  }

  InputSequence seq;
  seq.context_turns = context.size();
  seq.response_length = response_words.size();
  auto push = [&](TokenId id, std::uint8_t segment, std::int32_t word) {
    seq.ids.push_back(id);
    seq.attention_mask.push_back(1);
    seq.segment_ids.push_back(segment);
    seq.token_word.push_back(word);
  };
  push(special::kCls, 0, -1);
  const Tokenized response = tokenize(response_words, vocab);
  for (std::size_t w = 0; w < response.ids.size(); ++w) push(response.ids[w], 0, static_cast<std::int32_t>(w));
  push(special::kSep, 0, -1);
  for (std::size_t si = 0; si < slots.size(); ++si) {
    const auto& s = slots[si];
    const std::size_t begin = seq.ids.size();
    for (std::size_t w = 0; w < s.keep; ++w) push(s.tok.ids[w], 1, static_cast<std::int32_t>(w));
    const std::size_t eou = seq.ids.size();
    push(special::kEou, 1, -1);
    seq.spans.push_back({begin, eou});
    seq.eou_positions.push_back(eou);
    seq.source_index.push_back(s.source);
    for (const auto& t : s.svo) {
      if (t.subject < s.keep && t.verb < s.keep && t.object < s.keep) {
        seq.triplets.push_back({begin + s.tok.first_subtoken[t.subject], begin + s.tok.first_subtoken[t.verb],
                                begin + s.tok.first_subtoken[t.object], si});
      }
    }
  }
  push(special::kSep, 1, -1);
  seq.length = seq.ids.size();
  return seq.padded_to(options.max_len);
}

inline InputSequence assemble_sequence(const DialogueExample& example, std::size_t candidate_index,
                                       const Vocab& vocab, const AssembleOptions& options) {
  if (candidate_index >= example.candidates.size()) {
    throw IndexError("candidate index " + std::to_string(candidate_index) + " out of range for dialogue " +
                     example.id);
  }
  return assemble_sequence(split_words(example.candidates[candidate_index].text), example.context, vocab,
                           options, example.id);
}

}  // namespace spider::text
