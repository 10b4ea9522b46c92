#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "spider/core/error.hpp"
#include "spider/core/random.hpp"
#include "spider/text/dialogue.hpp"
#include "spider/text/sequence.hpp"

namespace spider::text {

struct MaskedPosition {
  std::size_t position = 0;
  TokenId original = 0;
  friend bool operator==(const MaskedPosition&, const MaskedPosition&) = default;
};

struct MlmCorruption {
  InputSequence sequence;
  std::vector<MaskedPosition> labels;  // sorted by position
};

// BERT-style masking over non-special, non-padding positions: round(rate * n)
// positions are chosen without replacement; of those 80% become [MASK], 10% a
// random non-reserved token, 10% stay unchanged.
inline MlmCorruption apply_mlm_mask(const InputSequence& seq, std::size_t vocab_size, double mask_rate,
                                    std::uint64_t seed) {
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw InvalidArgument("mask_rate must lie in [0, 1]");
  MlmCorruption out{seq, {}};
  // [UNK] is reserved but is ordinary text content, so it stays maskable.
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < seq.length; ++i) {
    const TokenId id = seq.ids[i];
    if (seq.attention_mask[i] && (id == special::kUnk || !Vocab::is_special(id))) eligible.push_back(i);
  }
  const auto count = static_cast<std::size_t>(std::llround(mask_rate * static_cast<double>(eligible.size())));
  Rng rng = make_rng(seed, {0x6d6c6dULL});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + uniform_index(rng, eligible.size() - i);
    std::swap(eligible[i], eligible[j]);
  }
  eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());
  const std::size_t ordinary = vocab_size > special::kCount ? vocab_size - special::kCount : 0;
  for (std::size_t pos : eligible) {
    out.labels.push_back({pos, seq.ids[pos]});
    const double u = uniform_unit(rng);
    if (u < 0.8) {
      out.sequence.ids[pos] = special::kMask;
    } else if (u < 0.9 && ordinary > 0) {
      out.sequence.ids[pos] = static_cast<TokenId>(special::kCount + uniform_index(rng, ordinary));
    }
  }
  return out;
}

// K' = floor(K * delta). The small slack keeps products such as 10 * 0.7
// from landing one below the intended integer through rounding.
inline std::size_t permuted_slot_count(std::size_t k, double delta) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(k) * delta + 1e-9));
}

struct UtterancePermutation {
  InputSequence sequence;
  // order_labels[j]: original window index of the utterance now in window
  // slot j. Empty when the example is skipped (K' < 2).
  std::vector<std::size_t> order_labels;
  std::size_t permuted_count = 0;  // K' (0 when skipped)
  std::size_t window_begin = 0;    // first permuted slot index, K - K'
  bool skipped() const { return order_labels.empty(); }
};

// Shuffles the last K' utterances as token blocks (each with its [EOU]) by a
// permutation drawn uniformly from the non-identity permutations of K'.
inline UtterancePermutation permute_utterances(const InputSequence& seq, double delta, std::uint64_t seed) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw InvalidArgument("delta must lie in [0, 1]");
  const std::size_t k = seq.utterance_count();
  const std::size_t kp = permuted_slot_count(k, delta);
  UtterancePermutation out{seq, {}, 0, k};
  if (kp < 2) return out;

  Rng rng = make_rng(seed, {0x756f72ULL});
  std::vector<std::size_t> perm(kp);
  do {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = kp - 1; i > 0; --i) std::swap(perm[i], perm[uniform_index(rng, i + 1)]);
  } while (std::is_sorted(perm.begin(), perm.end()));

  const std::size_t wb = k - kp;
  InputSequence& s = out.sequence;
  std::size_t cursor = seq.spans[wb].begin;
  std::vector<std::size_t> new_begin(kp);
  for (std::size_t j = 0; j < kp; ++j) {
    const UtteranceSpan src = seq.spans[wb + perm[j]];
    const std::size_t n = src.token_count();
    std::copy_n(seq.ids.begin() + src.begin, n, s.ids.begin() + cursor);
    std::copy_n(seq.token_word.begin() + src.begin, n, s.token_word.begin() + cursor);
    s.spans[wb + j] = {cursor, cursor + n - 1};
    s.eou_positions[wb + j] = cursor + n - 1;
    s.source_index[wb + j] = seq.source_index[wb + perm[j]];
    new_begin[perm[j]] = cursor;
    cursor += n;
  }
  // Triplets travel with their utterance.
  std::vector<std::size_t> new_slot(kp);
  for (std::size_t j = 0; j < kp; ++j) new_slot[perm[j]] = wb + j;
  for (auto& t : s.triplets) {
    if (t.slot < wb) continue;
    const std::size_t orig = t.slot - wb;
    const std::size_t old_begin = seq.spans[t.slot].begin;
    const std::size_t shift_to = new_begin[orig];
    t.subject = t.subject - old_begin + shift_to;
    t.verb = t.verb - old_begin + shift_to;
    t.object = t.object - old_begin + shift_to;
    t.slot = new_slot[orig];
  }
  std::stable_sort(s.triplets.begin(), s.triplets.end(),
                   [](const TripletPositions& a, const TripletPositions& b) { return a.slot < b.slot; });
  out.order_labels = std::move(perm);
  out.permuted_count = kp;
  out.window_begin = wb;
  return out;
}

// The "true response" of a dialogue for NSP pairing: its first positive
// candidate, else its final utterance (which then leaves the context).
struct ResponseSplit {
  std::vector<Utterance> context;
  std::vector<std::string> response;
};

inline ResponseSplit true_response(const DialogueExample& ex) {
  if (auto pos = ex.positive_index()) return {ex.context, split_words(ex.candidates[*pos].text)};
  if (ex.context.size() < 2) throw SamplingError("dialogue " + ex.id + " has no response to pair");
  ResponseSplit out{{ex.context.begin(), ex.context.end() - 1}, split_words(ex.context.back().text)};
  return out;
}

struct NspPair {
  std::vector<Utterance> context;
  std::vector<std::string> response;
  int label = 0;
  std::size_t response_source = 0;  // dialogue index the response came from
};

// With probability 0.5 pairs the context with its own response (label 1),
// else with the response of a uniformly drawn different dialogue (label 0).
// With `own_negatives`, a dialogue that carries label-0 candidates draws its
// negative from those instead. `force_positive` pins the branch.
inline NspPair make_nsp_pair(const std::vector<DialogueExample>& corpus, std::size_t index, std::uint64_t seed,
                             std::optional<bool> force_positive = std::nullopt, bool own_negatives = false) {
  if (corpus.size() < 2) throw SamplingError("NSP pairing needs at least two dialogues");
  if (index >= corpus.size()) throw IndexError("NSP dialogue index out of range");
  Rng rng = make_rng(seed, {0x6e7370ULL});
  const bool positive = force_positive ? *force_positive : uniform_unit(rng) < 0.5;
  ResponseSplit own = true_response(corpus[index]);
  NspPair pair{std::move(own.context), std::move(own.response), 1, index};
  if (!positive && own_negatives) {
    std::vector<std::size_t> negatives;
    const auto& cands = corpus[index].candidates;
    for (std::size_t c = 0; c < cands.size(); ++c)
      if (cands[c].label == 0) negatives.push_back(c);
    if (!negatives.empty() && corpus[index].positive_index()) {
      pair.response = split_words(cands[negatives[uniform_index(rng, negatives.size())]].text);
      pair.label = 0;
      return pair;
    }
  }
  if (!positive) {
    std::size_t other = uniform_index(rng, corpus.size() - 1);
    if (other >= index) ++other;
    pair.response = true_response(corpus[other]).response;
    pair.label = 0;
    pair.response_source = other;
  }
  return pair;
}

}  // namespace spider::text
