#include <algorithm>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gtest/gtest.h"

#include "spider/core/random.hpp"
#include "spider/text/corruption.hpp"
#include "spider/text/dialogue.hpp"
#include "spider/text/sequence.hpp"
#include "spider/text/svo.hpp"
#include "spider/text/vocab.hpp"

using namespace spider::text;

namespace {

DialogueExample make_dialogue(const std::string& id, const std::vector<std::string>& turns,
                              const std::vector<std::pair<std::string, int>>& candidates) {
  DialogueExample ex;
  ex.id = id;
  for (std::size_t i = 0; i < turns.size(); ++i) ex.context.push_back({i % 2 ? "B" : "A", turns[i], std::nullopt});
  for (const auto& [t, l] : candidates) ex.candidates.push_back({t, l});
  return ex;
}

std::string repeat_words(const std::string& stem, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + stem + std::to_string(i);
  return s;
}

Vocab vocab_for(const std::vector<DialogueExample>& corpus) { return Vocab::build(word_streams(corpus), 1); }

// Rebuilds the pre-permutation token sequence using only the order labels.
std::vector<TokenId> restore_by_labels(const UtterancePermutation& p) {
  const auto& s = p.sequence;
  if (p.skipped()) return s.ids;
  std::vector<TokenId> out(s.ids.begin(), s.ids.begin() + s.spans[p.window_begin].begin);
  for (std::size_t original = 0; original < p.permuted_count; ++original) {
    const auto slot = std::find(p.order_labels.begin(), p.order_labels.end(), original) - p.order_labels.begin();
    const auto& span = s.spans[p.window_begin + slot];
    out.insert(out.end(), s.ids.begin() + span.begin, s.ids.begin() + span.eou + 1);
  }
  out.insert(out.end(), s.ids.begin() + s.spans.back().eou + 1, s.ids.end());
  return out;
}

}  // namespace

TEST(Vocab, MinCountThreshold) {
  Vocab v = Vocab::build_from_texts({"a a b"}, 2);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_FALSE(v.contains("b"));
}

TEST(Vocab, ReservedTokensOccupyLowestIds) {
  Vocab v = Vocab::build_from_texts({"zebra"}, 1);
  EXPECT_EQ(v.id("[PAD]"), special::kPad);
  EXPECT_EQ(v.id("[UNK]"), special::kUnk);
  EXPECT_EQ(v.id("[CLS]"), special::kCls);
  EXPECT_EQ(v.id("[SEP]"), special::kSep);
  EXPECT_EQ(v.id("[EOU]"), special::kEou);
  EXPECT_EQ(v.id("[MASK]"), special::kMask);
  EXPECT_EQ(v.id("zebra"), special::kCount);
}

TEST(Vocab, FrequencyThenLexicographicOrder) {
  Vocab v = Vocab::build_from_texts({"x y", "y"}, 1);
  EXPECT_LT(v.id("y"), v.id("x"));
  Vocab tie = Vocab::build_from_texts({"b a"}, 1);
  EXPECT_LT(tie.id("a"), tie.id("b"));
}

TEST(Vocab, EmptyCorpusAndRoundTrip) {
  EXPECT_THROW(Vocab::build({}, 1), spider::InvalidArgument);
  Vocab v = Vocab::build_from_texts({"q r r s s s"}, 1);
  Vocab back = Vocab::from_tokens(v.tokens());
  EXPECT_EQ(back.tokens(), v.tokens());
  for (const auto& t : v.tokens()) EXPECT_EQ(v.token(v.id(t)), t);
}

TEST(Tokenize, Basic) {
  Vocab v = Vocab::build_from_texts({"hello world"}, 1);
  Tokenized t = tokenize("Hello world", v);
  EXPECT_EQ(t.words, (std::vector<std::string>{"hello", "world"}));
  EXPECT_EQ(t.first_subtoken, (std::vector<std::size_t>{0, 1}));
  EXPECT_TRUE(tokenize("", v).ids.empty());
}

TEST(Tokenize, UnknownWord) {
  Vocab v = Vocab::build_from_texts({"hello"}, 1);
  Tokenized t = tokenize("hello stranger", v);
  EXPECT_EQ(t.ids[1], special::kUnk);
  EXPECT_EQ(t.first_subtoken, (std::vector<std::size_t>{0, 1}));
}

TEST(AssembleSequence, HandAssembledLayout) {
  auto ex = make_dialogue("d", {"hi", "how are you"}, {{"fine", 1}});
  Vocab v = vocab_for({ex});
  InputSequence s = assemble_sequence(ex, 0, v, {.max_len = 32});
  std::vector<TokenId> expected = {special::kCls, v.id("fine"), special::kSep, v.id("hi"), special::kEou,
                                   v.id("how"),   v.id("are"),  v.id("you"),   special::kEou, special::kSep};
  expected.resize(32, special::kPad);
  EXPECT_EQ(s.ids, expected);
  EXPECT_EQ(s.eou_positions, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(s.length, 10u);
  EXPECT_EQ(s.segment_ids[1], 0);
  EXPECT_EQ(s.segment_ids[3], 1);
  EXPECT_EQ(s.attention_mask[9], 1);
  EXPECT_EQ(s.attention_mask[10], 0);
}

TEST(AssembleSequence, UtteranceCap) {
  std::vector<std::string> turns;
  for (int i = 0; i < 25; ++i) turns.push_back("turn" + std::to_string(i));
  auto ex = make_dialogue("d", turns, {{"ok", 1}});
  Vocab v = vocab_for({ex});
  InputSequence s = assemble_sequence(ex, 0, v, {.max_len = 128, .max_utterances = 20});
  ASSERT_EQ(s.utterance_count(), 20u);
  EXPECT_EQ(s.source_index.front(), 5u);
  EXPECT_EQ(s.ids[s.spans[0].begin], v.id("turn5"));
  EXPECT_EQ(s.context_turns, 25u);
}

TEST(AssembleSequence, LongestFirstTrimming) {
  auto ex = make_dialogue("d", {repeat_words("w", 10), repeat_words("v", 2)}, {{"r", 1}});
  Vocab v = vocab_for({ex});
  // Untrimmed: 3 + 1 + (10 + 1) + (2 + 1) = 18 tokens; overflow of 3.
  InputSequence s = assemble_sequence(ex, 0, v, {.max_len = 15});
  EXPECT_EQ(s.length, 15u);
  EXPECT_EQ(s.spans[0].token_count() - 1, 7u);
  EXPECT_EQ(s.spans[1].token_count() - 1, 2u);
  EXPECT_EQ(s.ids[s.spans[0].begin + 6], v.id("w6"));
}

TEST(AssembleSequence, CapacityError) {
  auto ex = make_dialogue("d", {"a"}, {{repeat_words("r", 9), 1}});
  Vocab v = vocab_for({ex});
  EXPECT_THROW(assemble_sequence(ex, 0, v, {.max_len = 8}), spider::CapacityError);
  EXPECT_THROW(assemble_sequence(ex, 3, v, {.max_len = 32}), spider::IndexError);
}

TEST(AssembleSequence, LengthAlwaysMaxLenAndTripletsOnFirstSubtokens) {
  SvoLexicon lex;
  lex.verbs = {"chased", "ate"};
  spider::Rng rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> turns;
    const std::size_t k = 1 + spider::uniform_index(rng, 12);
    for (std::size_t i = 0; i < k; ++i) {
      std::string t = spider::uniform_index(rng, 2) ? "the cat chased the dog" : "some words here";
      t += " " + repeat_words("x", spider::uniform_index(rng, 6));
      turns.push_back(t);
    }
    auto ex = make_dialogue("d", turns, {{repeat_words("r", 1 + spider::uniform_index(rng, 4)), 1}});
    Vocab v = vocab_for({ex});
    const std::size_t max_len = 10 + spider::uniform_index(rng, 60);
    InputSequence s = assemble_sequence(ex, 0, v, {.max_len = max_len, .lexicon = &lex});
    ASSERT_EQ(s.ids.size(), max_len);
    EXPECT_EQ(s.ids[0], special::kCls);
    EXPECT_EQ(std::count(s.ids.begin(), s.ids.end(), special::kSep), 2);
    for (std::size_t p : s.eou_positions) EXPECT_EQ(s.ids[p], special::kEou);
    for (const auto& t : s.triplets) {
      for (std::size_t p : {t.subject, t.verb, t.object}) {
        ASSERT_LT(p, s.length);
        EXPECT_GE(s.token_word[p], 0);
        EXPECT_GE(p, s.spans[t.slot].begin);
        EXPECT_LT(p, s.spans[t.slot].eou);
      }
      EXPECT_EQ(s.ids[t.verb], v.id("chased"));
    }
  }
}

TEST(ExtractSvo, HeuristicPattern) {
  SvoLexicon lex;
  lex.verbs = {"chased"};
  auto t = extract_svo(split_words("the cat chased the dog"), lex);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0], (SvoTriplet{1, 2, 4}));
  EXPECT_TRUE(extract_svo(split_words("hello there"), lex).empty());
  // One triplet per clause.
  auto two = extract_svo(split_words("cat chased dog and the dog chased a cat"), lex);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_EQ(two[1], (SvoTriplet{5, 6, 8}));
}

TEST(ExtractSvo, GoldPassthroughAndRangeError) {
  Utterance u{"A", "x y z", std::vector<SvoTriplet>{{0, 1, 2}}};
  auto t = extract_svo(u, nullptr, "d/u0");
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0], (SvoTriplet{0, 1, 2}));
  Utterance bad{"A", "x y", std::vector<SvoTriplet>{{0, 1, 2}}};
  try {
    extract_svo(bad, nullptr, "d/u3");
    FAIL();
  } catch (const spider::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("d/u3"), std::string::npos);
  }
}

TEST(MlmMask, ZeroRate) {
  auto ex = make_dialogue("d", {"a b c", "d e"}, {{"f", 1}});
  Vocab v = vocab_for({ex});
  auto s = assemble_sequence(ex, 0, v, {.max_len = 16});
  auto m = apply_mlm_mask(s, v.size(), 0.0, 1);
  EXPECT_TRUE(m.labels.empty());
  EXPECT_EQ(m.sequence.ids, s.ids);
}

TEST(MlmMask, NeverTouchesSpecialPositionsAndCountsExactly) {
  // 99 context words + 1 response word = 100 maskable positions.
  auto ex100 = make_dialogue("d", {repeat_words("w", 99)}, {{"r", 1}});
  Vocab v100 = vocab_for({ex100});
  auto s100 = assemble_sequence(ex100, 0, v100, {.max_len = 128});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto m = apply_mlm_mask(s100, v100.size(), 0.15, seed);
    EXPECT_EQ(m.labels.size(), 15u);
    auto again = apply_mlm_mask(s100, v100.size(), 0.15, seed);
    EXPECT_EQ(m.labels, again.labels);
    EXPECT_EQ(m.sequence.ids, again.sequence.ids);
    for (const auto& l : m.labels) {
      EXPECT_FALSE(l.original == special::kCls || l.original == special::kSep || l.original == special::kEou ||
                   l.original == special::kPad);
      EXPECT_EQ(l.original, s100.ids[l.position]);
    }
    for (std::size_t i = 0; i < s100.ids.size(); ++i) {
      if (Vocab::is_special(s100.ids[i])) EXPECT_EQ(m.sequence.ids[i], s100.ids[i]);
    }
  }
}

TEST(MlmMask, EightyTenTenSplit) {
  auto ex = make_dialogue("d", {repeat_words("w", 99)}, {{"r", 1}});
  Vocab v = vocab_for({ex});
  auto s = assemble_sequence(ex, 0, v, {.max_len = 128});
  std::size_t masked = 0, kept = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    auto m = apply_mlm_mask(s, v.size(), 0.15, seed);
    for (const auto& l : m.labels) {
      ++total;
      masked += m.sequence.ids[l.position] == special::kMask;
      kept += m.sequence.ids[l.position] == l.original;
    }
  }
  EXPECT_NEAR(static_cast<double>(masked) / total, 0.8, 0.02);
  // "unchanged" plus random draws that happen to hit the original token.
  EXPECT_NEAR(static_cast<double>(kept) / total, 0.1, 0.02);
}

TEST(PermuteUtterances, RatioFixesWindow) {
  std::vector<std::string> turns;
  for (int i = 0; i < 10; ++i) turns.push_back("step" + std::to_string(i) + " " + repeat_words("t", i % 3));
  auto ex = make_dialogue("d", turns, {{"r", 1}});
  Vocab v = vocab_for({ex});
  auto s = assemble_sequence(ex, 0, v, {.max_len = 64});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto p = permute_utterances(s, 0.4, seed);
    EXPECT_EQ(p.permuted_count, 4u);
    EXPECT_EQ(p.window_begin, 6u);
    const std::size_t prefix_end = s.spans[6].begin;
    EXPECT_TRUE(std::equal(s.ids.begin(), s.ids.begin() + prefix_end, p.sequence.ids.begin()));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(p.sequence.source_index[i], i);
    std::vector<std::size_t> sorted = p.order_labels;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_FALSE(std::is_sorted(p.order_labels.begin(), p.order_labels.end()));
  }
}

TEST(PermuteUtterances, ZeroRatioIsIdentity) {
  auto ex = make_dialogue("d", {"a", "b c", "d"}, {{"r", 1}});
  Vocab v = vocab_for({ex});
  auto s = assemble_sequence(ex, 0, v, {.max_len = 16});
  auto p = permute_utterances(s, 0.0, 9);
  EXPECT_TRUE(p.skipped());
  EXPECT_EQ(p.permuted_count, 0u);
  EXPECT_EQ(p.sequence.ids, s.ids);
}

TEST(PermuteUtterances, PairIsAlwaysSwapped) {
  auto ex = make_dialogue("d", {"a", "b", "c", "d e", "f"}, {{"r", 1}});
  Vocab v = vocab_for({ex});
  auto s = assemble_sequence(ex, 0, v, {.max_len = 24});
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto p = permute_utterances(s, 0.5, seed);
    ASSERT_EQ(p.permuted_count, 2u);
    EXPECT_EQ(p.order_labels, (std::vector<std::size_t>{1, 0}));
    EXPECT_EQ(p.sequence.ids[p.sequence.spans[3].begin], v.id("f"));
  }
}

TEST(PermuteUtterances, RoundTripAndTripletsMoveWithUtterances) {
  SvoLexicon lex;
  lex.verbs = {"ate"};
  spider::Rng rng(23);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 1 + spider::uniform_index(rng, 20);
    std::vector<std::string> turns;
    for (std::size_t i = 0; i < k; ++i) {
      turns.push_back(spider::uniform_index(rng, 2) ? "cat" + std::to_string(i) + " ate fish" : repeat_words("u", 1 + i % 4));
    }
    auto ex = make_dialogue("d", turns, {{"r", 1}});
    Vocab v = vocab_for({ex});
    auto s = assemble_sequence(ex, 0, v, {.max_len = 128, .lexicon = &lex});
    const double delta = spider::uniform_unit(rng);
    auto p = permute_utterances(s, delta, trial);
    EXPECT_EQ(restore_by_labels(p), s.ids);
    for (const auto& t : p.sequence.triplets) {
      EXPECT_EQ(p.sequence.ids[t.verb], v.id("ate"));
      EXPECT_EQ(p.sequence.token_word[t.subject], 0);
      EXPECT_GE(t.subject, p.sequence.spans[t.slot].begin);
    }
    auto again = permute_utterances(s, delta, trial);
    EXPECT_EQ(again.sequence.ids, p.sequence.ids);
    EXPECT_EQ(again.order_labels, p.order_labels);
  }
}

TEST(Nsp, ForcedBranches) {
  std::vector<DialogueExample> corpus = {make_dialogue("a", {"x"}, {{"own", 1}, {"neg", 0}}),
                                         make_dialogue("b", {"y"}, {{"other", 1}})};
  auto pos = make_nsp_pair(corpus, 0, 1, true);
  EXPECT_EQ(pos.label, 1);
  EXPECT_EQ(pos.response, (std::vector<std::string>{"own"}));
  auto neg = make_nsp_pair(corpus, 0, 1, false);
  EXPECT_EQ(neg.label, 0);
  EXPECT_NE(neg.response_source, 0u);
  EXPECT_EQ(neg.response, (std::vector<std::string>{"other"}));
  // Labeled negatives of the same dialogue are reused when asked for.
  auto own = make_nsp_pair(corpus, 0, 1, false, true);
  EXPECT_EQ(own.label, 0);
  EXPECT_EQ(own.response_source, 0u);
  EXPECT_EQ(own.response, (std::vector<std::string>{"neg"}));
  auto fallback = make_nsp_pair(corpus, 1, 1, false, true);
  EXPECT_EQ(fallback.response, (std::vector<std::string>{"own"}));
}

TEST(Nsp, BalancedAndSeeded) {
  std::vector<DialogueExample> corpus;
  for (int i = 0; i < 5; ++i) corpus.push_back(make_dialogue(std::to_string(i), {"x", "y"}, {}));
  std::size_t positives = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) positives += make_nsp_pair(corpus, seed % 5, seed).label;
  EXPECT_NEAR(positives / 10000.0, 0.5, 0.02);
  EXPECT_EQ(make_nsp_pair(corpus, 2, 77).response, make_nsp_pair(corpus, 2, 77).response);
  // Without candidates the final utterance is the true response.
  auto p = make_nsp_pair(corpus, 1, 0, true);
  EXPECT_EQ(p.context.size(), 1u);
  EXPECT_EQ(p.response, (std::vector<std::string>{"y"}));
}

TEST(Nsp, SingleDialogueCorpus) {
  std::vector<DialogueExample> corpus = {make_dialogue("a", {"x"}, {{"r", 1}})};
  EXPECT_THROW(make_nsp_pair(corpus, 0, 0), spider::SamplingError);
}

TEST(CorpusFormat, ParsesAndIgnoresUnknownFields) {
  std::istringstream in(
      R"({"id":"d1","context":[{"speaker":"A","text":"the cat chased the dog","svo":[1,2,4],"extra":5}],"candidates":[{"text":"ok","label":1}],"meta":"x"})"
      "\n\n"
      R"({"id":"d2","context":[{"speaker":"B","text":"hi","svo":[[0,0,0]]}],"candidates":[]})"
      "\n");
  auto r = read_corpus(in);
  ASSERT_EQ(r.examples.size(), 2u);
  EXPECT_EQ((*r.examples[0].context[0].svo)[0], (SvoTriplet{1, 2, 4}));
  EXPECT_EQ(r.examples[0].candidates[0].label, 1);
  std::ostringstream out;
  write_corpus(out, r.examples);
  std::istringstream back(out.str());
  auto r2 = read_corpus(back);
  std::ostringstream out2;
  write_corpus(out2, r2.examples);
  EXPECT_EQ(out.str(), out2.str());
}

TEST(CorpusFormat, MalformedLines) {
  const std::string text =
      "{\"id\":\"ok\",\"context\":[{\"text\":\"a\"}]}\n"
      "not json\n"
      "{\"id\":\"bad\",\"context\":[{\"text\":\"a b\",\"svo\":[0,1,5]}]}\n";
  std::istringstream strict(text);
  try {
    read_corpus(strict);
    FAIL();
  } catch (const spider::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  std::istringstream lenient(text);
  auto r = read_corpus(lenient, true);
  EXPECT_EQ(r.examples.size(), 1u);
  ASSERT_EQ(r.skipped.size(), 2u);
  EXPECT_NE(r.skipped[1].find("line 3"), std::string::npos);
}

TEST(CorpusFormat, MultipleChoiceAllowsOnePositive) {
  auto ex = make_dialogue("m", {"a"}, {{"x", 1}, {"y", 1}});
  EXPECT_NO_THROW(validate(ex));
  EXPECT_THROW(validate(ex, true), spider::DataError);
}
