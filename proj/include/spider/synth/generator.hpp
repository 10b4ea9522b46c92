#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "spider/core/error.hpp"
#include "spider/core/random.hpp"
#include "spider/text/dialogue.hpp"
#include "spider/text/svo.hpp"

namespace spider::synth {

struct Topic {
  std::vector<std::string> subjects;
  std::vector<std::string> objects;
};

// Closed word sets. Nouns live in topics (disjoint across topics), verbs and
// fillers are shared. Markers are ordinal words, so marker i names position i.
struct GrammarLexicon {
  std::vector<Topic> topics;
  std::vector<std::string> verbs;
  std::vector<std::string> determiners;
  std::vector<std::string> fillers;
  std::vector<std::string> markers;

  static GrammarLexicon standard() {
    GrammarLexicon l;
    l.topics = {
        {{"admin", "kernel", "driver", "module"}, {"patch", "config", "firmware", "boot", "grub", "initrd"}},
        {{"user", "desktop", "panel", "theme"}, {"icon", "font", "wallpaper", "window", "cursor", "launcher"}},
        {{"router", "server", "client", "proxy"}, {"port", "socket", "packet", "address", "gateway", "route"}},
        {{"printer", "scanner", "camera", "webcam"}, {"cable", "image", "photo", "paper", "toner", "lens"}},
        {{"player", "speaker", "mixer", "codec"}, {"song", "volume", "playlist", "album", "track", "stream"}},
        {{"installer", "partition", "drive", "disk"}, {"sector", "backup", "folder", "archive", "mbr", "mountpoint"}},
        {{"browser", "plugin", "extension", "tab"}, {"cookie", "bookmark", "page", "download", "cache", "link"}},
        {{"compiler", "linker", "editor", "debugger"}, {"library", "header", "symbol", "binary", "source", "makefile"}},
    };
    l.verbs = {"installs", "mounts", "updates", "checks", "removes", "loads",
               "configures", "restarts", "opens", "fixes", "builds", "reads"};
    l.determiners = {"the", "a", "my", "your", "this", "that"};
    l.fillers = {"please", "really", "maybe", "now", "today", "again", "quickly", "also", "just",
                 "still", "too", "here", "there", "thanks", "ok", "yes", "so", "well"};
    l.markers = {"first",   "second",   "third",      "fourth",     "fifth",     "sixth",     "seventh",
                 "eighth",  "ninth",    "tenth",      "eleventh",   "twelfth",   "thirteenth", "fourteenth",
                 "fifteenth", "sixteenth", "seventeenth", "eighteenth", "nineteenth", "twentieth"};
    return l;
  }

  // The extractor configuration under which gold annotations and the
  // heuristic agree exactly.
  text::SvoLexicon svo_lexicon() const {
    text::SvoLexicon s;
    s.verbs.insert(verbs.begin(), verbs.end());
    s.determiners = {determiners.begin(), determiners.end()};
    s.non_nouns.insert(fillers.begin(), fillers.end());
    s.non_nouns.insert(markers.begin(), markers.end());
    return s;
  }

  std::set<std::string> nouns() const {
    std::set<std::string> n;
    for (const auto& t : topics) {
      n.insert(t.subjects.begin(), t.subjects.end());
      n.insert(t.objects.begin(), t.objects.end());
    }
    return n;
  }

  void validate() const {
    if (topics.empty() || verbs.empty() || determiners.empty() || fillers.empty()) {
      throw ConfigError("grammar lexicon has an empty word class");
    }
    std::set<std::string> seen;
    auto claim = [&](const std::string& w) {
      if (!seen.insert(w).second) throw ConfigError("lexicon word '" + w + "' appears in two classes");
    };
    for (const auto& t : topics) {
      if (t.subjects.empty() || t.objects.empty()) throw ConfigError("every topic needs subjects and objects");
      for (const auto& w : t.subjects) claim(w);
      for (const auto& w : t.objects) claim(w);
    }
    for (const auto* set : {&verbs, &determiners, &fillers, &markers})
      for (const auto& w : *set) claim(w);
  }
};

// uniform: any other dialogue's response. cross_topic: responses of dialogues
// on a different topic. generic: filler-only chit-chat with no topic nouns,
// which a small encoder can separate from the response alone.
enum class NegativePool { uniform, cross_topic, generic };

struct SynthConfig {
  std::size_t dialogues = 1000;
  double mean_turns = 10;
  std::size_t turn_spread = 5;  // turns ~ mean +- spread, uniform
  double mean_words = 11;       // words per context utterance, marker included
  std::size_t word_spread = 3;
  double cue_strength = 1.0;    // P(turn starts with its ordinal marker)
  double svo_density = 0.5;     // P(turn carries a DET SUBJ VERB DET OBJ clause)
  std::size_t candidates = 2;
  NegativePool negative_pool = NegativePool::cross_topic;
  std::size_t topics = 8;       // how many lexicon topics are used
  double off_topic_noise = 0.0; // P(a context noun is drawn from another topic)
  std::uint64_t seed = 0;

  void validate(const GrammarLexicon& lex) const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
    };
    prob(cue_strength, "cue_strength");
    prob(svo_density, "svo_density");
    prob(off_topic_noise, "off_topic_noise");
    if (dialogues < 2) throw ConfigError("synth needs at least 2 dialogues");
    if (candidates < 2) throw ConfigError("synth needs at least 2 candidates per context");
    if (negative_pool != NegativePool::generic && candidates > dialogues)
      throw ConfigError("more candidates than dialogues to draw negatives from");
    if (!(mean_turns >= 1) || !(mean_words >= 2)) throw ConfigError("mean turns and words must be positive");
    if (static_cast<double>(turn_spread) >= mean_turns) throw ConfigError("turn_spread must be below mean_turns");
    if (static_cast<double>(word_spread) + 2 > mean_words) throw ConfigError("word_spread too large for mean_words");
    if (topics == 0 || topics > lex.topics.size()) {
      throw ConfigError("requested " + std::to_string(topics) + " topics but the lexicon has " +
                        std::to_string(lex.topics.size()));
    }
    const auto max_turns = static_cast<std::size_t>(std::llround(mean_turns)) + turn_spread;
    if (cue_strength > 0 && max_turns > lex.markers.size()) {
      throw ConfigError("up to " + std::to_string(max_turns) + " turns but only " + std::to_string(lex.markers.size()) +
                        " ordinal markers");
    }
    if (negative_pool == NegativePool::cross_topic && topics < 2) {
      throw ConfigError("cross-topic negatives need at least 2 topics");
    }
    lex.validate();
  }
};

namespace detail {

template <typename V>
const auto& pick(Rng& rng, const V& v) {
  return v[uniform_index(rng, v.size())];
}

inline std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

}  // namespace detail

// Generates the corpus. Dialogue i draws from its own seeded stream, so the
// output is a pure function of the config.
inline std::vector<text::DialogueExample> generate(const SynthConfig& c,
                                                   const GrammarLexicon& lex = GrammarLexicon::standard()) {
  c.validate(lex);
  std::vector<text::DialogueExample> out(c.dialogues);
  std::vector<std::size_t> topic_of(c.dialogues);
  std::vector<std::string> responses(c.dialogues);
  const auto base_turns = static_cast<std::int64_t>(std::llround(c.mean_turns));
  const auto base_words = static_cast<std::int64_t>(std::llround(c.mean_words));

  for (std::size_t i = 0; i < c.dialogues; ++i) {
    Rng rng = make_rng(c.seed, {0x6469616cULL, i});
    auto& ex = out[i];
    char id[32];
    std::snprintf(id, sizeof(id), "synth-%06zu", i);
    ex.id = id;
    const std::size_t t = uniform_index(rng, c.topics);
    topic_of[i] = t;
    const Topic& topic = lex.topics[t];
    auto noun = [&](bool subject) -> const std::string& {
      const Topic& from = uniform_unit(rng) < c.off_topic_noise ? lex.topics[uniform_index(rng, c.topics)] : topic;
      return subject ? detail::pick(rng, from.subjects) : detail::pick(rng, from.objects);
    };
    const auto spread = static_cast<std::int64_t>(c.turn_spread);
    const auto turns = static_cast<std::size_t>(
        std::max<std::int64_t>(1, base_turns - spread + static_cast<std::int64_t>(uniform_index(rng, 2 * c.turn_spread + 1))));
    std::vector<std::string> context_nouns;
    for (std::size_t k = 0; k < turns; ++k) {
      const auto wspread = static_cast<std::int64_t>(c.word_spread);
      const auto target = static_cast<std::size_t>(std::max<std::int64_t>(
          2, base_words - wspread + static_cast<std::int64_t>(uniform_index(rng, 2 * c.word_spread + 1))));
      std::vector<std::string> words;
      if (uniform_unit(rng) < c.cue_strength) words.push_back(lex.markers[k]);
      std::optional<std::vector<text::SvoTriplet>> svo;
      if (uniform_unit(rng) < c.svo_density) {
        const std::size_t at = words.size();
        const std::string s = noun(true), o = noun(false);
        for (const auto* w : {&detail::pick(rng, lex.determiners), &s, &detail::pick(rng, lex.verbs),
                              &detail::pick(rng, lex.determiners), &o})
          words.push_back(*w);
        svo = std::vector<text::SvoTriplet>{{at + 1, at + 2, at + 4}};
        context_nouns.push_back(s);
        context_nouns.push_back(o);
      }
      // Verb-free tail: topic nouns and fillers, so no second clause can match.
      while (words.size() < target) {
        if (uniform_unit(rng) < 0.5) {
          words.push_back(noun(uniform_unit(rng) < 0.5));
          context_nouns.push_back(words.back());
        } else {
          words.push_back(detail::pick(rng, lex.fillers));
        }
      }
      ex.context.push_back({k % 2 == 0 ? "A" : "B", detail::join(words), std::move(svo)});
    }
    // The true response echoes nouns from the context plus fresh topic words.
    std::vector<std::string> resp;
    const std::size_t rlen = std::max<std::size_t>(3, static_cast<std::size_t>(base_words / 2));
    if (context_nouns.empty()) context_nouns.push_back(detail::pick(rng, topic.objects));
    resp.push_back(detail::pick(rng, context_nouns));
    while (resp.size() < rlen) {
      const double u = uniform_unit(rng);
      if (u < 0.35) resp.push_back(detail::pick(rng, context_nouns));
      else if (u < 0.6) resp.push_back(detail::pick(rng, topic.objects));
      else resp.push_back(detail::pick(rng, lex.fillers));
    }
    responses[i] = detail::join(resp);
  }

  for (std::size_t i = 0; i < c.dialogues; ++i) {
    Rng rng = make_rng(c.seed, {0x6e6567ULL, i});
    std::vector<text::Candidate> cands{{responses[i], 1}};
    if (c.negative_pool == NegativePool::generic) {
      const std::size_t rlen = std::max<std::size_t>(3, static_cast<std::size_t>(base_words / 2));
      for (std::size_t n = 0; n + 1 < c.candidates; ++n) {
        std::vector<std::string> words;
        while (words.size() < rlen) words.push_back(detail::pick(rng, lex.fillers));
        cands.push_back({detail::join(words), 0});
      }
    } else {
      std::vector<std::size_t> pool;
      for (std::size_t j = 0; j < c.dialogues; ++j) {
        if (j == i) continue;
        if (c.negative_pool == NegativePool::cross_topic && topic_of[j] == topic_of[i]) continue;
        pool.push_back(j);
      }
      if (pool.size() < c.candidates - 1) throw ConfigError("negative pool too small for the candidate count");
      for (std::size_t n = 0; n + 1 < c.candidates; ++n) {
        const std::size_t j = n + uniform_index(rng, pool.size() - n);
        std::swap(pool[n], pool[j]);
        cands.push_back({responses[pool[n]], 0});
      }
    }
    for (std::size_t k = cands.size() - 1; k > 0; --k) std::swap(cands[k], cands[uniform_index(rng, k + 1)]);
    out[i].candidates = std::move(cands);
  }
  return out;
}

// Seeded partition by dialogue. Part sizes are floor(f * n) with the
// remainder handed out to the earliest parts; each part keeps corpus order.
inline std::vector<std::vector<text::DialogueExample>> split(const std::vector<text::DialogueExample>& corpus,
                                                             const std::vector<double>& fractions, std::uint64_t seed) {
  if (fractions.empty()) throw InvalidArgument("split needs at least one fraction");
  double sum = 0;
  for (double f : fractions) {
    if (!(f > 0)) throw InvalidArgument("split fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("split fractions must sum to 1");
  const std::size_t n = corpus.size();
  std::vector<std::size_t> sizes;
  std::size_t assigned = 0;
  for (double f : fractions) {
    sizes.push_back(static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)));
    assigned += sizes.back();
  }
  for (std::size_t i = 0; assigned < n; i = (i + 1) % sizes.size(), ++assigned) ++sizes[i];

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, {0x73706c6974ULL});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  std::vector<std::vector<text::DialogueExample>> parts(fractions.size());
  std::size_t cursor = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    std::vector<std::size_t> members(order.begin() + cursor, order.begin() + cursor + sizes[p]);
    std::sort(members.begin(), members.end());
    for (std::size_t m : members) parts[p].push_back(corpus[m]);
    cursor += sizes[p];
  }
  return parts;
}

// Corpus statistics, with rows named like the usual dataset tables.
inline nlohmann::json corpus_stats(const std::vector<text::DialogueExample>& corpus,
                                   const GrammarLexicon& lex = GrammarLexicon::standard()) {
  const auto nouns = lex.nouns();
  const std::set<std::string> markers(lex.markers.begin(), lex.markers.end());
  double turns = 0, words = 0, utterances = 0, candidates = 0, positives = 0, svo = 0, cued = 0;
  double pos_shared = 0, pos_total = 0, neg_shared = 0, neg_total = 0;
  for (const auto& ex : corpus) {
    turns += static_cast<double>(ex.context.size());
    candidates += static_cast<double>(ex.candidates.size());
    positives += static_cast<double>(ex.positive_count());
    std::set<std::string> ctx;
    for (const auto& u : ex.context) {
      const auto w = text::split_words(u.text);
      words += static_cast<double>(w.size());
      utterances += 1;
      svo += u.svo && !u.svo->empty();
      cued += !w.empty() && markers.count(w.front());
      for (const auto& x : w)
        if (nouns.count(x)) ctx.insert(x);
    }
    for (const auto& c : ex.candidates) {
      bool shared = false;
      for (const auto& x : text::split_words(c.text)) shared = shared || ctx.count(x);
      (c.label ? pos_shared : neg_shared) += shared;
      (c.label ? pos_total : neg_total) += 1;
    }
  }
  const double n = std::max<double>(1, static_cast<double>(corpus.size()));
  const double u = std::max(1.0, utterances);
  return {
      {"# context-response pairs", static_cast<std::size_t>(candidates)},
      {"# dialogues", corpus.size()},
      {"# candidates per context", candidates / n},
      {"# positive candidates per context", positives / n},
      {"Avg # turns per context", turns / n},
      {"Avg # words per utterance", words / u},
      {"Fraction of turns with a gold SVO triplet", svo / u},
      {"Fraction of turns with an order marker", cued / u},
      {"Positive shares a context noun", pos_total > 0 ? pos_shared / pos_total : 0.0},
      {"Negative shares a context noun", neg_total > 0 ? neg_shared / neg_total : 0.0},
  };
}

}  // namespace spider::synth
