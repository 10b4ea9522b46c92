#pragma once

#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spider/core/error.hpp"
#include "spider/text/vocab.hpp"

namespace spider::text {

// Word indexes (within one utterance) of a subject-verb-object triple.
struct SvoTriplet {
  std::size_t subject = 0;
  std::size_t verb = 0;
  std::size_t object = 0;
  friend bool operator==(const SvoTriplet&, const SvoTriplet&) = default;
};

struct Utterance {
  std::string speaker;
  std::string text;
  // Gold annotation, when the record carries one.
  std::optional<std::vector<SvoTriplet>> svo;
};

struct Candidate {
  std::string text;
  int label = 0;
};

struct DialogueExample {
  std::string id;
  std::vector<Utterance> context;
  std::vector<Candidate> candidates;

  // First candidate labeled 1, if any.
  std::optional<std::size_t> positive_index() const {
    for (std::size_t i = 0; i < candidates.size(); ++i)
      if (candidates[i].label == 1) return i;
    return std::nullopt;
  }

  std::size_t positive_count() const {
    std::size_t n = 0;
    for (const auto& c : candidates) n += c.label == 1;
    return n;
  }

  // Mean word count over context utterances.
  double mean_utterance_length() const {
    if (context.empty()) return 0.0;
    std::size_t words = 0;
    for (const auto& u : context) words += split_words(u.text).size();
    return static_cast<double>(words) / static_cast<double>(context.size());
  }
};

inline std::string utterance_label(const DialogueExample& ex, std::size_t index) {
  return ex.id + "/u" + std::to_string(index);
}

// Structural checks: K >= 1, labels binary, annotation indexes inside their
// utterance. `multiple_choice` additionally requires at most one positive.
inline void validate(const DialogueExample& ex, bool multiple_choice = false) {
  if (ex.context.empty()) throw DataError("dialogue " + ex.id + " has an empty context");
  for (std::size_t i = 0; i < ex.context.size(); ++i) {
    const auto& u = ex.context[i];
    if (!u.svo) continue;
    const std::size_t n = split_words(u.text).size();
    for (const auto& t : *u.svo) {
      if (t.subject >= n || t.verb >= n || t.object >= n) {
        throw DataError("SVO annotation index out of range in utterance " + utterance_label(ex, i));
      }
    }
  }
  for (const auto& c : ex.candidates) {
    if (c.label != 0 && c.label != 1) throw DataError("dialogue " + ex.id + " has a non-binary label");
  }
  if (multiple_choice && ex.positive_count() > 1) {
    throw DataError("multiple-choice dialogue " + ex.id + " has more than one positive");
  }
}

inline nlohmann::json to_json(const DialogueExample& ex) {
  nlohmann::json j;
  j["id"] = ex.id;
  j["context"] = nlohmann::json::array();
  for (const auto& u : ex.context) {
    nlohmann::json ju;
    ju["speaker"] = u.speaker;
    ju["text"] = u.text;
    if (u.svo) {
      ju["svo"] = nlohmann::json::array();
      for (const auto& t : *u.svo) ju["svo"].push_back({t.subject, t.verb, t.object});
    }
    j["context"].push_back(std::move(ju));
  }
  j["candidates"] = nlohmann::json::array();
  for (const auto& c : ex.candidates) j["candidates"].push_back({{"text", c.text}, {"label", c.label}});
  return j;
}

namespace detail {

inline SvoTriplet triplet_from_json(const nlohmann::json& t) {
  if (!t.is_array() || t.size() != 3) throw DataError("svo triplet must be [subject, verb, object]");
  for (const auto& v : t)
    if (!v.is_number_integer() || v.get<long long>() < 0) throw DataError("svo index must be a non-negative integer");
  return {t[0].get<std::size_t>(), t[1].get<std::size_t>(), t[2].get<std::size_t>()};
}

}  // namespace detail

// Accepts "svo" either as one [s, v, o] triple or as a list of triples.
// Unknown fields are ignored.
inline DialogueExample dialogue_from_json(const nlohmann::json& j) {
  DialogueExample ex;
  if (!j.is_object()) throw DataError("record is not a JSON object");
  if (!j.contains("id") || !j["id"].is_string()) throw DataError("record lacks a string id");
  ex.id = j["id"].get<std::string>();
  if (!j.contains("context") || !j["context"].is_array()) throw DataError("record " + ex.id + " lacks a context array");
  for (const auto& ju : j["context"]) {
    if (!ju.is_object() || !ju.contains("text") || !ju["text"].is_string()) {
      throw DataError("record " + ex.id + " has an utterance without text");
    }
    Utterance u;
    u.speaker = ju.value("speaker", std::string{});
    u.text = ju["text"].get<std::string>();
    if (ju.contains("svo") && !ju["svo"].is_null()) {
      const auto& s = ju["svo"];
      if (!s.is_array()) throw DataError("record " + ex.id + " has a malformed svo field");
      std::vector<SvoTriplet> triplets;
      if (!s.empty() && s[0].is_number()) {
        triplets.push_back(detail::triplet_from_json(s));
      } else {
        for (const auto& t : s) triplets.push_back(detail::triplet_from_json(t));
      }
      u.svo = std::move(triplets);
    }
    ex.context.push_back(std::move(u));
  }
  if (j.contains("candidates")) {
    if (!j["candidates"].is_array()) throw DataError("record " + ex.id + " has a malformed candidates field");
    for (const auto& jc : j["candidates"]) {
      if (!jc.is_object() || !jc.contains("text") || !jc["text"].is_string()) {
        throw DataError("record " + ex.id + " has a candidate without text");
      }
      Candidate c;
      c.text = jc["text"].get<std::string>();
      const auto& label = jc.value("label", nlohmann::json(0));
      if (!label.is_number_integer()) throw DataError("record " + ex.id + " has a non-integer label");
      c.label = label.get<int>();
      ex.candidates.push_back(std::move(c));
    }
  }
  validate(ex);
  return ex;
}

struct CorpusReadResult {
  std::vector<DialogueExample> examples;
  // "line N: reason" for each skipped line (permissive mode only).
  std::vector<std::string> skipped;
};

// Line-delimited JSON corpus. Blank lines are ignored. Without `permissive`
// the first malformed line raises DataError naming its line number.
inline CorpusReadResult read_corpus(std::istream& in, bool permissive = false) {
  CorpusReadResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      result.examples.push_back(dialogue_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      std::string msg = "line " + std::to_string(line_no) + ": " + e.what();
      if (!permissive) throw DataError(msg);
      result.skipped.push_back(std::move(msg));
    }
  }
  return result;
}

inline CorpusReadResult read_corpus_file(const std::string& path, bool permissive = false) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file " + path);
  return read_corpus(in, permissive);
}

inline void write_corpus(std::ostream& out, const std::vector<DialogueExample>& examples) {
  for (const auto& ex : examples) out << to_json(ex).dump() << '\n';
}

inline void write_corpus_file(const std::string& path, const std::vector<DialogueExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file " + path);
  write_corpus(out, examples);
}

// Every word stream in the corpus (utterances and candidates), for
// vocabulary construction.
inline std::vector<std::vector<std::string>> word_streams(const std::vector<DialogueExample>& corpus) {
  std::vector<std::vector<std::string>> streams;
  for (const auto& ex : corpus) {
    for (const auto& u : ex.context) streams.push_back(split_words(u.text));
    for (const auto& c : ex.candidates) streams.push_back(split_words(c.text));
  }
  return streams;
}

}  // namespace spider::text
