#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spider/core/error.hpp"
#include "spider/text/dialogue.hpp"

namespace spider::eval {

struct RankingInstance {
  std::string id;
  std::vector<double> scores;
  std::vector<int> labels;
  std::optional<std::size_t> turns;
  std::optional<double> utterance_length;

  std::size_t size() const { return scores.size(); }
  std::size_t positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }

  void validate() const {
    if (scores.size() < 2) throw DataError("instance " + id + ": needs at least 2 candidates");
    if (labels.size() != scores.size()) throw DataError("instance " + id + ": scores and labels differ in length");
    for (double s : scores)
      if (!std::isfinite(s)) throw DataError("instance " + id + ": non-finite score");
    for (int l : labels)
      if (l != 0 && l != 1) throw DataError("instance " + id + ": labels must be 0 or 1");
  }
};

// Candidate indexes by descending score; ties keep the lower index first.
inline std::vector<std::size_t> ranking(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// 1-based ranks of the positives, ascending.
inline std::vector<std::size_t> positive_ranks(const RankingInstance& inst) {
  const auto order = ranking(inst.scores);
  std::vector<std::size_t> ranks;
  for (std::size_t r = 0; r < order.size(); ++r)
    if (inst.labels[order[r]] == 1) ranks.push_back(r + 1);
  return ranks;
}

inline double recall_at_k(const RankingInstance& inst, std::size_t k) {
  if (k < 1 || k > inst.size()) {
    throw InvalidArgument("k = " + std::to_string(k) + " outside [1, " + std::to_string(inst.size()) + "]");
  }
  const auto ranks = positive_ranks(inst);
  return !ranks.empty() && ranks.front() <= k ? 1.0 : 0.0;
}

inline double average_precision(const RankingInstance& inst) {
  const auto ranks = positive_ranks(inst);
  if (ranks.empty()) throw InvalidArgument("average precision of an instance without positives");
  double ap = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) ap += static_cast<double>(i + 1) / static_cast<double>(ranks[i]);
  return ap / static_cast<double>(ranks.size());
}

inline double reciprocal_rank(const RankingInstance& inst) {
  const auto ranks = positive_ranks(inst);
  if (ranks.empty()) throw InvalidArgument("reciprocal rank of an instance without positives");
  return 1.0 / static_cast<double>(ranks.front());
}

inline double precision_at_1(const RankingInstance& inst) { return inst.labels[ranking(inst.scores).front()] == 1; }

struct RecallSpec {
  std::size_t n = 10;
  std::size_t k = 1;
  std::string name() const { return "R" + std::to_string(n) + "@" + std::to_string(k); }
  friend bool operator==(const RecallSpec&, const RecallSpec&) = default;
};

inline std::vector<RecallSpec> default_recall_specs() { return {{2, 1}, {10, 1}, {10, 2}, {10, 5}}; }

struct MetricSummary {
  std::size_t count = 0;     // scored instances
  std::size_t excluded = 0;  // instances without any positive
  double map = 0, mrr = 0, p_at_1 = 0;
  // R_n@k over the instances that have exactly n candidates; a spec with no
  // such instance is omitted.
  std::map<std::string, double> recall;
  std::map<std::string, std::size_t> recall_count;
};

inline MetricSummary compute_metrics(const std::vector<RankingInstance>& instances,
                                     const std::vector<RecallSpec>& specs = default_recall_specs()) {
  MetricSummary m;
  std::map<std::string, double> hits;
  for (const auto& inst : instances) {
    inst.validate();
    if (inst.positives() == 0) {
      ++m.excluded;
      continue;
    }
    ++m.count;
    m.map += average_precision(inst);
    m.mrr += reciprocal_rank(inst);
    m.p_at_1 += precision_at_1(inst);
    for (const auto& s : specs) {
      if (s.k < 1 || s.k > s.n) throw InvalidArgument("recall spec " + s.name() + " has k outside [1, n]");
      if (inst.size() != s.n) continue;
      hits[s.name()] += recall_at_k(inst, s.k);
      ++m.recall_count[s.name()];
    }
  }
  if (m.count > 0) {
    const double n = static_cast<double>(m.count);
    m.map /= n;
    m.mrr /= n;
    m.p_at_1 /= n;
  }
  for (const auto& [name, c] : m.recall_count) m.recall[name] = hits[name] / static_cast<double>(c);
  return m;
}

// Half-open ranges [edges[i], edges[i+1]); the last range is open-ended.
struct BucketSpec {
  std::vector<double> turn_edges{0, 4, 8, 12, 16, 20};
  std::vector<double> length_edges{0, 5, 10, 15, 20};
};

inline std::vector<std::string> bucket_labels(const std::vector<double>& edges) {
  std::vector<std::string> labels;
  auto fmt = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) labels.push_back(fmt(edges[i]) + "-" + fmt(edges[i + 1]));
  labels.back() = fmt(edges[edges.size() - 2]) + "+";
  return labels;
}

inline std::string bucket_of(std::optional<double> v, const std::vector<double>& edges) {
  if (!v) return "unknown";
  const auto labels = bucket_labels(edges);
  for (std::size_t i = 0; i + 1 < edges.size(); ++i)
    if (*v < edges[i + 1]) return labels[i];
  return labels.back();
}

struct MetricReport {
  MetricSummary overall;
  std::vector<std::pair<std::string, MetricSummary>> by_turns;
  std::vector<std::pair<std::string, MetricSummary>> by_length;
};

namespace detail {

inline std::vector<std::pair<std::string, MetricSummary>> bucketize(
    const std::vector<RankingInstance>& instances, const std::vector<double>& edges,
    const std::function<std::optional<double>(const RankingInstance&)>& key, const std::vector<RecallSpec>& specs) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end())) {
    throw InvalidArgument("bucket edges must be sorted with at least two entries");
  }
  std::map<std::string, std::vector<RankingInstance>> groups;
  for (const auto& inst : instances) groups[bucket_of(key(inst), edges)].push_back(inst);
  std::vector<std::pair<std::string, MetricSummary>> out;
  for (const auto& label : bucket_labels(edges)) out.emplace_back(label, compute_metrics(groups[label], specs));
  if (groups.count("unknown")) out.emplace_back("unknown", compute_metrics(groups["unknown"], specs));
  return out;
}

}  // namespace detail

inline MetricReport build_report(const std::vector<RankingInstance>& instances, const BucketSpec& buckets = {},
                                 const std::vector<RecallSpec>& specs = default_recall_specs()) {
  if (instances.empty()) throw InvalidArgument("cannot evaluate an empty dataset");
  MetricReport r;
  r.overall = compute_metrics(instances, specs);
  r.by_turns = detail::bucketize(
      instances, buckets.turn_edges,
      [](const RankingInstance& i) -> std::optional<double> {
        if (!i.turns) return std::nullopt;
        return static_cast<double>(*i.turns);
      },
      specs);
  r.by_length = detail::bucketize(
      instances, buckets.length_edges, [](const RankingInstance& i) { return i.utterance_length; }, specs);
  return r;
}

// Scores every candidate of every dialogue with `scorer` and reports metrics
// overall and per turn-count / utterance-length bucket.
using Scorer = std::function<std::vector<double>(const text::DialogueExample&)>;

inline std::vector<RankingInstance> score_dataset(const Scorer& scorer, const std::vector<text::DialogueExample>& data) {
  std::vector<RankingInstance> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    RankingInstance inst;
    inst.id = ex.id;
    inst.scores = scorer(ex);
    if (inst.scores.size() != ex.candidates.size()) throw ShapeError("scorer returned the wrong number of scores");
    for (const auto& c : ex.candidates) inst.labels.push_back(c.label);
    inst.turns = ex.context.size();
    inst.utterance_length = ex.mean_utterance_length();
    out.push_back(std::move(inst));
  }
  return out;
}

inline MetricReport evaluate_model(const Scorer& scorer, const std::vector<text::DialogueExample>& data,
                                   const BucketSpec& buckets = {},
                                   const std::vector<RecallSpec>& specs = default_recall_specs()) {
  if (data.empty()) throw InvalidArgument("cannot evaluate an empty dataset");
  return build_report(score_dataset(scorer, data), buckets, specs);
}

// ---------------------------------------------------------------------------
// Prediction files and report output

inline std::vector<RankingInstance> read_predictions(std::istream& in) {
  std::vector<RankingInstance> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RankingInstance inst;
      inst.id = j.contains("id") ? j.at("id").get<std::string>() : std::to_string(no);
      inst.scores = j.at("scores").get<std::vector<double>>();
      inst.labels = j.at("labels").get<std::vector<int>>();
      if (j.contains("turns")) inst.turns = j.at("turns").get<std::size_t>();
      if (j.contains("utterance_length")) inst.utterance_length = j.at("utterance_length").get<double>();
      inst.validate();
      out.push_back(std::move(inst));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::json to_json(const RankingInstance& i) {
  nlohmann::json j{{"id", i.id}, {"scores", i.scores}, {"labels", i.labels}};
  if (i.turns) j["turns"] = *i.turns;
  if (i.utterance_length) j["utterance_length"] = *i.utterance_length;
  return j;
}

inline nlohmann::json to_json(const MetricSummary& m) {
  nlohmann::json j{{"count", m.count}, {"excluded", m.excluded}, {"MAP", m.map}, {"MRR", m.mrr}, {"P@1", m.p_at_1}};
  for (const auto& [name, v] : m.recall) j[name] = v;
  return j;
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j{{"overall", to_json(r.overall)}};
  for (const auto& [label, m] : r.by_turns) j["by_turns"][label] = to_json(m);
  for (const auto& [label, m] : r.by_length) j["by_length"][label] = to_json(m);
  return j;
}

// One "key value" pair per line.
inline std::string to_text(const MetricReport& r) {
  std::ostringstream out;
  out.precision(6);
  auto block = [&](const std::string& prefix, const MetricSummary& m) {
    out << prefix << "count " << m.count << "\n";
    out << prefix << "excluded " << m.excluded << "\n";
    if (m.count == 0) return;
    for (const auto& [name, v] : m.recall) out << prefix << name << " " << std::fixed << v << "\n";
    out << prefix << "MAP " << std::fixed << m.map << "\n";
    out << prefix << "MRR " << std::fixed << m.mrr << "\n";
    out << prefix << "P@1 " << std::fixed << m.p_at_1 << "\n";
  };
  block("", r.overall);
  for (const auto& [label, m] : r.by_turns) block("turns[" + label + "].", m);
  for (const auto& [label, m] : r.by_length) block("length[" + label + "].", m);
  return out.str();
}

// Headline metric for model selection: R@1 on binary data (R_n@1 equals P@1
// for any n), MRR on multiple choice.
inline double selection_metric(const MetricSummary& m, bool multiple_choice) {
  return multiple_choice ? m.mrr : m.p_at_1;
}

}  // namespace spider::eval
