#pragma once

#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "spider/encoder/checkpoint.hpp"
#include "spider/encoder/encoder.hpp"
#include "spider/evaluation/metrics.hpp"
#include "spider/harness/config.hpp"
#include "spider/objectives/losses.hpp"
#include "spider/text/corruption.hpp"
#include "spider/text/sequence.hpp"
#include "spider/text/svo.hpp"

namespace spider::harness {

// Encoder, task heads and the vocabulary they were built against.
struct Model {
  text::Vocab vocab;
  encoder::EncoderConfig encoder;
  std::size_t order_classes = 20;
  nn::ParameterStore<float> params;
};

inline encoder::EncoderConfig encoder_config(const RunConfig& c, std::size_t vocab_size) {
  encoder::EncoderConfig e;
  e.vocab_size = vocab_size;
  e.hidden = c.hidden;
  e.layers = c.layers;
  e.heads = c.heads;
  e.ffn = c.ffn;
  e.max_position = c.max_len;
  e.dropout = c.dropout;
  e.init_std = c.init_std;
  e.seed = c.seed;
  return e;
}

inline Model new_model(const RunConfig& c, text::Vocab vocab) {
  Model m;
  m.vocab = std::move(vocab);
  m.encoder = encoder_config(c, m.vocab.size());
  m.encoder.validate(c.max_len);
  m.order_classes = c.order_classes;
  encoder::init_encoder_parameters(m.params, m.encoder);
  objectives::init_head_parameters(m.params, {c.hidden, m.vocab.size(), c.order_classes, c.init_std, c.seed});
  return m;
}

inline bool is_head(const std::string& name) { return name.rfind("head.", 0) == 0; }

inline nlohmann::json model_header(const Model& m) {
  return {{"format", "spider-checkpoint"},
          {"encoder", encoder::to_json(m.encoder)},
          {"order_classes", m.order_classes},
          {"vocab", m.vocab.tokens()}};
}

inline Model model_from_checkpoint(const encoder::Checkpoint& ck) {
  Model m;
  try {
    m.encoder = encoder::encoder_config_from_json(ck.header.at("encoder"));
    m.order_classes = ck.header.at("order_classes").get<std::size_t>();
    m.vocab = text::Vocab::from_tokens(ck.header.at("vocab").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header incomplete: ") + e.what());
  }
  m.params = ck.params.clone();
  return m;
}

// Starts a fine-tuning model from a post-trained checkpoint: architecture and
// vocabulary come from the checkpoint and must agree with the run config.
// Heads are re-initialized unless keep_heads is set.
inline Model model_for_finetuning(const RunConfig& c, const encoder::Checkpoint& ck) {
  const Model loaded = model_from_checkpoint(ck);
  const auto& e = loaded.encoder;
  if (e.hidden != c.hidden || e.layers != c.layers || e.heads != c.heads || e.ffn != c.ffn ||
      e.max_position != c.max_len || loaded.order_classes != c.order_classes) {
    throw VersionError("checkpoint architecture " + encoder::to_json(e).dump() +
                       " does not match the run configuration");
  }
  Model m = new_model(c, loaded.vocab);
  std::size_t copied = 0;
  for (auto& [name, t] : m.params) {
    if (is_head(name) && !c.keep_heads) continue;
    if (!loaded.params.contains(name)) throw VersionError("checkpoint lacks parameter " + name);
    const auto& src = loaded.params.get(name);
    if (src.rows() != t.rows() || src.cols() != t.cols()) throw VersionError("shape mismatch for parameter " + name);
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    ++copied;
  }
  if (copied == 0) throw VersionError("no parameters copied from checkpoint");
  return m;
}

// ---------------------------------------------------------------------------
// Inputs

struct InputBuilder {
  const Model* model = nullptr;
  text::AssembleOptions options;
  text::SvoLexicon lexicon;

  InputBuilder(const Model& m, const RunConfig& c) : model(&m) {
    options.max_len = c.max_len;
    options.max_utterances = c.max_utterances;
    if (!c.svo_verbs.empty()) {
      lexicon.verbs.insert(c.svo_verbs.begin(), c.svo_verbs.end());
      options.lexicon = &lexicon;
    }
  }
  InputBuilder(const InputBuilder& o) : model(o.model), options(o.options), lexicon(o.lexicon) {
    if (o.options.lexicon) options.lexicon = &lexicon;
  }
  InputBuilder& operator=(const InputBuilder&) = delete;

  text::InputSequence candidate(const text::DialogueExample& ex, std::size_t c) const {
    return text::assemble_sequence(ex, c, model->vocab, options);
  }
  text::InputSequence pair(const std::vector<std::string>& response, const std::vector<text::Utterance>& context,
                           const std::string& id) const {
    return text::assemble_sequence(response, context, model->vocab, options, id);
  }
};

// ---------------------------------------------------------------------------
// Evaluation-mode scoring and probes

template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) f(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<eval::RankingInstance> score_corpus(const Model& m, const RunConfig& c,
                                                       const std::vector<text::DialogueExample>& data) {
  const InputBuilder builder(m, c);
  std::vector<eval::RankingInstance> out(data.size());
  parallel_for(data.size(), c.threads, [&](std::size_t i) {
    nn::NoGradGuard guard;
    const auto& ex = data[i];
    auto& inst = out[i];
    inst.id = ex.id;
    for (std::size_t k = 0; k < ex.candidates.size(); ++k) {
      const auto h = encoder::encode(builder.candidate(ex, k), m.params, m.encoder);
      inst.scores.push_back(objectives::matching_logit(encoder::pooled_representation(h, m.params), m.params).item());
      inst.labels.push_back(ex.candidates[k].label);
    }
    inst.turns = ex.context.size();
    inst.utterance_length = ex.mean_utterance_length();
  });
  return out;
}

inline eval::MetricReport evaluate(const Model& m, const RunConfig& c, const std::vector<text::DialogueExample>& data) {
  return eval::build_report(score_corpus(m, c, data), {}, c.eval_pairs);
}

struct ProbeResult {
  double value = 0;
  std::size_t count = 0;
};

// Per-slot order accuracy of the restoration head on permuted held-out
// contexts (each dialogue paired with its true response).
inline ProbeResult uor_probe(const Model& m, const RunConfig& c, const std::vector<text::DialogueExample>& data,
                             double delta, std::uint64_t seed) {
  const InputBuilder builder(m, c);
  std::vector<std::size_t> correct(data.size(), 0), total(data.size(), 0);
  parallel_for(data.size(), c.threads, [&](std::size_t i) {
    nn::NoGradGuard guard;
    const auto split = text::true_response(data[i]);
    const auto perm = text::permute_utterances(builder.pair(split.response, split.context, data[i].id), delta,
                                               derive_seed(seed, {0x70726f6265ULL, i}));
    if (perm.skipped()) return;
    const auto h = encoder::encode(perm.sequence, m.params, m.encoder);
    const auto reps = nn::slice_rows(encoder::utterance_representations(h, perm.sequence), perm.window_begin,
                                     perm.window_begin + perm.permuted_count);
    correct[i] = objectives::uor_correct(reps, perm.order_labels, m.params);
    total[i] = perm.permuted_count;
  });
  ProbeResult r;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hits += correct[i], r.count += total[i];
  r.value = r.count ? static_cast<double>(hits) / static_cast<double>(r.count) : 0.0;
  return r;
}

// Mean cos(h_s + h_v, h_o) over every triplet of the held-out contexts.
inline ProbeResult sbr_probe(const Model& m, const RunConfig& c, const std::vector<text::DialogueExample>& data) {
  const InputBuilder builder(m, c);
  std::vector<double> sums(data.size(), 0.0);
  std::vector<std::size_t> counts(data.size(), 0);
  parallel_for(data.size(), c.threads, [&](std::size_t i) {
    nn::NoGradGuard guard;
    const auto split = text::true_response(data[i]);
    const auto seq = builder.pair(split.response, split.context, data[i].id);
    if (seq.triplets.empty()) return;
    const auto h = encoder::encode(seq, m.params, m.encoder);
    counts[i] = seq.triplets.size();
    sums[i] = objectives::mean_backbone_cosine(h, seq.triplets, seq.attention_mask) * static_cast<double>(counts[i]);
  });
  ProbeResult r;
  double s = 0;
  for (std::size_t i = 0; i < data.size(); ++i) s += sums[i], r.count += counts[i];
  r.value = r.count ? s / static_cast<double>(r.count) : 0.0;
  return r;
}

}  // namespace spider::harness
