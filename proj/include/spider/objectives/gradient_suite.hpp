#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spider/encoder/encoder.hpp"
#include "spider/numerics/gradcheck.hpp"
#include "spider/objectives/losses.hpp"
#include "spider/text/corruption.hpp"
#include "spider/text/svo.hpp"

namespace spider::objectives {

struct GradientSuiteOptions {
  std::size_t seeds = 20;
  std::uint64_t base_seed = 1;
  std::size_t hidden = 16;
  std::size_t layers = 2;
  std::size_t coords_per_param = 6;
  double tolerance = 1e-4;
  // Larger than the training init so the nonlinearities are exercised.
  double init_std = 0.5;
};

struct GradientSuiteResult {
  std::string loss;
  std::uint64_t seed = 0;
  nn::GradCheckReport report;
};

inline const std::vector<std::string>& gradient_suite_losses() {
  static const std::vector<std::string> names{"mlm", "nsp", "uor", "sbr", "dm_binary", "dm_multichoice"};
  return names;
}

namespace detail {

inline text::DialogueExample suite_dialogue(Rng& rng) {
  static const std::vector<std::string> nouns{"cat", "dog", "disk", "kernel", "user", "file", "port", "driver"};
  static const std::vector<std::string> verbs{"sees", "mounts", "loads", "likes"};
  auto pick = [&](const std::vector<std::string>& v) { return v[uniform_index(rng, v.size())]; };
  text::DialogueExample ex;
  ex.id = "g";
  for (int u = 0; u < 4; ++u) {
    std::string t = "the " + pick(nouns) + " " + pick(verbs) + " a " + pick(nouns);
    if (uniform_index(rng, 2)) t += " " + pick(nouns);
    ex.context.push_back({u % 2 ? "B" : "A", t, std::nullopt});
  }
  for (int c = 0; c < 3; ++c) ex.candidates.push_back({pick(nouns) + " " + pick(verbs) + " " + pick(nouns), c == 0});
  return ex;
}

}  // namespace detail

// End-to-end finite-difference checks of every objective through a small
// encoder in double precision, one fresh model and input per seed.
inline std::vector<GradientSuiteResult> run_gradient_suite(
    const GradientSuiteOptions& o, const std::vector<std::string>& losses = gradient_suite_losses()) {
  std::vector<GradientSuiteResult> results;
  text::SvoLexicon lexicon;
  lexicon.verbs = {"sees", "mounts", "loads", "likes"};
  for (std::size_t s = 0; s < o.seeds; ++s) {
    const std::uint64_t seed = o.base_seed + s;
    Rng rng = make_rng(seed, {0x7375697465ULL});
    const auto ex = detail::suite_dialogue(rng);
    const auto vocab = text::Vocab::build(text::word_streams({ex}), 1);

    encoder::EncoderConfig ec;
    ec.vocab_size = vocab.size();
    ec.hidden = o.hidden;
    ec.layers = o.layers;
    ec.heads = 2;
    ec.ffn = 2 * o.hidden;
    ec.max_position = 40;
    ec.init_std = o.init_std;
    ec.seed = seed;
    nn::ParameterStore<double> params;
    encoder::init_encoder_parameters(params, ec);
    init_head_parameters(params, {o.hidden, vocab.size(), 6, o.init_std, seed});
    // Non-trivial layer-norm and bias values.
    for (auto& [name, t] : params)
      if (name.find("bias") != std::string::npos || name.find("gain") != std::string::npos)
        for (auto& v : t.mutable_data()) v += 0.1 * standard_normal(rng);

    const text::AssembleOptions ao{.max_len = 40, .max_utterances = 20, .lexicon = &lexicon};
    std::vector<text::InputSequence> seqs;
    for (std::size_t c = 0; c < ex.candidates.size(); ++c) seqs.push_back(text::assemble_sequence(ex, c, vocab, ao));
    const auto masked = text::apply_mlm_mask(seqs[0], vocab.size(), 0.3, seed);
    const auto perm = text::permute_utterances(seqs[0], 1.0, seed);
    const int label = static_cast<int>(seed % 2);

    auto enc = [&](const text::InputSequence& q) { return encoder::encode(q, params, ec); };
    std::map<std::string, std::function<nn::Tensor<double>()>> fns{
        {"mlm", [&] { return mlm_loss(enc(masked.sequence), masked.labels, params).value; }},
        {"nsp", [&] { return nsp_loss(encoder::pooled_representation(enc(seqs[0]), params), label, params).value; }},
        {"uor",
         [&] {
           const auto h = enc(perm.sequence);
           const auto reps = nn::slice_rows(encoder::utterance_representations(h, perm.sequence), perm.window_begin,
                                            perm.window_begin + perm.permuted_count);
           return uor_loss(reps, perm.order_labels, params).value;
         }},
        {"sbr", [&] { return sbr_loss(enc(seqs[0]), seqs[0].triplets, seqs[0].attention_mask).value; }},
        {"dm_binary",
         [&] {
           const auto pooled = encoder::pooled_representation(enc(seqs[0]), params);
           return dm_loss_binary(matching_probability(pooled, params), label).value;
         }},
        {"dm_multichoice",
         [&] {
           std::vector<nn::Tensor<double>> scores;
           for (const auto& q : seqs) scores.push_back(matching_logit(encoder::pooled_representation(enc(q), params), params));
           return dm_loss_multichoice(nn::concat_cols(scores), 0).value;
         }},
    };
    nn::GradCheckOptions gc;
    gc.tolerance = o.tolerance;
    gc.max_coords_per_param = o.coords_per_param;
    gc.sample_seed = seed;
    for (const auto& name : losses) {
      auto it = fns.find(name);
      if (it == fns.end()) throw InvalidArgument("unknown loss in gradient suite: " + name);
      results.push_back({name, seed, nn::grad_check(it->second, params, gc)});
    }
  }
  return results;
}

}  // namespace spider::objectives
