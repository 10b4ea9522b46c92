#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spider/encoder/checkpoint.hpp"
#include "spider/harness/config.hpp"
#include "spider/harness/model.hpp"
#include "spider/numerics/optimizer.hpp"
#include "spider/objectives/losses.hpp"
#include "spider/text/corruption.hpp"

namespace spider::harness {

namespace fs = std::filesystem;
using objectives::LossBreakdown;

struct StepRecord {
  std::size_t step = 0;  // 1-based
  std::size_t epoch = 0;
  LossBreakdown loss;
  double wall_ms = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  nlohmann::json metrics;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

inline nlohmann::json to_json(const StepRecord& r) {
  return {{"type", "step"}, {"step", r.step}, {"epoch", r.epoch}, {"loss", objectives::to_json(r.loss)}, {"wall_ms", r.wall_ms}};
}

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"type", "epoch"}, {"epoch", r.epoch}, {"step", r.step}, {"metrics", r.metrics}};
}

// Reads a train log back (step and epoch lines).
inline TrainLog read_train_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open train log " + path);
  TrainLog log;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.at("type") == "step") {
        log.steps.push_back({j.at("step").get<std::size_t>(), j.at("epoch").get<std::size_t>(),
                             objectives::loss_breakdown_from_json(j.at("loss")), j.at("wall_ms").get<double>()});
      } else {
        log.epochs.push_back({j.at("epoch").get<std::size_t>(), j.at("step").get<std::size_t>(), j.at("metrics")});
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Run directories

inline fs::path make_run_dir(const RunConfig& c, const std::string& name) {
  if (!c.run_dir.empty()) {
    fs::create_directories(c.run_dir);
    return c.run_dir;
  }
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  const std::string base = std::string(stamp) + "-" + name + "-seed" + std::to_string(c.seed);
  fs::path dir = fs::path(c.run_root) / base;
  for (int n = 2; fs::exists(dir); ++n) dir = fs::path(c.run_root) / (base + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// Write-then-rename, so an interrupted save never clobbers the last good file.
inline void save_checkpoint_atomic(const fs::path& path, const encoder::Checkpoint& ck) {
  const fs::path tmp = path.string() + ".tmp";
  encoder::save_checkpoint(tmp.string(), ck);
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Data

struct Corpora {
  std::vector<text::DialogueExample> train, valid, test;
};

inline std::vector<text::DialogueExample> load_corpus(const std::string& path) {
  auto r = text::read_corpus_file(path);
  if (r.examples.empty()) throw DataError("corpus " + path + " is empty");
  return std::move(r.examples);
}

inline Corpora load_corpora(const RunConfig& c) {
  Corpora d;
  d.train = load_corpus(c.train);
  if (!c.valid.empty()) d.valid = load_corpus(c.valid);
  if (!c.test.empty()) d.test = load_corpus(c.test);
  return d;
}

inline text::Vocab build_vocab(const RunConfig& c, const std::vector<text::DialogueExample>& train) {
  return text::Vocab::build(text::word_streams(train), c.vocab_min_count);
}

// ---------------------------------------------------------------------------
// Training loop

struct ExampleResult {
  nn::Tensor<float> total;
  LossBreakdown parts;
};

using ExampleFn = std::function<ExampleResult(std::size_t item, std::uint64_t seed)>;

struct LoopState {
  nn::OptimizerState<float> optimizer;
  std::size_t step = 0;
};

struct LoopHooks {
  std::function<LossBreakdown(LossBreakdown)> combine;
  // Called after every epoch, and once more if max_steps stops training early.
  std::function<void(std::size_t epoch, std::size_t step)> on_epoch_end;
  std::function<void(const LoopState&)> save_resumable;
  std::ostream* log = nullptr;
};

inline bool finite(const LossBreakdown& b) {
  for (double v : {b.mlm, b.nsp, b.uor, b.sbr, b.dm, b.total})
    if (!std::isfinite(v)) return false;
  return true;
}

// Mini-batch AdamW over `items` examples. The epoch order and every
// example's randomness derive from (seed, epoch, item), so a run resumed from
// step s replays steps s+1.. exactly.
inline void train_loop(Model& m, const RunConfig& c, std::size_t items, const ExampleFn& example,
                       const LoopHooks& hooks, LoopState& state, TrainLog& log) {
  if (items == 0) throw DataError("no training examples");
  const std::size_t spe = (items + c.batch_size - 1) / c.batch_size;
  const std::size_t epochs = c.effective_epochs();
  const auto t0 = std::chrono::steady_clock::now();
  auto capped = [&] { return c.max_steps > 0 && state.step >= c.max_steps; };

  for (std::size_t e = 0; e < epochs && !capped(); ++e) {
    if (state.step >= (e + 1) * spe) continue;
    std::vector<std::size_t> order(items);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(c.seed, {0x65706f6368ULL, e});
    for (std::size_t i = items; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

    for (std::size_t b = state.step - e * spe; b < spe && !capped(); ++b) {
      m.params.zero_grad();
      LossBreakdown parts;
      const std::size_t end = std::min(items, (b + 1) * c.batch_size);
      for (std::size_t k = b * c.batch_size; k < end; ++k) {
        const std::size_t item = order[k];
        ExampleResult r = example(item, derive_seed(c.seed, {0x6578ULL, e, item}));
        if (!std::isfinite(r.total.item()) || !finite(r.parts)) {
          throw NumericError("non-finite loss at step " + std::to_string(state.step + 1) + " (example " +
                             std::to_string(item) + ")");
        }
        r.total.backward();
        parts.accumulate(r.parts);
      }
      const LossBreakdown logged = hooks.combine(parts);
      nn::adamw_step(m.params, state.optimizer);
      ++state.step;
      StepRecord rec{state.step, e, logged,
                     std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
      if (hooks.log) *hooks.log << to_json(rec).dump() << '\n' << std::flush;
      log.steps.push_back(rec);
      if (c.checkpoint_every > 0 && state.step % c.checkpoint_every == 0 && hooks.save_resumable) {
        hooks.save_resumable(state);
      }
    }
    if (hooks.save_resumable) hooks.save_resumable(state);
    if (hooks.on_epoch_end) hooks.on_epoch_end(e, state.step);
  }
}

// ---------------------------------------------------------------------------
// Regimes

struct RunResult {
  fs::path dir;
  TrainLog log;
  fs::path checkpoint;
  std::optional<eval::MetricReport> report;  // held-out report of the selected model
  std::string report_split;
  std::size_t best_epoch = 0;
  double best_metric = 0;
  Model model;
};

namespace detail {

inline nlohmann::json run_header(const Model& m, const RunConfig& c, std::size_t step) {
  auto h = model_header(m);
  h["regime"] = to_string(c.regime);
  h["step"] = step;
  h["seed"] = c.seed;
  h["config"] = run_schema().snapshot(c);
  return h;
}

inline encoder::Checkpoint make_checkpoint(const Model& m, const RunConfig& c, const LoopState* state) {
  encoder::Checkpoint ck;
  ck.header = run_header(m, c, state ? state->step : 0);
  ck.params = m.params.clone();
  if (state) {
    ck.has_optimizer = true;
    ck.optimizer = state->optimizer;
  }
  return ck;
}

inline LoopState initial_state(const RunConfig& c) {
  LoopState s;
  s.optimizer.hyper.lr = c.lr;
  s.optimizer.hyper.weight_decay = c.weight_decay;
  return s;
}

// Loads a resumable checkpoint into the model and loop state.
inline void resume_from(const RunConfig& c, Model& m, LoopState& state) {
  const auto ck = encoder::load_checkpoint(c.resume);
  if (!ck.has_optimizer) throw VersionError("checkpoint " + c.resume + " carries no optimizer state");
  if (ck.header.value("regime", std::string{}) != to_string(c.regime)) {
    throw VersionError("checkpoint " + c.resume + " was written by a different regime");
  }
  Model loaded = model_from_checkpoint(ck);
  if (!(loaded.encoder == m.encoder) || loaded.vocab.tokens() != m.vocab.tokens()) {
    throw VersionError("checkpoint " + c.resume + " does not match the run configuration");
  }
  if (m.params.assign_from(loaded.params) != m.params.count()) {
    throw VersionError("checkpoint " + c.resume + " lacks parameters");
  }
  state.optimizer = ck.optimizer;
  state.step = ck.header.at("step").get<std::size_t>();
}

struct RunFiles {
  fs::path dir;
  std::ofstream log;
  explicit RunFiles(const RunConfig& c, const std::string& name) : dir(make_run_dir(c, name)) {
    write_text(dir / "config.txt", run_schema().snapshot(c));
    log.open(dir / "train_log.jsonl", std::ios::binary);
    if (!log) throw IoError("cannot write train log in " + dir.string());
  }
};

inline void epoch_note(const RunConfig& c, std::size_t epoch, std::size_t step, const nlohmann::json& metrics) {
  if (c.verbose) std::cerr << "[" << to_string(c.regime) << "] epoch " << epoch << " step " << step << " " << metrics.dump() << "\n";
}

}  // namespace detail

// Domain-adaptive post-training: l1 (MLM + NSP) + l2 UOR + l3 SBR over
// corrupted inputs (NSP pairing, permutation, masking, triplet indexing).
inline RunResult run_dap_posttrain(const RunConfig& cfg, const Corpora& data) {
  RunConfig c = cfg;
  c.regime = Regime::dap_posttrain;
  c.validate(false);
  const auto& w = c.weights;
  RunResult out;
  out.model = new_model(c, build_vocab(c, data.train));
  Model& m = out.model;
  LoopState state = detail::initial_state(c);
  if (!c.resume.empty()) detail::resume_from(c, m, state);
  detail::RunFiles files(c, "posttrain");
  out.dir = files.dir;
  const InputBuilder builder(m, c);
  const std::size_t vocab_size = m.vocab.size();

  ExampleFn example = [&](std::size_t i, std::uint64_t s) {
    const auto pair = text::make_nsp_pair(data.train, i, derive_seed(s, {1}), std::nullopt, true);
    text::InputSequence input = builder.pair(pair.response, pair.context, data.train[i].id);
    text::UtterancePermutation perm;
    if (w.lambda2 > 0) {
      perm = text::permute_utterances(input, c.delta, derive_seed(s, {2}));
      input = perm.sequence;
    }
    text::MlmCorruption mlm;
    if (w.lambda1 > 0) {
      mlm = text::apply_mlm_mask(input, vocab_size, c.mask_rate, derive_seed(s, {3}));
      input = mlm.sequence;
    }
    const auto h = encoder::encode(input, m.params, m.encoder, {.train = true, .dropout_seed = derive_seed(s, {4})});
    ExampleResult r;
    std::vector<std::pair<double, nn::Tensor<float>>> terms;
    if (w.lambda1 > 0) {
      const auto lm = objectives::mlm_loss(h, mlm.labels, m.params);
      const auto ns = objectives::nsp_loss(encoder::pooled_representation(h, m.params), pair.label, m.params);
      terms.push_back({w.lambda1, lm.value});
      terms.push_back({w.lambda1, ns.value});
      r.parts.mlm = lm.value.item(), r.parts.mlm_count = lm.count;
      r.parts.nsp = ns.value.item(), r.parts.nsp_count = ns.count;
    }
    if (w.lambda2 > 0 && !perm.skipped()) {
      const auto reps = nn::slice_rows(encoder::utterance_representations(h, input), perm.window_begin,
                                       perm.window_begin + perm.permuted_count);
      const auto uo = objectives::uor_loss(reps, perm.order_labels, m.params);
      terms.push_back({w.lambda2, uo.value});
      r.parts.uor = uo.value.item(), r.parts.uor_count = uo.count;
    }
    if (w.lambda3 > 0 && !input.triplets.empty()) {
      const auto sb = objectives::sbr_loss(h, input.triplets, input.attention_mask);
      terms.push_back({w.lambda3, sb.value});
      r.parts.sbr = sb.value.item(), r.parts.sbr_count = sb.count;
    }
    r.total = objectives::weighted_total(terms);
    return r;
  };

  LoopHooks hooks;
  hooks.combine = [&](LossBreakdown b) { return objectives::dap_loss(b, w); };
  hooks.log = &files.log;
  hooks.save_resumable = [&](const LoopState& st) {
    save_checkpoint_atomic(files.dir / "last.ckpt", detail::make_checkpoint(m, c, &st));
  };
  hooks.on_epoch_end = [&](std::size_t e, std::size_t step) {
    nlohmann::json metrics = nlohmann::json::object();
    if (!data.valid.empty()) {
      const auto uor = uor_probe(m, c, data.valid, c.delta, c.seed);
      const auto sbr = sbr_probe(m, c, data.valid);
      metrics = {{"uor_accuracy", uor.value}, {"uor_slots", uor.count}, {"sbr_cosine", sbr.value}, {"sbr_triplets", sbr.count}};
    }
    EpochRecord rec{e, step, metrics};
    files.log << to_json(rec).dump() << '\n' << std::flush;
    out.log.epochs.push_back(rec);
    detail::epoch_note(c, e, step, metrics);
  };
  train_loop(m, c, data.train.size(), example, hooks, state, out.log);
  out.checkpoint = files.dir / "model.ckpt";
  encoder::save_checkpoint(out.checkpoint.string(), detail::make_checkpoint(m, c, &state));
  return out;
}

// Fine-tuning on response selection: L_dm alone (baseline / dap-finetune) or
// b1 L_dm + b2 L_uor + b3 L_sbr on permuted contexts (mtf). Each epoch is
// scored on the validation split; the best epoch's weights are kept.
inline RunResult run_downstream(const RunConfig& cfg, const Corpora& data, std::optional<Model> init = std::nullopt) {
  RunConfig c = cfg;
  c.validate(false);
  const bool mtf = c.regime == Regime::mtf;
  if (c.regime == Regime::dap_posttrain) throw ConfigError("run_downstream needs a fine-tuning regime");
  objectives::LossWeights w = c.weights;
  if (!mtf) w.beta1 = 1, w.beta2 = 0, w.beta3 = 0;
  const bool multichoice = c.task == Task::multichoice;

  RunResult out;
  if (init) {
    out.model = std::move(*init);
  } else if (c.regime == Regime::dap_finetune) {
    if (c.init_checkpoint.empty()) throw ConfigError("regime dap-finetune requires 'init_checkpoint'");
    out.model = model_for_finetuning(c, encoder::load_checkpoint(c.init_checkpoint));
  } else {
    out.model = new_model(c, build_vocab(c, data.train));
  }
  Model& m = out.model;
  LoopState state = detail::initial_state(c);
  if (!c.resume.empty()) detail::resume_from(c, m, state);
  detail::RunFiles files(c, to_string(c.regime));
  out.dir = files.dir;
  const InputBuilder builder(m, c);

  // Items: (dialogue, candidate) pairs for the binary loss, dialogues for
  // the multiple-choice loss.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t d = 0; d < data.train.size(); ++d) {
    const auto& ex = data.train[d];
    if (multichoice) {
      if (ex.candidates.size() < 2 || ex.positive_count() != 1) {
        throw DataError("dialogue " + ex.id + ": multiple choice needs >= 2 candidates and exactly one positive");
      }
      pairs.push_back({d, 0});
    } else {
      for (std::size_t k = 0; k < ex.candidates.size(); ++k) pairs.push_back({d, k});
    }
  }

  auto prepare = [&](const text::InputSequence& seq, std::uint64_t s) {
    if (mtf && w.beta2 > 0) return text::permute_utterances(seq, c.delta, derive_seed(s, {2}));
    text::UtterancePermutation p;
    p.sequence = seq;
    return p;
  };
  auto auxiliary = [&](const nn::Tensor<float>& h, const text::UtterancePermutation& perm,
                       std::vector<std::pair<double, nn::Tensor<float>>>& terms, LossBreakdown& parts) {
    if (!mtf) return;
    const auto& input = perm.sequence;
    if (w.beta2 > 0 && !perm.skipped()) {
      const auto reps = nn::slice_rows(encoder::utterance_representations(h, input), perm.window_begin,
                                       perm.window_begin + perm.permuted_count);
      const auto uo = objectives::uor_loss(reps, perm.order_labels, m.params);
      terms.push_back({w.beta2, uo.value});
      parts.uor = uo.value.item(), parts.uor_count = uo.count;
    }
    if (w.beta3 > 0 && !input.triplets.empty()) {
      const auto sb = objectives::sbr_loss(h, input.triplets, input.attention_mask);
      terms.push_back({w.beta3, sb.value});
      parts.sbr = sb.value.item(), parts.sbr_count = sb.count;
    }
  };

  ExampleFn example = [&](std::size_t item, std::uint64_t s) {
    const auto [d, k] = pairs[item];
    const auto& ex = data.train[d];
    ExampleResult r;
    std::vector<std::pair<double, nn::Tensor<float>>> terms;
    if (!multichoice) {
      const auto perm = prepare(builder.candidate(ex, k), s);
      const auto h = encoder::encode(perm.sequence, m.params, m.encoder, {.train = true, .dropout_seed = derive_seed(s, {4})});
      const auto g = objectives::matching_probability(encoder::pooled_representation(h, m.params), m.params);
      const auto dm = objectives::dm_loss_binary(g, ex.candidates[k].label);
      terms.push_back({w.beta1, dm.value});
      r.parts.dm = dm.value.item(), r.parts.dm_count = 1;
      auxiliary(h, perm, terms, r.parts);
    } else {
      const std::size_t positive = *ex.positive_index();
      std::vector<nn::Tensor<float>> scores;
      std::optional<nn::Tensor<float>> positive_h;
      text::UtterancePermutation positive_perm;
      for (std::size_t j = 0; j < ex.candidates.size(); ++j) {
        auto perm = prepare(builder.candidate(ex, j), s);
        const auto h =
            encoder::encode(perm.sequence, m.params, m.encoder, {.train = true, .dropout_seed = derive_seed(s, {4, j})});
        scores.push_back(objectives::matching_logit(encoder::pooled_representation(h, m.params), m.params));
        if (j == positive) positive_h = h, positive_perm = std::move(perm);
      }
      const auto dm = objectives::dm_loss_multichoice(nn::concat_cols(scores), positive);
      terms.push_back({w.beta1, dm.value});
      r.parts.dm = dm.value.item(), r.parts.dm_count = 1;
      auxiliary(*positive_h, positive_perm, terms, r.parts);
    }
    r.total = objectives::weighted_total(terms);
    return r;
  };

  std::optional<nn::ParameterStore<float>> best;
  double best_metric = -1;
  auto select = [&](std::size_t e, std::size_t step) {
    nlohmann::json metrics = nlohmann::json::object();
    if (!data.valid.empty()) {
      const auto report = evaluate(m, c, data.valid);
      const double metric = eval::selection_metric(report.overall, multichoice);
      metrics = eval::to_json(report.overall);
      metrics["selection"] = metric;
      if (metric > best_metric) {
        best_metric = metric;
        best = m.params.clone();
        out.best_epoch = e;
      }
    }
    return metrics;
  };

  LoopHooks hooks;
  hooks.combine = [&](LossBreakdown b) { return objectives::mtf_loss(b, w); };
  hooks.log = &files.log;
  hooks.save_resumable = [&](const LoopState& st) {
    save_checkpoint_atomic(files.dir / "last.ckpt", detail::make_checkpoint(m, c, &st));
  };
  hooks.on_epoch_end = [&](std::size_t e, std::size_t step) {
    EpochRecord rec{e, step, select(e, step)};
    files.log << to_json(rec).dump() << '\n' << std::flush;
    out.log.epochs.push_back(rec);
    detail::epoch_note(c, e, step, rec.metrics);
  };
  if (c.effective_epochs() == 0) select(0, 0);
  train_loop(m, c, pairs.size(), example, hooks, state, out.log);

  if (best) m.params.assign_from(*best);
  out.best_metric = best ? best_metric : 0.0;
  out.checkpoint = files.dir / "model.ckpt";
  encoder::save_checkpoint(out.checkpoint.string(), detail::make_checkpoint(m, c, nullptr));

  const auto* held_out = !data.test.empty() ? &data.test : (!data.valid.empty() ? &data.valid : nullptr);
  if (held_out) {
    out.report = evaluate(m, c, *held_out);
    out.report_split = held_out == &data.test ? "test" : "valid";
    auto j = eval::to_json(*out.report);
    j["split"] = out.report_split;
    j["best_epoch"] = out.best_epoch;
    write_text(files.dir / "metrics.json", j.dump(2) + "\n");
    write_text(files.dir / "metrics.txt", eval::to_text(*out.report));
  }
  return out;
}

inline RunResult run_finetune(const RunConfig& cfg, const Corpora& data) {
  RunConfig c = cfg;
  if (c.regime != Regime::dap_finetune && c.regime != Regime::baseline_finetune) {
    c.regime = c.init_checkpoint.empty() ? Regime::baseline_finetune : Regime::dap_finetune;
  }
  return run_downstream(c, data);
}

inline RunResult run_mtf(const RunConfig& cfg, const Corpora& data) {
  RunConfig c = cfg;
  c.regime = Regime::mtf;
  return run_downstream(c, data);
}

// ---------------------------------------------------------------------------
// Permutation-ratio sweep

struct SweepRow {
  double delta = 0;
  RunResult run;
  double metric = 0;  // headline metric of the selected model on held-out data
};

inline std::vector<double> default_sweep_grid() { return {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}; }

inline std::vector<SweepRow> sweep_delta(const RunConfig& cfg, const Corpora& data, const std::vector<double>& deltas,
                                         fs::path out_dir = {}) {
  if (deltas.size() < 2 || std::find(deltas.begin(), deltas.end(), 0.0) == deltas.end()) {
    throw InvalidArgument("a sweep needs at least two delta values including 0");
  }
  RunConfig base = cfg;
  if (out_dir.empty()) out_dir = make_run_dir(base, "sweep");
  fs::create_directories(out_dir);
  std::vector<SweepRow> rows;
  std::string table = "delta\tselection\tMAP\tMRR\tP@1\n";
  std::string plot = "# delta metric\n";
  for (double d : deltas) {
    RunConfig c = base;
    c.delta = d;
    c.run_dir = (out_dir / ("delta-" + parse::fmt(d))).string();
    SweepRow row{d, run_downstream(c, data), 0};
    if (row.run.report) {
      const auto& o = row.run.report->overall;
      row.metric = eval::selection_metric(o, c.task == Task::multichoice);
      table += parse::fmt(d) + "\t" + parse::fmt(row.metric) + "\t" + parse::fmt(o.map) + "\t" + parse::fmt(o.mrr) +
               "\t" + parse::fmt(o.p_at_1) + "\n";
      plot += parse::fmt(d) + " " + parse::fmt(row.metric) + "\n";
    }
    rows.push_back(std::move(row));
  }
  write_text(out_dir / "sweep.tsv", table);
  write_text(out_dir / "sweep.dat", plot);
  return rows;
}

}  // namespace spider::harness
