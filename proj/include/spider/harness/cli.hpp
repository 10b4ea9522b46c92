#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "spider/evaluation/metrics.hpp"
#include "spider/harness/config.hpp"
#include "spider/harness/trainer.hpp"
#include "spider/objectives/gradient_suite.hpp"
#include "spider/synth/generator.hpp"

namespace spider::harness {

inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

// ---------------------------------------------------------------------------
// synth options

struct SynthOptions {
  synth::SynthConfig synth;
  std::vector<double> split{0.8, 0.1, 0.1};
  std::string out;
  std::string run_root = "runs";
};

inline const Schema<SynthOptions>& synth_schema() {
  using S = SynthOptions;
  using parse::fmt;
  auto sz = [](const char* name, std::size_t synth::SynthConfig::*field, std::int64_t min, const char* doc) {
    return KeySpec<S>{name, "int", doc, [=](S& s, const std::string& v) { s.synth.*field = parse::count(name, v, min); },
                      [=](const S& s) { return std::to_string(s.synth.*field); }};
  };
  auto real = [](const char* name, double synth::SynthConfig::*field, bool unit, const char* doc) {
    return KeySpec<S>{name, unit ? "real in [0,1]" : "real >= 0", doc,
                      [=](S& s, const std::string& v) {
                        s.synth.*field = unit ? parse::unit(name, v) : parse::non_negative(name, v);
                      },
                      [=](const S& s) { return fmt(s.synth.*field); }};
  };
  static const Schema<SynthOptions> schema({
      sz("dialogues", &synth::SynthConfig::dialogues, 2, "number of dialogues"),
      real("mean_turns", &synth::SynthConfig::mean_turns, false, "mean context turns"),
      sz("turn_spread", &synth::SynthConfig::turn_spread, 0, "turns vary uniformly by +- this"),
      real("mean_words", &synth::SynthConfig::mean_words, false, "mean words per context utterance"),
      sz("word_spread", &synth::SynthConfig::word_spread, 0, "words vary uniformly by +- this"),
      real("cue_strength", &synth::SynthConfig::cue_strength, true, "probability a turn starts with its order marker"),
      real("svo_density", &synth::SynthConfig::svo_density, true, "probability a turn carries an SVO clause"),
      sz("candidates", &synth::SynthConfig::candidates, 2, "candidates per context (one positive)"),
      {"negative_pool", "uniform|cross_topic|generic", "where negatives are drawn from",
       [](S& s, const std::string& v) {
         if (v == "uniform") s.synth.negative_pool = synth::NegativePool::uniform;
         else if (v == "cross_topic") s.synth.negative_pool = synth::NegativePool::cross_topic;
         else if (v == "generic") s.synth.negative_pool = synth::NegativePool::generic;
         else throw ConfigError("negative_pool: expected uniform, cross_topic or generic, got '" + v + "'");
       },
       [](const S& s) {
         switch (s.synth.negative_pool) {
           case synth::NegativePool::uniform: return std::string("uniform");
           case synth::NegativePool::cross_topic: return std::string("cross_topic");
           default: return std::string("generic");
         }
       }},
      sz("topics", &synth::SynthConfig::topics, 1, "lexicon topics in use"),
      real("off_topic_noise", &synth::SynthConfig::off_topic_noise, true, "probability a noun comes from another topic"),
      {"seed", "int", "generator seed",
       [](S& s, const std::string& v) { s.synth.seed = parse::count("seed", v, 0); },
       [](const S& s) { return std::to_string(s.synth.seed); }},
      {"split", "comma list of fractions", "train,valid,test fractions (sum to 1)",
       [](S& s, const std::string& v) {
         s.split.clear();
         for (const auto& item : parse::list(v)) s.split.push_back(parse::unit("split", item));
         if (s.split.empty()) throw ConfigError("split: at least one fraction required");
       },
       [](const S& s) {
         std::string out;
         for (double f : s.split) out += (out.empty() ? "" : ",") + fmt(f);
         return out;
       }},
      {"out", "string", "output directory (default: a new run directory)",
       [](S& s, const std::string& v) { s.out = v; }, [](const S& s) { return s.out; }},
      {"run_root", "string", "directory under which run directories are created",
       [](S& s, const std::string& v) { s.run_root = v; }, [](const S& s) { return s.run_root; }},
  });
  return schema;
}

// ---------------------------------------------------------------------------
// Flag plumbing: every schema key becomes --kebab-case, plus --config and
// repeated --set key=value. Precedence: defaults < file < environment < flags.

namespace cli_detail {

inline std::string kebab(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

template <typename Cfg>
struct SchemaFlags {
  const Schema<Cfg>* schema = nullptr;
  std::string config_file;
  std::vector<std::string> sets;
  bool print_schema = false;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app, const Schema<Cfg>& s) {
    schema = &s;
    app->add_option("--config", config_file, "key = value config file");
    app->add_option("--set", sets, "override any config key (key=value), repeatable");
    app->add_flag("--print-schema", print_schema, "print the config schema and exit");
    for (const auto& k : s.keys()) {
      if (k.type == "bool") {
        options[k.name] = app->add_flag("--" + kebab(k.name), flags[k.name], k.doc);
      } else {
        options[k.name] = app->add_option("--" + kebab(k.name), values[k.name], k.doc + " [" + k.type + "]");
      }
    }
  }

  template <typename Env>
  Cfg resolve(Cfg cfg, Env&& environment) const {
    if (!config_file.empty()) schema->apply_file(cfg, config_file);
    environment(cfg);
    for (const auto& [name, opt] : options) {
      if (opt->count() == 0) continue;
      try {
        if (flags.count(name)) schema->set(cfg, name, flags.at(name) ? "true" : "false");
        else schema->set(cfg, name, values.at(name));
      } catch (const ConfigError& e) {
        throw ConfigError("--" + kebab(name) + ": " + e.what());
      }
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      schema->set(cfg, parse::trim(s.substr(0, eq)), s.substr(eq + 1));
    }
    return cfg;
  }
};

inline void report_run(std::ostream& out, const RunResult& r) {
  out << "run_dir " << r.dir.string() << "\n";
  out << "checkpoint " << r.checkpoint.string() << "\n";
  if (!r.log.steps.empty()) out << "final_loss " << parse::fmt(r.log.steps.back().loss.total) << "\n";
  if (r.report) {
    out << "split " << r.report_split << "\nbest_epoch " << r.best_epoch << "\n";
    out << eval::to_text(*r.report);
  }
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Dialogue encoder post-training and fine-tuning toolkit", "spider"};
  app.require_subcommand(1, 1);

  cli_detail::SchemaFlags<SynthOptions> synth_flags;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dialogue corpus");
  synth_flags.attach(synth_cmd, synth_schema());

  struct TrainCommand {
    CLI::App* app;
    cli_detail::SchemaFlags<RunConfig> flags;
  };
  std::map<std::string, std::unique_ptr<TrainCommand>> train;
  std::vector<double> deltas = default_sweep_grid();
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"posttrain", "domain-adaptive post-training (MLM + NSP + UOR + SBR)"},
           {"finetune", "fine-tune on response selection (from --init-checkpoint if given)"},
           {"mtf", "multi-task fine-tuning (DM + UOR + SBR)"},
           {"sweep", "permutation-ratio sweep of a fine-tuning regime"}}) {
    auto cmd = std::make_unique<TrainCommand>();
    cmd->app = app.add_subcommand(name, help);
    cmd->flags.attach(cmd->app, run_schema());
    train[name] = std::move(cmd);
  }
  train["sweep"]->app->add_option("--deltas", deltas, "delta values (must include 0)")->delimiter(',');

  auto* eval_cmd = app.add_subcommand("eval", "compute ranking metrics");
  std::string predictions, checkpoint, corpus, eval_pairs, eval_run_root = "runs", eval_run_dir;
  std::size_t eval_threads = 1;
  eval_cmd->add_option("--predictions", predictions, "JSONL file of {id, scores, labels[, turns, utterance_length]}");
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint to score --corpus with");
  eval_cmd->add_option("--corpus", corpus, "dialogue corpus (JSONL)");
  eval_cmd->add_option("--eval-pairs", eval_pairs, "R_n@k pairs, e.g. 2:1,10:1,10:2,10:5");
  eval_cmd->add_option("--threads", eval_threads, "scoring threads")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--run-root", eval_run_root, "directory under which run directories are created");
  eval_cmd->add_option("--run-dir", eval_run_dir, "explicit run directory");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every loss through the encoder");
  objectives::GradientSuiteOptions grad;
  std::vector<std::string> grad_losses = objectives::gradient_suite_losses();
  grad_cmd->add_option("--seeds", grad.seeds, "random seeds per loss")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--base-seed", grad.base_seed, "first seed");
  grad_cmd->add_option("--tolerance", grad.tolerance, "maximum relative error");
  grad_cmd->add_option("--coords", grad.coords_per_param, "coordinates checked per parameter");
  grad_cmd->add_option("--loss", grad_losses, "losses to check")
      ->delimiter(',')
      ->check(CLI::IsMember(objectives::gradient_suite_losses()));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const auto parsed = app.get_subcommands();
    out << (parsed.empty() ? app.help() : parsed.front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << "run 'spider --help' for usage\n";
    return kExitUsage;
  }

  try {
    if (synth_cmd->parsed()) {
      if (synth_flags.print_schema) {
        out << synth_schema().describe();
        return 0;
      }
      SynthOptions s = synth_flags.resolve(SynthOptions{}, [](SynthOptions& o) {
        if (const char* root = std::getenv("SPIDER_RUN_ROOT"); root && *root) o.run_root = root;
      });
      double total = 0;
      for (double f : s.split) total += f;
      if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
      s.synth.validate(synth::GrammarLexicon::standard());
      fs::path dir = s.out;
      if (dir.empty()) {
        RunConfig naming;
        naming.run_root = s.run_root;
        naming.seed = s.synth.seed;
        dir = make_run_dir(naming, "synth");
      }
      fs::create_directories(dir);
      const auto corpus = synth::generate(s.synth);
      const auto parts = synth::split(corpus, s.split, s.synth.seed);
      static const char* names[] = {"train", "valid", "test"};
      for (std::size_t i = 0; i < parts.size(); ++i) {
        const std::string name = i < 3 ? names[i] : "part" + std::to_string(i);
        text::write_corpus_file((dir / (name + ".jsonl")).string(), parts[i]);
      }
      write_text(dir / "stats.json", synth::corpus_stats(corpus).dump(2) + "\n");
      // Location keys are left out so identical settings give identical files.
      SynthOptions recorded = s;
      recorded.out.clear(), recorded.run_root.clear();
      write_text(dir / "config.txt", synth_schema().snapshot(recorded));
      out << "out " << dir.string() << "\n";
      return 0;
    }

    for (auto& [name, cmd] : train) {
      if (!cmd->app->parsed()) continue;
      if (cmd->flags.print_schema) {
        out << run_schema().describe();
        return 0;
      }
      RunConfig base;
      if (name == "posttrain") base.regime = Regime::dap_posttrain;
      else base.regime = name == "finetune" ? Regime::baseline_finetune : Regime::mtf;
      RunConfig c = cmd->flags.resolve(base, [](RunConfig& r) { apply_environment(r); });
      if (name == "posttrain") c.regime = Regime::dap_posttrain;
      if (name == "mtf") c.regime = Regime::mtf;
      if (name == "finetune") c.regime = c.init_checkpoint.empty() ? Regime::baseline_finetune : Regime::dap_finetune;
      if (name == "sweep" && c.regime == Regime::dap_posttrain) {
        throw ConfigError("sweep needs a fine-tuning regime (mtf, dap-finetune or baseline-finetune)");
      }
      c.validate();
      const Corpora data = load_corpora(c);
      if (name == "posttrain") {
        cli_detail::report_run(out, run_dap_posttrain(c, data));
      } else if (name == "sweep") {
        const auto dir = make_run_dir(c, "sweep");
        write_text(dir / "config.txt", run_schema().snapshot(c));
        auto per_run = c;
        per_run.run_dir.clear();
        const auto rows = sweep_delta(per_run, data, deltas, dir);
        out << "run_dir " << dir.string() << "\n";
        for (const auto& r : rows) out << "delta " << parse::fmt(r.delta) << " metric " << parse::fmt(r.metric) << "\n";
      } else {
        cli_detail::report_run(out, run_downstream(c, data));
      }
      return 0;
    }

    if (eval_cmd->parsed()) {
      if (predictions.empty() == checkpoint.empty()) {
        err << "usage error: eval needs exactly one of --predictions or --checkpoint\n";
        return kExitUsage;
      }
      RunConfig c;
      c.run_root = eval_run_root;
      c.run_dir = eval_run_dir;
      apply_environment(c);
      std::vector<eval::RankingInstance> instances;
      if (!predictions.empty()) {
        std::ifstream in(predictions);
        if (!in) throw IoError("cannot open predictions " + predictions);
        instances = eval::read_predictions(in);
      } else {
        if (corpus.empty()) {
          err << "usage error: eval --checkpoint needs --corpus\n";
          return kExitUsage;
        }
        const auto ck = encoder::load_checkpoint(checkpoint);
        if (ck.header.contains("config")) {
          std::istringstream snap(ck.header.at("config").get<std::string>());
          RunConfig saved;
          run_schema().apply_text(saved, snap, checkpoint);
          saved.run_root = c.run_root, saved.run_dir = c.run_dir, saved.threads = c.threads;
          c = saved;
        }
        c.threads = std::max(c.threads, eval_threads);
        instances = score_corpus(model_from_checkpoint(ck), c, load_corpus(corpus));
      }
      if (!eval_pairs.empty()) c.eval_pairs = recall_specs_from_string("eval_pairs", eval_pairs);
      const auto report = eval::build_report(instances, {}, c.eval_pairs);
      const auto dir = make_run_dir(c, "eval");
      write_text(dir / "metrics.json", eval::to_json(report).dump(2) + "\n");
      write_text(dir / "metrics.txt", eval::to_text(report));
      out << eval::to_text(report);
      return 0;
    }

    if (grad_cmd->parsed()) {
      const auto results = objectives::run_gradient_suite(grad, grad_losses);
      bool all = true;
      for (const auto& loss : grad_losses) {
        std::size_t passed = 0, total = 0;
        double worst = 0;
        for (const auto& r : results) {
          if (r.loss != loss) continue;
          ++total;
          passed += r.report.passed;
          worst = std::max(worst, r.report.max_relative_error);
        }
        all = all && passed == total;
        out << (passed == total ? "PASS " : "FAIL ") << loss << " seeds " << passed << "/" << total
            << " max_rel_err " << worst << "\n";
      }
      return all ? 0 : kExitFailure;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace spider::harness
