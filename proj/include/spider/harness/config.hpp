#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spider/core/error.hpp"
#include "spider/evaluation/metrics.hpp"
#include "spider/objectives/losses.hpp"

namespace spider::harness {

// ---------------------------------------------------------------------------
// Schema: each key has a type, a doc line, a parser and a printer. A config
// file is "key = value" lines with '#' comments; flags use the same keys.

namespace parse {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::int64_t integer(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

inline std::size_t count(const std::string& key, const std::string& v, std::int64_t min = 0) {
  const auto x = integer(key, v);
  if (x < min) throw ConfigError(key + ": must be >= " + std::to_string(min));
  return static_cast<std::size_t>(x);
}

inline double real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return out;
}

inline double unit(const std::string& key, const std::string& v) {
  const double x = real(key, v);
  if (x < 0 || x > 1) throw ConfigError(key + ": must lie in [0, 1]");
  return x;
}

inline double non_negative(const std::string& key, const std::string& v) {
  const double x = real(key, v);
  if (x < 0) throw ConfigError(key + ": must be non-negative");
  return x;
}

inline bool boolean(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace parse

template <typename Cfg>
struct KeySpec {
  std::string name;
  std::string type;
  std::string doc;
  std::function<void(Cfg&, const std::string&)> set;
  std::function<std::string(const Cfg&)> get;
};

template <typename Cfg>
class Schema {
 public:
  explicit Schema(std::vector<KeySpec<Cfg>> keys) : keys_(std::move(keys)) {}

  const std::vector<KeySpec<Cfg>>& keys() const { return keys_; }

  const KeySpec<Cfg>* find(const std::string& name) const {
    for (const auto& k : keys_)
      if (k.name == name) return &k;
    return nullptr;
  }

  void set(Cfg& cfg, const std::string& key, const std::string& value) const {
    const auto* k = find(key);
    if (!k) throw ConfigError("unknown config key '" + key + "'");
    k->set(cfg, parse::trim(value));
  }

  void apply_text(Cfg& cfg, std::istream& in, const std::string& origin) const {
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = parse::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(no) + ": expected key = value");
      try {
        set(cfg, parse::trim(line.substr(0, eq)), line.substr(eq + 1));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(no) + ": " + e.what());
      }
    }
  }

  void apply_file(Cfg& cfg, const std::string& path) const {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    apply_text(cfg, in, path);
  }

  std::string snapshot(const Cfg& cfg) const {
    std::string out;
    for (const auto& k : keys_) out += k.name + " = " + k.get(cfg) + "\n";
    return out;
  }

  std::string describe() const {
    std::string out;
    for (const auto& k : keys_) out += "  " + k.name + " (" + k.type + "): " + k.doc + "\n";
    return out;
  }

 private:
  std::vector<KeySpec<Cfg>> keys_;
};

// ---------------------------------------------------------------------------

enum class Regime { dap_posttrain, dap_finetune, mtf, baseline_finetune };
enum class Task { binary, multichoice };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::dap_posttrain: return "dap-posttrain";
    case Regime::dap_finetune: return "dap-finetune";
    case Regime::mtf: return "mtf";
    case Regime::baseline_finetune: return "baseline-finetune";
  }
  return "?";
}

inline Regime regime_from_string(const std::string& s) {
  for (Regime r : {Regime::dap_posttrain, Regime::dap_finetune, Regime::mtf, Regime::baseline_finetune})
    if (to_string(r) == s) return r;
  throw ConfigError("regime: expected dap-posttrain, dap-finetune, mtf or baseline-finetune, got '" + s + "'");
}

struct RunConfig {
  Regime regime = Regime::baseline_finetune;
  Task task = Task::binary;

  std::size_t hidden = 64, layers = 2, heads = 4, ffn = 256;
  std::size_t max_len = 128, max_utterances = 20, order_classes = 20;
  double dropout = 0.0, init_std = 0.02;
  std::size_t vocab_min_count = 1;

  objectives::LossWeights weights;
  double delta = 0.4;
  double mask_rate = 0.15;
  double lr = 3e-4, weight_decay = 0.01;
  std::size_t batch_size = 32;
  std::optional<std::size_t> epochs;  // regime default when unset
  std::size_t max_steps = 0;          // 0: no cap
  std::uint64_t seed = 0;

  std::string train, valid, test;
  std::string init_checkpoint, resume;
  bool keep_heads = false;
  std::vector<std::string> svo_verbs;
  std::vector<eval::RecallSpec> eval_pairs = eval::default_recall_specs();

  std::string run_root = "runs";
  std::string run_dir;
  std::size_t threads = 1;
  std::size_t checkpoint_every = 0;  // steps; 0 saves at epoch ends only
  bool verbose = false;

  std::size_t effective_epochs() const {
    if (epochs) return *epochs;
    return regime == Regime::dap_posttrain ? 3 : 2;
  }

  bool fine_tuning() const { return regime != Regime::dap_posttrain; }

  // Regime-specific requirements, checked before a run starts. `paths` also
  // requires the data and checkpoint paths a run reads from disk.
  void validate(bool paths = true) const {
    weights.validate();
    if (hidden % heads != 0) throw ConfigError("hidden must be divisible by heads");
    if (max_len < 8) throw ConfigError("max_len must be at least 8");
    if (paths && train.empty()) throw ConfigError("regime " + to_string(regime) + " requires 'train'");
    if (paths && regime == Regime::dap_finetune && init_checkpoint.empty()) {
      throw ConfigError("regime dap-finetune requires 'init_checkpoint'");
    }
    if (regime == Regime::dap_posttrain && weights.lambda1 == 0 && weights.lambda2 == 0 && weights.lambda3 == 0) {
      throw ConfigError("dap-posttrain with every lambda at 0 trains nothing");
    }
  }
};

inline std::string recall_specs_to_string(const std::vector<eval::RecallSpec>& specs) {
  std::string out;
  for (const auto& s : specs) out += (out.empty() ? "" : ",") + std::to_string(s.n) + ":" + std::to_string(s.k);
  return out;
}

inline std::vector<eval::RecallSpec> recall_specs_from_string(const std::string& key, const std::string& v) {
  std::vector<eval::RecallSpec> out;
  for (const auto& item : parse::list(v)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError(key + ": expected n:k pairs, got '" + item + "'");
    eval::RecallSpec s{parse::count(key, item.substr(0, colon), 2), parse::count(key, item.substr(colon + 1), 1)};
    if (s.k > s.n) throw ConfigError(key + ": k exceeds n in '" + item + "'");
    out.push_back(s);
  }
  if (out.empty()) throw ConfigError(key + ": at least one n:k pair required");
  return out;
}

inline const Schema<RunConfig>& run_schema() {
  using C = RunConfig;
  using parse::fmt;
  auto sz = [](const char* name, std::size_t C::*field, std::int64_t min, const char* doc) {
    return KeySpec<C>{name, "int", doc, [=](C& c, const std::string& v) { c.*field = parse::count(name, v, min); },
                      [=](const C& c) { return std::to_string(c.*field); }};
  };
  auto real = [](const char* name, double C::*field, bool unit, const char* doc) {
    return KeySpec<C>{name, unit ? "real in [0,1]" : "real >= 0", doc,
                      [=](C& c, const std::string& v) { c.*field = unit ? parse::unit(name, v) : parse::non_negative(name, v); },
                      [=](const C& c) { return fmt(c.*field); }};
  };
  auto weight = [](const char* name, double objectives::LossWeights::*field, const char* doc) {
    return KeySpec<C>{name, "real >= 0", doc,
                      [=](C& c, const std::string& v) { c.weights.*field = parse::non_negative(name, v); },
                      [=](const C& c) { return fmt(c.weights.*field); }};
  };
  auto str = [](const char* name, std::string C::*field, const char* doc) {
    return KeySpec<C>{name, "string", doc, [=](C& c, const std::string& v) { c.*field = v; },
                      [=](const C& c) { return c.*field; }};
  };
  static const Schema<RunConfig> schema({
      {"regime", "dap-posttrain|dap-finetune|mtf|baseline-finetune", "training regime",
       [](C& c, const std::string& v) { c.regime = regime_from_string(v); },
       [](const C& c) { return to_string(c.regime); }},
      {"task", "binary|multichoice", "downstream loss shape",
       [](C& c, const std::string& v) {
         if (v == "binary") c.task = Task::binary;
         else if (v == "multichoice") c.task = Task::multichoice;
         else throw ConfigError("task: expected binary or multichoice, got '" + v + "'");
       },
       [](const C& c) { return std::string(c.task == Task::binary ? "binary" : "multichoice"); }},
      sz("hidden", &C::hidden, 1, "encoder width"),
      sz("layers", &C::layers, 1, "encoder depth"),
      sz("heads", &C::heads, 1, "attention heads (must divide hidden)"),
      sz("ffn", &C::ffn, 1, "feed-forward inner width"),
      sz("max_len", &C::max_len, 8, "maximum sequence length in tokens"),
      sz("max_utterances", &C::max_utterances, 1, "most recent context utterances kept"),
      sz("order_classes", &C::order_classes, 2, "order-restoration classes (largest K')"),
      real("dropout", &C::dropout, true, "dropout rate during training"),
      real("init_std", &C::init_std, false, "weight init standard deviation"),
      sz("vocab_min_count", &C::vocab_min_count, 1, "minimum word frequency for the vocabulary"),
      weight("lambda1", &objectives::LossWeights::lambda1, "post-training weight of MLM + NSP"),
      weight("lambda2", &objectives::LossWeights::lambda2, "post-training weight of order restoration"),
      weight("lambda3", &objectives::LossWeights::lambda3, "post-training weight of backbone regularization"),
      weight("beta1", &objectives::LossWeights::beta1, "multi-task weight of dialogue matching"),
      weight("beta2", &objectives::LossWeights::beta2, "multi-task weight of order restoration"),
      weight("beta3", &objectives::LossWeights::beta3, "multi-task weight of backbone regularization"),
      real("delta", &C::delta, true, "permutation ratio; K' = floor(K * delta)"),
      real("mask_rate", &C::mask_rate, true, "MLM masking rate"),
      real("lr", &C::lr, false, "AdamW learning rate"),
      real("weight_decay", &C::weight_decay, false, "AdamW decoupled weight decay"),
      sz("batch_size", &C::batch_size, 1, "examples per optimizer step"),
      {"epochs", "int", "training epochs (default 3 for post-training, 2 otherwise)",
       [](C& c, const std::string& v) { c.epochs = parse::count("epochs", v, 0); },
       [](const C& c) { return std::to_string(c.effective_epochs()); }},
      sz("max_steps", &C::max_steps, 0, "stop after this many steps (0 = no cap)"),
      {"seed", "int", "run seed", [](C& c, const std::string& v) { c.seed = parse::count("seed", v, 0); },
       [](const C& c) { return std::to_string(c.seed); }},
      str("train", &C::train, "training corpus (line-delimited JSON)"),
      str("valid", &C::valid, "validation corpus"),
      str("test", &C::test, "test corpus"),
      str("init_checkpoint", &C::init_checkpoint, "post-trained checkpoint to fine-tune from"),
      str("resume", &C::resume, "checkpoint of an interrupted run to resume"),
      {"keep_heads", "bool", "keep post-training heads when fine-tuning",
       [](C& c, const std::string& v) { c.keep_heads = parse::boolean("keep_heads", v); },
       [](const C& c) { return std::string(c.keep_heads ? "true" : "false"); }},
      {"svo_verbs", "comma list", "verbs for heuristic SVO extraction of unannotated utterances",
       [](C& c, const std::string& v) { c.svo_verbs = parse::list(v); },
       [](const C& c) {
         std::string out;
         for (const auto& w : c.svo_verbs) out += (out.empty() ? "" : ",") + w;
         return out;
       }},
      {"eval_pairs", "n:k list", "R_n@k pairs to report",
       [](C& c, const std::string& v) { c.eval_pairs = recall_specs_from_string("eval_pairs", v); },
       [](const C& c) { return recall_specs_to_string(c.eval_pairs); }},
      str("run_root", &C::run_root, "directory under which run directories are created"),
      str("run_dir", &C::run_dir, "explicit run directory (overrides run_root naming)"),
      sz("threads", &C::threads, 1, "evaluation worker threads"),
      sz("checkpoint_every", &C::checkpoint_every, 0, "save a resumable checkpoint every N steps"),
      {"verbose", "bool", "print progress to stderr",
       [](C& c, const std::string& v) { c.verbose = parse::boolean("verbose", v); },
       [](const C& c) { return std::string(c.verbose ? "true" : "false"); }},
  });
  return schema;
}

// Environment overrides: SPIDER_RUN_ROOT and SPIDER_THREADS only.
inline void apply_environment(RunConfig& c) {
  if (const char* root = std::getenv("SPIDER_RUN_ROOT"); root && *root) c.run_root = root;
  if (const char* t = std::getenv("SPIDER_THREADS"); t && *t) c.threads = parse::count("SPIDER_THREADS", t, 1);
}

}  // namespace spider::harness
