#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "gtest/gtest.h"

#include "spider/harness/cli.hpp"
#include "spider/harness/trainer.hpp"
#include "spider/synth/generator.hpp"

using namespace spider;
using namespace spider::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("spider-harness-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Corpora tiny_corpora(std::uint64_t seed = 3) {
  synth::SynthConfig s;
  s.dialogues = 60;
  s.mean_turns = 5;
  s.turn_spread = 2;
  s.mean_words = 5;
  s.word_spread = 2;
  s.svo_density = 0.6;
  s.seed = seed;
  const auto parts = synth::split(synth::generate(s), {0.6, 0.2, 0.2}, seed);
  return {parts[0], parts[1], parts[2]};
}

RunConfig tiny_config(const fs::path& root, Regime regime) {
  RunConfig c;
  c.regime = regime;
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn = 32;
  c.max_len = 64;
  c.batch_size = 8;
  c.epochs = 2;
  c.lr = 1e-3;
  c.seed = 5;
  c.run_root = root.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void expect_same_losses(const std::vector<StepRecord>& a, const std::vector<StepRecord>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].step, b[i].step);
    EXPECT_NEAR(a[i].loss.total, b[i].loss.total, tol) << "step " << a[i].step;
    EXPECT_NEAR(a[i].loss.mlm, b[i].loss.mlm, tol);
    EXPECT_NEAR(a[i].loss.uor, b[i].loss.uor, tol);
    EXPECT_NEAR(a[i].loss.sbr, b[i].loss.sbr, tol);
    EXPECT_NEAR(a[i].loss.dm, b[i].loss.dm, tol);
  }
}

}  // namespace

TEST(Config, FileThenOverrides) {
  RunConfig c;
  std::istringstream text("# comment\nhidden = 32\nlambda2=0.5\n\nregime = mtf\neval_pairs = 10:1,10:5\n");
  run_schema().apply_text(c, text, "cfg");
  EXPECT_EQ(c.hidden, 32u);
  EXPECT_EQ(c.weights.lambda2, 0.5);
  EXPECT_EQ(c.regime, Regime::mtf);
  ASSERT_EQ(c.eval_pairs.size(), 2u);
  EXPECT_EQ(c.eval_pairs[1].k, 5u);
  run_schema().set(c, "hidden", "48");
  EXPECT_EQ(c.hidden, 48u);
  // The snapshot parses back to the same snapshot.
  RunConfig d;
  std::istringstream snap(run_schema().snapshot(c));
  run_schema().apply_text(d, snap, "snapshot");
  EXPECT_EQ(run_schema().snapshot(d), run_schema().snapshot(c));
}

TEST(Config, SchemaViolations) {
  RunConfig c;
  auto bad = [&](const std::string& text) {
    std::istringstream in(text);
    EXPECT_THROW(run_schema().apply_text(c, in, "cfg"), ConfigError) << text;
  };
  bad("no_such_key = 1\n");
  bad("hidden = -4\n");
  bad("hidden = 4.5\n");
  bad("delta = 1.5\n");
  bad("lambda1 = -1\n");
  bad("regime = pretrain\n");
  bad("eval_pairs = 10:11\n");
  bad("keep_heads = maybe\n");
  bad("just words\n");
  c = RunConfig{};
  c.train = "x";
  c.hidden = 30;
  c.heads = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  EXPECT_THROW(c.validate(), ConfigError);  // no train path
  c.train = "x";
  c.regime = Regime::dap_finetune;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, RegimeEpochDefaults) {
  RunConfig c;
  c.regime = Regime::dap_posttrain;
  EXPECT_EQ(c.effective_epochs(), 3u);
  c.regime = Regime::mtf;
  EXPECT_EQ(c.effective_epochs(), 2u);
  c.epochs = 0;
  EXPECT_EQ(c.effective_epochs(), 0u);
}

TEST(Training, PosttrainIsDeterministicAndWritesRunFiles) {
  const auto root = scratch("det");
  const auto data = tiny_corpora();
  auto c = tiny_config(root, Regime::dap_posttrain);
  c.max_steps = 10;
  c.epochs = 3;
  const auto a = run_dap_posttrain(c, data);
  const auto b = run_dap_posttrain(c, data);
  ASSERT_EQ(a.log.steps.size(), 10u);
  expect_same_losses(a.log.steps, b.log.steps, 0.0);
  EXPECT_NE(a.dir, b.dir);
  for (const char* f : {"config.txt", "train_log.jsonl", "model.ckpt", "last.ckpt"}) EXPECT_TRUE(fs::exists(a.dir / f)) << f;
  EXPECT_EQ(slurp(a.dir / "model.ckpt"), slurp(b.dir / "model.ckpt"));
  EXPECT_NE(a.dir.filename().string().find("-seed5"), std::string::npos);
  // Every objective contributed.
  const auto& s = a.log.steps.front().loss;
  EXPECT_GT(s.mlm_count, 0u);
  EXPECT_GT(s.nsp_count, 0u);
  EXPECT_GT(s.uor_count, 0u);
  EXPECT_GT(s.sbr_count, 0u);
  EXPECT_NEAR(s.total, s.mlm + s.nsp + s.uor + s.sbr, 1e-9);
  // The log on disk matches the in-memory one.
  const auto disk = read_train_log((a.dir / "train_log.jsonl").string());
  expect_same_losses(disk.steps, a.log.steps, 1e-12);
  // A different seed changes the trajectory.
  c.seed = 6;
  EXPECT_NE(run_dap_posttrain(c, data).log.steps.front().loss.total, a.log.steps.front().loss.total);
}

TEST(Training, ResumeReproducesTheTail) {
  const auto root = scratch("resume");
  const auto data = tiny_corpora();
  auto c = tiny_config(root, Regime::mtf);
  c.epochs = 2;
  const auto full = run_mtf(c, data);
  const std::size_t total = full.log.steps.size();
  ASSERT_GT(total, 4u);

  auto partial = c;
  partial.max_steps = 3;
  partial.checkpoint_every = 3;
  const auto head = run_mtf(partial, data);
  auto resumed = c;
  resumed.resume = (head.dir / "last.ckpt").string();
  const auto tail = run_mtf(resumed, data);
  ASSERT_EQ(tail.log.steps.size(), total - 3);
  expect_same_losses(tail.log.steps,
                     std::vector<StepRecord>(full.log.steps.begin() + 3, full.log.steps.end()), 1e-9);

  auto wrong = c;
  wrong.hidden = 32;
  wrong.resume = resumed.resume;
  EXPECT_THROW(run_mtf(wrong, data), VersionError);
}

TEST(Training, ZeroEpochsKeepsInitialParameters) {
  const auto root = scratch("zero");
  const auto data = tiny_corpora();
  auto c = tiny_config(root, Regime::baseline_finetune);
  c.epochs = 0;
  const auto r = run_finetune(c, data);
  EXPECT_TRUE(r.log.steps.empty());
  const auto fresh = new_model(c, build_vocab(c, data.train));
  for (const auto& [name, t] : fresh.params) {
    const auto& got = r.model.params.get(name);
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), got.data().begin())) << name;
  }
  ASSERT_TRUE(r.report.has_value());
  EXPECT_EQ(r.report_split, "test");
}

TEST(Training, FinetuneFromPosttrainedCheckpoint) {
  const auto root = scratch("chain");
  const auto data = tiny_corpora();
  auto post = tiny_config(root, Regime::dap_posttrain);
  post.epochs = 1;
  const auto p = run_dap_posttrain(post, data);
  const auto ck = encoder::load_checkpoint(p.checkpoint.string());
  EXPECT_EQ(ck.header.at("regime"), "dap-posttrain");

  auto ft = tiny_config(root, Regime::dap_finetune);
  ft.init_checkpoint = p.checkpoint.string();
  ft.epochs = 1;
  const auto r = run_finetune(ft, data);
  ASSERT_TRUE(r.report.has_value());
  EXPECT_EQ(r.log.epochs.size(), 1u);
  EXPECT_TRUE(fs::exists(r.dir / "metrics.json"));
  EXPECT_TRUE(fs::exists(r.dir / "metrics.txt"));
  // Encoder weights came from the checkpoint: the first step's loss differs
  // from a random-init run with identical settings.
  auto base = ft;
  base.regime = Regime::baseline_finetune;
  base.init_checkpoint.clear();
  EXPECT_NE(run_finetune(base, data).log.steps.front().loss.dm, r.log.steps.front().loss.dm);

  auto mismatch = ft;
  mismatch.hidden = 32;
  EXPECT_THROW(run_finetune(mismatch, data), VersionError);
}

TEST(Training, MtfWithAuxiliaryWeightsOffMatchesBaseline) {
  const auto root = scratch("mtf0");
  const auto data = tiny_corpora();
  auto c = tiny_config(root, Regime::baseline_finetune);
  const auto base = run_finetune(c, data);
  c.regime = Regime::mtf;
  c.weights.beta2 = 0;
  c.weights.beta3 = 0;
  const auto mtf = run_mtf(c, data);
  expect_same_losses(base.log.steps, mtf.log.steps, 0.0);
  EXPECT_EQ(slurp(base.dir / "metrics.json"), slurp(mtf.dir / "metrics.json"));
}

TEST(Training, MultichoiceRuns) {
  const auto root = scratch("mc");
  synth::SynthConfig s;
  s.dialogues = 30;
  s.mean_turns = 4;
  s.turn_spread = 1;
  s.mean_words = 5;
  s.word_spread = 1;
  s.candidates = 4;
  s.seed = 9;
  const auto parts = synth::split(synth::generate(s), {0.7, 0.3}, 1);
  Corpora data{parts[0], parts[1], {}};
  auto c = tiny_config(root, Regime::mtf);
  c.task = Task::multichoice;
  c.epochs = 1;
  const auto r = run_mtf(c, data);
  EXPECT_EQ(r.log.steps.front().loss.dm_count, 8u);
  ASSERT_TRUE(r.report.has_value());
  EXPECT_EQ(r.report_split, "valid");
  data.train[0].candidates[1].label = 1;
  EXPECT_THROW(run_mtf(c, data), DataError);
}

TEST(Training, NonFiniteLossAbortsWithoutClobberingCheckpoint) {
  const auto root = scratch("nan");
  const auto data = tiny_corpora();
  auto c = tiny_config(root, Regime::mtf);
  c.run_dir = (root / "run").string();
  c.epochs = 1;
  run_mtf(c, data);
  const auto good = slurp(root / "run" / "last.ckpt");
  c.lr = 1e30;
  c.epochs = 3;
  EXPECT_THROW(run_mtf(c, data), NumericError);
  // The aborted run may have replaced last.ckpt only by a complete file.
  const auto after = encoder::load_checkpoint((root / "run" / "last.ckpt").string());
  EXPECT_TRUE(after.has_optimizer);
  EXPECT_FALSE(good.empty());
}

TEST(Sweep, WritesTableAndNeedsZero) {
  const auto root = scratch("sweep");
  const auto data = tiny_corpora();
  auto c = tiny_config(root, Regime::mtf);
  c.epochs = 1;
  const auto rows = sweep_delta(c, data, {0.0, 0.5}, root / "out");
  ASSERT_EQ(rows.size(), 2u);
  const auto table = slurp(root / "out" / "sweep.tsv");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(root / "out" / "sweep.dat"));
  EXPECT_THROW(sweep_delta(c, data, {0.2, 0.5}, root / "bad"), InvalidArgument);
  EXPECT_THROW(sweep_delta(c, data, {0.0}, root / "bad"), InvalidArgument);
}

namespace {

int run_cli(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "spider");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int rc = cli_main(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  return rc;
}

}  // namespace

TEST(Cli, ExitCodes) {
  const auto root = scratch("cli-codes");
  EXPECT_EQ(run_cli({}), 2);
  EXPECT_EQ(run_cli({"frobnicate"}), 2);
  EXPECT_EQ(run_cli({"mtf", "--no-such-flag", "1"}), 2);
  EXPECT_EQ(run_cli({"eval"}), 2);
  EXPECT_EQ(run_cli({"mtf", "--train", "x", "--hidden", "abc"}), 3);
  EXPECT_EQ(run_cli({"mtf", "--train", "x", "--set", "nope=1"}), 3);
  EXPECT_EQ(run_cli({"mtf", "--train", "x", "--delta", "2"}), 3);
  EXPECT_EQ(run_cli({"mtf"}), 3);  // regime requires a training corpus
  {
    std::ofstream cfg(root / "bad.cfg");
    cfg << "hidden = 16\nwhatever = 3\n";
  }
  EXPECT_EQ(run_cli({"mtf", "--config", (root / "bad.cfg").string(), "--train", "x"}), 3);
  EXPECT_EQ(run_cli({"mtf", "--train", (root / "missing.jsonl").string(), "--run-root", root.string()}), 1);
  std::string help;
  EXPECT_EQ(run_cli({"--help"}, &help), 0);
  EXPECT_NE(help.find("gradcheck"), std::string::npos);
  EXPECT_EQ(run_cli({"posttrain", "--print-schema"}, &help), 0);
  EXPECT_NE(help.find("lambda2"), std::string::npos);
}

TEST(Cli, SynthIsDeterministic) {
  const auto root = scratch("cli-synth");
  const std::vector<std::string> common{"synth", "--seed", "7", "--dialogues", "50", "--mean-turns", "4",
                                        "--turn-spread", "1", "--mean-words", "5", "--word-spread", "1"};
  auto a = common, b = common;
  a.insert(a.end(), {"--out", (root / "a").string()});
  b.insert(b.end(), {"--out", (root / "b").string()});
  ASSERT_EQ(run_cli(a), 0);
  ASSERT_EQ(run_cli(b), 0);
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "stats.json", "config.txt"}) {
    EXPECT_FALSE(slurp(root / "a" / f).empty()) << f;
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  }
}

TEST(Cli, FlagsOverrideConfigFile) {
  const auto root = scratch("cli-train");
  ASSERT_EQ(run_cli({"synth", "--seed", "2", "--dialogues", "40", "--mean-turns", "4", "--turn-spread", "1",
                     "--mean-words", "5", "--word-spread", "1", "--out", (root / "data").string()}),
            0);
  {
    std::ofstream cfg(root / "run.cfg");
    cfg << "hidden = 16\nheads = 2\nffn = 32\nlayers = 1\nmax_len = 64\nbatch_size = 8\nepochs = 1\nseed = 1\n";
  }
  std::string out;
  ASSERT_EQ(run_cli({"mtf", "--config", (root / "run.cfg").string(), "--seed", "9", "--train",
                     (root / "data" / "train.jsonl").string(), "--valid", (root / "data" / "valid.jsonl").string(),
                     "--run-root", (root / "runs").string()},
                    &out),
            0);
  const auto line = out.substr(0, out.find('\n'));
  const fs::path dir = line.substr(std::string("run_dir ").size());
  EXPECT_NE(dir.filename().string().find("-mtf-seed9"), std::string::npos);
  const auto snapshot = slurp(dir / "config.txt");
  EXPECT_NE(snapshot.find("seed = 9\n"), std::string::npos);
  EXPECT_NE(snapshot.find("hidden = 16\n"), std::string::npos);
  for (const char* f : {"train_log.jsonl", "model.ckpt", "metrics.json", "metrics.txt"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  // The saved model scores a corpus through eval.
  ASSERT_EQ(run_cli({"eval", "--checkpoint", (dir / "model.ckpt").string(), "--corpus",
                     (root / "data" / "test.jsonl").string(), "--run-root", (root / "runs").string()},
                    &out),
            0);
  EXPECT_EQ(out.rfind("count ", 0), 0u);
}

TEST(Cli, EvalPredictionsWithoutModel) {
  const auto root = scratch("cli-eval");
  {
    std::ofstream p(root / "p.jsonl");
    p << "{\"id\":\"a\",\"scores\":[0.1,0.9,0.5],\"labels\":[1,0,1]}\n";
    p << "{\"id\":\"b\",\"scores\":[0.4,0.3,0.2,0.1],\"labels\":[0,1,0,0]}\n";
  }
  std::string out;
  ASSERT_EQ(run_cli({"eval", "--predictions", (root / "p.jsonl").string(), "--run-root", root.string()}, &out), 0);
  // AP(a) = (1/2 + 2/3) / 2, AP(b) = 1/2.
  EXPECT_NE(out.find("MAP 0.541667"), std::string::npos) << out;
  EXPECT_NE(out.find("MRR 0.500000"), std::string::npos) << out;
  {
    std::ofstream p(root / "bad.jsonl");
    p << "{\"scores\":[0.1],\"labels\":[1,0]}\n";
  }
  EXPECT_EQ(run_cli({"eval", "--predictions", (root / "bad.jsonl").string(), "--run-root", root.string()}), 1);
}

TEST(Cli, GradcheckExitStatus) {
  std::string out;
  EXPECT_EQ(run_cli({"gradcheck", "--seeds", "1", "--loss", "nsp,dm_binary"}, &out), 0);
  EXPECT_NE(out.find("PASS nsp"), std::string::npos);
  EXPECT_EQ(run_cli({"gradcheck", "--seeds", "1", "--loss", "nsp", "--tolerance", "0"}), 1);
}
