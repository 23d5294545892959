#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "xldg/cli.hpp"

namespace fs = std::filesystem;
using namespace xldg;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct Outcome {
  int code;
  std::string out, err;
};

Outcome xldg_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

const std::vector<std::string> kTiny{"--d-model",    "16", "--heads",       "2", "--enc-layers", "1",
                                     "--dec-layers", "1",  "--ffn-dim",     "32", "--task-tokens", "3",
                                     "--pretrain-steps", "0", "--val-examples", "8", "--max-new-tokens", "6"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

class CliRun : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("xldg_cli_" + std::to_string(::getpid()) + "_" +
                                         ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
    ::setenv("XLDG_RUN_DIR", root_.c_str(), 1);
  }
  void TearDown() override {
    ::unsetenv("XLDG_RUN_DIR");
    fs::remove_all(root_);
  }
  void make_data(const std::string& out = "data", const std::string& seed = "7") {
    const auto r = xldg_run({"gen-data", "--langs", "2", "--concepts", "50", "--preset", "low", "--seed", seed, "-o", out});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  fs::path root_;
};

}  // namespace

TEST(FlatConfig, ParsesCommentsAndBlanks) {
  const auto m = cli::parse_flat("# header\n\nepochs = 4\nmode=direct  # trailing\n");
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m.at("epochs"), "4");
  EXPECT_EQ(m.at("mode"), "direct");
  EXPECT_THROW(cli::parse_flat("epochs 4\n"), std::invalid_argument);
}

TEST(FlatConfig, EchoRoundTripsEveryKey) {
  cli::RunConfig a;
  a.set("lambdas", "0.15,0.35");
  a.set("seeds", "4,5");
  a.set("sigma", "0.1");
  a.set("symmetrize-negatives", "true");
  a.set("d-model", "32");
  cli::RunConfig b;
  cli::apply_flat(b, cli::to_flat(a, cli::config_keys()));
  for (const auto& k : cli::config_keys()) {
    if (k == "lr") continue;
    EXPECT_EQ(a.get(k), b.get(k)) << k;
  }
  EXPECT_EQ(b.lambdas, (std::vector<double>{0.15, 0.35}));
  EXPECT_EQ(b.sigma, 0.1);
  EXPECT_EQ(b.model.d_model, 32u);
}

TEST(FlatConfig, RejectsUnknownKeysAndBadValues) {
  cli::RunConfig c;
  EXPECT_THROW(c.set("no-such-key", "1"), std::invalid_argument);
  EXPECT_THROW(c.set("epochs", "ten"), std::invalid_argument);
  EXPECT_THROW(c.set("epochs", "-1"), std::invalid_argument);
  EXPECT_THROW(c.set("lambda", "0.2x"), std::invalid_argument);
  EXPECT_THROW(c.set("endpoints", "maybe"), std::invalid_argument);
}

TEST(FlatConfig, LearningRateDependsOnTuning) {
  cli::RunConfig c;
  EXPECT_EQ(c.resolved_lr(), 3e-4);
  c.tuning = "prompt-only";
  EXPECT_EQ(c.resolved_lr(), 1e-2);
  c.lr = 5e-3;
  EXPECT_EQ(c.resolved_lr(), 5e-3);
  EXPECT_EQ(c.train_config().learning_rate, 5e-3);
}

TEST(ModelCard, JsonRoundTrip) {
  cli::ModelCard card;
  card.model.d_model = 32;
  card.model.vocab_size = 604;
  card.model.n_languages = 3;
  card.languages = {{0, "aa"}, {1, "bb"}, {2, "cc"}};
  card.mode = "contrastive";
  card.tuning = "prompt-only";
  card.corpus_hash = 0xfedcba9876543210ull;
  const auto back = cli::parse_model_card(cli::model_card_json(card));
  EXPECT_EQ(back.model, card.model);
  EXPECT_EQ(back.languages, card.languages);
  EXPECT_EQ(back.mode, card.mode);
  EXPECT_EQ(back.tuning, card.tuning);
  EXPECT_EQ(back.corpus_hash, card.corpus_hash);
}

TEST_F(CliRun, UsageErrorsExitTwo) {
  EXPECT_EQ(xldg_run({}).code, 2);
  EXPECT_EQ(xldg_run({"frobnicate"}).code, 2);
  EXPECT_EQ(xldg_run({"gen-data", "--langs", "x"}).code, 2);
  EXPECT_EQ(xldg_run({"gen-data", "--preset", "huge"}).code, 2);
  EXPECT_EQ(xldg_run({"--help"}).code, 0);
}

TEST_F(CliRun, GenDataWritesUnderRunDirAndRefusesOverwrite) {
  make_data();
  EXPECT_TRUE(fs::exists(root_ / "data" / "config.txt"));
  EXPECT_TRUE(fs::exists(root_ / "data" / "corpus_hash.txt"));
  const auto again = xldg_run({"gen-data", "--langs", "2", "--concepts", "50", "--preset", "low", "-o", "data"});
  EXPECT_EQ(again.code, 1);
  EXPECT_NE(again.err.find("--force"), std::string::npos);
  const auto forced =
      xldg_run({"gen-data", "--langs", "2", "--concepts", "50", "--preset", "low", "-o", "data", "--force"});
  EXPECT_EQ(forced.code, 0) << forced.err;
  EXPECT_NE(forced.out.find("polysemy"), std::string::npos);
}

TEST_F(CliRun, FlagsOverrideConfigFileOverDefaults) {
  {
    std::ofstream f(root_ / "gen.cfg");
    f << "langs=2\nconcepts=60\npreset=low\n";
  }
  const auto r = xldg_run({"gen-data", "--config", (root_ / "gen.cfg").string(), "--concepts", "50", "-o", "d"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto echo = cli::parse_flat(slurp(root_ / "d" / "config.txt"));
  EXPECT_EQ(echo.at("langs"), "2");       // file over default 3
  EXPECT_EQ(echo.at("concepts"), "50");   // flag over file
  EXPECT_EQ(echo.at("corpus-seed"), "7"); // default
}

TEST_F(CliRun, TrainEvalInspectEndToEnd) {
  make_data();
  const auto base = with({"train", "--epochs", "1", "--batch-size", "8", "--lr", "1e-3"}, kTiny);
  auto r = xldg_run(with(base, {"--mode", "direct", "-o", "runs/direct"}));
  ASSERT_EQ(r.code, 0) << r.err;
  r = xldg_run(with(base, {"--mode", "contrastive", "-o", "runs/con"}));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"config.txt", "corpus_hash.txt", "model.json", "model.manifest", "last.json", "train_log.csv"}) {
    EXPECT_TRUE(fs::exists(root_ / "runs" / "con" / f)) << f;
  }
  const auto echo = cli::parse_flat(slurp(root_ / "runs" / "con" / "config.txt"));
  EXPECT_EQ(echo.at("lr"), "0.001");
  EXPECT_EQ(echo.at("mode"), "contrastive");
  EXPECT_EQ(cli::parse_model_card(slurp(root_ / "runs" / "con" / "model.json")).mode, "contrastive");

  r = xldg_run({"eval", "--run", "runs/direct", "--run", "runs/con", "--limit", "3", "-o", "ev"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root_ / "ev" / "direct" / "records.jsonl"));
  EXPECT_TRUE(fs::exists(root_ / "ev" / "con" / "pairs.csv"));
  EXPECT_TRUE(fs::exists(root_ / "ev" / "comparison.csv"));
  EXPECT_TRUE(fs::exists(root_ / "ev" / "charts" / "concept_f1.svg"));
  // 4 pairs x 3 examples
  const auto records = slurp(root_ / "ev" / "con" / "records.jsonl");
  EXPECT_EQ(std::count(records.begin(), records.end(), '\n'), 12);

  r = xldg_run({"inspect", "--run", "runs/direct", "--run", "runs/con", "--lang", "bb", "--index", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("-> aa  reference:"), std::string::npos);
  EXPECT_NE(r.out.find("con (contrastive):"), std::string::npos);
  EXPECT_EQ(xldg_run({"inspect", "--run", "runs/con", "--lang", "zz"}).code, 2);
}

TEST_F(CliRun, IdenticalInvocationsGiveIdenticalFiles) {
  make_data();
  const auto base = with({"train", "--mode", "contrastive", "--epochs", "1", "--batch-size", "8"}, kTiny);
  ASSERT_EQ(xldg_run(with(base, {"-o", "a"})).code, 0);
  ASSERT_EQ(xldg_run(with(base, {"-o", "b"})).code, 0);
  EXPECT_EQ(slurp(root_ / "a" / "train_log.csv"), slurp(root_ / "b" / "train_log.csv"));
  EXPECT_EQ(slurp(root_ / "a" / "model.bin"), slurp(root_ / "b" / "model.bin"));
  ASSERT_EQ(xldg_run({"eval", "--run", "a", "--limit", "2", "-o", "ea"}).code, 0);
  ASSERT_EQ(xldg_run({"eval", "--run", "a", "--limit", "2", "-o", "eb"}).code, 0);
  EXPECT_EQ(slurp(root_ / "ea" / "a" / "records.jsonl"), slurp(root_ / "eb" / "a" / "records.jsonl"));
  EXPECT_EQ(slurp(root_ / "ea" / "a" / "pairs.csv"), slurp(root_ / "eb" / "a" / "pairs.csv"));
}

TEST_F(CliRun, EvalRejectsForeignCorpus) {
  make_data();
  make_data("other", "8");
  ASSERT_EQ(xldg_run(with({"train", "--mode", "direct", "--epochs", "0", "-o", "r"}, kTiny)).code, 0);
  const auto r = xldg_run({"eval", "--run", "r", "--data", "other", "--limit", "1", "-o", "e"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("different corpus"), std::string::npos);
}

TEST_F(CliRun, InitReusesCheckpointAndChecksShape) {
  make_data();
  ASSERT_EQ(xldg_run(with({"train", "--mode", "direct", "--epochs", "0", "-o", "r0"}, kTiny)).code, 0);
  auto r = xldg_run(with({"train", "--mode", "direct", "--epochs", "0", "--init", "r0/model", "-o", "r1"}, kTiny));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(root_ / "r0" / "model.bin"), slurp(root_ / "r1" / "model.bin"));
  r = xldg_run(with(with({"train", "--mode", "direct", "--epochs", "0", "--init", "r0/model", "-o", "r2"}, kTiny),
                    {"--d-model", "8"}));
  EXPECT_EQ(r.code, 1) << r.err;
}

TEST_F(CliRun, AblateEmitsGridWithSharedLambdaZeroRow) {
  make_data();
  const auto r = xldg_run(with({"ablate", "--poolings", "mean,max", "--lambdas", "0.5", "--seeds", "1,2", "--endpoints", "true",
                                "--epochs", "1", "--batch-size", "8", "--limit", "2", "-o", "ab"},
                               kTiny));
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(root_ / "ab" / "ablation.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "pooling,lambda,metric,seed_1,seed_2,median");
  std::map<std::string, std::string> rows;
  std::size_t n = 0;
  while (std::getline(csv, line)) {
    ++n;
    const auto c1 = line.find(',');
    const auto c3 = line.find(',', line.find(',', c1 + 1) + 1);
    rows[line.substr(0, c3)] = line.substr(c3);
  }
  EXPECT_EQ(n, 2u * 3u * 3u);
  EXPECT_EQ(rows.at("mean,0,concept_f1"), rows.at("max,0,concept_f1"));
  EXPECT_TRUE(rows.count("max,1,language_mix_rate"));
  EXPECT_TRUE(fs::exists(root_ / "ab" / "cells" / "max-l0.5-s2" / "train_log.csv"));
}
