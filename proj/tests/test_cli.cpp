#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "difflab/cli.hpp"
#include "support/cli_runner.hpp"

using namespace difflab::testing;

namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("difflab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    corpus_ = dir_ / "corpus.txt";
    std::string text;
    while (text.size() < 2048) text += "a small corpus about masked diffusion over bytes. ";
    std::ofstream(corpus_) << text;
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliResult run(std::vector<std::string> args) { return run_difflab(args, dir_ / "io"); }

  // A few updates of a tiny model; returns the checkpoint path.
  fs::path train_tiny(const std::string& backbone = "ssm_only") {
    const fs::path ckpt = dir_ / (backbone + ".ckpt");
    const CliResult r = run({"train", "--data", corpus_.string(), "--steps", "6", "--batch", "2", "--context", "32",
                             "--backbone", backbone, "--ckpt", ckpt.string(), "--model.n_layers", "2",
                             "--model.d_model", "16", "--model.d_head", "8", "--model.d_state", "4",
                             "--model.K", "1", "--train.log_interval", "2", "--train.eval_interval", "0"});
    EXPECT_EQ(r.code, 0) << r.err;
    return ckpt;
  }

  fs::path dir_;
  fs::path corpus_;
};

bool has_line(const std::string& text, const std::string& line) {
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) {
    if (l == line) return true;
  }
  return false;
}

}  // namespace

TEST_F(Cli, MissingSubcommandIsUsageError) {
  const CliResult r = run({});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage:"), std::string::npos);
  EXPECT_TRUE(r.out.empty());
}

TEST_F(Cli, UnknownSubcommandIsUsageError) {
  const CliResult r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown subcommand 'frobnicate'"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("Usage:"), std::string::npos);
}

TEST_F(Cli, UnknownFlagIsUsageError) {
  const CliResult r = run({"sample", "--no-such-flag", "3"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage:"), std::string::npos);
}

TEST_F(Cli, HelpSucceeds) {
  const CliResult r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train"), std::string::npos);
  EXPECT_NE(r.out.find("--model.pattern_kind"), std::string::npos);
}

TEST_F(Cli, DataAndConfigErrorsExitTwo) {
  EXPECT_EQ(run({"train", "--data", (dir_ / "missing.txt").string()}).code, 2);
  EXPECT_EQ(run({"train", "--data", corpus_.string(), "--backbone", "transformer"}).code, 2);
  EXPECT_EQ(run({"train", "--data", corpus_.string(), "--steps", "many"}).code, 2);
  EXPECT_EQ(run({"sample", "--ckpt", corpus_.string()}).code, 2);
  std::ofstream(dir_ / "bad.cfg") << "model.colour = blue\n";
  const CliResult r = run({"--config", (dir_ / "bad.cfg").string(), "sample"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model.colour"), std::string::npos);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  std::ofstream(dir_ / "run.cfg") << "# tiny run\n"
                                  << "train.steps = 9\n"
                                  << "sample.length = 20\n"
                                  << "sample.temperature = 0.7\n";
  const fs::path ckpt = train_tiny();
  const CliResult r = run({"--config", (dir_ / "run.cfg").string(), "sample", "--ckpt", ckpt.string(), "--len",
                           "12", "--steps", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has_line(r.err, "sample.length = 12"));
  EXPECT_TRUE(has_line(r.err, "sample.temperature = 0.7"));
  EXPECT_TRUE(has_line(r.err, "train.steps = 9"));
  EXPECT_EQ(r.out.size(), 13u);  // 12 bytes and a newline
}

TEST_F(Cli, TrainWritesRecordsAndCheckpoint) {
  const fs::path ckpt = train_tiny();
  EXPECT_TRUE(fs::exists(ckpt));
  const CliResult r = run({"inspect", ckpt.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has_line(r.out, "pattern_kind=ssm_only"));
  EXPECT_TRUE(has_line(r.out, "step=6"));
  EXPECT_TRUE(has_line(r.out, "optimizer=true"));
  EXPECT_NE(r.out.find("tensor embed"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("tensor optim.m."), std::string::npos);
}

TEST_F(Cli, SamplingIsDeterministicPerSeed) {
  const fs::path ckpt = train_tiny("hybrid");
  auto sample = [&](const std::string& seed) {
    const CliResult r = run({"--seed", seed, "sample", "--ckpt", ckpt.string(), "--len", "32", "--steps", "8"});
    EXPECT_EQ(r.code, 0) << r.err;
    return r.out;
  };
  const std::string a = sample("4");
  EXPECT_EQ(a, sample("4"));
  EXPECT_NE(a, sample("5"));
  EXPECT_EQ(a.size(), 33u);
}

TEST_F(Cli, EvalPrintsFiniteBound) {
  const fs::path ckpt = train_tiny("attention_only");
  const std::vector<std::string> args{"eval", "--ckpt", ckpt.string(), "--data", corpus_.string(), "--mc", "2"};
  const CliResult a = run(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, run(args).out);
  std::istringstream in(a.out);
  std::string label;
  double bound = 0.0;
  in >> label >> bound;
  EXPECT_EQ(label, "ppl_bound");
  EXPECT_TRUE(std::isfinite(bound));
  EXPECT_GT(bound, 1.0);
}

TEST_F(Cli, BenchWritesOneRowPerCell) {
  const CliResult r = run({"bench", "--lengths", "8,16,32,64", "--steps", "2", "--warmup", "1", "--runs", "2",
                           "--backbones", "ssm_only,attention_only", "--out-dir", (dir_ / "bench").string(),
                           "--model.n_layers", "2", "--model.d_model", "16", "--model.d_head", "8"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string tag, csv;
  in >> tag >> csv;
  ASSERT_EQ(tag, "csv");
  EXPECT_EQ(csv_data_rows(csv), 8u);
  EXPECT_TRUE(fs::exists(fs::path(csv).replace_extension(".svg")));
  EXPECT_NE(r.out.find("exponent ssm_only"), std::string::npos);
}

TEST(CliInProcess, StreamsAreInjected) {
  std::ostringstream out, err;
  const char* argv[] = {"difflab", "inspect"};
  EXPECT_EQ(difflab::run_cli(2, argv, out, err), 1);
  EXPECT_NE(err.str().find("Usage:"), std::string::npos);
  EXPECT_TRUE(out.str().empty());
}
