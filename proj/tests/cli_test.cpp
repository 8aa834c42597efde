// tests/cli_test.cpp

// Copyright 2026  MT-KWS Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include "mtkws/cli.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

namespace mtkws {
namespace {

using test::TempDir;

// small enough to run the whole pipeline in seconds
std::string small_config_text() {
  return
      "seed=11\n"
      "corpus.n_keywords=5\n"
      "corpus.train_per_class=5\n"
      "corpus.test_per_class=3\n"
      "corpus.duration_s=0.4\n"
      "mixing.pretrain_count=48\n"
      "mixing.eval_count=24\n"
      "tokenizer.codebook_size=8\n"
      "backbone.model_dim=32\n"
      "backbone.layers=1\n"
      "backbone.heads=2\n"
      "backbone.ffn_dim=64\n"
      "pretrain.modes=mt_bce\n"
      "pretrain.steps=30\n"
      "pretrain.warmup_steps=5\n"
      "pretrain.batch_size=8\n"
      "pretrain.checkpoint_every=15\n"
      "adapt.strategies=clean,mt\n"
      "adapt.shots=2\n"
      "adapt.repeats=2\n"
      "adapt.epochs=12\n"
      "adapt.hidden_dim=32\n"
      "eval.conditions=clean,2mix\n";
}

int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
  std::ostringstream out, err;
  int code = run_cli(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

TEST(LoadConfig, DefaultsEchoTheTemperature) {
  ExperimentConfig cfg;
  std::string echoed = format_config(cfg);
  EXPECT_NE(echoed.find("backbone.temperature=0.1"), std::string::npos);
}

TEST(LoadConfig, RoundTripIsExact) {
  TempDir dir("cfg");
  ExperimentConfig cfg;
  cfg.seed = 123;
  cfg.tokenizer_codebook_size = 17;
  cfg.pretrain_modes = {"mpc_nll"};
  write_text_file(dir.path() / "a.cfg", format_config(cfg));
  ExperimentConfig loaded = load_config(dir.path() / "a.cfg");
  EXPECT_EQ(format_config(loaded), format_config(cfg));
  EXPECT_EQ(config_hash(loaded), config_hash(cfg));
}

TEST(LoadConfig, ValidationCitesKeyAndConstraint) {
  TempDir dir("cfg");
  write_text_file(dir.path() / "bad.cfg", "tokenizer.codebook_size=1\n");
  try {
    load_config(dir.path() / "bad.cfg");
    FAIL() << "expected validation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kValidation);
    EXPECT_NE(std::string(e.what()).find("tokenizer.codebook_size"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("at least 2"), std::string::npos);
  }
}

TEST(LoadConfig, UnknownKeyRejected) {
  TempDir dir("cfg");
  write_text_file(dir.path() / "bad.cfg", "tokenizer.codebookk_size=10\n");
  EXPECT_THROW(load_config(dir.path() / "bad.cfg"), Error);
}

TEST(Cli, UnknownCommandIsUsageError) {
  std::string err;
  EXPECT_EQ(run({"frobnicate"}, nullptr, &err), 2);
  EXPECT_NE(err.find("usage error"), std::string::npos);
}

TEST(Cli, UnknownFlagIsUsageError) {
  EXPECT_EQ(run({"synth-data", "--frobnicate"}), 2);
}

TEST(Cli, PretrainWithoutTokenizerArtifactsNamesTheMissingTargets) {
  TempDir dir("cli");
  write_text_file(dir.path() / "cfg", small_config_text());
  std::string cfg = (dir.path() / "cfg").string();
  std::string wd = (dir.path() / "work").string();
  ASSERT_EQ(run({"synth-data", "--config", cfg, "--workdir", wd}), 0);
  ASSERT_EQ(run({"mix-build", "--config", cfg, "--workdir", wd}), 0);
  std::string err;
  EXPECT_EQ(run({"pretrain", "--mode", "mt_bce", "--config", cfg, "--workdir", wd}, nullptr,
                &err),
            1);
  EXPECT_NE(err.find("n-hot targets"), std::string::npos) << err;
}

TEST(Cli, FullPipelineHappyPathAndEvalSummary) {
  TempDir dir("cli");
  write_text_file(dir.path() / "cfg", small_config_text());
  std::string cfg = (dir.path() / "cfg").string();
  std::string wd = (dir.path() / "work").string();
  ASSERT_EQ(run({"synth-data", "--config", cfg, "--workdir", wd}), 0);
  ASSERT_EQ(run({"mix-build", "--config", cfg, "--workdir", wd}), 0);
  ASSERT_EQ(run({"tokenize", "--config", cfg, "--workdir", wd}), 0);
  ASSERT_EQ(run({"pretrain", "--mode", "mt_bce", "--config", cfg, "--workdir", wd}), 0);
  ASSERT_EQ(run({"adapt", "--config", cfg, "--workdir", wd}), 0);

  std::string out;
  ASSERT_EQ(run({"eval", "--condition", "2mix", "--config", cfg, "--workdir", wd}, &out), 0);
  EXPECT_NE(out.find("Top-2 ACC"), std::string::npos) << out;
  EXPECT_NE(out.find("EER"), std::string::npos);

  ASSERT_EQ(run({"eval", "--condition", "clean", "--config", cfg, "--workdir", wd}), 0);
  ASSERT_EQ(run({"report", "--config", cfg, "--workdir", wd}, &out), 0);
  EXPECT_NE(out.find("== 2mix test"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(wd) / "report.tsv"));
  EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(wd) / "report.txt"));

  // effective config echo is reloadable and equal (round trip)
  ExperimentConfig echoed = load_config(std::filesystem::path(wd) / "config.effective");
  ExperimentConfig original = load_config(cfg);
  EXPECT_EQ(format_config(echoed), format_config(original));
}

TEST(Cli, SeedOverrideChangesProvenance) {
  TempDir dir("cli");
  write_text_file(dir.path() / "cfg", small_config_text());
  std::string cfg = (dir.path() / "cfg").string();
  std::string wd = (dir.path() / "work").string();
  ASSERT_EQ(run({"synth-data", "--config", cfg, "--workdir", wd}), 0);
  // downstream under a different seed must refuse the upstream artifacts
  std::string err;
  EXPECT_EQ(run({"mix-build", "--config", cfg, "--seed", "999", "--workdir", wd}, nullptr, &err),
            1);
  EXPECT_NE(err.find("provenance"), std::string::npos) << err;
}

TEST(Cli, StageOutOfOrderIsHardError) {
  TempDir dir("cli");
  write_text_file(dir.path() / "cfg", small_config_text());
  std::string err;
  EXPECT_EQ(run({"tokenize", "--config", (dir.path() / "cfg").string(), "--workdir",
                 (dir.path() / "work").string()},
                nullptr, &err),
            1);
  EXPECT_NE(err.find("synth-data"), std::string::npos) << err;
}

TEST(Cli, ConfigValidationFailureIsStageError) {
  TempDir dir("cli");
  write_text_file(dir.path() / "cfg", "tokenizer.codebook_size=1\n");
  std::string err;
  EXPECT_EQ(run({"synth-data", "--config", (dir.path() / "cfg").string(), "--workdir",
                 (dir.path() / "w").string()},
                nullptr, &err),
            1);
  EXPECT_NE(err.find("tokenizer.codebook_size"), std::string::npos);
}

}  // namespace
}  // namespace mtkws
