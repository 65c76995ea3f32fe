#include <gtest/gtest.h>

#include <fstream>

#include "dsain/cli.hpp"

namespace dsain {
namespace {

int run_cli(std::initializer_list<const char*> args) {
  std::vector<const char*> argv{"dsain"};
  argv.insert(argv.end(), args.begin(), args.end());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

std::vector<std::string> tiny_model_sets() {
  return {"model.L=4",          "model.Lw=2",         "model.n=2",
          "model.d2=3",         "model.d1=24",        "model.M=1",
          "model.item_vocab=12", "model.user_vocab=6", "model.situ_vocab=4,5",
          "model.D_Lw=3",       "model.D_d2=4",       "model.D_n=3"};
}

int run_with_tiny_model(std::vector<const char*> args) {
  std::vector<std::string> storage;
  for (const auto& kv : tiny_model_sets()) {
    storage.push_back("--set");
    storage.push_back(kv);
  }
  std::vector<const char*> argv{"dsain"};
  argv.insert(argv.end(), args.begin(), args.end());
  for (const auto& s : storage) argv.push_back(s.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

TEST(Cli, UnknownFlagFailsNonzero) {
  EXPECT_NE(run_cli({"train", "--no-such-flag"}), 0);
  EXPECT_NE(run_cli({"frobnicate"}), 0);
}

TEST(Cli, BenchPrintsCarvingIdentity) {
  // stdout capture via gtest
  ::testing::internal::CaptureStdout();
  int rc = run_cli({"bench", "--set", "model.item_vocab=101", "--set", "model.user_vocab=31"});
  std::string out = ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(rc, 0);
  EXPECT_NE(out.find("= 144"), std::string::npos) << out;
  EXPECT_NE(out.find("total"), std::string::npos);
}

TEST(Cli, GradcheckPrintsSmallError) {
  ::testing::internal::CaptureStdout();
  int rc = run_with_tiny_model({"gradcheck", "--seed", "7", "--coords", "80"});
  std::string out = ::testing::internal::GetCapturedStdout();
  ASSERT_EQ(rc, 0);
  double err = std::stod(out);
  EXPECT_LT(err, 1e-4);
}

TEST(Cli, EvalOnEmptyFileFails) {
  std::string empty = ::testing::TempDir() + "cli_empty.jsonl";
  std::ofstream(empty).close();
  std::string ckpt = ::testing::TempDir() + "cli_dummy.ckpt";
  {
    ModelParams p;
    p.add("x", Tensor({1}, {0.0}));
    p.save(ckpt);
  }
  EXPECT_NE(run_with_tiny_model(
                {"eval", "--checkpoint", ckpt.c_str(), "--data", empty.c_str()}),
            0);
}

TEST(Cli, SynthTrainEvalPipeline) {
  std::string data = ::testing::TempDir() + "cli_data.jsonl";
  std::string eval_data = ::testing::TempDir() + "cli_eval.jsonl";
  std::string ckpt = ::testing::TempDir() + "cli_model.ckpt";
  std::string report = ::testing::TempDir() + "cli_report.json";
  std::string metrics = ::testing::TempDir() + "cli_metrics.json";

  ASSERT_EQ(run_with_tiny_model({"synth", "--out", data.c_str(), "--count", "64", "--seed",
                                 "5", "--set", "synth.len_min=2"}),
            0);
  ASSERT_EQ(run_with_tiny_model({"synth", "--out", eval_data.c_str(), "--count", "32",
                                 "--seed", "9", "--set", "synth.len_min=2"}),
            0);
  ASSERT_EQ(run_with_tiny_model({"train", "--data", data.c_str(), "--eval-data",
                                 eval_data.c_str(), "--checkpoint", ckpt.c_str(), "--out",
                                 report.c_str(), "--steps", "6", "--set",
                                 "train.batch_size=8", "--strict-ingest"}),
            0);
  {
    std::ifstream is(report);
    ASSERT_TRUE(is.good());
    nlohmann::json j = nlohmann::json::parse(is);
    EXPECT_EQ(j.at("steps").get<int>(), 6);
    EXPECT_GT(j.at("param_count").get<std::int64_t>(), 0);
  }
  ::testing::internal::CaptureStdout();
  int rc = run_with_tiny_model({"eval", "--checkpoint", ckpt.c_str(), "--data",
                                eval_data.c_str(), "--out", metrics.c_str()});
  std::string out = ::testing::internal::GetCapturedStdout();
  ASSERT_EQ(rc, 0);
  nlohmann::json j = nlohmann::json::parse(out);
  EXPECT_TRUE(j.contains("auc"));
  EXPECT_TRUE(j.contains("logloss"));
  EXPECT_EQ(j.at("n").get<int>(), 32);
}

TEST(Cli, TrainOnSynthWithVariant) {
  ::testing::internal::CaptureStdout();
  int rc = run_with_tiny_model({"train", "--synth", "--count", "48", "--steps", "4",
                                "--variant", "bdm_off", "--set", "train.batch_size=16",
                                "--set", "synth.len_min=2"});
  std::string out = ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(rc, 0);
  EXPECT_NE(out.find("epoch_losses"), std::string::npos);
}

TEST(Cli, AblateRunsSelectedVariants) {
  ::testing::internal::CaptureStdout();
  int rc = run_with_tiny_model({"ablate", "--synth", "--count", "32", "--steps", "2",
                                "--variants", "base,bdm_off,keep_x2,sam_avg_pool", "--set",
                                "train.batch_size=16", "--set", "synth.len_min=2"});
  std::string out = ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(rc, 0);
  for (const char* name : {"base", "bdm_off", "keep_x2", "sam_avg_pool"})
    EXPECT_NE(out.find(name), std::string::npos) << out;
}

TEST(Cli, ConfigFileRoundTrip) {
  std::string cfg_path = ::testing::TempDir() + "cli_cfg.txt";
  {
    std::ofstream os(cfg_path);
    os << "# comment line\n";
    os << "model.L = 4\n";
    os << "model.Lw = 2\n";
    os << "model.n = 2\n";
    os << "model.d2 = 3\n";
    os << "model.d1 = 24\n";
    os << "model.M = 1\n";
    os << "model.item_vocab = 12\n";
    os << "model.user_vocab = 6\n";
    os << "model.situ_vocab = 4,5\n";
    os << "train.batch_size = 16\n";
    os << "synth.len_min = 2\n";
  }
  ::testing::internal::CaptureStdout();
  int rc = run_cli({"train", "--config", cfg_path.c_str(), "--synth", "--count", "32",
                    "--steps", "2"});
  std::string out = ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(rc, 0) << out;
}

TEST(Cli, VariantGridIsComplete) {
  auto names = variant_names();
  // behavior denoising, exposure-keeping grid, encoder, mixer and
  // aggregation variants are all selectable
  for (const char* required :
       {"bdm_off", "keep_x2", "keep_x4", "keep_x8", "keep_x12", "keep_x16", "keep_x20",
        "sfe_pool_concat", "sfe_pool_micro", "sfe_concat", "sfe_no_general",
        "cfm_behavior_only", "cfm_channel_only", "cfm_feature_only", "cfm_no_feature",
        "cfm_no_channel", "cfm_no_behavior", "cfm_no_gelu", "sam_avg_pool", "sam_no_target",
        "sam_scalar_gate"})
    EXPECT_NE(std::find(names.begin(), names.end(), required), names.end()) << required;
  ModelConfig cfg;
  EXPECT_THROW(apply_variant(cfg, "definitely_not_a_variant"), std::invalid_argument);
}

}  // namespace
}  // namespace dsain
