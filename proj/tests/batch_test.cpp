#include <gtest/gtest.h>

#include "dsain/batch.hpp"
#include "dsain/trainer.hpp"
#include "test_util.hpp"

namespace dsain {
namespace {

using test::synth_for;
using test::tiny_cfg;

std::vector<TrainRecord> sample_batch(const ModelConfig& cfg, std::int64_t count,
                                      std::uint64_t seed) {
  SynthGenerator gen(synth_for(cfg, seed));
  return gen.take(count);
}

void expect_batch_matches_single(const ModelConfig& cfg, bool train_mode,
                                 const char* label) {
  ModelParams params = init_params(cfg);
  std::vector<TrainRecord> records = sample_batch(cfg, 5, 71);
  std::vector<GumbelNoise> noises;
  for (std::size_t e = 0; e < records.size(); ++e)
    noises.push_back(GumbelNoise::draw(cfg.L, 100 + e));

  Tape bt(false);
  Tensor batched = batch_forward(bt, params, cfg, records, train_mode ? &noises : nullptr);
  ASSERT_EQ(batched.size(), static_cast<std::int64_t>(records.size())) << label;
  for (std::size_t e = 0; e < records.size(); ++e) {
    Tape st(false);
    double single =
        model_forward(st, params, cfg, records[e], train_mode ? &noises[e] : nullptr).item();
    EXPECT_EQ(batched.data()[e], single) << label << " record " << e;
  }
}

TEST(BatchForward, MatchesSingleRecordPathBitwise) {
  ModelConfig cfg = tiny_cfg();
  expect_batch_matches_single(cfg, false, "eval");
  expect_batch_matches_single(cfg, true, "train");
}

TEST(BatchForward, MatchesAcrossVariants) {
  for (const char* variant :
       {"bdm_off", "sfe_no_general", "sfe_concat", "sfe_pool_concat", "sfe_pool_micro",
        "cfm_behavior_only", "cfm_channel_only", "cfm_feature_only", "cfm_no_behavior",
        "cfm_no_channel", "cfm_no_feature", "cfm_no_gelu", "sam_avg_pool", "sam_no_target",
        "sam_scalar_gate", "no_situation"}) {
    ModelConfig cfg = tiny_cfg();
    apply_variant(cfg, variant);
    expect_batch_matches_single(cfg, true, variant);
  }
}

TEST(BatchForward, MatchesWithPerPlaneMixerParameters) {
  ModelConfig cfg = tiny_cfg();
  cfg.cfm_shared_planes = false;
  expect_batch_matches_single(cfg, true, "per-plane mixers");
}

TEST(BatchForward, MatchesWithLiteralShiftOrderAndRealCountPooling) {
  ModelConfig cfg = tiny_cfg();
  cfg.shifted_literal_order = true;
  expect_batch_matches_single(cfg, true, "literal order");
  ModelConfig cfg2 = tiny_cfg();
  cfg2.divide_by_real_count = true;
  expect_batch_matches_single(cfg2, true, "real-count pooling");
}

TEST(BatchForward, MatchesAtLargerGeometry) {
  ModelConfig cfg = tiny_cfg();
  cfg.L = 12;
  cfg.Lw = 4;
  cfg.M = 2;
  expect_batch_matches_single(cfg, true, "L=12");
}

TEST(BatchForward, GradientsMatchSingleRecordPath) {
  ModelConfig cfg = tiny_cfg();
  std::vector<TrainRecord> records = sample_batch(cfg, 3, 81);
  std::vector<GumbelNoise> noises;
  std::vector<int> labels;
  for (std::size_t e = 0; e < records.size(); ++e) {
    noises.push_back(GumbelNoise::draw(cfg.L, 200 + e));
    labels.push_back(records[e].label);
  }

  ModelParams p1 = init_params(cfg);
  {
    Tape tape;
    Tensor yhat = batch_forward(tape, p1, cfg, records, &noises);
    Tensor loss = nll_loss(tape, yhat, labels);
    p1.zero_grad();
    tape.backward(loss);
  }
  ModelParams p2 = init_params(cfg);
  {
    Tape tape;
    std::vector<Tensor> yhats;
    for (std::size_t e = 0; e < records.size(); ++e)
      yhats.push_back(model_forward(tape, p2, cfg, records[e], &noises[e]));
    Tensor loss = nll_loss(tape, concat(tape, yhats, 0), labels);
    p2.zero_grad();
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < p1.entries().size(); ++i) {
    const Tensor& a = p1.entries()[i].second;
    const Tensor& b = p2.entries()[i].second;
    ASSERT_EQ(a.has_grad(), b.has_grad()) << p1.entries()[i].first;
    if (!a.has_grad()) continue;
    for (std::size_t j = 0; j < a.grad().size(); ++j)
      EXPECT_NEAR(a.grad()[j], b.grad()[j], 1e-12)
          << p1.entries()[i].first << "[" << j << "]";
  }
}

TEST(BatchForward, FlopCounterScalesWithBatch) {
  ModelConfig cfg = tiny_cfg();
  ModelParams params = init_params(cfg);
  std::vector<TrainRecord> records = sample_batch(cfg, 4, 91);
  FlopBreakdown measured;
  Tape tape(false);
  batch_forward(tape, params, cfg, records, nullptr, &measured);
  FlopEstimate est = flop_estimate(cfg);
  EXPECT_EQ(measured.total(), 4 * est.total);
  EXPECT_EQ(measured.cfm, 4 * est.by_module.cfm);
  EXPECT_EQ(measured.sam_seq, 4 * est.by_module.sam_seq);
}

}  // namespace
}  // namespace dsain
