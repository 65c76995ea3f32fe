#include <gtest/gtest.h>

#include "dsain/embedding.hpp"
#include "dsain/model.hpp"
#include "dsain/trainer.hpp"
#include "test_util.hpp"

namespace dsain {
namespace {

using test::sample_record;
using test::tiny_cfg;

TEST(Config, PaperDefaultsSatisfyCarvingIdentity) {
  ModelConfig cfg;  // defaults: d2 = 8, micro depth 2
  EXPECT_EQ(cfg.derived_d1(), 144);
  EXPECT_EQ(cfg.d1, 144);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, ViolatedInvariantsAreNamed) {
  ModelConfig cfg = tiny_cfg();
  cfg.Lw = 3;  // 4 % 3 != 0
  try {
    cfg.validate();
    FAIL() << "expected invariant failure";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("mod"), std::string::npos);
  }
  cfg = tiny_cfg();
  cfg.d1 = 23;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_cfg();
  cfg.tau = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(InitParams, SameSeedSameParameters) {
  ModelConfig cfg = tiny_cfg();
  ModelParams a = init_params(cfg);
  ModelParams b = init_params(cfg);
  ASSERT_EQ(a.entries().size(), b.entries().size());
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    EXPECT_EQ(a.entries()[i].first, b.entries()[i].first);
    EXPECT_EQ(a.entries()[i].second.data(), b.entries()[i].second.data());
  }
}

TEST(InitParams, PaddingRowsAndLayerNormAffine) {
  ModelConfig cfg = tiny_cfg();
  ModelParams params = init_params(cfg);
  for (const char* name : {"embed.item", "embed.user", "embed.ctx", "embed.situ.k0"}) {
    const Tensor& t = params.at(name);
    for (std::int64_t c = 0; c < t.dim(1); ++c)
      EXPECT_EQ(t.data()[static_cast<std::size_t>(c)], 0.0) << name;
  }
  for (double v : params.at("cfm.adj.ln_gain").data()) EXPECT_EQ(v, 1.0);
  for (double v : params.at("cfm.adj.ln_bias").data()) EXPECT_EQ(v, 0.0);
  for (double v : params.at("cfm.fuse.w").data()) EXPECT_EQ(v, 1.0 / 3.0);
}

TEST(Lookup, AllPaddingSequenceIsZero) {
  ModelConfig cfg = tiny_cfg();
  ModelParams params = init_params(cfg);
  TrainRecord rec = sample_record(cfg);
  auto& seq = rec.sequence;
  std::fill(seq.item_ids.begin(), seq.item_ids.end(), 0);
  std::fill(seq.mask.begin(), seq.mask.end(), 0);
  for (auto& s : seq.situations) std::fill(s.ids.begin(), s.ids.end(), 0);
  Tape tape;
  LookedUp lk = lookup_sequence(tape, params, cfg, rec);
  for (double v : lk.items.data()) EXPECT_EQ(v, 0.0);
  for (const auto& plane : lk.situ)
    for (double v : plane.data()) EXPECT_EQ(v, 0.0);
}

TEST(Lookup, DuplicateIdsAccumulateGradient) {
  ModelConfig cfg = tiny_cfg();
  cfg.L = 2;
  cfg.Lw = 1;
  ModelParams params = init_params(cfg);
  TrainRecord rec = sample_record(cfg);
  rec.sequence.item_ids = {3, 3};
  rec.sequence.mask = {1, 1};
  Tape tape;
  LookedUp lk = lookup_sequence(tape, params, cfg, rec);
  const auto& table = params.at("embed.item");
  for (std::int64_t c = 0; c < cfg.d2; ++c) {
    EXPECT_EQ(lk.items.data()[static_cast<std::size_t>(c)],
              table.data()[static_cast<std::size_t>(3 * cfg.d2 + c)]);
    EXPECT_EQ(lk.items.data()[static_cast<std::size_t>(cfg.d2 + c)],
              table.data()[static_cast<std::size_t>(3 * cfg.d2 + c)]);
  }
  Tensor loss = sum_all(tape, lk.items);
  params.zero_grad();
  tape.backward(loss);
  for (std::int64_t c = 0; c < cfg.d2; ++c)
    EXPECT_DOUBLE_EQ(table.grad()[static_cast<std::size_t>(3 * cfg.d2 + c)], 2.0);
}

TEST(Lookup, MatchesNaiveGatherBitwise) {
  ModelConfig cfg = tiny_cfg();
  ModelParams params = init_params(cfg);
  TrainRecord rec = sample_record(cfg, 17);
  Tape tape;
  LookedUp lk = lookup_sequence(tape, params, cfg, rec);
  const auto& table = params.at("embed.item").data();
  for (std::int64_t i = 0; i < cfg.L; ++i) {
    for (std::int64_t c = 0; c < cfg.d2; ++c) {
      double expected = rec.sequence.mask[static_cast<std::size_t>(i)]
                            ? table[static_cast<std::size_t>(
                                  rec.sequence.item_ids[static_cast<std::size_t>(i)] * cfg.d2 +
                                  c)]
                            : 0.0;
      EXPECT_EQ(lk.items.data()[static_cast<std::size_t>(i * cfg.d2 + c)], expected);
    }
  }
}

TEST(Lookup, OutOfRangeIdNamesField) {
  ModelConfig cfg = tiny_cfg();
  ModelParams params = init_params(cfg);
  TrainRecord rec = sample_record(cfg);
  rec.sequence.candidate_situation.ids[1] = cfg.situ_vocab[1] + 3;
  Tape tape;
  try {
    lookup_sequence(tape, params, cfg, rec);
    FAIL() << "expected range error";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("field 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(cfg.situ_vocab[1] + 3)), std::string::npos) << msg;
  }
}

TEST(Lookup, PaddingRowSurvivesOptimizerStep) {
  ModelConfig cfg = tiny_cfg();
  ModelParams params = init_params(cfg);
  AdamState adam = AdamState::init(params);
  TrainRecord rec = sample_record(cfg);
  Tape tape;
  GumbelNoise noise = GumbelNoise::draw(cfg.L, 5);
  Tensor yhat = model_forward(tape, params, cfg, rec, &noise);
  Tensor loss = nll_loss(tape, yhat, {rec.label});
  params.zero_grad();
  tape.backward(loss);
  adam_step(params, adam, 1e-3, 0.9, 0.999, 1e-8);
  for (const char* name : {"embed.item", "embed.user", "embed.ctx", "embed.situ.k0",
                           "embed.situ.k1"}) {
    const Tensor& t = params.at(name);
    for (std::int64_t c = 0; c < t.dim(1); ++c)
      EXPECT_EQ(t.data()[static_cast<std::size_t>(c)], 0.0) << name;
  }
}

// Relabeling the vocabularies (and permuting table rows to match) leaves the
// model output unchanged.
TEST(Lookup, RelabelingSymmetry) {
  ModelConfig cfg = tiny_cfg();
  ModelParams params = init_params(cfg);
  TrainRecord rec = sample_record(cfg, 23);

  Tape t1(false);
  double before = model_forward(t1, params, cfg, rec, nullptr).item();

  // cyclic permutation of real item ids: pi(i) = 1 + (i % (V-1))
  auto pi = [&](std::int64_t id) { return id == 0 ? 0 : 1 + id % (cfg.item_vocab - 1); };
  ModelParams permuted = init_params(cfg);
  {
    Tensor& table = permuted.at("embed.item");
    const Tensor& orig = params.at("embed.item");
    for (std::int64_t r = 0; r < cfg.item_vocab; ++r)
      for (std::int64_t c = 0; c < cfg.d2; ++c)
        table.data()[static_cast<std::size_t>(pi(r) * cfg.d2 + c)] =
            orig.data()[static_cast<std::size_t>(r * cfg.d2 + c)];
  }
  TrainRecord relabeled = rec;
  for (std::size_t i = 0; i < relabeled.sequence.item_ids.size(); ++i)
    relabeled.sequence.item_ids[i] = pi(relabeled.sequence.item_ids[i]);
  relabeled.sequence.candidate_item = pi(relabeled.sequence.candidate_item);

  Tape t2(false);
  double after = model_forward(t2, permuted, cfg, relabeled, nullptr).item();
  EXPECT_EQ(before, after);
}

TEST(Checkpoint, ModelRoundTrip) {
  ModelConfig cfg = tiny_cfg();
  ModelParams params = init_params(cfg);
  std::string path = ::testing::TempDir() + "model_ckpt.bin";
  params.save(path);
  ModelParams loaded = ModelParams::load(path);
  TrainRecord rec = sample_record(cfg, 29);
  Tape t1(false), t2(false);
  EXPECT_EQ(model_forward(t1, params, cfg, rec, nullptr).item(),
            model_forward(t2, loaded, cfg, rec, nullptr).item());
}

}  // namespace
}  // namespace dsain
