#include <gtest/gtest.h>

#include "dsain/predictor.hpp"
#include "test_util.hpp"

namespace dsain {
namespace {

using test::random_tensor;

/// O(P*N) pairwise oracle for the rank-based implementation.
double auc_bruteforce(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

ModelParams head_params(const ModelConfig& cfg, Rng& rng, double scale = 0.3) {
  ModelParams p;
  std::int64_t in = 4 * cfg.d2;
  std::size_t layers = cfg.head_hidden.size() + 1;
  for (std::size_t i = 0; i < layers; ++i) {
    std::int64_t out = i < cfg.head_hidden.size() ? cfg.head_hidden[i] : 1;
    p.add("head.l" + std::to_string(i) + ".w", random_tensor({out, in}, rng, scale));
    p.add("head.l" + std::to_string(i) + ".b", random_tensor({out}, rng, scale));
    in = out;
  }
  return p;
}

TEST(Predict, ZeroHeadGivesHalf) {
  ModelConfig cfg;
  cfg.d2 = 4;
  cfg.head_hidden = {5};
  Rng rng(3);
  ModelParams params = head_params(cfg, rng);
  for (auto& [name, t] : params.entries())
    for (auto& v : t.data()) v = 0.0;
  Tape tape;
  Tensor y = predict(tape, random_tensor({4}, rng), random_tensor({4}, rng),
                     random_tensor({4}, rng), random_tensor({4}, rng), params, cfg);
  EXPECT_DOUBLE_EQ(y.item(), 0.5);
}

TEST(Predict, MonotoneInFinalBias) {
  ModelConfig cfg;
  cfg.d2 = 4;
  cfg.head_hidden = {5};
  Rng rng(5);
  ModelParams params = head_params(cfg, rng);
  Tensor u = random_tensor({4}, rng), e = random_tensor({4}, rng), b = random_tensor({4}, rng),
         o = random_tensor({4}, rng);
  Tape tape;
  double base = predict(tape, u, e, b, o, params, cfg).item();
  params.at("head.l1.b").data()[0] += 0.5;
  double bumped = predict(tape, u, e, b, o, params, cfg).item();
  EXPECT_GT(bumped, base);
}

TEST(Predict, OneDimensionalHandCase) {
  ModelConfig cfg;
  cfg.d2 = 1;
  cfg.head_hidden = {};  // single linear layer: 4 -> 1
  ModelParams params;
  params.add("head.l0.w", Tensor({1, 4}, {0.5, -1.0, 2.0, 0.25}));
  params.add("head.l0.b", Tensor({1}, {0.1}));
  Tape tape;
  double y = predict(tape, Tensor({1}, {1.0}), Tensor({1}, {2.0}), Tensor({1}, {3.0}),
                     Tensor({1}, {4.0}), params, cfg)
                 .item();
  double z = 0.5 * 1.0 - 1.0 * 2.0 + 2.0 * 3.0 + 0.25 * 4.0 + 0.1;
  EXPECT_DOUBLE_EQ(y, 1.0 / (1.0 + std::exp(-z)));
}

TEST(NllLoss, HalfScoresGiveLn2) {
  Tape tape;
  Tensor y = Tensor::full({4}, 0.5);
  Tensor loss = nll_loss(tape, y, {1, 0, 1, 0});
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-15);
}

TEST(NllLoss, PerfectPredictionsNearZero) {
  Tape tape;
  Tensor y({3}, {1.0, 0.0, 1.0});
  Tensor loss = nll_loss(tape, y, {1, 0, 1});
  EXPECT_NEAR(loss.item(), 0.0, 1e-10);
}

TEST(NllLoss, ThreePointHandCase) {
  Tape tape;
  Tensor y({3}, {0.8, 0.3, 0.6});
  Tensor loss = nll_loss(tape, y, {1, 0, 0});
  double expect = -(std::log(0.8) + std::log(0.7) + std::log(0.4)) / 3.0;
  EXPECT_NEAR(loss.item(), expect, 1e-14);
}

TEST(NllLoss, LabelLengthMismatchRejected) {
  Tape tape;
  Tensor y = Tensor::full({3}, 0.5);
  EXPECT_THROW(nll_loss(tape, y, {1, 0}), std::invalid_argument);
  EXPECT_THROW(nll_loss(tape, y, {1, 0, 2}), std::invalid_argument);
}

TEST(NllLoss, GradientEqualsAnalyticFormula) {
  Tape tape;
  std::vector<double> scores{0.8, 0.3, 0.6, 0.45};
  std::vector<int> labels{1, 0, 0, 1};
  Tensor y({4}, scores);
  y.set_requires_grad(true);
  Tensor loss = nll_loss(tape, y, labels);
  tape.backward(loss);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double p = scores[i];
    double expect = (p - labels[i]) / (p * (1.0 - p)) / 4.0;
    EXPECT_NEAR(y.grad()[i], expect, 1e-12);
  }
}

TEST(Auc, PerfectSeparationIsOne) {
  EXPECT_DOUBLE_EQ(auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(auc({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0}), 0.0);
}

TEST(Auc, RandomScoresNearHalf) {
  Rng rng(7);
  std::vector<double> scores(4000);
  std::vector<int> labels(4000);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.uniform();
    labels[i] = rng.uniform() < 0.5 ? 1 : 0;
  }
  EXPECT_NEAR(auc(scores, labels), 0.5, 0.02);
}

TEST(Auc, MatchesPairwiseBruteForceExactly) {
  std::vector<double> scores{0.3, 0.7, 0.7, 0.1, 0.9, 0.5};
  std::vector<int> labels{0, 1, 0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auc(scores, labels), auc_bruteforce(scores, labels));

  Rng rng(11);
  for (int round = 0; round < 20; ++round) {
    std::vector<double> s(12);
    std::vector<int> y(12);
    int pos = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = std::round(rng.uniform() * 4.0) / 4.0;  // force ties
      y[i] = rng.uniform() < 0.5 ? 1 : 0;
      pos += y[i];
    }
    if (pos == 0 || pos == 12) continue;
    EXPECT_DOUBLE_EQ(auc(s, y), auc_bruteforce(s, y)) << "round " << round;
  }
}

TEST(Auc, SingleClassRejected) {
  EXPECT_THROW(auc({0.1, 0.9}, {1, 1}), std::invalid_argument);
  EXPECT_THROW(auc({0.1, 0.9}, {0, 0}), std::invalid_argument);
}

TEST(Auc, InvariantUnderMonotoneTransforms) {
  std::vector<double> scores{0.3, 0.7, 0.7, 0.1, 0.9, 0.5, 0.45};
  std::vector<int> labels{0, 1, 0, 0, 1, 1, 0};
  double base = auc(scores, labels);
  std::vector<double> transformed(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    transformed[i] = std::exp(3.0 * scores[i]) - 2.0;
  EXPECT_DOUBLE_EQ(auc(transformed, labels), base);
}

TEST(Metrics, JsonShape) {
  Metrics m = evaluate_scores({0.9, 0.1, 0.8, 0.3}, {1, 0, 1, 0});
  std::string j = m.to_json();
  auto parsed = nlohmann::json::parse(j);
  EXPECT_DOUBLE_EQ(parsed.at("auc").get<double>(), 1.0);
  EXPECT_GT(parsed.at("logloss").get<double>(), 0.0);
  EXPECT_EQ(parsed.at("n").get<std::int64_t>(), 4);
}

}  // namespace
}  // namespace dsain
