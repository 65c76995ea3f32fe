#pragma once

#include <json.hpp>

#include "dsain/config.hpp"
#include "dsain/params.hpp"
#include "dsain/tensor.hpp"

namespace dsain {

/// yhat = sigmoid(MLP(u || e_s || b_c || e_o)), GELU hidden layers.
inline Tensor predict(Tape& tape, const Tensor& user, const Tensor& seq_emb,
                      const Tensor& target_emb, const Tensor& other_emb,
                      const ModelParams& params, const ModelConfig& cfg) {
  Tensor x = concat(tape, {user, seq_emb, target_emb, other_emb}, 0);
  std::size_t layers = cfg.head_hidden.size() + 1;
  for (std::size_t i = 0; i < layers; ++i) {
    std::string base = "head.l" + std::to_string(i);
    x = add(tape, matmul(tape, params.at(base + ".w"), x), params.at(base + ".b"));
    if (i + 1 < layers) x = gelu(tape, x);
  }
  return sigmoid(tape, x);  // [1]
}

/// -(1/N) sum(y log yhat + (1-y) log(1-yhat)), scores clamped to
/// [1e-12, 1-1e-12].
inline Tensor nll_loss(Tape& tape, const Tensor& yhat, const std::vector<int>& labels) {
  std::int64_t batch = yhat.size();
  require(batch >= 1, "nll_loss: empty batch");
  require(static_cast<std::int64_t>(labels.size()) == batch,
          "nll_loss: labels length " + std::to_string(labels.size()) + " != batch " +
              std::to_string(batch));
  std::vector<double> yv(static_cast<std::size_t>(batch));
  for (std::int64_t i = 0; i < batch; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    require(y == 0 || y == 1, "nll_loss: label must be 0 or 1");
    yv[static_cast<std::size_t>(i)] = static_cast<double>(y);
  }
  Tensor y(yhat.shape(), std::move(yv));
  Tensor yc = clamp(tape, yhat, 1e-12, 1.0 - 1e-12);
  Tensor pos = mul(tape, y, log(tape, yc));
  Tensor neg = mul(tape, affine(tape, y, -1.0, 1.0), log(tape, affine(tape, yc, -1.0, 1.0)));
  return affine(tape, sum_all(tape, add(tape, pos, neg)), -1.0 / static_cast<double>(batch),
                0.0);
}

/// Probability that a uniformly random positive outranks a uniformly random
/// negative, ties counted half; computed by sorting and averaging tied ranks.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "auc: scores/labels length mismatch");
  std::size_t count = scores.size();
  require(count >= 2, "auc: need at least two samples");
  std::int64_t positives = 0;
  for (int y : labels) {
    require(y == 0 || y == 1, "auc: label must be 0 or 1");
    positives += y;
  }
  std::int64_t negatives = static_cast<std::int64_t>(count) - positives;
  require(positives > 0 && negatives > 0, "auc: need both a positive and a negative label");

  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < count) {
    std::size_t j = i;
    while (j + 1 < count && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  double p = static_cast<double>(positives);
  double n = static_cast<double>(negatives);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

inline double logloss(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size() && !scores.empty(), "logloss: bad inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double p = std::min(std::max(scores[i], 1e-12), 1.0 - 1e-12);
    s += labels[i] == 1 ? std::log(p) : std::log(1.0 - p);
  }
  return -s / static_cast<double>(scores.size());
}

struct Metrics {
  double auc = 0.0;
  double logloss = 0.0;
  std::int64_t n = 0;

  std::string to_json() const {
    nlohmann::json j{{"auc", auc}, {"logloss", logloss}, {"n", n}};
    return j.dump();
  }
};

inline Metrics evaluate_scores(const std::vector<double>& scores,
                               const std::vector<int>& labels) {
  Metrics m;
  m.auc = auc(scores, labels);
  m.logloss = logloss(scores, labels);
  m.n = static_cast<std::int64_t>(scores.size());
  return m;
}

}  // namespace dsain
