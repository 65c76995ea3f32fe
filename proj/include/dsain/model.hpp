#pragma once

#include "dsain/bdm.hpp"
#include "dsain/cfm.hpp"
#include "dsain/embedding.hpp"
#include "dsain/predictor.hpp"
#include "dsain/sam.hpp"
#include "dsain/sfe.hpp"

namespace dsain {

/// Forward multiply-adds by module section (matmul contractions only; the
/// sequence-path sections scale with L, the target-path and head sections do
/// not).
struct FlopBreakdown {
  std::int64_t bdm = 0;
  std::int64_t sfe_seq = 0;
  std::int64_t sfe_target = 0;
  std::int64_t cfm = 0;
  std::int64_t sam_seq = 0;
  std::int64_t sam_target = 0;
  std::int64_t head = 0;

  std::int64_t total() const {
    return bdm + sfe_seq + sfe_target + cfm + sam_seq + sam_target + head;
  }
};

/// Intermediate tensors kept around for inspection.
struct ForwardTrace {
  Tensor keep_prob;
  Tensor soft_select;
  Tensor sam_weights;  // [L x planes]
  Tensor gates;        // [L x d2] (or [L x 1])
  Tensor seq_emb;      // e_s
  Tensor target_emb;   // b_c
};

/// One record through the whole network. noise == nullptr selects eval mode
/// (deterministic, no Gumbel sampling).
inline Tensor model_forward(Tape& tape, const ModelParams& params, const ModelConfig& cfg,
                            const TrainRecord& rec, const GumbelNoise* noise,
                            FlopBreakdown* flops = nullptr, ForwardTrace* trace = nullptr) {
  LookedUp lk = lookup_sequence(tape, params, cfg, rec);
  auto mark = [&]() { return madd_counter(); };

  std::int64_t t = mark();
  DenoiseOutput den = denoise(tape, lk, params, cfg, noise);
  if (flops) flops->bdm += mark() - t;

  t = mark();
  std::vector<Tensor> hist = encode_history(tape, den, lk, params, cfg);
  if (flops) flops->sfe_seq += mark() - t;

  t = mark();
  Tensor target_feats = encode_target(tape, lk, params, cfg);
  if (flops) flops->sfe_target += mark() - t;

  t = mark();
  std::vector<Tensor> planes = cfm_forward(tape, hist, params, cfg);
  if (flops) flops->cfm += mark() - t;

  t = mark();
  Tensor b_c = target_embedding(tape, lk.cand_item, target_feats, params);
  if (flops) flops->sam_target += mark() - t;

  t = mark();
  BehaviorEmbedOutput be =
      behavior_embedding(tape, planes, target_feats, lk.items, params, cfg.sam_variant);
  Tensor b = mul(tape, be.behavior, lk.mask_col);  // padding rows pooled as exact zero
  Tensor gates = channel_gate(tape, b, b_c, params, cfg.sam_variant);
  std::int64_t divisor =
      cfg.divide_by_real_count ? std::max<std::int64_t>(1, lk.real_count) : cfg.L;
  Tensor e_s = pool_sequence(tape, b, gates, lk.mask_col, divisor);
  if (flops) flops->sam_seq += mark() - t;

  t = mark();
  Tensor yhat = predict(tape, lk.user, e_s, b_c, lk.context, params, cfg);
  if (flops) flops->head += mark() - t;

  if (trace) {
    trace->keep_prob = den.keep_prob;
    trace->soft_select = den.soft_select;
    trace->sam_weights = be.weights;
    trace->gates = gates;
    trace->seq_emb = e_s;
    trace->target_emb = b_c;
  }
  return yhat;
}

}  // namespace dsain
