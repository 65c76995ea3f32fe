#pragma once

#include "dsain/config.hpp"
#include "dsain/embedding.hpp"
#include "dsain/tensor.hpp"

namespace dsain {

/// Per-position standard Gumbel pairs, drawn g0-then-g1 for each position in
/// order. The noise is a constant during differentiation (pathwise
/// derivative).
struct GumbelNoise {
  std::vector<double> g0;
  std::vector<double> g1;

  static GumbelNoise draw(std::int64_t count, std::uint64_t seed) {
    Rng rng(seed);
    GumbelNoise n;
    n.g0.resize(static_cast<std::size_t>(count));
    n.g1.resize(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
      n.g0[static_cast<std::size_t>(i)] = rng.gumbel();
      n.g1[static_cast<std::size_t>(i)] = rng.gumbel();
    }
    return n;
  }
};

/// Correlation score of every historical item against the candidate:
/// p_i = sigmoid(W2 (v_i + W1 (f_c ⊗ f_i) + v_c)) with f_c, f_i the
/// length-(n*d1) concatenations of situational embeddings. Padding positions
/// are forced to zero when a mask is supplied.
inline Tensor keep_probability(Tape& tape, const Tensor& items,
                               const std::vector<Tensor>& situ, const Tensor& cand_item,
                               const std::vector<Tensor>& cand_situ, const Tensor& w1,
                               const Tensor& w2, const Tensor* mask_flat = nullptr) {
  require(!situ.empty() && situ.size() == cand_situ.size(),
          "keep_probability: situational plane count mismatch");
  std::int64_t L = items.dim(0);
  Tensor fi_cat = situ.size() == 1 ? situ[0] : concat(tape, situ, 1);            // [L x n*d1]
  Tensor fc_cat = cand_situ.size() == 1 ? cand_situ[0] : concat(tape, cand_situ, 0);  // [n*d1]
  Tensor prod = mul(tape, fi_cat, fc_cat);
  Tensor proj = matmul(tape, prod, transpose2d(tape, w1));  // [L x d2]
  Tensor summed = add(tape, add(tape, items, proj), cand_item);
  Tensor scores = reshape(tape, matmul(tape, summed, transpose2d(tape, w2)), {L});
  Tensor p = sigmoid(tape, scores);
  if (mask_flat) p = mul(tape, p, *mask_flat);
  return p;
}

/// Two-category Gumbel-Softmax relaxation of keep/drop sampling,
/// d = exp((g0+log p)/tau) / (exp((g0+log p)/tau) + exp((g1+log(1-p))/tau)),
/// computed in the equivalent sigmoid form. Eval mode returns p unchanged.
/// p is clamped to [1e-6, 1-1e-6] before the logs.
inline Tensor gumbel_soft_select(Tape& tape, const Tensor& p, double tau,
                                 const GumbelNoise* noise, bool eval_mode) {
  require(tau > 0.0, "gumbel_soft_select: tau must be positive, got " + std::to_string(tau));
  if (eval_mode) return p;
  require(noise != nullptr, "gumbel_soft_select: training mode needs noise");
  std::int64_t L = p.size();
  require(static_cast<std::int64_t>(noise->g0.size()) == L &&
              static_cast<std::int64_t>(noise->g1.size()) == L,
          "gumbel_soft_select: noise length != " + std::to_string(L));
  Tensor pc = clamp(tape, p, 1e-6, 1.0 - 1e-6);
  Tensor logit = sub(tape, log(tape, pc), log(tape, affine(tape, pc, -1.0, 1.0)));
  std::vector<double> diff(static_cast<std::size_t>(L));
  for (std::int64_t i = 0; i < L; ++i)
    diff[static_cast<std::size_t>(i)] =
        (noise->g0[static_cast<std::size_t>(i)] - noise->g1[static_cast<std::size_t>(i)]) / tau;
  Tensor noise_diff(p.shape(), std::move(diff));
  return sigmoid(tape, add(tape, affine(tape, logit, 1.0 / tau, 0.0), noise_diff));
}

/// Seeded convenience wrapper.
inline Tensor gumbel_soft_select(Tape& tape, const Tensor& p, double tau, std::uint64_t rng_seed,
                                 bool eval_mode) {
  if (eval_mode) return gumbel_soft_select(tape, p, tau, nullptr, true);
  GumbelNoise noise = GumbelNoise::draw(p.size(), rng_seed);
  return gumbel_soft_select(tape, p, tau, &noise, false);
}

struct DenoiseOutput {
  Tensor keep_prob;    // [L], zero at padding
  Tensor soft_select;  // [L], zero at padding (identically 1 when the module is off)
  Tensor denoised;     // [L x d2], row i = soft_select_i * v_i
};

/// noise == nullptr selects eval mode (soft_select = keep_prob, no sampling).
inline DenoiseOutput denoise(Tape& tape, const LookedUp& lk, const ModelParams& params,
                             const ModelConfig& cfg, const GumbelNoise* noise) {
  DenoiseOutput out;
  Tensor mask_flat = reshape(tape, lk.mask_col, {cfg.L});
  if (!cfg.bdm_on) {
    out.keep_prob = mask_flat;
    out.soft_select = Tensor::full({cfg.L}, 1.0);
    out.denoised = lk.items;
    return out;
  }
  out.keep_prob = keep_probability(tape, lk.items, lk.situ, lk.cand_item, lk.cand_situ,
                                   params.at("bdm.w1"), params.at("bdm.w2"), &mask_flat);
  bool eval = noise == nullptr;
  Tensor dhat = gumbel_soft_select(tape, out.keep_prob, cfg.tau, noise, eval);
  if (!eval) dhat = mul(tape, dhat, mask_flat);  // padding excluded from sampling
  out.soft_select = dhat;
  out.denoised = mul(tape, lk.items, reshape(tape, dhat, {cfg.L, 1}));
  return out;
}

}  // namespace dsain
