#pragma once

#include "dsain/config.hpp"
#include "dsain/params.hpp"
#include "dsain/tensor.hpp"

namespace dsain {

struct ResidualMlpParams {
  Tensor w1;  // [d2 x d2]
  Tensor b1;  // [d2]
  Tensor w2;  // [out x d2]
  Tensor b2;  // [out]
};

inline ResidualMlpParams sam_mlp(const ModelParams& params, const std::string& base) {
  return {params.at(base + ".w1"), params.at(base + ".b1"), params.at(base + ".w2"),
          params.at(base + ".b2")};
}

/// x + W2 GELU(W1 x + b1) + b2; zeroing W2/b2 makes it the identity. Accepts
/// a vector or a matrix of row vectors.
inline Tensor residual_mlp(Tape& tape, const Tensor& x, const ResidualMlpParams& p) {
  if (x.ndim() == 1) {
    Tensor h = gelu(tape, add(tape, matmul(tape, p.w1, x), p.b1));
    return add(tape, x, add(tape, matmul(tape, p.w2, h), p.b2));
  }
  Tensor h = gelu(tape, add(tape, matmul(tape, x, transpose2d(tape, p.w1)), p.b1));
  return add(tape, x, add(tape, matmul(tape, h, transpose2d(tape, p.w2)), p.b2));
}

/// Scalar head: W2 GELU(W1 x + b1) + b2 with W2 of shape [1 x d2].
inline Tensor scalar_mlp_rows(Tape& tape, const Tensor& x, const ResidualMlpParams& p) {
  Tensor h = gelu(tape, add(tape, matmul(tape, x, transpose2d(tape, p.w1)), p.b1));
  return add(tape, matmul(tape, h, transpose2d(tape, p.w2)), p.b2);  // [L x 1]
}

/// b_c = MLP(v_c + sum_k w_ck v_ck) with trainable per-field weights.
inline Tensor target_embedding(Tape& tape, const Tensor& v_cand, const Tensor& target_feats,
                               const ModelParams& params) {
  std::int64_t planes = target_feats.dim(0);
  Tensor w = reshape(tape, params.at("sam.target_w"), {planes, 1});
  Tensor s = sum_rows(tape, mul(tape, target_feats, w));
  return residual_mlp(tape, add(tape, v_cand, s), sam_mlp(params, "sam.target_mlp"));
}

struct BehaviorEmbedOutput {
  Tensor behavior;  // [L x d2]
  Tensor weights;   // [L x planes], rows sum to 1
};

/// Reweights each behavior's per-field features against the target's
/// (w_ik = MLP(v_ik + v_ck ⊗ v_ik), softmax over fields) and forms
/// b_i = MLP(v_i + sum_k w'_ik v_ik).
inline BehaviorEmbedOutput behavior_embedding(Tape& tape, const std::vector<Tensor>& hist,
                                              const Tensor& target_feats, const Tensor& v_items,
                                              const ModelParams& params, SamVariant variant) {
  std::int64_t planes = static_cast<std::int64_t>(hist.size());
  std::int64_t L = hist[0].dim(0);
  BehaviorEmbedOutput out;

  Tensor acc;
  if (variant == SamVariant::kAvgPool) {
    out.weights = Tensor::full({L, planes}, 1.0 / static_cast<double>(planes));
    Tensor summed = hist[0];
    for (std::int64_t k = 1; k < planes; ++k)
      summed = add(tape, summed, hist[static_cast<std::size_t>(k)]);
    acc = affine(tape, summed, 1.0 / static_cast<double>(planes), 0.0);
  } else {
    ResidualMlpParams wp = sam_mlp(params, "sam.weight_mlp");
    std::vector<Tensor> cols;
    for (std::int64_t k = 0; k < planes; ++k) {
      const Tensor& plane = hist[static_cast<std::size_t>(k)];
      Tensor t = plane;
      if (variant != SamVariant::kNoTarget) {
        Tensor vck = gather_rows(tape, target_feats, {k});  // [1 x d2]
        t = add(tape, plane, mul(tape, plane, vck));
      }
      cols.push_back(scalar_mlp_rows(tape, t, wp));  // [L x 1]
    }
    Tensor raw = cols.size() == 1 ? cols[0] : concat(tape, cols, 1);  // [L x planes]
    out.weights = softmax_lastdim(tape, raw);
    for (std::int64_t k = 0; k < planes; ++k) {
      Tensor term = mul(tape, slice_cols(tape, out.weights, k, 1), hist[static_cast<std::size_t>(k)]);
      acc = acc.defined() ? add(tape, acc, term) : term;
    }
  }
  out.behavior = residual_mlp(tape, add(tape, v_items, acc), sam_mlp(params, "sam.behavior_mlp"));
  return out;
}

/// Channel-adaptive factor g_i = sigmoid(W_g (b_i || b_i ⊗ b_c || b_c)); a
/// d2-vector per position, or a scalar per position for the scalar-gate
/// variant.
inline Tensor channel_gate(Tape& tape, const Tensor& b, const Tensor& b_cand,
                           const ModelParams& params, SamVariant variant) {
  std::int64_t L = b.dim(0);
  std::int64_t d2 = b.dim(1);
  Tensor bc_row = reshape(tape, b_cand, {1, d2});
  Tensor tiled = add(tape, Tensor::zeros({L, d2}), bc_row);
  Tensor cat = concat(tape, {b, mul(tape, b, bc_row), tiled}, 1);  // [L x 3d2]
  const Tensor& wg = variant == SamVariant::kScalarGate ? params.at("sam.gate.wg_scalar")
                                                        : params.at("sam.gate.wg");
  return sigmoid(tape, matmul(tape, cat, transpose2d(tape, wg)));
}

/// e_s = (1/L) sum_i g_i ⊗ b_i; masked positions contribute exactly zero.
inline Tensor pool_sequence(Tape& tape, const Tensor& b, const Tensor& g, const Tensor& mask_col,
                            std::int64_t divisor) {
  require(divisor >= 1, "pool_sequence: divisor must be >= 1");
  Tensor masked = mul(tape, b, mask_col);
  Tensor prod = mul(tape, g, masked);
  return affine(tape, sum_rows(tape, prod), 1.0 / static_cast<double>(divisor), 0.0);
}

}  // namespace dsain
