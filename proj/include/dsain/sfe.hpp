#pragma once

#include "dsain/bdm.hpp"
#include "dsain/config.hpp"
#include "dsain/embedding.hpp"
#include "dsain/tensor.hpp"

namespace dsain {

/// One (behavior, field) pair: the scalar gate
/// sigmoid(MLP((v_c || f_c) ⊗ (v_hat || f_spec))) blends the specific
/// vector with the field's general vector.
inline Tensor fuse_general_specific(Tape& tape, const Tensor& f_spec, const Tensor& f_gen,
                                    const Tensor& v_hat, const Tensor& f_cand,
                                    const Tensor& v_cand, const Tensor& gw1, const Tensor& gb1,
                                    const Tensor& gw2, const Tensor& gb2) {
  Tensor gin = mul(tape, concat(tape, {v_cand, f_cand}, 0), concat(tape, {v_hat, f_spec}, 0));
  Tensor h = gelu(tape, add(tape, matmul(tape, gw1, gin), gb1));
  Tensor gate = sigmoid(tape, add(tape, matmul(tape, gw2, h), gb2));  // [1]
  return add(tape, mul(tape, f_spec, gate), mul(tape, f_gen, affine(tape, gate, -1.0, 1.0)));
}

/// Row-parallel version over a whole history plane. f_gen may be [d1]
/// (shared general vector) or [L x d1] (per-position, used by the
/// specific-only variant).
inline Tensor fuse_plane(Tape& tape, const Tensor& f_spec, const Tensor& f_gen,
                         const Tensor& v_hat, const Tensor& f_cand, const Tensor& v_cand,
                         const Tensor& gw1, const Tensor& gb1, const Tensor& gw2,
                         const Tensor& gb2) {
  Tensor cat_cand = concat(tape, {v_cand, f_cand}, 0);               // [d2+d1]
  Tensor cat_hist = concat(tape, {v_hat, f_spec}, 1);                // [L x d2+d1]
  Tensor gin = mul(tape, cat_hist, cat_cand);
  Tensor h = gelu(tape, add(tape, matmul(tape, gin, transpose2d(tape, gw1)), gb1));
  Tensor gate = sigmoid(tape, add(tape, matmul(tape, h, transpose2d(tape, gw2)), gb2));  // [L x 1]
  return add(tape, mul(tape, f_spec, gate), mul(tape, f_gen, affine(tape, gate, -1.0, 1.0)));
}

struct MicroMlp {
  std::vector<Tensor> weights;  // D matrices [d2 x d2]
  std::vector<Tensor> biases;   // D vectors [d2]
};

/// Deterministic split of the fused vector into micro-MLP parameters:
/// layer-0 weight (row-major), layer-0 bias, layer-1 weight, ... Lossless.
inline MicroMlp carve_micro_mlp(Tape& tape, const Tensor& fused, std::int64_t d2,
                                std::int64_t depth) {
  require(fused.ndim() == 1, "carve_micro_mlp: fused vector must be 1-D");
  std::int64_t d1 = fused.dim(0);
  require(d1 == depth * (d2 * d2 + d2),
          "carve_micro_mlp: carving needs d1 = D*(d2^2+d2) = " +
              std::to_string(depth * (d2 * d2 + d2)) + ", got d1 = " + std::to_string(d1));
  MicroMlp mlp;
  std::int64_t off = 0;
  for (std::int64_t j = 0; j < depth; ++j) {
    mlp.weights.push_back(reshape(tape, slice1d(tape, fused, off, d2 * d2), {d2, d2}));
    off += d2 * d2;
    mlp.biases.push_back(slice1d(tape, fused, off, d2));
    off += d2;
  }
  return mlp;
}

/// Inverse of carve_micro_mlp; re-concatenation reproduces the input
/// bitwise.
inline Tensor flatten_micro_mlp(Tape& tape, const MicroMlp& mlp) {
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < mlp.weights.size(); ++j) {
    const Tensor& w = mlp.weights[j];
    parts.push_back(reshape(tape, w, {w.size()}));
    parts.push_back(mlp.biases[j]);
  }
  return concat(tape, parts, 0);
}

/// v_out = w_{D-1} tanh(... tanh(w_0 v + b_0) ...) + b_{D-1}: tanh between
/// layers, no activation after the last.
inline Tensor refine(Tape& tape, const Tensor& v, const MicroMlp& mlp) {
  Tensor x = v;
  std::size_t depth = mlp.weights.size();
  for (std::size_t j = 0; j < depth; ++j) {
    Tensor h = add(tape, matmul(tape, mlp.weights[j], x), mlp.biases[j]);
    x = (j + 1 < depth) ? dsain::tanh(tape, h) : h;
  }
  return x;
}

/// Fused carve+refine over R rows: row r of the output is the micro-MLP
/// carved from fused[r] applied to items[r]. One tape node; gradients reach
/// both inputs. Arithmetic matches the op-composed carve/refine chain
/// exactly (same accumulation order).
inline Tensor micro_refine(Tape& tape, const Tensor& fused, const Tensor& items,
                           std::int64_t depth) {
  bool vector_mode = fused.ndim() == 1;
  require(vector_mode ? items.ndim() == 1 : (fused.ndim() == 2 && items.ndim() == 2),
          "micro_refine: fused/items rank mismatch");
  std::int64_t rows = vector_mode ? 1 : fused.dim(0);
  std::int64_t d1 = vector_mode ? fused.dim(0) : fused.dim(1);
  std::int64_t d2 = vector_mode ? items.dim(0) : items.dim(1);
  require(!vector_mode || items.dim(0) == d2, "micro_refine: item dimension mismatch");
  if (!vector_mode)
    require(items.dim(0) == rows, "micro_refine: row count mismatch");
  require(d1 == depth * (d2 * d2 + d2),
          "micro_refine: carving needs d1 = D*(d2^2+d2) = " +
              std::to_string(depth * (d2 * d2 + d2)) + ", got d1 = " + std::to_string(d1));

  Tensor out = Tensor::zeros(items.shape());
  std::int64_t layer_span = d2 * d2 + d2;
  // post-tanh activations (inputs to layers 1..D-1), per row
  std::vector<double> acts(static_cast<std::size_t>(rows * (depth - 1) * d2), 0.0);
  {
    const double* fv = fused.data().data();
    const double* iv = items.data().data();
    double* ov = out.data().data();
    std::vector<double> x(static_cast<std::size_t>(d2));
    std::vector<double> h(static_cast<std::size_t>(d2));
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* frow = fv + r * d1;
      std::copy(iv + r * d2, iv + (r + 1) * d2, x.begin());
      for (std::int64_t j = 0; j < depth; ++j) {
        const double* w = frow + j * layer_span;
        const double* b = w + d2 * d2;
        for (std::int64_t a = 0; a < d2; ++a) {
          double s = 0.0;
          const double* wrow = w + a * d2;
          for (std::int64_t c = 0; c < d2; ++c) s += wrow[c] * x[static_cast<std::size_t>(c)];
          h[static_cast<std::size_t>(a)] = s + b[a];
        }
        if (j + 1 < depth) {
          double* arow = acts.data() + (r * (depth - 1) + j) * d2;
          for (std::int64_t a = 0; a < d2; ++a) {
            x[static_cast<std::size_t>(a)] = std::tanh(h[static_cast<std::size_t>(a)]);
            arow[a] = x[static_cast<std::size_t>(a)];
          }
        } else {
          std::copy(h.begin(), h.end(), ov + r * d2);
        }
      }
    }
    madd_counter() += rows * depth * d2 * d2;
  }
  bool rg = fused.requires_grad() || items.requires_grad();
  out.set_requires_grad(rg);
  if (tape.recording() && rg) {
    tape.record([fused = fused, items = items, out, acts = std::move(acts), rows, d1, d2, depth,
                 layer_span]() mutable {
      if (!out.has_grad()) return;
      const double* go = out.grad().data();
      const double* fv = fused.data().data();
      const double* iv = items.data().data();
      double* gf = fused.requires_grad() ? fused.grad().data() : nullptr;
      double* gi = items.requires_grad() ? items.grad().data() : nullptr;
      std::vector<double> dh(static_cast<std::size_t>(d2));
      std::vector<double> dx(static_cast<std::size_t>(d2));
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* frow = fv + r * d1;
        std::copy(go + r * d2, go + (r + 1) * d2, dh.begin());
        for (std::int64_t j = depth - 1; j >= 0; --j) {
          const double* w = frow + j * layer_span;
          // input to layer j
          const double* xin = j == 0 ? iv + r * d2 : acts.data() + (r * (depth - 1) + j - 1) * d2;
          if (gf) {
            double* gw = gf + r * d1 + j * layer_span;
            double* gb = gw + d2 * d2;
            for (std::int64_t a = 0; a < d2; ++a) {
              double da = dh[static_cast<std::size_t>(a)];
              double* gwrow = gw + a * d2;
              for (std::int64_t c = 0; c < d2; ++c) gwrow[c] += da * xin[c];
              gb[a] += da;
            }
          }
          std::fill(dx.begin(), dx.end(), 0.0);
          for (std::int64_t a = 0; a < d2; ++a) {
            double da = dh[static_cast<std::size_t>(a)];
            const double* wrow = w + a * d2;
            for (std::int64_t c = 0; c < d2; ++c) dx[static_cast<std::size_t>(c)] += wrow[c] * da;
          }
          if (j == 0) {
            if (gi)
              for (std::int64_t c = 0; c < d2; ++c) gi[r * d2 + c] += dx[static_cast<std::size_t>(c)];
          } else {
            for (std::int64_t c = 0; c < d2; ++c) {
              double t = xin[c];
              dh[static_cast<std::size_t>(c)] = dx[static_cast<std::size_t>(c)] * (1.0 - t * t);
            }
          }
        }
      }
    });
  }
  return out;
}

/// Refined situational feature planes for the history, one [L x d2] plane
/// per field (a single plane for the pooled variants).
inline std::vector<Tensor> encode_history(Tape& tape, const DenoiseOutput& den,
                                          const LookedUp& lk, const ModelParams& params,
                                          const ModelConfig& cfg) {
  const Tensor& gw1 = params.at("sfe.gate.w1");
  const Tensor& gb1 = params.at("sfe.gate.b1");
  const Tensor& gw2 = params.at("sfe.gate.w2");
  const Tensor& gb2 = params.at("sfe.gate.b2");
  const Tensor& vhat = den.denoised;

  std::vector<Tensor> fused(static_cast<std::size_t>(cfg.n));
  for (std::int64_t k = 0; k < cfg.n; ++k) {
    auto uk = static_cast<std::size_t>(k);
    const Tensor& gen = cfg.sfe_variant == SfeVariant::kNoGeneral ? lk.situ[uk] : lk.general[uk];
    fused[uk] = fuse_plane(tape, lk.situ[uk], gen, vhat, lk.cand_situ[uk], lk.cand_item, gw1,
                           gb1, gw2, gb2);
  }

  switch (cfg.sfe_variant) {
    case SfeVariant::kFull:
    case SfeVariant::kNoGeneral: {
      std::vector<Tensor> planes;
      for (std::int64_t k = 0; k < cfg.n; ++k)
        planes.push_back(micro_refine(tape, fused[static_cast<std::size_t>(k)], vhat,
                                      cfg.micro_depth));
      return planes;
    }
    case SfeVariant::kConcat: {
      const Tensor& proj = params.at("sfe.proj.w");
      Tensor projT = transpose2d(tape, proj);
      std::vector<Tensor> planes;
      for (std::int64_t k = 0; k < cfg.n; ++k)
        planes.push_back(matmul(
            tape, concat(tape, {vhat, fused[static_cast<std::size_t>(k)]}, 1), projT));
      return planes;
    }
    case SfeVariant::kPoolConcat:
    case SfeVariant::kPoolMicro: {
      Tensor mean = fused[0];
      for (std::int64_t k = 1; k < cfg.n; ++k)
        mean = add(tape, mean, fused[static_cast<std::size_t>(k)]);
      mean = affine(tape, mean, 1.0 / static_cast<double>(cfg.n), 0.0);
      if (cfg.sfe_variant == SfeVariant::kPoolMicro)
        return {micro_refine(tape, mean, vhat, cfg.micro_depth)};
      Tensor projT = transpose2d(tape, params.at("sfe.proj.w"));
      return {matmul(tape, concat(tape, {vhat, mean}, 1), projT)};
    }
  }
  fail("encode_history: unreachable");
}

/// Refined situational features of the target behavior ([planes x d2]); the
/// candidate plays both roles in the gate input.
inline Tensor encode_target(Tape& tape, const LookedUp& lk, const ModelParams& params,
                            const ModelConfig& cfg) {
  const Tensor& gw1 = params.at("sfe.gate.w1");
  const Tensor& gb1 = params.at("sfe.gate.b1");
  const Tensor& gw2 = params.at("sfe.gate.w2");
  const Tensor& gb2 = params.at("sfe.gate.b2");
  const Tensor& vc = lk.cand_item;

  std::vector<Tensor> fused(static_cast<std::size_t>(cfg.n));
  for (std::int64_t k = 0; k < cfg.n; ++k) {
    auto uk = static_cast<std::size_t>(k);
    const Tensor& gen =
        cfg.sfe_variant == SfeVariant::kNoGeneral ? lk.cand_situ[uk] : lk.general[uk];
    fused[uk] = fuse_general_specific(tape, lk.cand_situ[uk], gen, vc, lk.cand_situ[uk], vc,
                                      gw1, gb1, gw2, gb2);
  }

  std::vector<Tensor> feats;
  switch (cfg.sfe_variant) {
    case SfeVariant::kFull:
    case SfeVariant::kNoGeneral: {
      for (std::int64_t k = 0; k < cfg.n; ++k)
        feats.push_back(micro_refine(tape, fused[static_cast<std::size_t>(k)], vc,
                                     cfg.micro_depth));
      break;
    }
    case SfeVariant::kConcat: {
      const Tensor& proj = params.at("sfe.proj.w");
      for (std::int64_t k = 0; k < cfg.n; ++k)
        feats.push_back(matmul(
            tape, proj, concat(tape, {vc, fused[static_cast<std::size_t>(k)]}, 0)));
      break;
    }
    case SfeVariant::kPoolConcat:
    case SfeVariant::kPoolMicro: {
      Tensor mean = fused[0];
      for (std::int64_t k = 1; k < cfg.n; ++k)
        mean = add(tape, mean, fused[static_cast<std::size_t>(k)]);
      mean = affine(tape, mean, 1.0 / static_cast<double>(cfg.n), 0.0);
      if (cfg.sfe_variant == SfeVariant::kPoolMicro)
        feats.push_back(micro_refine(tape, mean, vc, cfg.micro_depth));
      else
        feats.push_back(matmul(tape, params.at("sfe.proj.w"), concat(tape, {vc, mean}, 0)));
      break;
    }
  }
  // stack to [planes x d2]
  std::vector<Tensor> rows;
  for (auto& f : feats) rows.push_back(reshape(tape, f, {1, f.size()}));
  return rows.size() == 1 ? rows[0] : concat(tape, rows, 0);
}

struct SfeOutput {
  std::vector<Tensor> hist;  // planes x [L x d2]
  Tensor target;             // [planes x d2]
};

inline SfeOutput encode_all(Tape& tape, const DenoiseOutput& den, const LookedUp& lk,
                            const ModelParams& params, const ModelConfig& cfg) {
  return {encode_history(tape, den, lk, params, cfg), encode_target(tape, lk, params, cfg)};
}

}  // namespace dsain
