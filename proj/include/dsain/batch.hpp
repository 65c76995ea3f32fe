#pragma once

#include "dsain/model.hpp"

namespace dsain {

/// Row-stacked forward pass over a batch of records. Produces bitwise the
/// same scores as model_forward on each record: every op is row-local or
/// mixes only within one example's window, and accumulation orders match the
/// per-example path. History planes live in [n*B*L x d2] row blocks (plane
/// major, then example, then position); target features in [B*n x d2].
namespace batched {

inline std::vector<std::int64_t> expand_index(std::int64_t batch, std::int64_t group) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(batch * group));
  for (std::int64_t e = 0; e < batch; ++e)
    for (std::int64_t i = 0; i < group; ++i)
      idx[static_cast<std::size_t>(e * group + i)] = e;
  return idx;
}

struct Lookup {
  std::int64_t batch = 0;
  Tensor user;                    // [B x d2]
  Tensor items;                   // [B*L x d2]
  std::vector<Tensor> situ;       // n x [B*L x d1]
  Tensor cand_item;               // [B x d2]
  std::vector<Tensor> cand_situ;  // n x [B x d1]
  std::vector<Tensor> general;    // n x [d1]
  Tensor context;                 // [B x d2]
  Tensor mask_col;                // [B*L x 1]
  Tensor mask_flat;               // [B*L]
  std::vector<std::int64_t> real_counts;
};

inline Lookup lookup(Tape& tape, const ModelParams& params, const ModelConfig& cfg,
                     const std::vector<TrainRecord>& records) {
  require(!records.empty(), "batch lookup: no records");
  std::int64_t B = static_cast<std::int64_t>(records.size());
  Lookup out;
  out.batch = B;

  std::vector<std::int64_t> user_ids(static_cast<std::size_t>(B));
  std::vector<std::int64_t> cand_ids(static_cast<std::size_t>(B));
  std::vector<std::int64_t> item_ids(static_cast<std::size_t>(B * cfg.L));
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(B * cfg.L));
  std::vector<std::uint8_t> ones(static_cast<std::size_t>(B), 1);
  for (std::int64_t e = 0; e < B; ++e) {
    const TrainRecord& rec = records[static_cast<std::size_t>(e)];
    validate_record(cfg, rec);
    user_ids[static_cast<std::size_t>(e)] = rec.user_id;
    cand_ids[static_cast<std::size_t>(e)] = rec.sequence.candidate_item;
    for (std::int64_t i = 0; i < cfg.L; ++i) {
      item_ids[static_cast<std::size_t>(e * cfg.L + i)] =
          rec.sequence.item_ids[static_cast<std::size_t>(i)];
      mask[static_cast<std::size_t>(e * cfg.L + i)] =
          rec.sequence.mask[static_cast<std::size_t>(i)];
    }
    out.real_counts.push_back(rec.sequence.real_count());
  }

  out.user = embed_lookup(tape, params.at("embed.user"), user_ids, ones);
  out.items = embed_lookup(tape, params.at("embed.item"), item_ids, mask);
  out.cand_item = embed_lookup(tape, params.at("embed.item"), cand_ids, ones);

  if (cfg.no_situation) {
    for (std::int64_t k = 0; k < cfg.n; ++k) {
      out.situ.push_back(Tensor::zeros({B * cfg.L, cfg.d1}));
      out.cand_situ.push_back(Tensor::zeros({B, cfg.d1}));
      out.general.push_back(Tensor::zeros({cfg.d1}));
    }
    out.context = Tensor::zeros({B, cfg.d2});
  } else {
    for (std::int64_t k = 0; k < cfg.n; ++k) {
      auto uk = static_cast<std::size_t>(k);
      std::vector<std::int64_t> ids(static_cast<std::size_t>(B * cfg.L));
      std::vector<std::int64_t> cids(static_cast<std::size_t>(B));
      for (std::int64_t e = 0; e < B; ++e) {
        const auto& seq = records[static_cast<std::size_t>(e)].sequence;
        cids[static_cast<std::size_t>(e)] = seq.candidate_situation.ids[uk];
        for (std::int64_t i = 0; i < cfg.L; ++i)
          ids[static_cast<std::size_t>(e * cfg.L + i)] =
              seq.situations[static_cast<std::size_t>(i)].ids[uk];
      }
      out.situ.push_back(embed_lookup(tape, params.at(situ_table_name(k)), ids, mask));
      out.cand_situ.push_back(embed_lookup(tape, params.at(situ_table_name(k)), cids, ones));
      out.general.push_back(
          reshape(tape, gather_rows(tape, params.at("embed.general"), {k}), {cfg.d1}));
    }
    std::vector<std::int64_t> ctx_ids(static_cast<std::size_t>(B));
    for (std::int64_t e = 0; e < B; ++e)
      ctx_ids[static_cast<std::size_t>(e)] =
          records[static_cast<std::size_t>(e)].sequence.candidate_situation.ids[0];
    out.context = embed_lookup(tape, params.at("embed.ctx"), ctx_ids, ones);
  }

  std::vector<double> mvals(static_cast<std::size_t>(B * cfg.L));
  for (std::size_t i = 0; i < mask.size(); ++i) mvals[i] = mask[i] ? 1.0 : 0.0;
  out.mask_col = Tensor({B * cfg.L, 1}, mvals);
  out.mask_flat = Tensor({B * cfg.L}, std::move(mvals));
  return out;
}

struct Denoised {
  Tensor soft_select;  // [B*L]
  Tensor denoised;     // [B*L x d2]
};

inline Denoised denoise(Tape& tape, const Lookup& lk, const ModelParams& params,
                        const ModelConfig& cfg, const std::vector<GumbelNoise>* noises) {
  std::int64_t B = lk.batch;
  Denoised out;
  if (!cfg.bdm_on) {
    out.soft_select = Tensor::full({B * cfg.L}, 1.0);
    out.denoised = lk.items;
    return out;
  }
  Tensor fi_cat = lk.situ.size() == 1 ? lk.situ[0] : concat(tape, lk.situ, 1);
  Tensor fc_cat = lk.cand_situ.size() == 1 ? lk.cand_situ[0] : concat(tape, lk.cand_situ, 1);
  auto expand = expand_index(B, cfg.L);
  Tensor prod = mul(tape, fi_cat, gather_rows(tape, fc_cat, expand));
  Tensor proj = matmul(tape, prod, transpose2d(tape, params.at("bdm.w1")));
  Tensor summed =
      add(tape, add(tape, lk.items, proj), gather_rows(tape, lk.cand_item, expand));
  Tensor p = sigmoid(
      tape, reshape(tape, matmul(tape, summed, transpose2d(tape, params.at("bdm.w2"))),
                    {B * cfg.L}));
  p = mul(tape, p, lk.mask_flat);
  Tensor dhat;
  if (noises == nullptr) {
    dhat = gumbel_soft_select(tape, p, cfg.tau, nullptr, true);
  } else {
    require(static_cast<std::int64_t>(noises->size()) == B,
            "batch denoise: need one noise draw per record");
    GumbelNoise merged;
    merged.g0.reserve(static_cast<std::size_t>(B * cfg.L));
    merged.g1.reserve(static_cast<std::size_t>(B * cfg.L));
    for (const auto& n : *noises) {
      merged.g0.insert(merged.g0.end(), n.g0.begin(), n.g0.end());
      merged.g1.insert(merged.g1.end(), n.g1.begin(), n.g1.end());
    }
    dhat = mul(tape, gumbel_soft_select(tape, p, cfg.tau, &merged, false), lk.mask_flat);
  }
  out.soft_select = dhat;
  out.denoised = mul(tape, lk.items, reshape(tape, dhat, {B * cfg.L, 1}));
  return out;
}

/// Gate + blend for one field over stacked rows; cand rows are already
/// expanded to match.
inline Tensor fuse_rows(Tape& tape, const Tensor& f_spec, const Tensor& f_gen,
                        const Tensor& v_hat, const Tensor& cand_cat, const ModelParams& params) {
  Tensor cat_hist = concat(tape, {v_hat, f_spec}, 1);
  Tensor gin = mul(tape, cat_hist, cand_cat);
  Tensor h = gelu(tape, add(tape, matmul(tape, gin, transpose2d(tape, params.at("sfe.gate.w1"))),
                            params.at("sfe.gate.b1")));
  Tensor gate = sigmoid(tape, add(tape, matmul(tape, h, transpose2d(tape, params.at("sfe.gate.w2"))),
                                  params.at("sfe.gate.b2")));
  return add(tape, mul(tape, f_spec, gate), mul(tape, f_gen, affine(tape, gate, -1.0, 1.0)));
}

inline std::vector<Tensor> encode_history(Tape& tape, const Denoised& den, const Lookup& lk,
                                          const ModelParams& params, const ModelConfig& cfg) {
  std::int64_t B = lk.batch;
  auto expand = expand_index(B, cfg.L);
  std::vector<Tensor> fused(static_cast<std::size_t>(cfg.n));
  for (std::int64_t k = 0; k < cfg.n; ++k) {
    auto uk = static_cast<std::size_t>(k);
    Tensor cand_cat = gather_rows(
        tape, concat(tape, {lk.cand_item, lk.cand_situ[uk]}, 1), expand);
    const Tensor& gen = cfg.sfe_variant == SfeVariant::kNoGeneral ? lk.situ[uk] : lk.general[uk];
    fused[uk] = fuse_rows(tape, lk.situ[uk], gen, den.denoised, cand_cat, params);
  }
  switch (cfg.sfe_variant) {
    case SfeVariant::kFull:
    case SfeVariant::kNoGeneral: {
      std::vector<Tensor> planes;
      for (std::int64_t k = 0; k < cfg.n; ++k)
        planes.push_back(micro_refine(tape, fused[static_cast<std::size_t>(k)], den.denoised,
                                      cfg.micro_depth));
      return planes;
    }
    case SfeVariant::kConcat: {
      Tensor projT = transpose2d(tape, params.at("sfe.proj.w"));
      std::vector<Tensor> planes;
      for (std::int64_t k = 0; k < cfg.n; ++k)
        planes.push_back(
            matmul(tape, concat(tape, {den.denoised, fused[static_cast<std::size_t>(k)]}, 1),
                   projT));
      return planes;
    }
    case SfeVariant::kPoolConcat:
    case SfeVariant::kPoolMicro: {
      Tensor mean = fused[0];
      for (std::int64_t k = 1; k < cfg.n; ++k)
        mean = add(tape, mean, fused[static_cast<std::size_t>(k)]);
      mean = affine(tape, mean, 1.0 / static_cast<double>(cfg.n), 0.0);
      if (cfg.sfe_variant == SfeVariant::kPoolMicro)
        return {micro_refine(tape, mean, den.denoised, cfg.micro_depth)};
      Tensor projT = transpose2d(tape, params.at("sfe.proj.w"));
      return {matmul(tape, concat(tape, {den.denoised, mean}, 1), projT)};
    }
  }
  fail("batched encode_history: unreachable");
}

/// Target features as [B*planes x d2] (row e*planes + k).
inline Tensor encode_target(Tape& tape, const Lookup& lk, const ModelParams& params,
                            const ModelConfig& cfg) {
  std::vector<Tensor> fused(static_cast<std::size_t>(cfg.n));
  for (std::int64_t k = 0; k < cfg.n; ++k) {
    auto uk = static_cast<std::size_t>(k);
    Tensor cand_cat = concat(tape, {lk.cand_item, lk.cand_situ[uk]}, 1);
    const Tensor& gen =
        cfg.sfe_variant == SfeVariant::kNoGeneral ? lk.cand_situ[uk] : lk.general[uk];
    fused[uk] = fuse_rows(tape, lk.cand_situ[uk], gen, lk.cand_item, cand_cat, params);
  }
  std::vector<Tensor> feats;
  switch (cfg.sfe_variant) {
    case SfeVariant::kFull:
    case SfeVariant::kNoGeneral: {
      for (std::int64_t k = 0; k < cfg.n; ++k)
        feats.push_back(micro_refine(tape, fused[static_cast<std::size_t>(k)], lk.cand_item,
                                     cfg.micro_depth));
      break;
    }
    case SfeVariant::kConcat: {
      Tensor projT = transpose2d(tape, params.at("sfe.proj.w"));
      for (std::int64_t k = 0; k < cfg.n; ++k)
        feats.push_back(matmul(
            tape, concat(tape, {lk.cand_item, fused[static_cast<std::size_t>(k)]}, 1), projT));
      break;
    }
    case SfeVariant::kPoolConcat:
    case SfeVariant::kPoolMicro: {
      Tensor mean = fused[0];
      for (std::int64_t k = 1; k < cfg.n; ++k)
        mean = add(tape, mean, fused[static_cast<std::size_t>(k)]);
      mean = affine(tape, mean, 1.0 / static_cast<double>(cfg.n), 0.0);
      if (cfg.sfe_variant == SfeVariant::kPoolMicro)
        feats.push_back(micro_refine(tape, mean, lk.cand_item, cfg.micro_depth));
      else
        feats.push_back(matmul(tape, concat(tape, {lk.cand_item, mean}, 1),
                               transpose2d(tape, params.at("sfe.proj.w"))));
      break;
    }
  }
  std::int64_t planes = cfg.planes();
  if (planes == 1) return feats[0];
  // interleave to row (e, k): concat per-field columns then split rows
  Tensor wide = concat(tape, feats, 1);  // [B x planes*d2]
  return reshape(tape, wide, {lk.batch * planes, cfg.d2});
}

// --- correlation fusion over stacked planes ---------------------------------

struct CfmIndexMaps {
  // per branch: column gather from the row layout and the scatter-back map
  std::vector<std::int64_t> seg_gather[3];
  Shape seg_shape[3];
  std::vector<std::int64_t> scatter_back[3];
  std::vector<std::int64_t> literal_perm;  // shifted literal row order
  std::vector<std::int64_t> feature_fwd;
  std::vector<std::int64_t> feature_back;
};

/// Flat-index maps between the [planes*B*L x d2] row layout, the per-branch
/// [L_w x ...] mixer layouts and the [B*L*d2 x planes] feature layout.
inline CfmIndexMaps build_cfm_maps(const ModelConfig& cfg, std::int64_t B,
                                   std::int64_t planes_override = -1) {
  std::int64_t L = cfg.L, Lw = cfg.Lw, d2 = cfg.d2;
  std::int64_t planes = planes_override >= 1 ? planes_override : cfg.planes();
  std::int64_t S = L / Lw;
  CfmIndexMaps maps;

  auto row_flat = [&](std::int64_t k, std::int64_t e, std::int64_t i, std::int64_t c) {
    return ((k * B + e) * L + i) * d2 + c;
  };

  // branch 0: adjacent (segment phi, row r -> position phi*Lw + r)
  // branch 1: dilated  (segment t, row r -> position t + r*S)
  // branch 2: shifted  (segment t, row r -> position Lw/2 + t*Lw + r)
  for (int br = 0; br < 3; ++br) {
    std::int64_t segs = br == 2 ? S - 1 : S;
    if (br == 2 && S < 2) continue;
    std::int64_t cols = planes * B * segs * d2;
    maps.seg_shape[br] = {Lw, cols};
    auto& gather = maps.seg_gather[br];
    gather.resize(static_cast<std::size_t>(Lw * cols));
    auto pos_of = [&](std::int64_t seg, std::int64_t r) {
      if (br == 0) return seg * Lw + r;
      if (br == 1) return seg + r * S;
      return Lw / 2 + seg * Lw + r;
    };
    for (std::int64_t r = 0; r < Lw; ++r)
      for (std::int64_t k = 0; k < planes; ++k)
        for (std::int64_t e = 0; e < B; ++e)
          for (std::int64_t seg = 0; seg < segs; ++seg)
            for (std::int64_t c = 0; c < d2; ++c) {
              std::int64_t col = (((k * B + e) * segs) + seg) * d2 + c;
              gather[static_cast<std::size_t>(r * cols + col)] =
                  row_flat(k, e, pos_of(seg, r), c);
            }
    // scatter back: row element <- mixer output element, remain rows (shifted
    // only) point one past the end, where a constant zero is appended
    auto& back = maps.scatter_back[br];
    back.resize(static_cast<std::size_t>(planes * B * L * d2));
    std::int64_t zero_slot = Lw * cols;
    for (std::int64_t k = 0; k < planes; ++k)
      for (std::int64_t e = 0; e < B; ++e)
        for (std::int64_t i = 0; i < L; ++i)
          for (std::int64_t c = 0; c < d2; ++c) {
            std::int64_t seg = -1, r = -1;
            if (br == 0) {
              seg = i / Lw;
              r = i % Lw;
            } else if (br == 1) {
              seg = i % S;
              r = i / S;
            } else {
              std::int64_t off = Lw / 2;
              if (i >= off && i < off + (S - 1) * Lw) {
                seg = (i - off) / Lw;
                r = (i - off) % Lw;
              }
            }
            std::int64_t dst = row_flat(k, e, i, c);
            back[static_cast<std::size_t>(dst)] =
                seg < 0 ? zero_slot : r * cols + ((k * B + e) * segs + seg) * d2 + c;
          }
  }

  if (cfg.shifted_literal_order && S >= 2) {
    // remain-first row order per (plane, example)
    std::int64_t off = Lw / 2;
    maps.literal_perm.reserve(static_cast<std::size_t>(planes * B * L));
    for (std::int64_t k = 0; k < planes; ++k)
      for (std::int64_t e = 0; e < B; ++e) {
        std::int64_t base = (k * B + e) * L;
        for (std::int64_t r = 0; r < off; ++r) maps.literal_perm.push_back(base + r);
        for (std::int64_t r = L - (Lw - off); r < L; ++r) maps.literal_perm.push_back(base + r);
        for (std::int64_t r = off; r < L - (Lw - off); ++r) maps.literal_perm.push_back(base + r);
      }
  }

  maps.feature_fwd.resize(static_cast<std::size_t>(planes * B * L * d2));
  maps.feature_back.resize(maps.feature_fwd.size());
  for (std::int64_t k = 0; k < planes; ++k)
    for (std::int64_t e = 0; e < B; ++e)
      for (std::int64_t i = 0; i < L; ++i)
        for (std::int64_t c = 0; c < d2; ++c) {
          std::int64_t rows = row_flat(k, e, i, c);
          std::int64_t stacked = ((e * L + i) * d2 + c) * planes + k;
          maps.feature_fwd[static_cast<std::size_t>(stacked)] = rows;
          maps.feature_back[static_cast<std::size_t>(rows)] = stacked;
        }
  return maps;
}

inline Tensor behavior_branch(Tape& tape, const Tensor& rows, const Tensor& ln, int br,
                              const CfmIndexMaps& maps, const MixerBranchParams& p,
                              bool gelu_on, const ModelConfig& cfg) {
  Tensor seg = gather_flat(tape, ln, maps.seg_gather[br], maps.seg_shape[br]);
  Tensor h = matmul(tape, p.w1, seg);
  if (gelu_on) h = gelu(tape, h);
  Tensor m = matmul(tape, p.w2, h);
  Tensor src = concat(tape, {reshape(tape, m, {m.size()}), Tensor::zeros({1})}, 0);
  Tensor part = gather_flat(tape, src, maps.scatter_back[br], rows.shape());
  Tensor out = add(tape, rows, part);
  if (br == 2 && cfg.shifted_literal_order) {
    std::int64_t d2 = cfg.d2;
    std::int64_t nrows = rows.dim(0);
    std::vector<std::int64_t> perm(maps.literal_perm.begin(), maps.literal_perm.end());
    Tensor permuted = gather_rows(tape, out, perm);
    return reshape(tape, permuted, {nrows, d2});
  }
  return out;
}

/// One behavior-mixing pass over a stacked-row tensor with the given
/// parameter suffix (plane-specific sets when sharing is off).
inline Tensor behavior_mix_rows(Tape& tape, const Tensor& rows, const ModelParams& params,
                                const ModelConfig& cfg, const CfmIndexMaps& maps,
                                const Tensor& fuse, const std::string& suffix) {
  Tensor acc;
  // one LayerNorm per branch, matching the per-example arithmetic
  if (cfg.mix_adjacent) {
    MixerBranchParams p = mixer_branch(params, "cfm.adj" + suffix);
    Tensor ln = layer_norm(tape, rows, p.ln_gain, p.ln_bias, kMixerLnEps);
    acc = mul(tape, behavior_branch(tape, rows, ln, 0, maps, p, cfg.mix_gelu, cfg),
              slice1d(tape, fuse, 0, 1));
  }
  if (cfg.mix_dilated) {
    MixerBranchParams p = mixer_branch(params, "cfm.dil" + suffix);
    Tensor ln = layer_norm(tape, rows, p.ln_gain, p.ln_bias, kMixerLnEps);
    Tensor term = mul(tape, behavior_branch(tape, rows, ln, 1, maps, p, cfg.mix_gelu, cfg),
                      slice1d(tape, fuse, 1, 1));
    acc = acc.defined() ? add(tape, acc, term) : term;
  }
  if (cfg.mix_shifted) {
    MixerBranchParams p = mixer_branch(params, "cfm.shi" + suffix);
    Tensor ln = layer_norm(tape, rows, p.ln_gain, p.ln_bias, kMixerLnEps);
    Tensor term = mul(tape, behavior_branch(tape, rows, ln, 2, maps, p, cfg.mix_gelu, cfg),
                      slice1d(tape, fuse, 2, 1));
    acc = acc.defined() ? add(tape, acc, term) : term;
  }
  return acc.defined() ? acc : Tensor::zeros(rows.shape());
}

inline Tensor cfm_rows(Tape& tape, Tensor rows, const ModelParams& params,
                       const ModelConfig& cfg, const CfmIndexMaps& maps, std::int64_t B) {
  Tensor fuse = params.at("cfm.fuse.w");
  std::int64_t planes = cfg.planes();
  bool shared = cfg.cfm_shared_planes || planes == 1;
  CfmIndexMaps plane_maps;
  if (!shared) plane_maps = build_cfm_maps(cfg, B, 1);
  for (std::int64_t layer = 0; layer < cfg.M; ++layer) {
    if (shared) {
      if (cfg.mix_behavior)
        rows = behavior_mix_rows(tape, rows, params, cfg, maps, fuse, "");
      if (cfg.mix_channel) rows = channel_mix(tape, rows, params, cfg.mix_gelu, "");
    } else if (cfg.mix_behavior || cfg.mix_channel) {
      std::vector<Tensor> blocks;
      for (std::int64_t k = 0; k < planes; ++k) {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(B * cfg.L));
        for (std::int64_t i = 0; i < B * cfg.L; ++i)
          idx[static_cast<std::size_t>(i)] = k * B * cfg.L + i;
        Tensor blk = gather_rows(tape, rows, idx);
        std::string suffix = cfm_plane_suffix(cfg, k);
        if (cfg.mix_behavior)
          blk = behavior_mix_rows(tape, blk, params, cfg, plane_maps, fuse, suffix);
        if (cfg.mix_channel) blk = channel_mix(tape, blk, params, cfg.mix_gelu, suffix);
        blocks.push_back(blk);
      }
      rows = planes == 1 ? blocks[0] : concat(tape, blocks, 0);
    }
    if (cfg.mix_feature) {
      std::int64_t planes = cfg.planes();
      Tensor stacked = gather_flat(tape, rows, maps.feature_fwd,
                                   {rows.size() / planes, planes});
      Tensor ln = layer_norm(tape, stacked, params.at("cfm.fea.ln_gain"),
                             params.at("cfm.fea.ln_bias"), kMixerLnEps);
      Tensor h = matmul(tape, ln, transpose2d(tape, params.at("cfm.fea.w5")));
      if (cfg.mix_gelu) h = gelu(tape, h);
      Tensor mixed = add(tape, stacked, matmul(tape, h, transpose2d(tape, params.at("cfm.fea.w6"))));
      rows = gather_flat(tape, mixed, maps.feature_back, rows.shape());
    }
  }
  (void)B;
  return rows;
}

}  // namespace batched

/// Batched forward: one tensor graph for the whole batch. Scores are bitwise
/// identical to per-record model_forward calls.
inline Tensor batch_forward(Tape& tape, const ModelParams& params, const ModelConfig& cfg,
                            const std::vector<TrainRecord>& records,
                            const std::vector<GumbelNoise>* noises,
                            FlopBreakdown* flops = nullptr) {
  using namespace batched;
  std::int64_t B = static_cast<std::int64_t>(records.size());
  std::int64_t planes = cfg.planes();
  Lookup lk = lookup(tape, params, cfg, records);
  auto mark = [&]() { return madd_counter(); };

  std::int64_t t = mark();
  Denoised den = denoise(tape, lk, params, cfg, noises);
  if (flops) flops->bdm += mark() - t;

  t = mark();
  std::vector<Tensor> hist = encode_history(tape, den, lk, params, cfg);
  if (flops) flops->sfe_seq += mark() - t;

  t = mark();
  Tensor target_feats = encode_target(tape, lk, params, cfg);  // [B*planes x d2]
  if (flops) flops->sfe_target += mark() - t;

  t = mark();
  Tensor rows = hist.size() == 1 ? hist[0] : concat(tape, hist, 0);  // [planes*B*L x d2]
  CfmIndexMaps maps = build_cfm_maps(cfg, B);
  rows = cfm_rows(tape, rows, params, cfg, maps, B);
  if (flops) flops->cfm += mark() - t;

  t = mark();
  // b_c = MLP(v_c + sum_k w_ck v_ck)
  Tensor wexp = gather_rows(tape, reshape(tape, params.at("sam.target_w"), {planes, 1}),
                            [&] {
                              std::vector<std::int64_t> idx(
                                  static_cast<std::size_t>(B * planes));
                              for (std::int64_t e = 0; e < B; ++e)
                                for (std::int64_t k = 0; k < planes; ++k)
                                  idx[static_cast<std::size_t>(e * planes + k)] = k;
                              return idx;
                            }());
  Tensor s = sum_row_groups(tape, mul(tape, target_feats, wexp), planes);
  Tensor b_c = residual_mlp(tape, add(tape, lk.cand_item, s), sam_mlp(params, "sam.target_mlp"));
  if (flops) flops->sam_target += mark() - t;

  t = mark();
  Tensor acc;
  if (cfg.sam_variant == SamVariant::kAvgPool) {
    Tensor summed;
    for (std::int64_t k = 0; k < planes; ++k) {
      std::vector<std::int64_t> block(static_cast<std::size_t>(B * cfg.L));
      for (std::int64_t i = 0; i < B * cfg.L; ++i)
        block[static_cast<std::size_t>(i)] = k * B * cfg.L + i;
      Tensor part = gather_rows(tape, rows, block);
      summed = summed.defined() ? add(tape, summed, part) : part;
    }
    acc = affine(tape, summed, 1.0 / static_cast<double>(planes), 0.0);
  } else {
    Tensor t_in = rows;
    if (cfg.sam_variant != SamVariant::kNoTarget) {
      std::vector<std::int64_t> vck_idx(static_cast<std::size_t>(planes * B * cfg.L));
      for (std::int64_t k = 0; k < planes; ++k)
        for (std::int64_t e = 0; e < B; ++e)
          for (std::int64_t i = 0; i < cfg.L; ++i)
            vck_idx[static_cast<std::size_t>((k * B + e) * cfg.L + i)] = e * planes + k;
      Tensor vck = gather_rows(tape, target_feats, vck_idx);
      t_in = add(tape, rows, mul(tape, rows, vck));
    }
    ResidualMlpParams wp = sam_mlp(params, "sam.weight_mlp");
    Tensor w_raw = scalar_mlp_rows(tape, t_in, wp);  // [planes*B*L x 1]
    std::vector<std::int64_t> regroup(static_cast<std::size_t>(B * cfg.L * planes));
    for (std::int64_t e = 0; e < B; ++e)
      for (std::int64_t i = 0; i < cfg.L; ++i)
        for (std::int64_t k = 0; k < planes; ++k)
          regroup[static_cast<std::size_t>((e * cfg.L + i) * planes + k)] =
              (k * B + e) * cfg.L + i;
    Tensor weights =
        softmax_lastdim(tape, gather_flat(tape, w_raw, regroup, {B * cfg.L, planes}));
    std::vector<std::int64_t> spread(static_cast<std::size_t>(planes * B * cfg.L));
    for (std::int64_t k = 0; k < planes; ++k)
      for (std::int64_t e = 0; e < B; ++e)
        for (std::int64_t i = 0; i < cfg.L; ++i)
          spread[static_cast<std::size_t>((k * B + e) * cfg.L + i)] =
              (e * cfg.L + i) * planes + k;
    Tensor wexp2 = gather_flat(tape, weights, spread, {planes * B * cfg.L, 1});
    Tensor prod = mul(tape, rows, wexp2);
    for (std::int64_t k = 0; k < planes; ++k) {
      std::vector<std::int64_t> block(static_cast<std::size_t>(B * cfg.L));
      for (std::int64_t i = 0; i < B * cfg.L; ++i)
        block[static_cast<std::size_t>(i)] = k * B * cfg.L + i;
      Tensor part = gather_rows(tape, prod, block);
      acc = acc.defined() ? add(tape, acc, part) : part;
    }
  }
  Tensor b = residual_mlp(tape, add(tape, lk.items, acc), sam_mlp(params, "sam.behavior_mlp"));
  b = mul(tape, b, lk.mask_col);
  auto expand = expand_index(B, cfg.L);
  Tensor bc_exp = gather_rows(tape, b_c, expand);
  Tensor cat = concat(tape, {b, mul(tape, b, bc_exp), bc_exp}, 1);
  const Tensor& wg = cfg.sam_variant == SamVariant::kScalarGate
                         ? params.at("sam.gate.wg_scalar")
                         : params.at("sam.gate.wg");
  Tensor gates = sigmoid(tape, matmul(tape, cat, transpose2d(tape, wg)));
  Tensor pooled = sum_row_groups(tape, mul(tape, gates, mul(tape, b, lk.mask_col)), cfg.L);
  Tensor e_s;
  if (cfg.divide_by_real_count) {
    std::vector<double> inv(static_cast<std::size_t>(B));
    for (std::int64_t e = 0; e < B; ++e)
      inv[static_cast<std::size_t>(e)] =
          1.0 / static_cast<double>(std::max<std::int64_t>(1, lk.real_counts[static_cast<std::size_t>(e)]));
    e_s = mul(tape, pooled, Tensor({B, 1}, std::move(inv)));
  } else {
    e_s = affine(tape, pooled, 1.0 / static_cast<double>(cfg.L), 0.0);
  }
  if (flops) flops->sam_seq += mark() - t;

  t = mark();
  Tensor x = concat(tape, {lk.user, e_s, b_c, lk.context}, 1);  // [B x 4d2]
  std::size_t layers = cfg.head_hidden.size() + 1;
  for (std::size_t i = 0; i < layers; ++i) {
    std::string base = "head.l" + std::to_string(i);
    x = add(tape, matmul(tape, x, transpose2d(tape, params.at(base + ".w"))),
            params.at(base + ".b"));
    if (i + 1 < layers) x = gelu(tape, x);
  }
  Tensor yhat = sigmoid(tape, reshape(tape, x, {B}));
  if (flops) flops->head += mark() - t;
  return yhat;
}

}  // namespace dsain
