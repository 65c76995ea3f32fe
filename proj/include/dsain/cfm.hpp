#pragma once

#include "dsain/config.hpp"
#include "dsain/params.hpp"
#include "dsain/tensor.hpp"

namespace dsain {

inline constexpr double kMixerLnEps = 1e-5;

/// Contiguous windows of L_w rows, L/L_w segments.
inline std::vector<std::vector<std::int64_t>> adjacent_segments(std::int64_t L,
                                                                std::int64_t Lw) {
  require(Lw >= 1 && L % Lw == 0, "adjacent_segments: L_w must divide L");
  std::vector<std::vector<std::int64_t>> segs;
  for (std::int64_t start = 0; start < L; start += Lw) {
    std::vector<std::int64_t> rows;
    for (std::int64_t j = 0; j < Lw; ++j) rows.push_back(start + j);
    segs.push_back(std::move(rows));
  }
  return segs;
}

/// Strided gathers: segment t holds rows {t, t + L/L_w, t + 2 L/L_w, ...},
/// L/L_w segments of L_w rows each.
inline std::vector<std::vector<std::int64_t>> dilated_segments(std::int64_t L, std::int64_t Lw) {
  require(Lw >= 1 && L % Lw == 0, "dilated_segments: L_w must divide L");
  std::int64_t stride = L / Lw;
  std::vector<std::vector<std::int64_t>> segs;
  for (std::int64_t t = 0; t < stride; ++t) {
    std::vector<std::int64_t> rows;
    for (std::int64_t j = 0; j < Lw; ++j) rows.push_back(t + j * stride);
    segs.push_back(std::move(rows));
  }
  return segs;
}

struct ShiftedPartition {
  std::vector<std::vector<std::int64_t>> segments;  // L/L_w - 1 windows
  std::vector<std::int64_t> remain;                 // first floor(L_w/2) + last L_w-floor(L_w/2) rows
};

/// Windows shifted by floor(L_w/2); the uncovered head and tail rows form the
/// remain block and skip the MLP.
inline ShiftedPartition shifted_segments(std::int64_t L, std::int64_t Lw) {
  require(Lw >= 1 && L % Lw == 0, "shifted_segments: L_w must divide L");
  require(L / Lw >= 2, "shifted_segments: L/L_w = " + std::to_string(L / Lw) +
                           " leaves no shifted segment");
  std::int64_t offset = Lw / 2;
  ShiftedPartition part;
  for (std::int64_t t = 0; t + 1 < L / Lw; ++t) {
    std::vector<std::int64_t> rows;
    for (std::int64_t j = 0; j < Lw; ++j) rows.push_back(offset + t * Lw + j);
    part.segments.push_back(std::move(rows));
  }
  for (std::int64_t r = 0; r < offset; ++r) part.remain.push_back(r);
  for (std::int64_t r = L - (Lw - offset); r < L; ++r) part.remain.push_back(r);
  return part;
}

struct MixerBranchParams {
  Tensor w1;       // [hidden x L_w]
  Tensor w2;       // [L_w x hidden]
  Tensor ln_gain;  // [d2]
  Tensor ln_bias;  // [d2]
};

inline MixerBranchParams mixer_branch(const ModelParams& params, const std::string& base) {
  return {params.at(base + ".w1"), params.at(base + ".w2"), params.at(base + ".ln_gain"),
          params.at(base + ".ln_bias")};
}

/// Parameter-name prefix for the mixer block of plane `k` ("" shared mode).
inline std::string cfm_plane_suffix(const ModelConfig& cfg, std::int64_t k) {
  return cfg.cfm_shared_planes ? std::string() : ".p" + std::to_string(k);
}

/// seg + W2 act(W1 LayerNorm(seg)), applied per channel column.
inline Tensor mixer_block(Tape& tape, const Tensor& seg, const MixerBranchParams& p,
                          bool gelu_on) {
  Tensor ln = layer_norm(tape, seg, p.ln_gain, p.ln_bias, kMixerLnEps);
  Tensor h = matmul(tape, p.w1, ln);
  if (gelu_on) h = gelu(tape, h);
  return add(tape, seg, matmul(tape, p.w2, h));
}

inline Tensor adjacent_mix(Tape& tape, const Tensor& vk, const MixerBranchParams& p,
                           std::int64_t Lw, bool gelu_on) {
  auto segs = adjacent_segments(vk.dim(0), Lw);
  std::vector<Tensor> mixed;
  for (const auto& rows : segs)
    mixed.push_back(mixer_block(tape, gather_rows(tape, vk, rows), p, gelu_on));
  return mixed.size() == 1 ? mixed[0] : concat(tape, mixed, 0);
}

/// Segment outputs are scattered back to the original row positions so the
/// three behavior-mixer outputs stay positionally aligned.
inline Tensor dilated_mix(Tape& tape, const Tensor& vk, const MixerBranchParams& p,
                          std::int64_t Lw, bool gelu_on) {
  std::int64_t L = vk.dim(0);
  auto segs = dilated_segments(L, Lw);
  std::vector<Tensor> mixed;
  for (const auto& rows : segs)
    mixed.push_back(mixer_block(tape, gather_rows(tape, vk, rows), p, gelu_on));
  Tensor stacked = mixed.size() == 1 ? mixed[0] : concat(tape, mixed, 0);
  std::int64_t stride = L / Lw;
  std::vector<std::int64_t> perm(static_cast<std::size_t>(L));
  for (std::int64_t r = 0; r < L; ++r)
    perm[static_cast<std::size_t>(r)] = (r % stride) * Lw + r / stride;
  return gather_rows(tape, stacked, perm);
}

/// Remain rows pass through untouched. Default output order restores the
/// original positions; the literal flag keeps the remain-first concatenation
/// order instead.
inline Tensor shifted_mix(Tape& tape, const Tensor& vk, const MixerBranchParams& p,
                          std::int64_t Lw, bool gelu_on, bool literal_order = false) {
  std::int64_t L = vk.dim(0);
  auto part = shifted_segments(L, Lw);
  std::vector<Tensor> parts;
  parts.push_back(gather_rows(tape, vk, part.remain));
  for (const auto& rows : part.segments)
    parts.push_back(mixer_block(tape, gather_rows(tape, vk, rows), p, gelu_on));
  Tensor stacked = concat(tape, parts, 0);
  if (literal_order) return stacked;
  std::int64_t offset = Lw / 2;
  std::vector<std::int64_t> perm(static_cast<std::size_t>(L));
  for (std::int64_t r = 0; r < L; ++r) {
    std::int64_t idx;
    if (r < offset) idx = r;
    else if (r >= L - (Lw - offset)) idx = offset + (r - (L - (Lw - offset)));
    else idx = Lw + (r - offset);
    perm[static_cast<std::size_t>(r)] = idx;
  }
  return gather_rows(tape, stacked, perm);
}

/// w1*adjacent + w2*dilated + w3*shifted with learnable fuse weights;
/// disabled branches drop out of the sum.
inline Tensor behavior_mix(Tape& tape, const Tensor& vk, const ModelParams& params,
                           const ModelConfig& cfg, std::int64_t plane = 0) {
  std::string suffix = cfm_plane_suffix(cfg, plane);
  Tensor fuse = params.at("cfm.fuse.w");
  Tensor acc;
  if (cfg.mix_adjacent) {
    Tensor term = mul(tape, adjacent_mix(tape, vk, mixer_branch(params, "cfm.adj" + suffix),
                                         cfg.Lw, cfg.mix_gelu),
                      slice1d(tape, fuse, 0, 1));
    acc = term;
  }
  if (cfg.mix_dilated) {
    Tensor term = mul(tape, dilated_mix(tape, vk, mixer_branch(params, "cfm.dil" + suffix),
                                        cfg.Lw, cfg.mix_gelu),
                      slice1d(tape, fuse, 1, 1));
    acc = acc.defined() ? add(tape, acc, term) : term;
  }
  if (cfg.mix_shifted) {
    Tensor term = mul(tape, shifted_mix(tape, vk, mixer_branch(params, "cfm.shi" + suffix),
                                        cfg.Lw, cfg.mix_gelu, cfg.shifted_literal_order),
                      slice1d(tape, fuse, 2, 1));
    acc = acc.defined() ? add(tape, acc, term) : term;
  }
  return acc.defined() ? acc : Tensor::zeros(vk.shape());
}

/// Per-row MLP over the channel axis, shared across rows.
inline Tensor channel_mix(Tape& tape, const Tensor& vk, const ModelParams& params,
                          bool gelu_on, const std::string& suffix = "") {
  std::string base = "cfm.ch" + suffix;
  Tensor ln = layer_norm(tape, vk, params.at(base + ".ln_gain"), params.at(base + ".ln_bias"),
                         kMixerLnEps);
  Tensor h = matmul(tape, ln, transpose2d(tape, params.at(base + ".w3")));
  if (gelu_on) h = gelu(tape, h);
  return add(tape, vk, matmul(tape, h, transpose2d(tape, params.at(base + ".w4"))));
}

/// Mixes across the feature planes for every (behavior, channel) pair with a
/// shared MLP block.
inline std::vector<Tensor> feature_mix(Tape& tape, const std::vector<Tensor>& planes,
                                       const ModelParams& params, bool gelu_on) {
  std::int64_t n = static_cast<std::int64_t>(planes.size());
  std::int64_t L = planes[0].dim(0);
  std::int64_t d2 = planes[0].dim(1);
  std::vector<Tensor> rows;
  for (const auto& plane : planes) rows.push_back(reshape(tape, plane, {1, L * d2}));
  Tensor stackT = transpose2d(tape, rows.size() == 1 ? rows[0] : concat(tape, rows, 0));
  Tensor ln = layer_norm(tape, stackT, params.at("cfm.fea.ln_gain"),
                         params.at("cfm.fea.ln_bias"), kMixerLnEps);
  Tensor h = matmul(tape, ln, transpose2d(tape, params.at("cfm.fea.w5")));
  if (gelu_on) h = gelu(tape, h);
  Tensor mixed = add(tape, stackT, matmul(tape, h, transpose2d(tape, params.at("cfm.fea.w6"))));
  Tensor back = transpose2d(tape, mixed);  // [n x L*d2]
  std::vector<Tensor> out;
  for (std::int64_t k = 0; k < n; ++k)
    out.push_back(reshape(tape, gather_rows(tape, back, {k}), {L, d2}));
  return out;
}

/// M repetitions of (behavior mix per plane, channel mix per plane, feature
/// mix across planes) with one shared parameter set.
inline std::vector<Tensor> cfm_forward(Tape& tape, std::vector<Tensor> planes,
                                       const ModelParams& params, const ModelConfig& cfg) {
  require(cfg.M >= 1, "cfm_forward: M must be >= 1");
  for (std::int64_t layer = 0; layer < cfg.M; ++layer) {
    if (cfg.mix_behavior)
      for (std::size_t k = 0; k < planes.size(); ++k)
        planes[k] = behavior_mix(tape, planes[k], params, cfg, static_cast<std::int64_t>(k));
    if (cfg.mix_channel)
      for (std::size_t k = 0; k < planes.size(); ++k)
        planes[k] = channel_mix(tape, planes[k], params, cfg.mix_gelu,
                                cfm_plane_suffix(cfg, static_cast<std::int64_t>(k)));
    if (cfg.mix_feature) planes = feature_mix(tape, planes, params, cfg.mix_gelu);
  }
  return planes;
}

}  // namespace dsain
