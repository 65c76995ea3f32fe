#pragma once

#include "dsain/config.hpp"
#include "dsain/data.hpp"
#include "dsain/params.hpp"
#include "dsain/tensor.hpp"

namespace dsain {

inline std::string situ_table_name(std::int64_t k) {
  return "embed.situ.k" + std::to_string(k);
}

/// All trainable arrays, N(0, 0.01^2) from cfg.seed except LayerNorm affine
/// (gain 1 / bias 0), the mixer fuse weights (1/3 each) and the padding row 0
/// of every embedding table (kept at zero).
inline ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams params;
  Rng rng(cfg.seed);

  auto normal = [&](Shape shape) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = rng.normal(0.0, 0.01);
    return Tensor(std::move(shape), std::move(v));
  };
  auto table = [&](Shape shape) {
    Tensor t = normal(std::move(shape));
    for (std::int64_t c = 0; c < t.dim(1); ++c) t.data()[static_cast<std::size_t>(c)] = 0.0;
    return t;
  };

  // embedding tables (two families: common dim d2, situational dim d1)
  params.add("embed.item", table({cfg.item_vocab, cfg.d2}));
  params.add("embed.user", table({cfg.user_vocab, cfg.d2}));
  params.add("embed.ctx", table({cfg.ctx_vocab(), cfg.d2}));
  for (std::int64_t k = 0; k < cfg.n; ++k)
    params.add(situ_table_name(k), table({cfg.situ_vocab[static_cast<std::size_t>(k)], cfg.d1}));
  params.add("embed.general", normal({cfg.n, cfg.d1}));

  // behavior denoising
  params.add("bdm.w1", normal({cfg.d2, cfg.n * cfg.d1}));
  params.add("bdm.w2", normal({1, cfg.d2}));

  // situational feature encoder gate
  std::int64_t gh = cfg.gate_hidden();
  params.add("sfe.gate.w1", normal({gh, cfg.d2 + cfg.d1}));
  params.add("sfe.gate.b1", normal({gh}));
  params.add("sfe.gate.w2", normal({1, gh}));
  params.add("sfe.gate.b2", normal({1}));
  if (cfg.sfe_variant == SfeVariant::kConcat || cfg.sfe_variant == SfeVariant::kPoolConcat)
    params.add("sfe.proj.w", normal({cfg.d2, cfg.d2 + cfg.d1}));

  // correlation fusion: one parameter set shared across layers, and across
  // planes unless plane sharing is switched off
  std::int64_t planes = cfg.planes();
  std::int64_t mixer_sets = cfg.cfm_shared_planes ? 1 : planes;
  for (std::int64_t set = 0; set < mixer_sets; ++set) {
    std::string suffix = cfg.cfm_shared_planes ? "" : ".p" + std::to_string(set);
    for (const char* br : {"adj", "dil", "shi"}) {
      std::string base = std::string("cfm.") + br + suffix;
      params.add(base + ".w1", normal({cfg.D_Lw, cfg.Lw}));
      params.add(base + ".w2", normal({cfg.Lw, cfg.D_Lw}));
      params.add(base + ".ln_gain", Tensor::full({cfg.d2}, 1.0));
      params.add(base + ".ln_bias", Tensor::zeros({cfg.d2}));
    }
    params.add("cfm.ch" + suffix + ".w3", normal({cfg.D_d2, cfg.d2}));
    params.add("cfm.ch" + suffix + ".w4", normal({cfg.d2, cfg.D_d2}));
    params.add("cfm.ch" + suffix + ".ln_gain", Tensor::full({cfg.d2}, 1.0));
    params.add("cfm.ch" + suffix + ".ln_bias", Tensor::zeros({cfg.d2}));
  }
  params.add("cfm.fuse.w", Tensor::full({3}, 1.0 / 3.0));
  params.add("cfm.fea.w5", normal({cfg.D_n, planes}));
  params.add("cfm.fea.w6", normal({planes, cfg.D_n}));
  params.add("cfm.fea.ln_gain", Tensor::full({planes}, 1.0));
  params.add("cfm.fea.ln_bias", Tensor::zeros({planes}));

  // situation aggregation
  params.add("sam.target_w", normal({planes}));
  for (const char* mlp : {"target_mlp", "behavior_mlp"}) {
    std::string base = std::string("sam.") + mlp;
    params.add(base + ".w1", normal({cfg.d2, cfg.d2}));
    params.add(base + ".b1", normal({cfg.d2}));
    params.add(base + ".w2", normal({cfg.d2, cfg.d2}));
    params.add(base + ".b2", normal({cfg.d2}));
  }
  params.add("sam.weight_mlp.w1", normal({cfg.d2, cfg.d2}));
  params.add("sam.weight_mlp.b1", normal({cfg.d2}));
  params.add("sam.weight_mlp.w2", normal({1, cfg.d2}));
  params.add("sam.weight_mlp.b2", normal({1}));
  if (cfg.sam_variant == SamVariant::kScalarGate)
    params.add("sam.gate.wg_scalar", normal({1, 3 * cfg.d2}));
  else
    params.add("sam.gate.wg", normal({cfg.d2, 3 * cfg.d2}));

  // prediction head: 4*d2 -> hidden widths -> 1
  std::int64_t in = 4 * cfg.d2;
  for (std::size_t i = 0; i < cfg.head_hidden.size(); ++i) {
    std::int64_t out = cfg.head_hidden[i];
    params.add("head.l" + std::to_string(i) + ".w", normal({out, in}));
    params.add("head.l" + std::to_string(i) + ".b", normal({out}));
    in = out;
  }
  params.add("head.l" + std::to_string(cfg.head_hidden.size()) + ".w", normal({1, in}));
  params.add("head.l" + std::to_string(cfg.head_hidden.size()) + ".b", normal({1}));

  return params;
}

inline void validate_record(const ModelConfig& cfg, const TrainRecord& rec) {
  if (!(rec.label == 0 || rec.label == 1)) fail("record: label must be 0 or 1");
  if (!(rec.user_id >= 1 && rec.user_id < cfg.user_vocab))
    fail("record: user id " + std::to_string(rec.user_id) + " outside [1, " +
         std::to_string(cfg.user_vocab) + ")");
  const auto& seq = rec.sequence;
  if (seq.length() != cfg.L)
    fail("record: sequence length " + std::to_string(seq.length()) +
         " != L = " + std::to_string(cfg.L));
  if (static_cast<std::int64_t>(seq.situations.size()) != cfg.L ||
      static_cast<std::int64_t>(seq.mask.size()) != cfg.L)
    fail("record: situations/mask length mismatch");
  if (!(seq.candidate_item >= 1 && seq.candidate_item < cfg.item_vocab))
    fail("record: candidate item id " + std::to_string(seq.candidate_item) + " outside [1, " +
         std::to_string(cfg.item_vocab) + ")");
  if (static_cast<std::int64_t>(seq.candidate_situation.ids.size()) != cfg.n)
    fail("record: candidate situation has " +
         std::to_string(seq.candidate_situation.ids.size()) + " fields, config has " +
         std::to_string(cfg.n));
  for (std::int64_t k = 0; k < cfg.n; ++k) {
    auto id = seq.candidate_situation.ids[static_cast<std::size_t>(k)];
    if (!(id >= 1 && id < cfg.situ_vocab[static_cast<std::size_t>(k)]))
      fail("record: candidate situational field " + std::to_string(k) + " id " +
           std::to_string(id) + " outside [1, " +
           std::to_string(cfg.situ_vocab[static_cast<std::size_t>(k)]) + ")");
  }
  for (std::int64_t i = 0; i < cfg.L; ++i) {
    auto ui = static_cast<std::size_t>(i);
    if (static_cast<std::int64_t>(seq.situations[ui].ids.size()) != cfg.n)
      fail("record: situation at position " + std::to_string(i) + " has " +
           std::to_string(seq.situations[ui].ids.size()) + " fields");
    if (!seq.mask[ui]) {
      if (seq.item_ids[ui] != 0)
        fail("record: padding position " + std::to_string(i) + " carries item id " +
             std::to_string(seq.item_ids[ui]));
      continue;
    }
    if (!(seq.item_ids[ui] >= 1 && seq.item_ids[ui] < cfg.item_vocab))
      fail("record: item id " + std::to_string(seq.item_ids[ui]) + " at position " +
           std::to_string(i) + " outside [1, " + std::to_string(cfg.item_vocab) + ")");
    for (std::int64_t k = 0; k < cfg.n; ++k) {
      auto id = seq.situations[ui].ids[static_cast<std::size_t>(k)];
      if (!(id >= 1 && id < cfg.situ_vocab[static_cast<std::size_t>(k)]))
        fail("record: situational field " + std::to_string(k) + " id " + std::to_string(id) +
             " at position " + std::to_string(i) + " outside [1, " +
             std::to_string(cfg.situ_vocab[static_cast<std::size_t>(k)]) + ")");
    }
  }
}

/// Embedding-layer view of one record. With cfg.no_situation the situational
/// pathway (specific + general vectors, request context) is replaced by
/// constant zeros that carry no gradient.
struct LookedUp {
  Tensor user;                    // [d2]
  Tensor items;                   // [L x d2]
  std::vector<Tensor> situ;       // n x [L x d1]
  Tensor cand_item;               // [d2]
  std::vector<Tensor> cand_situ;  // n x [d1]
  std::vector<Tensor> general;    // n x [d1]
  Tensor context;                 // [d2]
  Tensor mask_col;                // [L x 1] constant
  std::vector<std::uint8_t> mask;
  std::int64_t real_count = 0;
};

inline LookedUp lookup_sequence(Tape& tape, const ModelParams& params, const ModelConfig& cfg,
                                const TrainRecord& rec) {
  validate_record(cfg, rec);
  const auto& seq = rec.sequence;
  LookedUp out;
  out.mask = seq.mask;
  out.real_count = seq.real_count();

  std::vector<std::uint8_t> one{1};
  out.user = reshape(tape, embed_lookup(tape, params.at("embed.user"), {rec.user_id}, one),
                     {cfg.d2});
  out.items = embed_lookup(tape, params.at("embed.item"), seq.item_ids, seq.mask);
  out.cand_item = reshape(
      tape, embed_lookup(tape, params.at("embed.item"), {seq.candidate_item}, one), {cfg.d2});

  if (cfg.no_situation) {
    for (std::int64_t k = 0; k < cfg.n; ++k) {
      out.situ.push_back(Tensor::zeros({cfg.L, cfg.d1}));
      out.cand_situ.push_back(Tensor::zeros({cfg.d1}));
      out.general.push_back(Tensor::zeros({cfg.d1}));
    }
    out.context = Tensor::zeros({cfg.d2});
  } else {
    for (std::int64_t k = 0; k < cfg.n; ++k) {
      auto uk = static_cast<std::size_t>(k);
      std::vector<std::int64_t> ids(static_cast<std::size_t>(cfg.L));
      for (std::int64_t i = 0; i < cfg.L; ++i)
        ids[static_cast<std::size_t>(i)] = seq.situations[static_cast<std::size_t>(i)].ids[uk];
      out.situ.push_back(embed_lookup(tape, params.at(situ_table_name(k)), ids, seq.mask));
      out.cand_situ.push_back(reshape(
          tape,
          embed_lookup(tape, params.at(situ_table_name(k)), {seq.candidate_situation.ids[uk]},
                       one),
          {cfg.d1}));
      out.general.push_back(
          reshape(tape, gather_rows(tape, params.at("embed.general"), {k}), {cfg.d1}));
    }
    // request context: the behavior-type id of the candidate situation
    out.context = reshape(
        tape,
        embed_lookup(tape, params.at("embed.ctx"), {seq.candidate_situation.ids[0]}, one),
        {cfg.d2});
  }

  std::vector<double> mvals(static_cast<std::size_t>(cfg.L));
  for (std::int64_t i = 0; i < cfg.L; ++i)
    mvals[static_cast<std::size_t>(i)] = seq.mask[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  out.mask_col = Tensor({cfg.L, 1}, std::move(mvals));
  return out;
}

}  // namespace dsain
