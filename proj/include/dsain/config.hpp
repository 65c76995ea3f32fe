#pragma once

#include <fstream>

#include "dsain/tensor.hpp"

namespace dsain {

enum class SfeVariant { kFull, kPoolConcat, kPoolMicro, kConcat, kNoGeneral };
enum class SamVariant { kFull, kAvgPool, kNoTarget, kScalarGate };

inline const char* to_string(SfeVariant v) {
  switch (v) {
    case SfeVariant::kFull: return "full";
    case SfeVariant::kPoolConcat: return "pool_concat";
    case SfeVariant::kPoolMicro: return "pool_micro";
    case SfeVariant::kConcat: return "concat";
    case SfeVariant::kNoGeneral: return "no_general";
  }
  return "?";
}

inline const char* to_string(SamVariant v) {
  switch (v) {
    case SamVariant::kFull: return "full";
    case SamVariant::kAvgPool: return "avg_pool";
    case SamVariant::kNoTarget: return "no_target";
    case SamVariant::kScalarGate: return "scalar_gate";
  }
  return "?";
}

struct ModelConfig {
  // core dimensions
  std::int64_t L = 300;            // behavior sequence length
  std::int64_t Lw = 30;            // behavior-mixer window size, must divide L
  std::int64_t n = 5;              // number of situational feature fields
  std::int64_t d2 = 8;             // common embedding dimension
  std::int64_t micro_depth = 2;    // layer count of the carved micro-MLP
  std::int64_t d1 = 144;           // situational embedding dimension
  std::int64_t M = 4;              // mixer block repetitions
  double tau = 1.0;                // Gumbel-Softmax temperature
  std::int64_t D_Lw = 10;          // behavior-mixer hidden size
  std::int64_t D_d2 = 16;          // channel-mixer hidden size
  std::int64_t D_n = 8;            // feature-mixer hidden size

  // vocabularies; row 0 of every table is the reserved padding row
  std::int64_t item_vocab = 501;
  std::int64_t user_vocab = 201;
  std::vector<std::int64_t> situ_vocab = {3, 5, 7, 25, 3};

  std::vector<std::int64_t> head_hidden = {32, 16};

  // module switches
  bool bdm_on = true;
  bool mix_behavior = true;
  bool mix_channel = true;
  bool mix_feature = true;
  bool mix_gelu = true;
  bool mix_adjacent = true;
  bool mix_dilated = true;
  bool mix_shifted = true;
  bool cfm_shared_planes = true;        // one behavior/channel mixer block for all planes
  bool shifted_literal_order = false;   // keep the remain-first row ordering
  bool divide_by_real_count = false;    // pool by real history length instead of L
  bool no_situation = false;            // zero the whole situational pathway
  SfeVariant sfe_variant = SfeVariant::kFull;
  SamVariant sam_variant = SamVariant::kFull;
  std::int64_t keep_exposures = -1;     // >=0: keep only that many exposures before each click

  std::uint64_t seed = 1;

  std::int64_t derived_d1() const { return micro_depth * (d2 * d2 + d2); }

  std::int64_t gate_hidden() const { return std::max<std::int64_t>(1, (d2 + d1) / 2); }

  std::int64_t ctx_vocab() const { return situ_vocab.empty() ? 2 : situ_vocab[0]; }

  /// Feature planes seen by CFM/SAM; the pooled SFE variants collapse the
  /// per-field pipelines into a single plane.
  std::int64_t planes() const {
    return (sfe_variant == SfeVariant::kPoolConcat || sfe_variant == SfeVariant::kPoolMicro)
               ? 1
               : n;
  }

  void validate() const {
    require(L >= 1, "config: L must be >= 1");
    require(Lw >= 1 && Lw <= L, "config: L_w must be in [1, L]");
    require(L % Lw == 0, "config: L mod L_w != 0 (" + std::to_string(L) + " mod " +
                             std::to_string(Lw) + ")");
    require(n >= 1, "config: n must be >= 1");
    require(d2 >= 1, "config: d2 must be >= 1");
    require(micro_depth >= 1, "config: micro_depth must be >= 1");
    require(d1 == derived_d1(),
            "config: d1 must equal D*(d2^2+d2) = " + std::to_string(derived_d1()) + ", got " +
                std::to_string(d1));
    require(tau > 0.0, "config: tau must be positive");
    require(M >= 1, "config: M must be >= 1");
    require(D_Lw >= 1 && D_d2 >= 1 && D_n >= 1, "config: mixer hidden sizes must be >= 1");
    require(static_cast<std::int64_t>(situ_vocab.size()) == n,
            "config: situ_vocab holds " + std::to_string(situ_vocab.size()) +
                " entries but n = " + std::to_string(n));
    for (std::size_t k = 0; k < situ_vocab.size(); ++k)
      require(situ_vocab[k] >= 2, "config: situ_vocab[" + std::to_string(k) + "] must be >= 2");
    require(item_vocab >= 2, "config: item_vocab must be >= 2");
    require(user_vocab >= 2, "config: user_vocab must be >= 2");
    for (auto h : head_hidden) require(h >= 1, "config: head_hidden entries must be >= 1");
    if (mix_behavior)
      require(mix_adjacent || mix_dilated || mix_shifted,
              "config: behavior mixing enabled with every branch disabled");
    if (mix_behavior && mix_shifted)
      require(L / Lw >= 2, "config: shifted mixing requires L/L_w >= 2");
    require(keep_exposures >= -1, "config: keep_exposures must be -1 or >= 0");
  }
};

/// Named ablation variants selectable from the CLI.
inline std::vector<std::string> variant_names() {
  return {"base",
          "bdm_off",
          "keep_x2",
          "keep_x4",
          "keep_x8",
          "keep_x12",
          "keep_x16",
          "keep_x20",
          "sfe_pool_concat",
          "sfe_pool_micro",
          "sfe_concat",
          "sfe_no_general",
          "cfm_behavior_only",
          "cfm_channel_only",
          "cfm_feature_only",
          "cfm_no_feature",
          "cfm_no_channel",
          "cfm_no_behavior",
          "cfm_no_gelu",
          "sam_avg_pool",
          "sam_no_target",
          "sam_scalar_gate",
          "no_situation"};
}

inline void apply_variant(ModelConfig& cfg, const std::string& name) {
  if (name == "base") return;
  if (name == "bdm_off") { cfg.bdm_on = false; return; }
  if (name.rfind("keep_x", 0) == 0) {
    cfg.keep_exposures = std::stoll(name.substr(6));
    return;
  }
  if (name == "sfe_pool_concat") { cfg.sfe_variant = SfeVariant::kPoolConcat; return; }
  if (name == "sfe_pool_micro") { cfg.sfe_variant = SfeVariant::kPoolMicro; return; }
  if (name == "sfe_concat") { cfg.sfe_variant = SfeVariant::kConcat; return; }
  if (name == "sfe_no_general") { cfg.sfe_variant = SfeVariant::kNoGeneral; return; }
  if (name == "cfm_behavior_only") { cfg.mix_channel = false; cfg.mix_feature = false; return; }
  if (name == "cfm_channel_only") { cfg.mix_behavior = false; cfg.mix_feature = false; return; }
  if (name == "cfm_feature_only") { cfg.mix_behavior = false; cfg.mix_channel = false; return; }
  if (name == "cfm_no_feature") { cfg.mix_feature = false; return; }
  if (name == "cfm_no_channel") { cfg.mix_channel = false; return; }
  if (name == "cfm_no_behavior") { cfg.mix_behavior = false; return; }
  if (name == "cfm_no_gelu") { cfg.mix_gelu = false; return; }
  if (name == "sam_avg_pool") { cfg.sam_variant = SamVariant::kAvgPool; return; }
  if (name == "sam_no_target") { cfg.sam_variant = SamVariant::kNoTarget; return; }
  if (name == "sam_scalar_gate") { cfg.sam_variant = SamVariant::kScalarGate; return; }
  if (name == "no_situation") { cfg.no_situation = true; return; }
  fail("unknown variant: " + name);
}

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::int64_t batch_size = 256;
  std::int64_t epochs = 1;
  std::int64_t max_steps = -1;   // -1: bounded by epochs only
  std::int64_t eval_every = 0;   // in epochs; 0 = evaluate only at the end

  void validate() const {
    model.validate();
    require(lr >= 0.0, "config: lr must be nonnegative");
    require(batch_size >= 1, "config: batch_size must be >= 1");
    require(epochs >= 1, "config: epochs must be >= 1");
  }
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  fail("config: bad boolean for " + key + ": " + v);
}

inline std::vector<std::int64_t> parse_int_list(const std::string& v) {
  std::vector<std::int64_t> out;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stoll(cur));
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::stoll(cur));
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Applies one `key=value` setting; returns false if the key is not a
/// model/train key (so callers can route other prefixes).
inline bool apply_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value) {
  ModelConfig& m = cfg.model;
  if (key == "model.L") m.L = std::stoll(value);
  else if (key == "model.Lw") m.Lw = std::stoll(value);
  else if (key == "model.n") m.n = std::stoll(value);
  else if (key == "model.d2") m.d2 = std::stoll(value);
  else if (key == "model.d1") m.d1 = std::stoll(value);
  else if (key == "model.micro_depth") m.micro_depth = std::stoll(value);
  else if (key == "model.M") m.M = std::stoll(value);
  else if (key == "model.tau") m.tau = std::stod(value);
  else if (key == "model.D_Lw") m.D_Lw = std::stoll(value);
  else if (key == "model.D_d2") m.D_d2 = std::stoll(value);
  else if (key == "model.D_n") m.D_n = std::stoll(value);
  else if (key == "model.item_vocab") m.item_vocab = std::stoll(value);
  else if (key == "model.user_vocab") m.user_vocab = std::stoll(value);
  else if (key == "model.situ_vocab") m.situ_vocab = detail::parse_int_list(value);
  else if (key == "model.head_hidden") m.head_hidden = detail::parse_int_list(value);
  else if (key == "model.bdm_on") m.bdm_on = detail::parse_bool(value, key);
  else if (key == "model.mix_behavior") m.mix_behavior = detail::parse_bool(value, key);
  else if (key == "model.mix_channel") m.mix_channel = detail::parse_bool(value, key);
  else if (key == "model.mix_feature") m.mix_feature = detail::parse_bool(value, key);
  else if (key == "model.mix_gelu") m.mix_gelu = detail::parse_bool(value, key);
  else if (key == "model.mix_adjacent") m.mix_adjacent = detail::parse_bool(value, key);
  else if (key == "model.mix_dilated") m.mix_dilated = detail::parse_bool(value, key);
  else if (key == "model.mix_shifted") m.mix_shifted = detail::parse_bool(value, key);
  else if (key == "model.cfm_shared_planes")
    m.cfm_shared_planes = detail::parse_bool(value, key);
  else if (key == "model.shifted_literal_order")
    m.shifted_literal_order = detail::parse_bool(value, key);
  else if (key == "model.divide_by_real_count")
    m.divide_by_real_count = detail::parse_bool(value, key);
  else if (key == "model.no_situation") m.no_situation = detail::parse_bool(value, key);
  else if (key == "model.sfe_variant") {
    if (value == "full") m.sfe_variant = SfeVariant::kFull;
    else if (value == "pool_concat") m.sfe_variant = SfeVariant::kPoolConcat;
    else if (value == "pool_micro") m.sfe_variant = SfeVariant::kPoolMicro;
    else if (value == "concat") m.sfe_variant = SfeVariant::kConcat;
    else if (value == "no_general") m.sfe_variant = SfeVariant::kNoGeneral;
    else fail("config: bad sfe_variant: " + value);
  } else if (key == "model.sam_variant") {
    if (value == "full") m.sam_variant = SamVariant::kFull;
    else if (value == "avg_pool") m.sam_variant = SamVariant::kAvgPool;
    else if (value == "no_target") m.sam_variant = SamVariant::kNoTarget;
    else if (value == "scalar_gate") m.sam_variant = SamVariant::kScalarGate;
    else fail("config: bad sam_variant: " + value);
  }
  else if (key == "model.keep_exposures") m.keep_exposures = std::stoll(value);
  else if (key == "model.seed") m.seed = static_cast<std::uint64_t>(std::stoull(value));
  else if (key == "train.lr") cfg.lr = std::stod(value);
  else if (key == "train.beta1") cfg.beta1 = std::stod(value);
  else if (key == "train.beta2") cfg.beta2 = std::stod(value);
  else if (key == "train.adam_eps") cfg.adam_eps = std::stod(value);
  else if (key == "train.batch_size") cfg.batch_size = std::stoll(value);
  else if (key == "train.epochs") cfg.epochs = std::stoll(value);
  else if (key == "train.max_steps") cfg.max_steps = std::stoll(value);
  else if (key == "train.eval_every") cfg.eval_every = std::stoll(value);
  else return false;
  return true;
}

/// Flat key=value config file; '#' starts a comment. Unknown keys are handed
/// to `extra` (e.g. synth.* settings), which should return false to reject.
inline void load_config_file(
    TrainConfig& cfg, const std::string& path,
    const std::function<bool(const std::string&, const std::string&)>& extra = nullptr) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    require(eq != std::string::npos,
            "config: line " + std::to_string(lineno) + " is not key=value: " + line);
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (apply_config_kv(cfg, key, value)) continue;
    if (extra && extra(key, value)) continue;
    fail("config: unknown key at line " + std::to_string(lineno) + ": " + key);
  }
}

}  // namespace dsain
