#pragma once

#include <chrono>

#include "dsain/batch.hpp"
#include "dsain/grad_check.hpp"
#include "dsain/model.hpp"

namespace dsain {

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamCount {
  std::vector<std::pair<std::string, std::int64_t>> per_module;
  std::int64_t total = 0;
  std::string d1_identity;

  std::string table() const {
    std::ostringstream os;
    os << d1_identity << '\n';
    for (const auto& [name, count] : per_module) os << "  " << name << ": " << count << '\n';
    os << "  total: " << total << '\n';
    return os.str();
  }
};

/// Closed-form parameter count per module; asserted against a brute-force
/// enumeration of the initialized arrays.
inline ParamCount param_count(const ModelConfig& cfg) {
  cfg.validate();
  std::int64_t planes = cfg.planes();
  std::int64_t gh = cfg.gate_hidden();

  std::int64_t embed = cfg.item_vocab * cfg.d2 + cfg.user_vocab * cfg.d2 +
                       cfg.ctx_vocab() * cfg.d2 + cfg.n * cfg.d1;
  for (auto m : cfg.situ_vocab) embed += m * cfg.d1;

  std::int64_t bdm = cfg.d2 * cfg.n * cfg.d1 + cfg.d2;

  std::int64_t sfe = gh * (cfg.d2 + cfg.d1) + gh + gh + 1;
  if (cfg.sfe_variant == SfeVariant::kConcat || cfg.sfe_variant == SfeVariant::kPoolConcat)
    sfe += cfg.d2 * (cfg.d2 + cfg.d1);

  std::int64_t mixer_sets = cfg.cfm_shared_planes ? 1 : planes;
  std::int64_t cfm = mixer_sets * (3 * (cfg.D_Lw * cfg.Lw + cfg.Lw * cfg.D_Lw + 2 * cfg.d2)  //
                                   + cfg.D_d2 * cfg.d2 + cfg.d2 * cfg.D_d2 + 2 * cfg.d2)     //
                     + 3                                                   // fuse weights
                     + cfg.D_n * planes + planes * cfg.D_n + 2 * planes;  // feature mixer

  std::int64_t sam = planes                                       // target weights
                     + 2 * (2 * cfg.d2 * cfg.d2 + 2 * cfg.d2)     // target + behavior MLPs
                     + cfg.d2 * cfg.d2 + cfg.d2 + cfg.d2 + 1;     // weight MLP
  sam += cfg.sam_variant == SamVariant::kScalarGate ? 3 * cfg.d2 : cfg.d2 * 3 * cfg.d2;

  std::int64_t head = 0;
  std::int64_t in = 4 * cfg.d2;
  for (auto h : cfg.head_hidden) {
    head += h * in + h;
    in = h;
  }
  head += in + 1;

  ParamCount pc;
  pc.per_module = {{"embedding", embed}, {"bdm", bdm}, {"sfe", sfe},
                   {"cfm", cfm},         {"sam", sam}, {"head", head}};
  pc.total = embed + bdm + sfe + cfm + sam + head;
  pc.d1_identity = "d1 = D*(d2^2+d2) = " + std::to_string(cfg.micro_depth) + "*(" +
                   std::to_string(cfg.d2 * cfg.d2) + "+" + std::to_string(cfg.d2) +
                   ") = " + std::to_string(cfg.derived_d1());

  std::int64_t enumerated = init_params(cfg).total_elements();
  require(enumerated == pc.total, "param_count: closed form " + std::to_string(pc.total) +
                                      " != enumerated " + std::to_string(enumerated));
  return pc;
}

// ---------------------------------------------------------------------------
// Forward multiply-add accounting (matmul contractions, per example)
// ---------------------------------------------------------------------------

struct FlopEstimate {
  FlopBreakdown by_module;
  std::int64_t total = 0;

  std::string table() const {
    std::ostringstream os;
    os << "  bdm:        " << by_module.bdm << '\n'
       << "  sfe_seq:    " << by_module.sfe_seq << '\n'
       << "  sfe_target: " << by_module.sfe_target << '\n'
       << "  cfm:        " << by_module.cfm << '\n'
       << "  sam_seq:    " << by_module.sam_seq << '\n'
       << "  sam_target: " << by_module.sam_target << '\n'
       << "  head:       " << by_module.head << '\n'
       << "  total:      " << total << '\n';
    return os.str();
  }
};

namespace detail {

inline FlopBreakdown flop_closed_form(const ModelConfig& cfg, std::int64_t L) {
  std::int64_t planes = cfg.planes();
  std::int64_t gh = cfg.gate_hidden();
  FlopBreakdown f;

  if (cfg.bdm_on) f.bdm = L * cfg.d2 * cfg.n * cfg.d1 + L * cfg.d2;

  auto sfe_tail = [&](std::int64_t rows) {
    switch (cfg.sfe_variant) {
      case SfeVariant::kFull:
      case SfeVariant::kNoGeneral:
        return cfg.n * rows * cfg.micro_depth * cfg.d2 * cfg.d2;
      case SfeVariant::kConcat:
        return cfg.n * rows * (cfg.d2 + cfg.d1) * cfg.d2;
      case SfeVariant::kPoolConcat:
        return rows * (cfg.d2 + cfg.d1) * cfg.d2;
      case SfeVariant::kPoolMicro:
        return rows * cfg.micro_depth * cfg.d2 * cfg.d2;
    }
    return std::int64_t{0};
  };
  std::int64_t gate = cfg.n * ((cfg.d2 + cfg.d1) * gh + gh);
  f.sfe_seq = L * gate + sfe_tail(L);
  f.sfe_target = gate + sfe_tail(1);

  std::int64_t beh = 0;
  if (cfg.mix_behavior) {
    if (cfg.mix_adjacent) beh += 2 * L * cfg.D_Lw * cfg.d2;
    if (cfg.mix_dilated) beh += 2 * L * cfg.D_Lw * cfg.d2;
    if (cfg.mix_shifted) beh += 2 * (L - cfg.Lw) * cfg.D_Lw * cfg.d2;
  }
  std::int64_t ch = cfg.mix_channel ? 2 * L * cfg.d2 * cfg.D_d2 : 0;
  std::int64_t fea = cfg.mix_feature ? 2 * L * cfg.d2 * planes * cfg.D_n : 0;
  f.cfm = cfg.M * (planes * (beh + ch) + fea);

  std::int64_t weight_mlps = cfg.sam_variant == SamVariant::kAvgPool
                                 ? 0
                                 : planes * (L * cfg.d2 * cfg.d2 + L * cfg.d2);
  std::int64_t gate_madds = cfg.sam_variant == SamVariant::kScalarGate
                                ? L * 3 * cfg.d2
                                : L * 3 * cfg.d2 * cfg.d2;
  f.sam_seq = weight_mlps + 2 * L * cfg.d2 * cfg.d2 + gate_madds;
  f.sam_target = 2 * cfg.d2 * cfg.d2;

  std::int64_t in = 4 * cfg.d2;
  for (auto h : cfg.head_hidden) {
    f.head += h * in;
    in = h;
  }
  f.head += in;
  return f;
}

}  // namespace detail

/// Forward multiply-adds per example, by module. The sequence-path counts
/// (bdm, sfe_seq, cfm, sam_seq) grow with L; only cfm grows with M, checked
/// here exactly.
inline FlopEstimate flop_estimate(const ModelConfig& cfg) {
  cfg.validate();
  FlopEstimate est;
  est.by_module = detail::flop_closed_form(cfg, cfg.L);
  est.total = est.by_module.total();

  // structural self-checks on the closed form
  FlopBreakdown twice_L = detail::flop_closed_form(cfg, 2 * cfg.L);
  require(twice_L.bdm == 2 * est.by_module.bdm, "flop_estimate: bdm not linear in L");
  require(twice_L.sfe_seq == 2 * est.by_module.sfe_seq, "flop_estimate: sfe not linear in L");
  require(twice_L.sam_seq == 2 * est.by_module.sam_seq, "flop_estimate: sam not linear in L");
  ModelConfig deeper = cfg;
  deeper.M *= 2;
  FlopBreakdown twice_M = detail::flop_closed_form(deeper, cfg.L);
  require(twice_M.cfm == 2 * est.by_module.cfm, "flop_estimate: cfm not linear in M");
  require(twice_M.bdm == est.by_module.bdm && twice_M.sfe_seq == est.by_module.sfe_seq &&
              twice_M.sam_seq == est.by_module.sam_seq && twice_M.head == est.by_module.head,
          "flop_estimate: M leaked outside cfm");
  return est;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;

  static AdamState init(const ModelParams& params) {
    AdamState st;
    for (const auto& [name, tensor] : params.entries()) {
      st.m.emplace_back(tensor.data().size(), 0.0);
      st.v.emplace_back(tensor.data().size(), 0.0);
    }
    return st;
  }
};

inline void adam_step(ModelParams& params, AdamState& st, double lr, double beta1, double beta2,
                      double eps) {
  ++st.t;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
  auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor& tensor = entries[i].second;
    auto& data = tensor.data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    const double* grad = tensor.has_grad() ? tensor.grad().data() : nullptr;
    for (std::size_t j = 0; j < data.size(); ++j) {
      double g = grad ? grad[j] : 0.0;
      m[j] = beta1 * m[j] + (1.0 - beta1) * g;
      v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
      data[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation and training
// ---------------------------------------------------------------------------

/// Applies the configured sequence preprocessing (exposure filtering).
inline std::vector<TrainRecord> prepare_records(const ModelConfig& cfg,
                                                std::vector<TrainRecord> records) {
  if (cfg.keep_exposures >= 0)
    for (auto& rec : records)
      rec.sequence = keep_exposures_filter(rec.sequence, cfg.keep_exposures);
  return records;
}

inline std::vector<double> score_records(const ModelParams& params, const ModelConfig& cfg,
                                         const std::vector<TrainRecord>& records) {
  std::vector<double> scores;
  scores.reserve(records.size());
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    std::size_t end = std::min(records.size(), start + chunk);
    std::vector<TrainRecord> slice(records.begin() + static_cast<std::ptrdiff_t>(start),
                                   records.begin() + static_cast<std::ptrdiff_t>(end));
    Tape tape(false);
    Tensor yhat = batch_forward(tape, params, cfg, slice, nullptr);
    scores.insert(scores.end(), yhat.data().begin(), yhat.data().end());
  }
  return scores;
}

inline Metrics evaluate_model(const ModelParams& params, const ModelConfig& cfg,
                              const std::vector<TrainRecord>& records) {
  require(!records.empty(), "evaluate_model: no records");
  std::vector<double> scores = score_records(params, cfg, records);
  std::vector<int> labels;
  labels.reserve(records.size());
  for (const auto& rec : records) labels.push_back(rec.label);
  return evaluate_scores(scores, labels);
}

struct RunReport {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  std::vector<std::pair<std::int64_t, Metrics>> evals;  // (epoch, metrics)
  double wall_seconds = 0.0;
  std::int64_t param_total = 0;
  FlopEstimate flops;

  std::string to_json() const {
    nlohmann::json j;
    j["epoch_losses"] = epoch_losses;
    j["steps"] = step_losses.size();
    j["wall_seconds"] = wall_seconds;
    j["param_count"] = param_total;
    j["flops_per_example"] = flops.total;
    nlohmann::json evs = nlohmann::json::array();
    for (const auto& [epoch, m] : evals)
      evs.push_back({{"epoch", epoch}, {"auc", m.auc}, {"logloss", m.logloss}, {"n", m.n}});
    j["evals"] = evs;
    return j.dump(2);
  }
};

/// Minibatch Adam on the negative log-likelihood. Deterministic for a fixed
/// config+seed: parameter init, epoch shuffles and per-example Gumbel draws
/// all derive from model.seed.
inline RunReport train(const TrainConfig& tc, const std::vector<TrainRecord>& train_data,
                       const std::vector<TrainRecord>& eval_data,
                       ModelParams* out_params = nullptr) {
  tc.validate();
  require(!train_data.empty(), "train: no training records");
  auto t_start = std::chrono::steady_clock::now();

  const ModelConfig& cfg = tc.model;
  std::vector<TrainRecord> data = prepare_records(cfg, train_data);
  std::vector<TrainRecord> eval = prepare_records(cfg, eval_data);

  ModelParams params = init_params(cfg);
  AdamState adam = AdamState::init(params);

  RunReport report;
  report.param_total = params.total_elements();
  report.flops = flop_estimate(cfg);

  // Data order is fixed and Gumbel draws are a function of (seed, step within
  // the epoch, slot), so an lr=0 run revisits identical losses every epoch.
  auto noise_seed = [&](std::int64_t step_in_epoch, std::int64_t slot) {
    return splitmix64(splitmix64(cfg.seed ^ 0xd6e8feb86659fd93ULL) +
                      static_cast<std::uint64_t>(step_in_epoch) * 0x100000001b3ULL +
                      static_cast<std::uint64_t>(slot));
  };

  std::int64_t step = 0;
  bool stop = false;
  for (std::int64_t epoch = 1; epoch <= tc.epochs && !stop; ++epoch) {
    double epoch_loss = 0.0;
    std::int64_t epoch_steps = 0;
    std::int64_t step_in_epoch = 0;
    for (std::size_t start = 0; start < data.size() && !stop; start += tc.batch_size) {
      std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(tc.batch_size));
      Tape tape;
      std::vector<TrainRecord> chunk(data.begin() + static_cast<std::ptrdiff_t>(start),
                                     data.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<GumbelNoise> noises;
      std::vector<int> labels;
      for (std::size_t b = start; b < end; ++b) {
        noises.push_back(GumbelNoise::draw(
            cfg.L, noise_seed(step_in_epoch, static_cast<std::int64_t>(b - start))));
        labels.push_back(data[b].label);
      }
      Tensor yhat = batch_forward(tape, params, cfg, chunk, &noises);
      Tensor loss = nll_loss(tape, yhat, labels);
      double loss_value = loss.item();
      if (!std::isfinite(loss_value))
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(step + 1) +
                                 " (parameter L2 norm " + std::to_string(params.l2_norm()) +
                                 ")");
      params.zero_grad();
      tape.backward(loss);
      adam_step(params, adam, tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
      report.step_losses.push_back(loss_value);
      epoch_loss += loss_value;
      ++epoch_steps;
      ++step;
      ++step_in_epoch;
      if (tc.max_steps >= 0 && step >= tc.max_steps) stop = true;
    }
    if (epoch_steps > 0)
      report.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_steps));
    if (tc.eval_every > 0 && epoch % tc.eval_every == 0 && !eval.empty())
      report.evals.emplace_back(epoch, evaluate_model(params, cfg, eval));
  }
  if (!eval.empty() &&
      (report.evals.empty() || report.evals.back().first != tc.epochs))
    report.evals.emplace_back(tc.epochs, evaluate_model(params, cfg, eval));

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  if (out_params) *out_params = std::move(params);
  return report;
}

// ---------------------------------------------------------------------------
// Full-model gradient check
// ---------------------------------------------------------------------------

struct FullGradCheckSpec {
  ModelConfig model;
  std::int64_t batch = 2;
  std::int64_t coords = 200;
  double step = 1e-5;
  std::uint64_t seed = 7;
};

/// Builds a small synthetic batch, freezes one Gumbel draw per example, and
/// sweeps sampled coordinates of the full-model loss with central
/// differences.
inline GradCheckResult gradcheck_full(const FullGradCheckSpec& spec) {
  const ModelConfig& cfg = spec.model;
  cfg.validate();
  SynthSpec synth;
  synth.num_users = cfg.user_vocab - 1;
  synth.num_items = cfg.item_vocab - 1;
  synth.situ_vocab = cfg.situ_vocab;
  synth.L = cfg.L;
  synth.len_min = std::max<std::int64_t>(1, cfg.L / 2);
  synth.len_max = cfg.L;
  synth.seed = spec.seed;
  SynthGenerator gen(synth);
  std::vector<TrainRecord> batch = gen.take(spec.batch);

  std::vector<GumbelNoise> noises;
  Rng noise_rng(splitmix64(spec.seed ^ 0x51ed2701cbafd3a7ULL));
  for (std::int64_t i = 0; i < spec.batch; ++i)
    noises.push_back(GumbelNoise::draw(cfg.L, noise_rng.next_u64()));

  ModelParams params = init_params(cfg);
  std::vector<int> labels;
  for (const auto& rec : batch) labels.push_back(rec.label);

  auto build_loss = [&](Tape& tape) {
    std::vector<Tensor> yhats;
    for (std::size_t i = 0; i < batch.size(); ++i)
      yhats.push_back(model_forward(tape, params, cfg, batch[i], &noises[i]));
    Tensor yhat = yhats.size() == 1 ? yhats[0] : concat(tape, yhats, 0);
    return nll_loss(tape, yhat, labels);
  };

  GradCheckOptions opt;
  opt.step = spec.step;
  opt.max_coords = spec.coords;
  opt.seed = spec.seed;
  return grad_check(params, build_loss, opt);
}

}  // namespace dsain
