#pragma once

#include <CLI11.hpp>
#include <iostream>

#include "dsain/trainer.hpp"

namespace dsain {

namespace detail {

inline void apply_kv_or_fail(TrainConfig& cfg, SynthSpec& synth, const std::string& setting) {
  auto eq = setting.find('=');
  require(eq != std::string::npos, "--set expects key=value, got: " + setting);
  std::string key = trim(setting.substr(0, eq));
  std::string value = trim(setting.substr(eq + 1));
  if (apply_config_kv(cfg, key, value)) return;
  if (apply_synth_kv(synth, key, value)) return;
  fail("unknown config key: " + key);
}

inline SynthSpec synth_matching_model(const ModelConfig& m, const SynthSpec& base) {
  SynthSpec spec = base;
  spec.L = m.L;
  spec.situ_vocab = m.situ_vocab;
  spec.num_items = m.item_vocab - 1;
  spec.num_users = m.user_vocab - 1;
  spec.len_max = std::min(spec.len_max, spec.L);
  spec.len_min = std::min(spec.len_min, spec.len_max);
  spec.clusters = std::min(spec.clusters, spec.num_items);
  return spec;
}

inline void check_params_match(const ModelParams& loaded, const ModelConfig& cfg) {
  ModelParams expected = init_params(cfg);
  require(loaded.entries().size() == expected.entries().size(),
          "checkpoint does not match the configured architecture (parameter count)");
  for (std::size_t i = 0; i < loaded.entries().size(); ++i) {
    const auto& [lname, lt] = loaded.entries()[i];
    const auto& [ename, et] = expected.entries()[i];
    require(lname == ename && lt.shape() == et.shape(),
            "checkpoint mismatch at " + lname + ": expected " + ename + " " +
                shape_str(et.shape()) + ", got " + shape_str(lt.shape()));
  }
}

}  // namespace detail

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"DSAIN: situation-aware CTR model over user behavior sequences"};
  app.require_subcommand(1);

  TrainConfig cfg;
  SynthSpec synth;
  std::string config_path, data_path, eval_data_path, out_path, checkpoint_path, variant;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false, use_synth = false, strict_ingest = false;
  std::int64_t count = 10000, steps = -1, eval_every = 0, coords = 200, gc_batch = 2;
  double fd_step = 1e-5;
  std::vector<std::string> variants;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "flat key=value config file");
    cmd->add_option("--set", sets, "override a config key, e.g. --set model.L=30")
        ->take_all();
    cmd->add_option_function<std::uint64_t>(
           "--seed", [&](std::uint64_t v) { seed = v; seed_given = true; },
           "seed override");
  };

  CLI::App* synth_cmd = app.add_subcommand("synth", "write planted-signal records as JSONL");
  add_common(synth_cmd);
  synth_cmd->add_option("--out", out_path, "output JSONL path")->required();
  synth_cmd->add_option("--count", count, "number of records");

  CLI::App* train_cmd = app.add_subcommand("train", "train on JSONL or generated records");
  add_common(train_cmd);
  train_cmd->add_option("--data", data_path, "training records (JSONL)");
  train_cmd->add_flag("--synth", use_synth, "generate training records instead of reading");
  train_cmd->add_option("--count", count, "generated record count (with --synth)");
  train_cmd->add_option("--eval-data", eval_data_path, "held-out records (JSONL)");
  train_cmd->add_option("--out", out_path, "write the run report JSON here");
  train_cmd->add_option("--checkpoint", checkpoint_path, "write final parameters here");
  train_cmd->add_option("--variant", variant, "ablation variant id");
  train_cmd->add_option("--steps", steps, "stop after this many optimizer steps");
  train_cmd->add_option("--eval-every", eval_every, "evaluate every N epochs");
  train_cmd->add_flag("--strict-ingest", strict_ingest, "abort on malformed lines");

  CLI::App* eval_cmd = app.add_subcommand("eval", "score records with a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "trained parameters")->required();
  eval_cmd->add_option("--data", data_path, "records to score (JSONL)")->required();
  eval_cmd->add_option("--out", out_path, "also write the metrics JSON here");
  eval_cmd->add_option("--variant", variant, "ablation variant id");
  eval_cmd->add_flag("--strict-ingest", strict_ingest, "abort on malformed lines");

  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference sweep of the full model");
  add_common(gradcheck_cmd);
  gradcheck_cmd->add_option("--coords", coords, "sampled coordinates");
  gradcheck_cmd->add_option("--step", fd_step, "central-difference step");
  gradcheck_cmd->add_option("--batch", gc_batch, "records in the probe batch");
  gradcheck_cmd->add_option("--variant", variant, "ablation variant id");

  CLI::App* bench_cmd =
      app.add_subcommand("bench", "parameter count and per-example multiply-adds");
  add_common(bench_cmd);
  bench_cmd->add_option("--variant", variant, "ablation variant id");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "train the ablation variant grid");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--data", data_path, "training records (JSONL)");
  ablate_cmd->add_flag("--synth", use_synth, "generate records instead of reading");
  ablate_cmd->add_option("--count", count, "generated record count (with --synth)");
  ablate_cmd->add_option("--eval-data", eval_data_path, "held-out records (JSONL)");
  ablate_cmd->add_option("--steps", steps, "optimizer step cap per variant");
  ablate_cmd->add_option("--variants", variants, "variant ids (default: full grid)")
      ->delimiter(',');
  ablate_cmd->add_flag("--strict-ingest", strict_ingest, "abort on malformed lines");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (!config_path.empty())
      load_config_file(cfg, config_path, [&](const std::string& k, const std::string& v) {
        return apply_synth_kv(synth, k, v);
      });
    for (const auto& setting : sets) detail::apply_kv_or_fail(cfg, synth, setting);
    if (seed_given) {
      cfg.model.seed = seed;
      synth.seed = seed;
    }
    if (steps >= 0) cfg.max_steps = steps;
    if (eval_every > 0) cfg.eval_every = eval_every;
    if (!variant.empty()) apply_variant(cfg.model, variant);

    if (app.got_subcommand(synth_cmd)) {
      cfg.model.validate();
      synth = detail::synth_matching_model(cfg.model, synth);
      synth.validate();
      SynthGenerator gen(synth);
      write_jsonl(out_path, gen.take(count));
      std::cout << "wrote " << count << " records to " << out_path << "\n";
      return 0;
    }

    if (app.got_subcommand(bench_cmd)) {
      cfg.model.validate();
      ParamCount pc = param_count(cfg.model);
      std::cout << "parameters\n  " << pc.d1_identity << "\n";
      for (const auto& [name, c] : pc.per_module) std::cout << "  " << name << ": " << c << "\n";
      std::cout << "  total: " << pc.total << "\n";
      FlopEstimate fe = flop_estimate(cfg.model);
      std::cout << "forward multiply-adds per example\n" << fe.table();
      return 0;
    }

    if (app.got_subcommand(gradcheck_cmd)) {
      FullGradCheckSpec spec;
      spec.model = cfg.model;
      spec.batch = gc_batch;
      spec.coords = coords;
      spec.step = fd_step;
      spec.seed = seed_given ? seed : cfg.model.seed;
      GradCheckResult res = gradcheck_full(spec);
      std::cout << res.max_rel_err << "\n";
      return 0;
    }

    if (app.got_subcommand(train_cmd) || app.got_subcommand(ablate_cmd)) {
      cfg.model.validate();
      std::vector<TrainRecord> train_data;
      std::vector<TrainRecord> eval_data;
      DataSchema schema = schema_from(cfg.model);
      if (use_synth || data_path.empty()) {
        SynthSpec spec = detail::synth_matching_model(cfg.model, synth);
        spec.validate();
        SynthGenerator gen(spec);
        train_data = gen.take(count);
        if (eval_data_path.empty()) eval_data = gen.take(std::max<std::int64_t>(count / 5, 1));
      } else {
        IngestStats stats;
        train_data = read_jsonl(data_path, schema, strict_ingest, &stats);
        if (stats.skipped > 0)
          std::cerr << "skipped " << stats.skipped << " malformed lines\n";
      }
      if (!eval_data_path.empty())
        eval_data = read_jsonl(eval_data_path, schema, strict_ingest);
      if (train_data.empty()) {
        std::cerr << "no records to train on\n";
        return 1;
      }

      if (app.got_subcommand(train_cmd)) {
        ModelParams params;
        RunReport report = train(cfg, train_data, eval_data, &params);
        if (!checkpoint_path.empty()) params.save(checkpoint_path);
        std::cout << report.to_json() << "\n";
        if (!out_path.empty()) {
          std::ofstream os(out_path);
          os << report.to_json() << "\n";
        }
        return 0;
      }

      // ablate: run the variant grid
      std::vector<std::string> grid = variants.empty() ? variant_names() : variants;
      std::cout << "variant                 auc      logloss  steps\n";
      for (const auto& name : grid) {
        TrainConfig vc = cfg;
        apply_variant(vc.model, name);
        ModelParams params;
        RunReport report = train(vc, train_data, eval_data, &params);
        double auc_v = 0.0, ll_v = 0.0;
        if (!report.evals.empty()) {
          auc_v = report.evals.back().second.auc;
          ll_v = report.evals.back().second.logloss;
        }
        std::printf("%-22s  %.4f   %.4f   %zu\n", name.c_str(), auc_v, ll_v,
                    report.step_losses.size());
        std::fflush(stdout);
      }
      return 0;
    }

    if (app.got_subcommand(eval_cmd)) {
      cfg.model.validate();
      DataSchema schema = schema_from(cfg.model);
      IngestStats stats;
      std::vector<TrainRecord> records = read_jsonl(data_path, schema, strict_ingest, &stats);
      if (stats.skipped > 0) std::cerr << "skipped " << stats.skipped << " malformed lines\n";
      if (records.empty()) {
        std::cerr << "no records in " << data_path << "\n";
        return 1;
      }
      ModelParams params = ModelParams::load(checkpoint_path);
      detail::check_params_match(params, cfg.model);
      records = prepare_records(cfg.model, records);
      Metrics metrics = evaluate_model(params, cfg.model, records);
      std::cout << metrics.to_json() << "\n";
      if (!out_path.empty()) {
        std::ofstream os(out_path);
        os << metrics.to_json() << "\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace dsain
