// ms3m: command-line front end for the forecasting pipeline.
//
// Precedence: built-in defaults < --config file < individual flags.

#include "ms3m/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

namespace {

std::string find_config_path(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return {};
}

void add_model_flags(CLI::App& app, ms3m::RunConfig& c) {
  auto& m = c.model;
  app.add_option("--n-features", m.n_features, "covariates per row (F)");
  app.add_option("--window", m.window, "window length (L)");
  app.add_option("--output-dim", m.output_dim, "targets per window (O)");
  app.add_option("--width", m.width, "embedding width (d)");
  app.add_option("--n-state", m.n_state, "state size (N)");
  app.add_option("--n-components", m.n_components, "time-scale components (M)");
  app.add_option("--n-layers", m.n_layers, "stacked layers");
  app.add_option("--kernel-len", m.kernel_len, "kernel support (L_k)");
  app.add_option("--se-reduction", m.se_reduction, "SE reduction ratio (r)");
  app.add_option("--glu-ratio", m.glu_ratio, "GLU expansion ratio (alpha)");
  app.add_option("--dropout", m.dropout, "dropout rate");
  app.add_option("--ln-epsilon", m.ln_epsilon, "LayerNorm epsilon");
  app.add_option_function<std::string>(
      "--squeeze", [&m](const std::string& s) { m.squeeze = ms3m::squeeze_from_string(s); },
      "SE squeeze: causal|global");
}

void add_train_flags(CLI::App& app, ms3m::RunConfig& c) {
  auto& t = c.train;
  app.add_option("--lr0", t.lr0, "initial step size");
  app.add_option("--weight-decay", t.weight_decay, "decay coefficient (lambda)");
  app.add_option("--clip-norm", t.clip_norm, "global gradient-norm cap");
  app.add_option("--batch-size", t.batch_size, "mini-batch size");
  app.add_option("--max-epochs", t.max_epochs, "epoch cap");
  app.add_option("--patience", t.patience, "early-stopping patience");
  app.add_option("--tol", t.tol, "improvement tolerance");
  app.add_option("--plateau-factor", t.plateau_factor, "step-size decay factor");
  app.add_option("--plateau-window", t.plateau_window, "0: ceil(patience/2); <0: off");
  app.add_option_function<std::string>(
      "--optimizer", [&t](const std::string& s) { t.optimizer = ms3m::optimizer_from_string(s); },
      "adamw|sgdwd");
}

void add_data_flags(CLI::App& app, ms3m::RunConfig& c) {
  auto& d = c.data;
  app.add_option("--agg-window", d.agg_window, "aggregation window (s)");
  app.add_option("--stride", d.stride, "grid stride (s)");
  app.add_option("--target", d.target, "target column");
  app.add_option("--val-frac", d.val_frac, "validation fraction");
  app.add_option("--test-frac", d.test_frac, "test fraction");
  app.add_option("--iqr-low", d.iqr_low, "lower pruning quantile");
  app.add_option("--iqr-high", d.iqr_high, "upper pruning quantile");
  app.add_option("--iqr-k", d.iqr_k, "pruning multiplier");
  app.add_option("--synth-steps", d.synth_steps, "rows from the synthetic source");
}

void add_common(CLI::App& app, ms3m::RunConfig& c, std::string& config_path) {
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", c.seed, "run seed");
  app.add_option("--report-dir", c.paths.report_dir, "directory for reports");
}

int run(int argc, char** argv) {
  ms3m::RunConfig cfg;
  const std::string config_path = find_config_path(argc, argv);
  if (!config_path.empty()) cfg = ms3m::load_run_config(config_path);
  std::string config_flag;

  CLI::App app{"Multi-scale state-space KPI forecaster"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "write the synthetic KPI series as CSV");
  add_common(*synth, cfg, config_flag);
  add_data_flags(*synth, cfg);
  synth->add_option("--output", cfg.paths.output, "CSV destination");

  auto* prepare = app.add_subcommand("prepare", "raw KPI table -> window-dataset file");
  add_common(*prepare, cfg, config_flag);
  add_data_flags(*prepare, cfg);
  add_model_flags(*prepare, cfg);
  prepare->add_option("--input", cfg.paths.input, "raw KPI CSV, or 'synth'");
  prepare->add_option("--dataset", cfg.paths.dataset, "dataset file to write");

  auto* train = app.add_subcommand("train", "fit a model on a dataset file");
  add_common(*train, cfg, config_flag);
  add_model_flags(*train, cfg);
  add_train_flags(*train, cfg);
  train->add_option("--dataset", cfg.paths.dataset, "dataset file");
  train->add_option("--model", cfg.paths.model, "model file to write");

  auto* predict = app.add_subcommand("predict", "physical-unit next-step prediction");
  add_common(*predict, cfg, config_flag);
  predict->add_option("--model", cfg.paths.model, "model file");
  predict->add_option("--window-input", cfg.paths.window_input, "CSV window (L rows)");
  predict->add_option("--dataset", cfg.paths.dataset, "dataset file (test tail)");

  auto* evaluate = app.add_subcommand("evaluate", "test-tail metrics and skill");
  add_common(*evaluate, cfg, config_flag);
  evaluate->add_option("--model", cfg.paths.model, "model file");
  evaluate->add_option("--dataset", cfg.paths.dataset, "dataset file");
  evaluate->add_flag("--bootstrap", cfg.eval.bootstrap, "percentile bootstrap intervals");
  evaluate->add_option("--bootstrap-resamples", cfg.eval.bootstrap_resamples, "resamples");
  evaluate->add_option("--bootstrap-level", cfg.eval.bootstrap_level, "interval level");
  evaluate->add_flag("--permutation", cfg.eval.permutation, "permutation importance");

  auto* bench = app.add_subcommand("bench", "inference latency over a window grid");
  add_common(*bench, cfg, config_flag);
  add_model_flags(*bench, cfg);
  bench->add_option("--windows", cfg.bench.windows, "window lengths")->delimiter(',');
  bench->add_option("--repetitions", cfg.bench.repetitions, "timed samples per config");
  bench->add_option("--warmup", cfg.bench.warmup, "untimed warm-up passes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  ms3m::json report;
  if (*synth) report = ms3m::cmd_synth(cfg);
  if (*prepare) report = ms3m::cmd_prepare(cfg);
  if (*train) report = ms3m::cmd_train(cfg);
  if (*predict) report = ms3m::cmd_predict(cfg);
  if (*evaluate) report = ms3m::cmd_evaluate(cfg);
  if (*bench) report = ms3m::cmd_bench(cfg);
  report.erase("config");
  std::cout << report.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ms3m::ShapeError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ms3m::DataError& e) {
    std::cerr << "data error [" << e.stage() << "]: " << e.what() << "\n";
    return 2;
  } catch (const ms3m::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
