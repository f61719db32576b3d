#pragma once

// Subcommand implementations behind the ms3m tool: synth, prepare, train,
// predict, evaluate, bench. Each takes a resolved RunConfig, writes its
// artifacts and returns the JSON report it wrote.

#include "ms3m/data.hpp"
#include "ms3m/eval.hpp"
#include "ms3m/io.hpp"
#include "ms3m/model.hpp"
#include "ms3m/train.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace ms3m {

struct DataParams {
  double agg_window = 0.02;  // seconds
  double stride = 0.02;      // seconds
  std::string target = "RSRP";
  double val_frac = 0.15;
  double test_frac = 0.15;
  double iqr_low = 0.10;
  double iqr_high = 0.90;
  double iqr_k = 1.5;
  int synth_steps = 20000;
};

struct PathParams {
  std::string input;    // raw KPI CSV, or "synth"
  std::string dataset;  // window-dataset file
  std::string model;    // model file
  std::string report_dir;
  std::string window_input;  // predict: one L x F window as CSV
  std::string output;        // synth: CSV destination
};

struct EvalParams {
  bool bootstrap = false;
  int bootstrap_resamples = 2000;
  double bootstrap_level = 0.95;
  bool permutation = false;
};

struct BenchParams {
  std::vector<int> windows = {64, 128, 256, 512};
  int repetitions = 100;
  int warmup = 10;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataParams data;
  PathParams paths;
  EvalParams eval;
  BenchParams bench;
  std::uint64_t seed = 0;
};

inline json to_json(const RunConfig& c) {
  json train = to_json(c.train);
  train["seed"] = c.seed;
  return {{"model", to_json(c.model)},
          {"train", train},
          {"data",
           {{"agg_window", c.data.agg_window},
            {"stride", c.data.stride},
            {"target", c.data.target},
            {"val_frac", c.data.val_frac},
            {"test_frac", c.data.test_frac},
            {"iqr_low", c.data.iqr_low},
            {"iqr_high", c.data.iqr_high},
            {"iqr_k", c.data.iqr_k},
            {"synth_steps", c.data.synth_steps}}},
          {"paths",
           {{"input", c.paths.input},
            {"dataset", c.paths.dataset},
            {"model", c.paths.model},
            {"report_dir", c.paths.report_dir},
            {"window_input", c.paths.window_input},
            {"output", c.paths.output}}},
          {"eval",
           {{"bootstrap", c.eval.bootstrap},
            {"bootstrap_resamples", c.eval.bootstrap_resamples},
            {"bootstrap_level", c.eval.bootstrap_level},
            {"permutation", c.eval.permutation}}},
          {"bench",
           {{"windows", c.bench.windows},
            {"repetitions", c.bench.repetitions},
            {"warmup", c.bench.warmup}}},
          {"seed", c.seed}};
}

/// Overlays a (possibly partial) JSON config onto `c`.
inline void apply_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ShapeError("config: top level must be an object");
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  detail::take(j, "seed", c.seed);
  if (j.contains("data")) {
    const json& d = j.at("data");
    detail::take(d, "agg_window", c.data.agg_window);
    detail::take(d, "stride", c.data.stride);
    detail::take(d, "target", c.data.target);
    detail::take(d, "val_frac", c.data.val_frac);
    detail::take(d, "test_frac", c.data.test_frac);
    detail::take(d, "iqr_low", c.data.iqr_low);
    detail::take(d, "iqr_high", c.data.iqr_high);
    detail::take(d, "iqr_k", c.data.iqr_k);
    detail::take(d, "synth_steps", c.data.synth_steps);
  }
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    detail::take(p, "input", c.paths.input);
    detail::take(p, "dataset", c.paths.dataset);
    detail::take(p, "model", c.paths.model);
    detail::take(p, "report_dir", c.paths.report_dir);
    detail::take(p, "window_input", c.paths.window_input);
    detail::take(p, "output", c.paths.output);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    detail::take(e, "bootstrap", c.eval.bootstrap);
    detail::take(e, "bootstrap_resamples", c.eval.bootstrap_resamples);
    detail::take(e, "bootstrap_level", c.eval.bootstrap_level);
    detail::take(e, "permutation", c.eval.permutation);
  }
  if (j.contains("bench")) {
    const json& b = j.at("bench");
    detail::take(b, "windows", c.bench.windows);
    detail::take(b, "repetitions", c.bench.repetitions);
    detail::take(b, "warmup", c.bench.warmup);
  }
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig c;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ShapeError("config file '" + path + "': " + e.what());
  }
  apply_json(j, c);
  return c;
}

// ---------------------------------------------------------------- reports

/// Adds schema version, command name, config echo and a SHA-256 over the
/// serialized report without the digest field.
inline json finalize_report(json body, const std::string& command, const RunConfig& cfg) {
  body["schema_version"] = kReportSchemaVersion;
  body["format_version"] = kFormatVersion;
  body["command"] = command;
  body["config"] = to_json(cfg);
  body.erase("content_digest");
  const std::string text = body.dump();
  body["content_digest"] = hex(sha256(text.data(), text.size()));
  return body;
}

inline bool verify_report(const json& report) {
  if (!report.contains("content_digest")) return false;
  json body = report;
  const std::string want = body.at("content_digest").get<std::string>();
  body.erase("content_digest");
  const std::string text = body.dump();
  return hex(sha256(text.data(), text.size())) == want;
}

namespace detail {

inline std::string report_path(const RunConfig& cfg, const std::string& file) {
  if (cfg.paths.report_dir.empty()) return {};
  return (std::filesystem::path(cfg.paths.report_dir) / file).string();
}

inline void write_report(const RunConfig& cfg, const std::string& file, const json& report) {
  const std::string path = report_path(cfg, file);
  if (!path.empty()) write_file(path, report.dump(2) + "\n");
}

inline void require_readable(const std::string& path, const char* what) {
  if (path.empty()) throw ShapeError(std::string("missing required path: ") + what);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("io", std::string(what) + " '" + path + "' is not readable");
}

inline void require_writable_parent(const std::string& path, const char* what) {
  if (path.empty()) throw ShapeError(std::string("missing required path: ") + what);
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty() && !std::filesystem::is_directory(parent))
    throw DataError("io", std::string(what) + ": directory '" + parent.string() +
                              "' does not exist");
}

inline void require_report_dir(const RunConfig& cfg) {
  if (!cfg.paths.report_dir.empty() && !std::filesystem::is_directory(cfg.paths.report_dir))
    throw DataError("io", "report_dir '" + cfg.paths.report_dir + "' does not exist");
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline json metrics_json(const MetricsReport& r) {
  json j = {{"rmse", r.rmse}, {"mae", r.mae}, {"mse", r.mse}, {"n", r.n}};
  j["r2"] = r.r2 ? json(*r.r2) : json(nullptr);
  if (r.skill_rmse) j["skill_rmse"] = *r.skill_rmse;
  if (r.skill_mae) j["skill_mae"] = *r.skill_mae;
  auto ci = [&](const char* key, const std::optional<Interval>& v) {
    if (v)
      j[key] = {{"low", v->low}, {"high", v->high}, {"level", v->level},
                {"resamples", v->resamples}};
  };
  ci("rmse_ci", r.rmse_ci);
  ci("mae_ci", r.mae_ci);
  ci("r2_ci", r.r2_ci);
  return j;
}

inline void check_model_matches(const ModelArtifact& m, const WindowDataset& ds) {
  const auto& c = m.config;
  if (ds.windows.empty()) throw DataError("dataset", "no windows");
  const auto& w = ds.windows[0];
  if (w.x.cols() != c.n_features || w.x.rows() != c.window || w.y.size() != c.output_dim)
    throw DataError("model", "dataset windows are " + std::to_string(w.x.rows()) + "x" +
                                 std::to_string(w.x.cols()) + " -> " + std::to_string(w.y.size()) +
                                 ", model expects " + std::to_string(c.window) + "x" +
                                 std::to_string(c.n_features) + " -> " +
                                 std::to_string(c.output_dim));
  if (m.columns != ds.columns || m.target_columns != ds.target_columns)
    throw DataError("model", "dataset columns differ from the model's training columns");
}

/// Per-sample table shared by predict and evaluate.
inline void write_predictions_csv(const std::string& path, const WindowDataset& ds,
                                  std::span<const Window> windows, const TailPredictions& tp) {
  std::ostringstream os;
  os << "index,origin,timestamp,target,y,y_hat,persistence,error\n";
  const std::size_t o = ds.target_columns.size();
  for (std::size_t i = 0; i < tp.y.size(); ++i) {
    const Window& w = windows[i / o];
    const int col = ds.target_columns[i % o];
    os << i << ',' << w.origin << ',' << fmt(ds.t0 + double(w.origin + 1) * ds.stride) << ','
       << ds.columns[std::size_t(col)] << ',' << fmt(tp.y[i]) << ',' << fmt(tp.y_hat[i]) << ','
       << fmt(tp.persistence[i]) << ',' << fmt(tp.y_hat[i] - tp.y[i]) << '\n';
  }
  write_file(path, os.str());
}

}  // namespace detail

// ---------------------------------------------------------------- commands

/// Writes the synthetic series as KPI CSV (empty cell = missing sample).
inline json cmd_synth(const RunConfig& cfg) {
  detail::require_writable_parent(cfg.paths.output, "output");
  detail::require_report_dir(cfg);
  SyntheticOptions so;
  so.steps = cfg.data.synth_steps;
  so.stride = cfg.data.stride;
  so.seed = cfg.seed;
  const auto series = generate_synthetic(so);
  std::ostringstream os;
  os << "time";
  for (const auto& s : series) os << ',' << s.name;
  os << '\n';
  std::vector<std::size_t> pos(series.size(), 0);
  for (int i = 0; i < so.steps; ++i) {
    const double t = double(i) * so.stride;
    os << detail::fmt(t);
    for (std::size_t k = 0; k < series.size(); ++k) {
      os << ',';
      if (pos[k] < series[k].t.size() && series[k].t[pos[k]] == t)
        os << detail::fmt(series[k].x[pos[k]++]);
    }
    os << '\n';
  }
  write_file(cfg.paths.output, os.str());
  json rep = finalize_report({{"rows", so.steps}, {"columns", kpi_columns()}}, "synth", cfg);
  detail::write_report(cfg, "synth.json", rep);
  return rep;
}

inline std::vector<RawSeries> load_raw(const RunConfig& cfg) {
  if (cfg.paths.input == "synth") {
    SyntheticOptions so;
    so.steps = cfg.data.synth_steps;
    so.stride = cfg.data.stride;
    so.seed = cfg.seed;
    return generate_synthetic(so);
  }
  std::ifstream in(cfg.paths.input);
  if (!in) throw DataError("io", "cannot open input '" + cfg.paths.input + "'");
  return read_kpi_csv(in);
}

/// The full ingestion chain up to (and including) standardization.
inline WindowDataset build_dataset(const std::vector<RawSeries>& raw, const RunConfig& cfg) {
  const KpiTable grid = aggregate_to_grid(raw, cfg.data.agg_window, cfg.data.stride);
  const KpiTable resolved = resolve_missing(grid);
  if (resolved.rows() == 0) throw DataError("resolve_missing", "no complete rows remain");
  const KpiTable pruned = iqr_prune(resolved, cfg.data.iqr_low, cfg.data.iqr_high, cfg.data.iqr_k);
  WindowDataset ds = make_windows(pruned, cfg.model.window, cfg.data.target, cfg.model.output_dim);
  chrono_split(ds, cfg.data.val_frac, cfg.data.test_frac);
  fit_and_standardize(ds);
  return ds;
}

inline json cmd_prepare(const RunConfig& cfg) {
  if (cfg.paths.input != "synth") detail::require_readable(cfg.paths.input, "input");
  detail::require_writable_parent(cfg.paths.dataset, "dataset");
  detail::require_report_dir(cfg);
  const WindowDataset ds = build_dataset(load_raw(cfg), cfg);
  save_dataset(cfg.paths.dataset, ds, to_json(cfg));
  json rep = finalize_report({{"dataset", cfg.paths.dataset},
                              {"windows", ds.windows.size()},
                              {"n_train", ds.n_train},
                              {"n_val", ds.n_val},
                              {"n_test", ds.n_test},
                              {"columns", ds.columns},
                              {"target_columns", ds.target_columns},
                              {"scaler_floored", ds.scaler.floored}},
                             "prepare", cfg);
  detail::write_report(cfg, "prepare.json", rep);
  return rep;
}

inline json cmd_train(const RunConfig& cfg) {
  detail::require_readable(cfg.paths.dataset, "dataset");
  detail::require_writable_parent(cfg.paths.model, "model");
  detail::require_report_dir(cfg);
  const DatasetArtifact da = load_dataset(cfg.paths.dataset);
  const WindowDataset& ds = da.dataset;
  if (!ds.standardized || !ds.split) throw DataError("train", "dataset is not split and standardized");
  const auto& w = ds.windows.front();
  if (w.x.cols() != cfg.model.n_features || w.x.rows() != cfg.model.window ||
      w.y.size() != cfg.model.output_dim)
    throw DataError("train", "dataset windows are " + shape_str(w.x) + " -> " +
                                 std::to_string(w.y.size()) + ", config says " +
                                 std::to_string(cfg.model.window) + "x" +
                                 std::to_string(cfg.model.n_features) + " -> " +
                                 std::to_string(cfg.model.output_dim));
  TrainConfig tcfg = cfg.train;
  tcfg.seed = cfg.seed;
  const auto train = to_samples(ds.part(Split::train));
  const auto val = to_samples(ds.part(Split::val));
  std::ostringstream log;
  const FitResult fr = fit(train, val, cfg.model, tcfg, &log);
  const std::string log_path = detail::report_path(cfg, "train_log.jsonl");
  if (!log_path.empty()) write_file(log_path, log.str());

  ModelArtifact art;
  art.config = cfg.model;
  art.params = fr.params;
  art.scaler = ds.scaler;
  art.columns = ds.columns;
  art.target_columns = ds.target_columns;
  art.best_epoch = fr.report.best_epoch;
  art.best_val_loss = fr.report.best_val_loss;
  art.config_echo = to_json(cfg);
  save_model(cfg.paths.model, art);

  json epochs = json::array();
  for (const auto& e : fr.report.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                      {"lr", e.lr}, {"patience_counter", e.patience_counter},
                      {"improved", e.improved}});
  json rep = finalize_report({{"model", cfg.paths.model},
                              {"params", count_params(cfg.model)},
                              {"best_epoch", fr.report.best_epoch},
                              {"stop_epoch", fr.report.stop_epoch},
                              {"best_val_loss", fr.report.best_val_loss},
                              {"epochs", epochs}},
                             "train", cfg);
  detail::write_report(cfg, "train.json", rep);
  return rep;
}

/// Single window from `window_input`, or the test tail of `dataset` when no
/// window is given (per-sample CSV in the report directory).
inline json cmd_predict(const RunConfig& cfg) {
  detail::require_readable(cfg.paths.model, "model");
  detail::require_report_dir(cfg);
  const ModelArtifact art = load_model(cfg.paths.model);
  const Forecaster model(art.config, art.params);
  if (!cfg.paths.window_input.empty()) {
    detail::require_readable(cfg.paths.window_input, "window_input");
    std::ifstream in(cfg.paths.window_input);
    const Mat x = read_window_csv(in, art.columns);
    if (x.rows() != art.config.window)
      throw ShapeError("predict: window has " + std::to_string(x.rows()) + " rows, model expects " +
                       std::to_string(art.config.window));
    const Vec y = destandardize_target(model.predict(standardize_x(x, art.scaler)), art.scaler);
    json preds = json::array();
    for (Eigen::Index k = 0; k < y.size(); ++k) {
      const std::string& col = art.columns[std::size_t(art.target_columns[std::size_t(k)])];
      preds.push_back({{"column", col}, {"value", y(k)}, {"unit", kpi_unit(col)}});
    }
    json rep = finalize_report({{"predictions", preds}}, "predict", cfg);
    detail::write_report(cfg, "predict.json", rep);
    return rep;
  }
  detail::require_readable(cfg.paths.dataset, "dataset");
  const DatasetArtifact da = load_dataset(cfg.paths.dataset);
  detail::check_model_matches(art, da.dataset);
  const auto test = da.dataset.part(Split::test);
  if (test.empty()) throw DataError("predict", "empty test split");
  const TailPredictions tp = predict_tail(model, test, art.scaler, art.target_columns);
  const std::string csv = detail::report_path(cfg, "predictions.csv");
  if (!csv.empty()) detail::write_predictions_csv(csv, da.dataset, test, tp);
  json rep = finalize_report({{"n", tp.y.size()}, {"y_hat", tp.y_hat}}, "predict", cfg);
  detail::write_report(cfg, "predict.json", rep);
  return rep;
}

inline json cmd_evaluate(const RunConfig& cfg) {
  detail::require_readable(cfg.paths.model, "model");
  detail::require_readable(cfg.paths.dataset, "dataset");
  detail::require_report_dir(cfg);
  const ModelArtifact art = load_model(cfg.paths.model);
  const DatasetArtifact da = load_dataset(cfg.paths.dataset);
  detail::check_model_matches(art, da.dataset);
  const auto test = da.dataset.part(Split::test);
  if (test.empty()) throw DataError("evaluate", "empty test split");
  const Forecaster model(art.config, art.params);
  const TailPredictions tp = predict_tail(model, test, art.scaler, art.target_columns);
  MetricsReport m = evaluate_tail(tp);
  const MetricsReport persistence = metrics(tp.persistence, tp.y);
  if (cfg.eval.bootstrap) {
    const int b = cfg.eval.bootstrap_resamples;
    const double lvl = cfg.eval.bootstrap_level;
    m.rmse_ci = bootstrap_ci(tp.y_hat, tp.y, Statistic::rmse, lvl, b, cfg.seed);
    m.mae_ci = bootstrap_ci(tp.y_hat, tp.y, Statistic::mae, lvl, b, cfg.seed);
    if (m.r2) m.r2_ci = bootstrap_ci(tp.y_hat, tp.y, Statistic::r2, lvl, b, cfg.seed);
  }
  json body = {{"metrics", detail::metrics_json(m)},
               {"persistence", detail::metrics_json(persistence)},
               {"target_columns", art.target_columns},
               {"unit", kpi_unit(art.columns[std::size_t(art.target_columns[0])])}};
  if (cfg.eval.permutation) {
    json imp = json::object();
    for (int f = 0; f < art.config.n_features; ++f)
      imp[art.columns[std::size_t(f)]] =
          permutation_importance(model, test, art.scaler, f, cfg.seed + std::uint64_t(f));
    body["permutation_importance"] = imp;
  }
  const std::string csv = detail::report_path(cfg, "predictions.csv");
  if (!csv.empty()) detail::write_predictions_csv(csv, da.dataset, test, tp);
  json rep = finalize_report(body, "evaluate", cfg);
  detail::write_report(cfg, "evaluate.json", rep);
  return rep;
}

/// Latency over the configured L grid at the model config's d, N, M, L_l.
inline json cmd_bench(const RunConfig& cfg) {
  detail::require_report_dir(cfg);
  Eigen::setNbThreads(1);
  std::vector<LatencyConfig> grid;
  for (int l : cfg.bench.windows)
    grid.push_back({l, cfg.model.width, cfg.model.n_state, cfg.model.n_components,
                    cfg.model.n_layers});
  LatencyOptions opt;
  opt.n_features = cfg.model.n_features;
  opt.kernel_len = cfg.model.kernel_len;
  opt.repetitions = cfg.bench.repetitions;
  opt.warmup = cfg.bench.warmup;
  opt.seed = cfg.seed;
  const auto reports = latency_bench(grid, opt);
  const auto ratios = doubling_ratios(reports);

  std::ostringstream lat, rat;
  lat << "window,width,n_state,n_components,n_layers,kernel_len,median_s,p95_s,calls_per_sample\n";
  json jl = json::array(), jr = json::array();
  for (const auto& r : reports) {
    lat << r.config.window << ',' << r.config.width << ',' << r.config.n_state << ','
        << r.config.n_components << ',' << r.config.n_layers << ',' << r.kernel_len << ','
        << detail::fmt(r.median) << ',' << detail::fmt(r.p95) << ',' << r.calls_per_sample << '\n';
    jl.push_back({{"window", r.config.window}, {"median_s", r.median}, {"p95_s", r.p95},
                  {"kernel_len", r.kernel_len}, {"calls_per_sample", r.calls_per_sample}});
  }
  rat << "window,doubled_window,ratio\n";
  for (const auto& d : ratios) {
    rat << d.window << ',' << 2 * d.window << ',' << detail::fmt(d.ratio) << '\n';
    jr.push_back({{"window", d.window}, {"ratio", d.ratio}});
  }
  if (!cfg.paths.report_dir.empty()) {
    write_file(detail::report_path(cfg, "latency.csv"), lat.str());
    write_file(detail::report_path(cfg, "doubling_ratios.csv"), rat.str());
  }
  json rep = finalize_report({{"latency", jl}, {"doubling_ratios", jr}}, "bench", cfg);
  detail::write_report(cfg, "bench.json", rep);
  return rep;
}

}  // namespace ms3m
