#pragma once

// Test-tail metrics in physical units, persistence skill, percentile
// bootstrap intervals, permutation feature importance, latency benchmark and
// the synthetic two-timescale KPI generator.

#include "ms3m/common.hpp"
#include "ms3m/data.hpp"
#include "ms3m/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ms3m {

struct Interval {
  double low = 0.0;
  double high = 0.0;
  double level = 0.95;
  int resamples = 0;
};

struct MetricsReport {
  double rmse = 0.0;
  double mae = 0.0;
  double mse = 0.0;
  std::optional<double> r2;  // undefined for constant targets
  std::size_t n = 0;
  std::optional<double> skill_rmse;
  std::optional<double> skill_mae;
  std::optional<Interval> rmse_ci, mae_ci, r2_ci;
};

inline MetricsReport metrics(std::span<const double> y_hat, std::span<const double> y) {
  if (y.empty() || y_hat.size() != y.size())
    throw DataError("metrics", "predictions and targets must be nonempty and equal length");
  const double n = double(y.size());
  double se = 0.0, ae = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = y_hat[i] - y[i];
    se += e * e;
    ae += std::abs(e);
    mean += y[i];
  }
  mean /= n;
  double ss_tot = 0.0;
  for (double v : y) ss_tot += (v - mean) * (v - mean);
  MetricsReport r;
  r.n = y.size();
  r.mse = se / n;
  r.rmse = std::sqrt(r.mse);
  r.mae = ae / n;
  if (ss_tot > 0.0) r.r2 = 1.0 - se / ss_tot;
  return r;
}

/// y_hat[k] = series[indices[k] - 1].
inline std::vector<double> persistence_forecast(std::span<const double> series,
                                                std::span<const std::size_t> indices) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i == 0) throw DataError("persistence", "first timestamp has no predecessor");
    if (i >= series.size()) throw DataError("persistence", "index beyond series");
    out.push_back(series[i - 1]);
  }
  return out;
}

struct Skill {
  std::optional<double> rmse;  // absent when the persistence RMSE is zero
  std::optional<double> mae;
};

inline Skill skill(const MetricsReport& model, const MetricsReport& persistence) {
  Skill s;
  if (persistence.rmse > 0.0) s.rmse = 1.0 - model.rmse / persistence.rmse;
  if (persistence.mae > 0.0) s.mae = 1.0 - model.mae / persistence.mae;
  return s;
}

enum class Statistic { rmse, mae, r2 };

inline const char* to_string(Statistic s) {
  switch (s) {
    case Statistic::rmse: return "rmse";
    case Statistic::mae: return "mae";
    case Statistic::r2: return "r2";
  }
  return "";
}

/// Percentile bootstrap over resampled sample indices.
inline Interval bootstrap_ci(std::span<const double> y_hat, std::span<const double> y,
                             Statistic stat, double level = 0.95, int resamples = 2000,
                             std::uint64_t seed = 0) {
  if (y.size() < 2 || y_hat.size() != y.size())
    throw DataError("bootstrap", "need >= 2 paired samples");
  if (resamples < 1000) throw DataError("bootstrap", "need >= 1000 resamples");
  if (!(level > 0.0 && level < 1.0)) throw DataError("bootstrap", "level must be in (0,1)");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, y.size() - 1);
  std::vector<double> stats;
  stats.reserve(std::size_t(resamples));
  std::vector<double> rh(y.size()), ry(y.size());
  for (int b = 0; b < resamples; ++b) {
    for (std::size_t i = 0; i < y.size(); ++i) {
      const std::size_t k = pick(rng);
      rh[i] = y_hat[k];
      ry[i] = y[k];
    }
    const MetricsReport m = metrics(rh, ry);
    double v = 0.0;
    switch (stat) {
      case Statistic::rmse: v = m.rmse; break;
      case Statistic::mae: v = m.mae; break;
      case Statistic::r2:
        if (!m.r2) continue;  // degenerate resample
        v = *m.r2;
        break;
    }
    stats.push_back(v);
  }
  if (stats.empty()) throw DataError("bootstrap", "statistic undefined on every resample");
  std::sort(stats.begin(), stats.end());
  Interval ci;
  ci.level = level;
  ci.resamples = resamples;
  ci.low = quantile_type7(stats, 0.5 * (1.0 - level));
  ci.high = quantile_type7(stats, 1.0 - 0.5 * (1.0 - level));
  return ci;
}

// ---------------------------------------------------------------- test tail

/// Physical-unit predictions, targets and persistence forecasts over a set
/// of standardized windows, flattened over the output dimension.
struct TailPredictions {
  std::vector<double> y_hat;
  std::vector<double> y;
  std::vector<double> persistence;
};

inline TailPredictions predict_tail(const Forecaster& model, std::span<const Window> windows,
                                    const Scaler& sc, std::span<const int> target_columns) {
  TailPredictions out;
  for (const auto& w : windows) {
    const Vec y_hat = destandardize_target(model.predict(w.x), sc);
    const Vec y = destandardize_target(w.y, sc);
    const RowVec last = destandardize_x(w.x.bottomRows(1), sc).row(0);
    for (Eigen::Index k = 0; k < y.size(); ++k) {
      out.y_hat.push_back(y_hat(k));
      out.y.push_back(y(k));
      out.persistence.push_back(last(target_columns[std::size_t(k)]));
    }
  }
  return out;
}

inline MetricsReport evaluate_tail(const TailPredictions& tp) {
  MetricsReport r = metrics(tp.y_hat, tp.y);
  const Skill s = skill(r, metrics(tp.persistence, tp.y));
  r.skill_rmse = s.rmse;
  r.skill_mae = s.mae;
  return r;
}

/// Window-level permutation: window i receives feature f's column (all L
/// rows) from window perm[i]. Returns permuted RMSE minus baseline RMSE in
/// physical units.
inline double permutation_importance(const Forecaster& model, std::span<const Window> windows,
                                     const Scaler& sc, int feature,
                                     std::span<const std::size_t> perm) {
  if (windows.size() < 2) throw DataError("permutation_importance", "need >= 2 windows");
  require_shape(perm.size() == windows.size(), "permutation_importance: permutation size");
  require_shape(feature >= 0 && feature < model.config().n_features,
                "permutation_importance: feature index out of range");
  std::vector<double> base_hat, perm_hat, y;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& w = windows[i];
    const Vec yt = destandardize_target(w.y, sc);
    const Vec b = destandardize_target(model.predict(w.x), sc);
    Mat xp = w.x;
    xp.col(feature) = windows[perm[i]].x.col(feature);
    const Vec p = destandardize_target(model.predict(xp), sc);
    for (Eigen::Index k = 0; k < yt.size(); ++k) {
      y.push_back(yt(k));
      base_hat.push_back(b(k));
      perm_hat.push_back(p(k));
    }
  }
  return metrics(perm_hat, y).rmse - metrics(base_hat, y).rmse;
}

inline double permutation_importance(const Forecaster& model, std::span<const Window> windows,
                                     const Scaler& sc, int feature, std::uint64_t seed) {
  std::vector<std::size_t> perm(windows.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  return permutation_importance(model, windows, sc, feature, perm);
}

// ---------------------------------------------------------------- latency

struct LatencyConfig {
  int window = 32;
  int width = 128;
  int n_state = 64;
  int n_components = 4;
  int n_layers = 4;
};

struct LatencyReport {
  LatencyConfig config;
  int kernel_len = 0;
  double median = 0.0;  // seconds per forward pass
  double p95 = 0.0;
  int warmup = 0;
  int repetitions = 0;
  int calls_per_sample = 1;
};

struct LatencyOptions {
  int n_features = 13;
  int kernel_len = 32;  // fixed support; clipped to the window
  int warmup = 10;
  int repetitions = 100;
  double min_sample_seconds = 1e-4;  // below this, calls are batched per sample
  std::uint64_t seed = 0;
};

inline LatencyReport latency_bench_one(const LatencyConfig& lc, const LatencyOptions& opt) {
  if (opt.repetitions < 20) throw DataError("latency_bench", "need >= 20 repetitions");
  ModelConfig cfg;
  cfg.n_features = opt.n_features;
  cfg.window = lc.window;
  cfg.width = lc.width;
  cfg.n_state = lc.n_state;
  cfg.n_components = lc.n_components;
  cfg.n_layers = lc.n_layers;
  cfg.kernel_len = std::min(opt.kernel_len, lc.window);
  const Forecaster model(cfg, init_params(cfg, opt.seed));
  std::mt19937_64 rng(opt.seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat x(cfg.window, cfg.n_features);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);

  using clock = std::chrono::steady_clock;
  volatile double sink = 0.0;
  for (int i = 0; i < opt.warmup; ++i) sink = sink + model.predict(x)(0);

  int calls = 1;
  for (;;) {
    const auto t0 = clock::now();
    for (int i = 0; i < calls; ++i) sink = sink + model.predict(x)(0);
    const double dt = std::chrono::duration<double>(clock::now() - t0).count();
    if (dt >= opt.min_sample_seconds || calls >= (1 << 20)) break;
    calls *= 2;
  }
  std::vector<double> samples;
  samples.reserve(std::size_t(opt.repetitions));
  for (int r = 0; r < opt.repetitions; ++r) {
    const auto t0 = clock::now();
    for (int i = 0; i < calls; ++i) sink = sink + model.predict(x)(0);
    samples.push_back(std::chrono::duration<double>(clock::now() - t0).count() / calls);
  }
  std::sort(samples.begin(), samples.end());
  LatencyReport rep;
  rep.config = lc;
  rep.kernel_len = cfg.kernel_len;
  rep.median = quantile_type7(samples, 0.5);
  rep.p95 = quantile_type7(samples, 0.95);
  rep.warmup = opt.warmup;
  rep.repetitions = opt.repetitions;
  rep.calls_per_sample = calls;
  return rep;
}

inline std::vector<LatencyReport> latency_bench(std::span<const LatencyConfig> grid,
                                                const LatencyOptions& opt) {
  std::vector<LatencyReport> out;
  for (const auto& lc : grid) out.push_back(latency_bench_one(lc, opt));
  return out;
}

struct DoublingRatio {
  int window = 0;  // L; the ratio is time(2L) / time(L)
  double ratio = 0.0;
};

/// Ratios between reports that differ only by a doubled window.
inline std::vector<DoublingRatio> doubling_ratios(std::span<const LatencyReport> reports) {
  std::vector<DoublingRatio> out;
  for (const auto& a : reports)
    for (const auto& b : reports) {
      const auto& ca = a.config;
      const auto& cb = b.config;
      if (cb.window == 2 * ca.window && ca.width == cb.width && ca.n_state == cb.n_state &&
          ca.n_components == cb.n_components && ca.n_layers == cb.n_layers &&
          a.kernel_len == b.kernel_len)
        out.push_back({ca.window, b.median / a.median});
    }
  std::sort(out.begin(), out.end(),
            [](const DoublingRatio& x, const DoublingRatio& y) { return x.window < y.window; });
  return out;
}

// ---------------------------------------------------------------- synthetic

struct SyntheticOptions {
  int steps = 20000;
  double stride = 0.02;
  double slow_decay = 0.98;
  double fast_decay = 0.60;
  double driver_decay = 0.5;
  double driver_gain = 1.0;
  double fast_noise = 0.1;
  double obs_noise = 0.05;
  double delay_missing_prob = 0.02;
  std::uint64_t seed = 0;
};

/// Thirteen KPI channels on a 20 ms grid. RSRP is the target: a slow AR(1)
/// (decay 0.98) plus a fast AR(1) (decay 0.60) driven by the previous SINR
/// value, plus observation noise. SINR is the informative covariate; the
/// other channels are independent AR(1) distractors. Delay is occasionally
/// absent.
inline std::vector<RawSeries> generate_synthetic(const SyntheticOptions& o) {
  if (o.steps < 2) throw DataError("synth", "need >= 2 steps");
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const auto& names = kpi_columns();
  const std::vector<double> offsets = {9.06,   8.51,  1.36,   0.93,  25.81, -10.54, -87.59,
                                       -65.37, 18.31, 22.30, 0.58,  2.63,  63.15};
  std::vector<RawSeries> out(names.size());
  for (std::size_t k = 0; k < names.size(); ++k) out[k].name = names[k];

  const int rsrp = 6, sinr = 8, delay = 12;
  std::vector<double> state(names.size(), 0.0);
  double slow = 0.0, fast = 0.0, driver = 0.0;
  const double slow_innov = std::sqrt(1.0 - o.slow_decay * o.slow_decay);
  const double driver_innov = std::sqrt(1.0 - o.driver_decay * o.driver_decay);
  for (int i = 0; i < o.steps; ++i) {
    const double prev_driver = driver;
    slow = o.slow_decay * slow + slow_innov * normal(rng);
    fast = o.fast_decay * fast + o.driver_gain * prev_driver + o.fast_noise * normal(rng);
    driver = o.driver_decay * driver + driver_innov * normal(rng);
    const double t = double(i) * o.stride;
    for (std::size_t k = 0; k < names.size(); ++k) {
      double v;
      if (int(k) == rsrp) {
        v = offsets[k] + slow + fast;
      } else if (int(k) == sinr) {
        v = offsets[k] + driver;
      } else {
        const double decay = (k % 2 == 0) ? o.slow_decay : o.fast_decay;
        state[k] = decay * state[k] + std::sqrt(1.0 - decay * decay) * normal(rng);
        v = offsets[k] + state[k];
      }
      v += o.obs_noise * normal(rng);
      const double drop = uni(rng);
      if (int(k) == delay && drop < o.delay_missing_prob) continue;
      out[k].t.push_back(t);
      out[k].x.push_back(v);
    }
  }
  return out;
}

}  // namespace ms3m
