#pragma once

// KPI ingestion: grid aggregation, semantics-aware missingness, decile IQR
// pruning, gap-checked window extraction, contiguous tail splits and
// train-only standardization.

#include "ms3m/common.hpp"
#include "ms3m/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace ms3m {

inline const std::vector<std::string>& kpi_columns() {
  static const std::vector<std::string> cols = {"MCS",  "CQI",  "RI",   "PMI", "Buffer",
                                                "RSRQ", "RSRP", "RSSI", "SINR", "PRBs",
                                                "SE",   "BLER", "Delay"};
  return cols;
}

inline std::string kpi_unit(const std::string& name) {
  static const std::vector<std::pair<std::string, std::string>> units = {
      {"MCS", "index"}, {"CQI", "index"}, {"RI", "rank"},    {"PMI", "index"},
      {"Buffer", "bytes"}, {"RSRQ", "dB"}, {"RSRP", "dBm"},  {"RSSI", "dBm"},
      {"SINR", "dB"},   {"PRBs", "RBs"},  {"SE", "bps/Hz"}, {"BLER", "%"},
      {"Delay", "ms"}};
  for (const auto& [k, u] : units)
    if (k == name) return u;
  return "";
}

inline constexpr double kMissingSentinel = -1.0;

/// Raw irregular samples of one KPI.
struct RawSeries {
  std::string name;
  std::vector<double> t;
  std::vector<double> x;
};

/// One row per grid step. Rows may be dropped later, so each row carries its
/// integer grid index; timestamps are t0 + index * stride. NaN marks a
/// missing cell before resolve_missing.
struct KpiTable {
  std::vector<std::string> columns;
  std::vector<std::int64_t> grid_index;
  double t0 = 0.0;
  double stride = 0.0;
  Mat values;  // rows x F

  Eigen::Index rows() const { return values.rows(); }
  double timestamp(Eigen::Index row) const { return t0 + double(grid_index[row]) * stride; }

  int column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return int(i);
    return -1;
  }
};

namespace detail {

inline KpiTable select_rows(const KpiTable& in, const std::vector<Eigen::Index>& keep) {
  KpiTable out;
  out.columns = in.columns;
  out.t0 = in.t0;
  out.stride = in.stride;
  out.values.resize(Eigen::Index(keep.size()), in.values.cols());
  out.grid_index.reserve(keep.size());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    out.values.row(Eigen::Index(r)) = in.values.row(keep[r]);
    out.grid_index.push_back(in.grid_index[keep[r]]);
  }
  return out;
}

}  // namespace detail

/// Windowed averaging onto t_m = t0 + m * stride: bin m averages samples with
/// t in [t_m, t_m + window). Boundaries are shifted down by 1e-9 * stride so a
/// sample printed exactly on a grid point lands in the bin it starts.
inline KpiTable aggregate_to_grid(std::span<const RawSeries> series, double window, double stride,
                                  std::optional<double> t0 = std::nullopt) {
  if (!(window > 0.0) || !(stride > 0.0))
    throw DataError("aggregate_to_grid", "window and stride must be > 0");
  if (series.empty()) throw DataError("aggregate_to_grid", "no KPI series given");
  double t_min = std::numeric_limits<double>::infinity();
  double t_max = -std::numeric_limits<double>::infinity();
  for (const auto& s : series) {
    if (s.t.empty()) throw DataError("aggregate_to_grid", "empty input series '" + s.name + "'");
    if (s.t.size() != s.x.size())
      throw DataError("aggregate_to_grid", "series '" + s.name + "' has mismatched t/x lengths");
    for (double t : s.t) {
      if (!std::isfinite(t))
        throw DataError("aggregate_to_grid", "non-finite timestamp in '" + s.name + "'");
      t_min = std::min(t_min, t);
      t_max = std::max(t_max, t);
    }
  }
  KpiTable out;
  out.t0 = t0.value_or(t_min);
  out.stride = stride;
  const double eps = 1e-9 * stride;
  const auto n_bins = std::int64_t(std::floor((t_max - out.t0 + eps) / stride)) + 1;
  if (n_bins < 1) throw DataError("aggregate_to_grid", "grid start lies after every sample");
  out.values = Mat::Constant(n_bins, Eigen::Index(series.size()),
                             std::numeric_limits<double>::quiet_NaN());
  out.grid_index.resize(std::size_t(n_bins));
  for (std::int64_t m = 0; m < n_bins; ++m) out.grid_index[std::size_t(m)] = m;

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    out.columns.push_back(s.name);
    std::vector<std::size_t> order(s.t.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return s.t[a] < s.t[b]; });
    std::size_t lo = 0;
    for (std::int64_t m = 0; m < n_bins; ++m) {
      const double start = out.t0 + double(m) * stride - eps;
      const double stop = out.t0 + double(m) * stride + window - eps;
      while (lo < order.size() && s.t[order[lo]] < start) ++lo;
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t i = lo; i < order.size() && s.t[order[i]] < stop; ++i) {
        sum += s.x[order[i]];
        ++count;
      }
      if (count > 0) out.values(Eigen::Index(m), Eigen::Index(k)) = sum / double(count);
    }
  }
  return out;
}

/// Rows missing only the sentinel column get the sentinel and survive; rows
/// missing anything else are dropped.
inline KpiTable resolve_missing(const KpiTable& in, const std::string& sentinel_column = "Delay",
                                double sentinel = kMissingSentinel) {
  const int sc = in.column_index(sentinel_column);
  std::vector<Eigen::Index> keep;
  std::vector<bool> impute;
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    bool other_missing = false;
    bool sentinel_missing = false;
    for (Eigen::Index c = 0; c < in.values.cols(); ++c) {
      if (!std::isnan(in.values(r, c))) continue;
      if (int(c) == sc)
        sentinel_missing = true;
      else
        other_missing = true;
    }
    if (other_missing) continue;
    keep.push_back(r);
    impute.push_back(sentinel_missing);
  }
  KpiTable out = detail::select_rows(in, keep);
  for (std::size_t r = 0; r < keep.size(); ++r)
    if (impute[r]) out.values(Eigen::Index(r), sc) = sentinel;
  return out;
}

/// Linear interpolation between order statistics (type 7). `sorted` ascending.
inline double quantile_type7(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw DataError("quantile", "empty sample");
  const double h = (double(sorted.size()) - 1.0) * q;
  const auto lo = std::size_t(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - double(lo)) * (sorted[hi] - sorted[lo]);
}

struct PruneBounds {
  Vec low;
  Vec high;
};

inline PruneBounds iqr_bounds(const KpiTable& table, double q_low, double q_high, double k,
                              const std::string& sentinel_column, double sentinel) {
  const int sc = table.column_index(sentinel_column);
  PruneBounds b;
  b.low.resize(table.values.cols());
  b.high.resize(table.values.cols());
  for (Eigen::Index c = 0; c < table.values.cols(); ++c) {
    std::vector<double> col;
    col.reserve(std::size_t(table.rows()));
    for (Eigen::Index r = 0; r < table.rows(); ++r) {
      const double v = table.values(r, c);
      if (int(c) == sc && v == sentinel) continue;
      col.push_back(v);
    }
    if (col.empty()) {
      b.low(c) = -std::numeric_limits<double>::infinity();
      b.high(c) = std::numeric_limits<double>::infinity();
      continue;
    }
    std::sort(col.begin(), col.end());
    const double q1 = quantile_type7(col, q_low);
    const double q3 = quantile_type7(col, q_high);
    const double iqr = q3 - q1;
    b.low(c) = q1 - k * iqr;
    b.high(c) = q3 + k * iqr;
  }
  return b;
}

/// Single pass: bounds from the unpruned table, then every row with any value
/// outside its column's bounds is removed. Sentinel cells are exempt.
inline KpiTable iqr_prune(const KpiTable& table, double q_low = 0.10, double q_high = 0.90,
                          double k = 1.5, const std::string& sentinel_column = "Delay",
                          double sentinel = kMissingSentinel) {
  if (table.rows() == 0) throw DataError("iqr_prune", "empty table");
  const PruneBounds b = iqr_bounds(table, q_low, q_high, k, sentinel_column, sentinel);
  const int sc = table.column_index(sentinel_column);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index r = 0; r < table.rows(); ++r) {
    bool ok = true;
    for (Eigen::Index c = 0; c < table.values.cols() && ok; ++c) {
      const double v = table.values(r, c);
      if (int(c) == sc && v == sentinel) continue;
      ok = v >= b.low(c) && v <= b.high(c);
    }
    if (ok) keep.push_back(r);
  }
  if (keep.empty()) throw DataError("iqr_prune", "every row was pruned");
  return detail::select_rows(table, keep);
}

// ---------------------------------------------------------------- windows

struct Window {
  Mat x;  // L x F
  Vec y;  // O
  std::int64_t origin = 0;  // grid index of the last covariate row
};

struct Scaler {
  Vec mu_x, sigma_x;  // F
  Vec mu_y, sigma_y;  // O
  bool fitted = false;
  std::vector<int> floored;  // features whose sigma hit the floor
};

enum class Split { train, val, test };

struct WindowDataset {
  std::vector<std::string> columns;
  std::vector<int> target_columns;
  int window = 0;
  double t0 = 0.0;
  double stride = 0.0;
  std::vector<Window> windows;  // sorted by origin
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  bool split = false;
  bool standardized = false;
  Scaler scaler;

  std::span<const Window> part(Split s) const {
    if (!split) throw DataError("dataset", "dataset has not been split");
    switch (s) {
      case Split::train: return {windows.data(), n_train};
      case Split::val: return {windows.data() + n_train, n_val};
      case Split::test: return {windows.data() + n_train + n_val, n_test};
    }
    return {};
  }
};

/// Every origin whose L covariate rows and the following target row are
/// consecutive grid steps. The target row never enters X.
inline WindowDataset make_windows(const KpiTable& table, int window, const std::string& target,
                                  int output_dim = 1) {
  if (window < 1) throw DataError("make_windows", "window length must be >= 1");
  const int f = int(table.values.cols());
  const int tc = table.column_index(target);
  if (output_dim == 1 && tc < 0)
    throw DataError("make_windows", "target column '" + target + "' not in table");
  if (output_dim != 1 && output_dim != f)
    throw DataError("make_windows", "output_dim must be 1 or the number of columns");
  if (table.rows() < window + 1)
    throw DataError("make_windows", "table has " + std::to_string(table.rows()) +
                                        " rows, need at least L+1 = " + std::to_string(window + 1));
  WindowDataset ds;
  ds.columns = table.columns;
  ds.window = window;
  ds.t0 = table.t0;
  ds.stride = table.stride;
  if (output_dim == 1)
    ds.target_columns = {tc};
  else
    for (int c = 0; c < f; ++c) ds.target_columns.push_back(c);

  // run = number of consecutive-step rows ending at r
  std::int64_t run = 0;
  for (Eigen::Index r = 0; r + 1 < table.rows(); ++r) {
    run = (r > 0 && table.grid_index[r] == table.grid_index[r - 1] + 1) ? run + 1 : 1;
    if (run < window) continue;
    if (table.grid_index[r + 1] != table.grid_index[r] + 1) continue;
    Window w;
    w.origin = table.grid_index[r];
    w.x = table.values.middleRows(r - window + 1, window);
    w.y.resize(Eigen::Index(ds.target_columns.size()));
    for (std::size_t k = 0; k < ds.target_columns.size(); ++k)
      w.y(Eigen::Index(k)) = table.values(r + 1, ds.target_columns[k]);
    ds.windows.push_back(std::move(w));
  }
  return ds;
}

/// Contiguous tail split: last floor(test_frac M) windows are test, the
/// floor(val_frac M) before them are validation, the rest train.
inline void chrono_split(WindowDataset& ds, double val_frac = 0.15, double test_frac = 0.15) {
  if (!(val_frac > 0.0) || !(test_frac > 0.0) || !(val_frac + test_frac < 1.0))
    throw DataError("chrono_split", "fractions must be positive and sum to < 1");
  std::stable_sort(ds.windows.begin(), ds.windows.end(),
                   [](const Window& a, const Window& b) { return a.origin < b.origin; });
  const std::size_t m = ds.windows.size();
  ds.n_test = std::size_t(std::floor(test_frac * double(m)));
  ds.n_val = std::size_t(std::floor(val_frac * double(m)));
  if (ds.n_test == 0 || ds.n_val == 0 || ds.n_test + ds.n_val >= m)
    throw DataError("chrono_split", "a split would be empty (" + std::to_string(m) + " windows)");
  ds.n_train = m - ds.n_val - ds.n_test;
  ds.split = true;
}

inline constexpr double kSigmaFloor = 1e-8;

/// Population mean/std over every covariate row of every training window
/// (rows shared by overlapping windows count once per window) and over the
/// training targets.
inline Scaler fit_scaler(std::span<const Window> train) {
  if (train.empty()) throw DataError("fit_scaler", "no training windows");
  const Eigen::Index f = train[0].x.cols(), o = train[0].y.size();
  Scaler sc;
  Vec sx = Vec::Zero(f), sy = Vec::Zero(o);
  double nx = 0.0;
  for (const auto& w : train) {
    sx += w.x.colwise().sum().transpose();
    nx += double(w.x.rows());
    sy += w.y;
  }
  sc.mu_x = sx / nx;
  sc.mu_y = sy / double(train.size());
  Vec vx = Vec::Zero(f), vy = Vec::Zero(o);
  for (const auto& w : train) {
    vx += (w.x.rowwise() - sc.mu_x.transpose()).array().square().colwise().sum().matrix().transpose();
    vy += (w.y - sc.mu_y).array().square().matrix();
  }
  sc.sigma_x = (vx / nx).cwiseSqrt();
  sc.sigma_y = (vy / double(train.size())).cwiseSqrt();
  for (Eigen::Index c = 0; c < f; ++c)
    if (!(sc.sigma_x(c) >= kSigmaFloor)) {
      sc.sigma_x(c) = kSigmaFloor;
      sc.floored.push_back(int(c));
    }
  for (Eigen::Index c = 0; c < o; ++c)
    if (!(sc.sigma_y(c) >= kSigmaFloor)) sc.sigma_y(c) = kSigmaFloor;
  sc.fitted = true;
  return sc;
}

inline void require_fitted(const Scaler& sc) {
  if (!sc.fitted) throw DataError("standardize", "scaler has not been fitted");
}

inline Mat standardize_x(const Mat& x, const Scaler& sc) {
  require_fitted(sc);
  require_shape(x.cols() == sc.mu_x.size(), "standardize: feature count mismatch");
  return ((x.rowwise() - sc.mu_x.transpose()).array().rowwise() / sc.sigma_x.transpose().array())
      .matrix();
}

inline Vec standardize_y(const Vec& y, const Scaler& sc) {
  require_fitted(sc);
  require_shape(y.size() == sc.mu_y.size(), "standardize: target size mismatch");
  return ((y - sc.mu_y).array() / sc.sigma_y.array()).matrix();
}

inline Vec destandardize_target(const Vec& y_std, const Scaler& sc) {
  require_fitted(sc);
  require_shape(y_std.size() == sc.mu_y.size(), "destandardize: target size mismatch");
  return sc.mu_y + sc.sigma_y.cwiseProduct(y_std);
}

inline Mat destandardize_x(const Mat& x_std, const Scaler& sc) {
  require_fitted(sc);
  return ((x_std.array().rowwise() * sc.sigma_x.transpose().array()).rowwise() +
          sc.mu_x.transpose().array())
      .matrix();
}

inline void standardize(std::span<Window> windows, const Scaler& sc) {
  for (auto& w : windows) {
    w.x = standardize_x(w.x, sc);
    w.y = standardize_y(w.y, sc);
  }
}

/// Fit on the train split only, then apply to all splits.
inline void fit_and_standardize(WindowDataset& ds) {
  if (ds.standardized) throw DataError("standardize", "dataset already standardized");
  ds.scaler = fit_scaler(ds.part(Split::train));
  standardize(ds.windows, ds.scaler);
  ds.standardized = true;
}

inline std::vector<Sample> to_samples(std::span<const Window> windows) {
  std::vector<Sample> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back({w.x, w.y});
  return out;
}

// ---------------------------------------------------------------- text I/O

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, delim)) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
    std::size_t lead = 0;
    while (lead < field.size() && field[lead] == ' ') ++lead;
    out.push_back(field.substr(lead));
  }
  if (!line.empty() && line.back() == delim) out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, std::size_t line_no, const std::string& col) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && s[0] == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw DataError("read_kpi_csv", "line " + std::to_string(line_no) + ", column '" + col +
                                        "': cannot parse '" + s + "'");
  return v;
}

}  // namespace detail

/// Header-bearing comma-delimited text: a time column (seconds) plus one
/// column per KPI. Empty cells are missing samples.
inline std::vector<RawSeries> read_kpi_csv(std::istream& in, const std::string& time_column = "time",
                                           char delim = ',') {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw DataError("read_kpi_csv", "empty input");
  ++line_no;
  const auto header = detail::split_fields(line, delim);
  int tcol = -1;
  std::vector<RawSeries> series;
  std::vector<int> series_of_col(header.size(), -1);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == time_column) {
      tcol = int(i);
    } else {
      series_of_col[i] = int(series.size());
      series.push_back({header[i], {}, {}});
    }
  }
  if (tcol < 0) throw DataError("read_kpi_csv", "no '" + time_column + "' column in header");
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_fields(line, delim);
    if (fields.size() != header.size())
      throw DataError("read_kpi_csv", "line " + std::to_string(line_no) + ": expected " +
                                          std::to_string(header.size()) + " fields, got " +
                                          std::to_string(fields.size()));
    const double t = detail::parse_double(fields[std::size_t(tcol)], line_no, time_column);
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (series_of_col[i] < 0 || fields[i].empty()) continue;
      auto& s = series[std::size_t(series_of_col[i])];
      s.t.push_back(t);
      s.x.push_back(detail::parse_double(fields[i], line_no, header[i]));
    }
  }
  return series;
}

/// Window as delimited text (header of column names, L rows), as consumed by
/// the predict command.
inline Mat read_window_csv(std::istream& in, const std::vector<std::string>& columns,
                           char delim = ',') {
  std::string line;
  if (!std::getline(in, line)) throw DataError("read_window", "empty input");
  const auto header = detail::split_fields(line, delim);
  std::vector<int> pos(columns.size(), -1);
  for (std::size_t c = 0; c < columns.size(); ++c)
    for (std::size_t h = 0; h < header.size(); ++h)
      if (header[h] == columns[c]) pos[c] = int(h);
  for (std::size_t c = 0; c < columns.size(); ++c)
    if (pos[c] < 0) throw DataError("read_window", "missing column '" + columns[c] + "'");
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_fields(line, delim);
    if (fields.size() != header.size())
      throw DataError("read_window", "line " + std::to_string(line_no) + ": field count mismatch");
    std::vector<double> row;
    for (std::size_t c = 0; c < columns.size(); ++c)
      row.push_back(detail::parse_double(fields[std::size_t(pos[c])], line_no, columns[c]));
    rows.push_back(std::move(row));
  }
  Mat x(Eigen::Index(rows.size()), Eigen::Index(columns.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < columns.size(); ++c) x(Eigen::Index(r), Eigen::Index(c)) = rows[r][c];
  return x;
}

}  // namespace ms3m
