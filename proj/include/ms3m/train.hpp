#pragma once

// Objective, exact reverse-mode gradients (through the kernel construction
// down to tau_raw), global-norm clipping, SGD-with-decay / AdamW updates,
// plateau step-size decay and early stopping.

#include "ms3m/common.hpp"
#include "ms3m/model.hpp"
#include "ms3m/sskernel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ms3m {

/// Gradients mirror the parameter layout tensor for tensor.
using ParamGrads = ModelParams;

enum class OptimizerKind { adamw, sgdwd };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgdwd"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "sgdwd") return OptimizerKind::sgdwd;
  throw ShapeError("unknown optimizer '" + s + "' (expected adamw|sgdwd)");
}

struct TrainConfig {
  double lr0 = 2e-3;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  int batch_size = 256;
  int max_epochs = 60;
  int patience = 20;
  double tol = 1e-6;
  double plateau_factor = 0.5;
  int plateau_window = 0;  // 0: ceil(patience / 2); < 0: plateau decay off
  OptimizerKind optimizer = OptimizerKind::adamw;
  std::uint64_t seed = 0;

  int effective_plateau_window() const {
    if (plateau_window < 0) return 0;
    return plateau_window > 0 ? plateau_window : (patience + 1) / 2;
  }

  void validate() const {
    if (!(lr0 > 0.0)) throw ShapeError("TrainConfig: lr0 must be > 0");
    if (!(weight_decay >= 0.0)) throw ShapeError("TrainConfig: weight_decay must be >= 0");
    if (!(clip_norm > 0.0)) throw ShapeError("TrainConfig: clip_norm must be > 0");
    if (batch_size < 1) throw ShapeError("TrainConfig: batch_size must be >= 1");
    if (max_epochs < 1) throw ShapeError("TrainConfig: max_epochs must be >= 1");
    if (patience < 1) throw ShapeError("TrainConfig: patience must be >= 1");
    if (!(tol >= 0.0)) throw ShapeError("TrainConfig: tol must be >= 0");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
      throw ShapeError("TrainConfig: plateau_factor must be in (0,1)");
  }
};

/// A standardized (window, target) pair.
struct Sample {
  Mat x;  // L x F
  Vec y;  // O
};

// ---------------------------------------------------------------- helpers

inline double squared_norm(const ModelParams& p) {
  double acc = 0.0;
  for (const auto& t : tensor_refs(p))
    for (double v : t.span()) acc += v * v;
  return acc;
}

inline bool all_finite(const ModelParams& p) {
  for (const auto& t : tensor_refs(p))
    for (double v : t.span())
      if (!std::isfinite(v)) return false;
  return true;
}

/// dst += scale * src, tensor by tensor.
inline void axpy(ModelParams& dst, double scale, const ModelParams& src) {
  auto d = tensor_refs(dst);
  auto s = tensor_refs(src);
  require_shape(d.size() == s.size(), "axpy: layout mismatch");
  for (std::size_t i = 0; i < d.size(); ++i) {
    require_shape(d[i].size() == s[i].size(), "axpy: size mismatch at " + d[i].name);
    for (Eigen::Index k = 0; k < d[i].size(); ++k) d[i].data[k] += scale * s[i].data[k];
  }
}

inline void scale_all(ModelParams& p, double s) {
  for (const auto& t : tensor_refs(p))
    for (double& v : t.span()) v *= s;
}

// ---------------------------------------------------------------- loss

/// Mean squared error of eval-mode predictions over `batch`, plus
/// lambda * ||theta||^2 in sgdwd mode (AdamW applies decay in the update).
inline double loss(const ModelParams& p, const ModelConfig& cfg, std::span<const Sample> batch,
                   OptimizerKind optimizer = OptimizerKind::adamw, double weight_decay = 0.0) {
  if (batch.empty()) throw ShapeError("loss: empty batch");
  const Forecaster model(cfg, p);
  double acc = 0.0;
  for (const auto& s : batch) {
    const Vec y_hat = model.predict(s.x);
    require_shape(s.y.size() == y_hat.size(), "loss: target size mismatch");
    if (!y_hat.allFinite()) throw NumericError("loss: non-finite forward output");
    acc += (y_hat - s.y).squaredNorm();
  }
  double out = acc / double(batch.size());
  if (optimizer == OptimizerKind::sgdwd) out += weight_decay * squared_norm(p);
  return out;
}

// ---------------------------------------------------------------- backward

namespace detail {

// Reverse of layer_norm_rows for the input path; accumulates gamma/beta.
inline Mat layer_norm_backward(const Mat& d_out, const NormStats& st, const Vec& gamma, double eps,
                               Vec& d_gamma, Vec& d_beta) {
  d_gamma += d_out.cwiseProduct(st.xhat).colwise().sum().transpose();
  d_beta += d_out.colwise().sum().transpose();
  const Mat dxhat = d_out.array().rowwise() * gamma.transpose().array();
  const double width = double(d_out.cols());
  Mat dz(d_out.rows(), d_out.cols());
  for (Eigen::Index t = 0; t < d_out.rows(); ++t) {
    const double sd = st.std(t);
    const double q = sd + eps;
    const double mean_dx = dxhat.row(t).mean();
    dz.row(t) = (dxhat.row(t).array() - mean_dx) / q;
    if (sd > 0.0) {
      const double proj = dxhat.row(t).dot(st.xhat.row(t));
      dz.row(t) -= (proj / (width * sd)) * st.xhat.row(t);
    }
  }
  return dz;
}

/// Reverse pass through one layer. Returns dL/dH^(l-1); accumulates the
/// layer's dense parameter gradients and dL/dtaps.
inline Mat layer_backward(const LayerTrace& lt, const LayerParams& layer, const Mat& taps,
                          const ModelConfig& cfg, const Mat& d_out, LayerParams& g, Mat& d_taps) {
  // H = LN2(Y + drop(Z))
  const Mat d_pre2 =
      layer_norm_backward(d_out, lt.norm2, layer.ln2_gamma, cfg.ln_epsilon, g.ln2_gamma, g.ln2_beta);
  Mat d_y = d_pre2;
  Mat d_z = d_pre2;
  if (lt.drop2.size() > 0) d_z.array() *= lt.drop2.array();

  // Z = (phi(A) * sigmoid(G)) Wdown
  g.glu_wdown.noalias() += lt.glu.prod.transpose() * d_z;
  const Mat d_prod = d_z * layer.glu_wdown.transpose();
  Mat d_a(d_prod.rows(), d_prod.cols());
  Mat d_g(d_prod.rows(), d_prod.cols());
  constexpr double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
  for (Eigen::Index i = 0; i < d_prod.size(); ++i) {
    const double a = lt.glu.a_pre.data()[i];
    const double cdf = lt.glu.cdf.data()[i];
    const double sg = lt.glu.gate.data()[i];
    const double slope = cdf + a * std::exp(-0.5 * a * a) * inv_sqrt_2pi;
    d_a.data()[i] = d_prod.data()[i] * sg * slope;
    d_g.data()[i] = d_prod.data()[i] * a * cdf * sg * (1.0 - sg);
  }
  g.glu_wa.noalias() += lt.y.transpose() * d_a;
  g.glu_wg.noalias() += lt.y.transpose() * d_g;
  d_y.noalias() += d_a * layer.glu_wa.transpose();
  d_y.noalias() += d_g * layer.glu_wg.transpose();

  // Y = LN1(H + drop(U * gate))
  const Mat d_pre1 =
      layer_norm_backward(d_y, lt.norm1, layer.ln1_gamma, cfg.ln_epsilon, g.ln1_gamma, g.ln1_beta);
  // The layer may have been evaluated on the bottom rows only.
  const Eigen::Index len = lt.input.rows();
  const Eigen::Index offset = len - d_pre1.rows();
  Mat d_h = Mat::Zero(len, d_pre1.cols());
  d_h.bottomRows(d_pre1.rows()) = d_pre1;
  Mat d_gated = d_pre1;
  if (lt.drop1.size() > 0) d_gated.array() *= lt.drop1.array();

  const Mat d_u = d_gated.cwiseProduct(lt.se.gate);
  const Mat d_gate = d_gated.cwiseProduct(lt.conv);

  // gate = sigmoid(phi(s W1) W2), s = squeeze(H)
  const Mat d_gate_pre = d_gate.cwiseProduct(lt.se.gate)
                             .cwiseProduct((1.0 - lt.se.gate.array()).matrix());
  const Mat act = lt.se.hidden_pre.unaryExpr([](double v) { return gelu(v); });
  g.se_w2.noalias() += act.transpose() * d_gate_pre;
  Mat d_hidden = d_gate_pre * layer.se_w2.transpose();
  d_hidden.array() *= lt.se.hidden_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
  g.se_w1.noalias() += lt.se.squeeze.transpose() * d_hidden;
  const Mat d_s = d_hidden * layer.se_w1.transpose();
  if (cfg.squeeze == SqueezeMode::global) {
    const RowVec spread = d_s.colwise().sum() / double(len);
    d_h.rowwise() += spread;
  } else {
    // s_t = (1/(t+1)) sum_{k<=t} H_k  =>  dH_k += sum_{t>=k} ds_t / (t+1)
    RowVec acc = RowVec::Zero(d_h.cols());
    for (Eigen::Index t = len - 1; t >= 0; --t) {
      if (t >= offset) acc += d_s.row(t - offset) / double(t + 1);
      d_h.row(t) += acc;
    }
  }

  // U[t] = sum_tau taps[:, tau] * H[t - tau]
  const Mat taps_t = taps.transpose();
  Mat d_taps_t = Mat::Zero(taps_t.rows(), taps_t.cols());
  const Eigen::Index l_k = taps.cols();
  for (Eigen::Index t = offset; t < len; ++t) {
    const Eigen::Index lags = std::min<Eigen::Index>(l_k, t + 1);
    for (Eigen::Index tau = 0; tau < lags; ++tau) {
      d_h.row(t - tau) += taps_t.row(tau).cwiseProduct(d_u.row(t - offset));
      d_taps_t.row(tau) += d_u.row(t - offset).cwiseProduct(lt.input.row(t - tau));
    }
  }
  d_taps += d_taps_t.transpose();
  return d_h;
}

}  // namespace detail

/// Reverse pass for one window, stopping at the per-layer taps. Dense
/// gradients accumulate in `grads`; dL/dtaps accumulates in `d_taps` (one
/// d x L_k matrix per layer). Component gradients are left untouched.
inline void backward_to_taps(const ForwardTrace& trace, const ModelParams& p,
                             std::span<const KernelBank> banks, const ModelConfig& cfg,
                             const Vec& grad_out, ParamGrads& grads, std::vector<Mat>& d_taps) {
  require_shape(grad_out.size() == p.b_head.size(), "backward: grad_out size mismatch");
  require_shape(trace.layers.size() == p.layers.size() && trace.y_hat.size() == grad_out.size(),
                "backward: trace does not match params");
  require_shape(!trace.layers.empty(), "backward: empty trace");
  const Mat& h_last = trace.layers.back().output;
  const Eigen::Index t_last = h_last.rows() - 1;

  grads.w_head.noalias() += h_last.row(t_last).transpose() * grad_out.transpose();
  grads.b_head += grad_out;
  Mat d_h = Mat::Zero(h_last.rows(), h_last.cols());
  d_h.row(t_last) = (p.w_head * grad_out).transpose();

  for (std::size_t l = p.layers.size(); l-- > 0;) {
    d_h = detail::layer_backward(trace.layers[l], p.layers[l], banks[l].taps, cfg, d_h,
                                 grads.layers[l], d_taps[l]);
  }
  grads.w_in.noalias() += trace.x.transpose() * d_h;
}

/// Exact gradient of <grad_out, y_hat> w.r.t. every parameter, including the
/// kernel path down to (B, C, D, tau_raw).
inline ParamGrads backward(const ForwardTrace& trace, const ModelParams& p, const ModelConfig& cfg,
                           const Vec& grad_out) {
  if (trace.params_fingerprint != params_fingerprint(p))
    throw ShapeError("backward: stale trace (params changed since forward)");
  const LegsOperator legs = build_legs(cfg.n_state);
  const auto banks = build_kernels(legs, p, cfg, true);
  ParamGrads grads = zeros_like(cfg);
  std::vector<Mat> d_taps(p.layers.size(), Mat::Zero(cfg.width, cfg.kernel_len));
  backward_to_taps(trace, p, banks, cfg, grad_out, grads, d_taps);
  for (std::size_t l = 0; l < p.layers.size(); ++l)
    kernel_backward(legs, p.layers[l].components, banks[l], d_taps[l], grads.layers[l].components);
  return grads;
}

/// Mean-squared-error loss and its gradient over a batch, train-mode forward
/// with per-sample dropout seeds `seed + i`. Decay terms are not included.
struct BatchResult {
  double loss = 0.0;
  ParamGrads grads;
};

inline BatchResult batch_loss_and_grad(const ModelParams& p, const ModelConfig& cfg,
                                       const LegsOperator& legs, std::span<const Sample* const> batch,
                                       std::uint64_t seed) {
  if (batch.empty()) throw ShapeError("batch_loss_and_grad: empty batch");
  const auto banks = build_kernels(legs, p, cfg, true);
  BatchResult out;
  out.grads = zeros_like(cfg);
  std::vector<Mat> d_taps(p.layers.size(), Mat::Zero(cfg.width, cfg.kernel_len));
  const double inv_n = 1.0 / double(batch.size());
  ForwardTrace trace;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = *batch[i];
    const Vec y_hat = forward_with_kernels(p, cfg, banks, s.x, Mode::train, seed + i, &trace);
    const Vec resid = y_hat - s.y;
    out.loss += resid.squaredNorm() * inv_n;
    backward_to_taps(trace, p, banks, cfg, 2.0 * inv_n * resid, out.grads, d_taps);
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l)
    kernel_backward(legs, p.layers[l].components, banks[l], d_taps[l],
                    out.grads.layers[l].components);
  return out;
}

// ---------------------------------------------------------------- update

/// g * min(1, c_max / ||g||). Returns the pre-clip global norm.
inline double clip_global_norm(ParamGrads& grads, double c_max) {
  if (!(c_max > 0.0)) throw ShapeError("clip_global_norm: c_max must be > 0");
  if (!all_finite(grads)) throw NumericError("clip_global_norm: non-finite gradient");
  const double norm = std::sqrt(squared_norm(grads));
  if (norm > c_max) scale_all(grads, c_max / norm);
  return norm;
}

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adamw;
  ModelParams m;  // first moment (adamw only)
  ModelParams v;  // second moment (adamw only)
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline OptimizerState make_optimizer(OptimizerKind kind, const ModelConfig& cfg) {
  OptimizerState st;
  st.kind = kind;
  if (kind == OptimizerKind::adamw) {
    st.m = zeros_like(cfg);
    st.v = zeros_like(cfg);
  }
  return st;
}

/// sgdwd: theta <- theta - lr (g + lambda theta).
/// adamw: theta <- theta - lr lambda theta, then a bias-corrected Adam step.
inline void step(ModelParams& p, const ParamGrads& g, OptimizerState& st, double lr, double lambda) {
  if (!(lr > 0.0)) throw ShapeError("step: lr must be > 0");
  auto pr = tensor_refs(p);
  auto gr = tensor_refs(g);
  require_shape(pr.size() == gr.size(), "step: grads do not match params");
  if (st.kind == OptimizerKind::sgdwd) {
    for (std::size_t i = 0; i < pr.size(); ++i) {
      require_shape(pr[i].size() == gr[i].size(), "step: size mismatch at " + pr[i].name);
      for (Eigen::Index k = 0; k < pr[i].size(); ++k)
        pr[i].data[k] -= lr * (gr[i].data[k] + lambda * pr[i].data[k]);
    }
  } else {
    auto mr = tensor_refs(st.m);
    auto vr = tensor_refs(st.v);
    require_shape(mr.size() == pr.size() && vr.size() == pr.size(), "step: optimizer state layout");
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, double(st.t));
    for (std::size_t i = 0; i < pr.size(); ++i) {
      require_shape(pr[i].size() == gr[i].size(), "step: size mismatch at " + pr[i].name);
      for (Eigen::Index k = 0; k < pr[i].size(); ++k) {
        double& th = pr[i].data[k];
        const double gk = gr[i].data[k];
        th -= lr * lambda * th;
        double& m = mr[i].data[k];
        double& v = vr[i].data[k];
        m = st.beta1 * m + (1.0 - st.beta1) * gk;
        v = st.beta2 * v + (1.0 - st.beta2) * gk * gk;
        th -= lr * (m / bc1) / (std::sqrt(v / bc2) + st.eps);
      }
    }
  }
  if (!all_finite(p)) throw NumericError("step: parameters became non-finite");
}

// ---------------------------------------------------------------- fit

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  int patience_counter = 0;
  bool improved = false;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  int stop_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

struct FitResult {
  ModelParams params;
  TrainReport report;
};

/// Mean squared error over a dataset in eval mode (no decay term).
inline double mean_squared_error(const Forecaster& model, std::span<const Sample> data) {
  double acc = 0.0;
  for (const auto& s : data) acc += (model.predict(s.x) - s.y).squaredNorm();
  return acc / double(data.size());
}

/// One JSON object per epoch.
inline void write_epoch_log(std::ostream& os, const EpochRecord& r) {
  os.precision(17);
  os << "{\"epoch\":" << r.epoch << ",\"train_loss\":" << r.train_loss
     << ",\"val_loss\":" << r.val_loss << ",\"lr\":" << r.lr
     << ",\"patience_counter\":" << r.patience_counter
     << ",\"improved\":" << (r.improved ? "true" : "false") << "}\n";
}

inline FitResult fit(std::span<const Sample> train, std::span<const Sample> val,
                     const ModelConfig& mcfg, const TrainConfig& tcfg,
                     std::ostream* log = nullptr, const ModelParams* initial = nullptr) {
  if (train.empty()) throw DataError("fit", "empty training split");
  if (val.empty()) throw DataError("fit", "empty validation split");
  mcfg.validate();
  tcfg.validate();
  for (const auto& s : train)
    require_shape(s.x.rows() == mcfg.window && s.x.cols() == mcfg.n_features &&
                      s.y.size() == mcfg.output_dim,
                  "fit: training sample shape does not match model config");

  const LegsOperator legs = build_legs(mcfg.n_state);
  ModelParams params = initial ? *initial : init_params(mcfg, tcfg.seed);
  check_params(params, mcfg);
  OptimizerState opt = make_optimizer(tcfg.optimizer, mcfg);
  std::mt19937_64 shuffle_rng(tcfg.seed ^ 0x9e3779b97f4a7c15ull);

  FitResult result;
  result.params = params;
  TrainReport& rep = result.report;
  double lr = tcfg.lr0;
  int counter = 0;
  const int plateau = tcfg.effective_plateau_window();

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<const Sample*> batch;
  std::uint64_t dropout_seed = tcfg.seed * 0x100000001b3ull + 1;

  for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double train_acc = 0.0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(tcfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + std::size_t(tcfg.batch_size));
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(&train[order[i]]);
      BatchResult br = batch_loss_and_grad(params, mcfg, legs, batch, dropout_seed);
      dropout_seed += batch.size();
      if (!std::isfinite(br.loss))
        throw NumericError("fit: non-finite training loss at epoch " + std::to_string(epoch));
      train_acc += br.loss * double(batch.size());
      clip_global_norm(br.grads, tcfg.clip_norm);
      step(params, br.grads, opt, lr, tcfg.weight_decay);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_acc / double(train.size());
    rec.val_loss = mean_squared_error(Forecaster(mcfg, params), val);
    rec.lr = lr;
    if (!std::isfinite(rec.val_loss))
      throw NumericError("fit: non-finite validation loss at epoch " + std::to_string(epoch));

    const bool first = rep.epochs.empty();
    if (first || rep.best_val_loss - rec.val_loss > tcfg.tol) {
      rep.best_val_loss = rec.val_loss;
      rep.best_epoch = epoch;
      result.params = params;
      counter = 0;
      rec.improved = true;
    } else {
      ++counter;
    }
    rec.patience_counter = counter;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.epochs.push_back(rec);
    if (log) write_epoch_log(*log, rec);
    rep.stop_epoch = epoch;
    if (counter >= tcfg.patience) break;
    if (plateau > 0 && counter > 0 && counter % plateau == 0) lr *= tcfg.plateau_factor;
  }
  return result;
}

}  // namespace ms3m
