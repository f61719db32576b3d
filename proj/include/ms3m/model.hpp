#pragma once

// Forward pass: embedding, per-layer mixed-kernel depthwise causal
// convolution, squeeze-excitation gate, residual + LayerNorm, GLU channel
// mixer, residual + LayerNorm, and a head on the last time step.

#include "ms3m/common.hpp"
#include "ms3m/sskernel.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ms3m {

/// How the SE squeeze averages over time. `causal` uses the running mean of
/// rows 1..t for the gate at step t; `global` uses the mean over the whole
/// window (one gate for all rows). They agree on the last row.
enum class SqueezeMode { causal, global };

inline const char* to_string(SqueezeMode m) { return m == SqueezeMode::causal ? "causal" : "global"; }

inline SqueezeMode squeeze_from_string(const std::string& s) {
  if (s == "causal") return SqueezeMode::causal;
  if (s == "global") return SqueezeMode::global;
  throw ShapeError("unknown squeeze mode '" + s + "' (expected causal|global)");
}

struct ModelConfig {
  int n_features = 13;
  int window = 32;
  int output_dim = 1;
  int width = 128;
  int n_state = 64;
  int n_components = 4;
  int n_layers = 4;
  int kernel_len = 32;
  int se_reduction = 4;
  double glu_ratio = 2.0;
  double dropout = 0.1;
  double ln_epsilon = 1e-5;
  SqueezeMode squeeze = SqueezeMode::causal;

  int hidden() const { return int(std::ceil(glu_ratio * width - 1e-9)); }
  int se_hidden() const { return (width + se_reduction - 1) / se_reduction; }

  void validate() const {
    auto pos = [](int v, const char* name) {
      if (v < 1) throw ShapeError(std::string("ModelConfig: ") + name + " must be >= 1");
    };
    pos(n_features, "n_features");
    pos(window, "window");
    pos(output_dim, "output_dim");
    pos(width, "width");
    pos(n_state, "n_state");
    pos(n_components, "n_components");
    pos(n_layers, "n_layers");
    pos(kernel_len, "kernel_len");
    pos(se_reduction, "se_reduction");
    if (output_dim != 1 && output_dim != n_features)
      throw ShapeError("ModelConfig: output_dim must be 1 or n_features");
    if (kernel_len > window) throw ShapeError("ModelConfig: kernel_len must be <= window");
    if (!(glu_ratio > 0.0) || hidden() < 1) throw ShapeError("ModelConfig: glu_ratio too small");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ShapeError("ModelConfig: dropout must be in [0,1)");
    if (!(ln_epsilon > 0.0)) throw ShapeError("ModelConfig: ln_epsilon must be > 0");
  }
};

struct LayerParams {
  std::vector<SsmComponent> components;
  Mat se_w1;  // d x ceil(d/r)
  Mat se_w2;  // ceil(d/r) x d
  Vec ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Mat glu_wa, glu_wg;  // d x h
  Mat glu_wdown;       // h x d
};

struct ModelParams {
  Mat w_in;  // F x d
  std::vector<LayerParams> layers;
  Mat w_head;  // d x O
  Vec b_head;  // O
};

/// Mutable view of one parameter tensor. Scalars (tau_raw) are 1x1.
struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const { return rows * cols; }
  std::span<double> span() const { return {data, std::size_t(size())}; }
};

/// Every trainable tensor in a fixed order. This order defines the model
/// file layout and the optimizer's pairing of params/grads/moments.
template <class Params>
std::vector<TensorRef> tensor_refs(Params& p) {
  std::vector<TensorRef> out;
  auto mat = [&](std::string name, auto& m) {
    out.push_back({std::move(name), const_cast<double*>(m.data()), m.rows(), m.cols()});
  };
  mat("w_in", p.w_in);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (std::size_t m = 0; m < layer.components.size(); ++m) {
      auto& comp = layer.components[m];
      const std::string cp = pre + "ssm" + std::to_string(m) + ".";
      mat(cp + "b", comp.b);
      mat(cp + "c", comp.c);
      mat(cp + "d_skip", comp.d_skip);
      out.push_back({cp + "tau_raw", const_cast<double*>(&comp.tau_raw), 1, 1});
    }
    mat(pre + "se_w1", layer.se_w1);
    mat(pre + "se_w2", layer.se_w2);
    mat(pre + "ln1_gamma", layer.ln1_gamma);
    mat(pre + "ln1_beta", layer.ln1_beta);
    mat(pre + "ln2_gamma", layer.ln2_gamma);
    mat(pre + "ln2_beta", layer.ln2_beta);
    mat(pre + "glu_wa", layer.glu_wa);
    mat(pre + "glu_wg", layer.glu_wg);
    mat(pre + "glu_wdown", layer.glu_wdown);
  }
  mat("w_head", p.w_head);
  mat("b_head", p.b_head);
  return out;
}

/// Closed-form parameter count:
///   F*d + L_l * [ M*(2*d*N + d + 1) + 2*d*ceil(d/r) + 4*d + 3*d*h ] + d*O + O
inline std::int64_t count_params(const ModelConfig& cfg) {
  const std::int64_t d = cfg.width, n = cfg.n_state, h = cfg.hidden(), r = cfg.se_hidden();
  const std::int64_t per_component = 2 * d * n + d + 1;
  const std::int64_t per_layer =
      cfg.n_components * per_component + 2 * d * r + 4 * d + 3 * d * h;
  return std::int64_t(cfg.n_features) * d + cfg.n_layers * per_layer + d * cfg.output_dim +
         cfg.output_dim;
}

inline std::int64_t count_tensor_sizes(const ModelParams& p) {
  std::int64_t total = 0;
  for (const auto& t : tensor_refs(p)) total += t.size();
  return total;
}

/// Zero tensors with the shapes `cfg` implies (gradient / moment buffers).
inline ModelParams zeros_like(const ModelConfig& cfg) {
  const int d = cfg.width, n = cfg.n_state, h = cfg.hidden(), r = cfg.se_hidden();
  ModelParams p;
  p.w_in = Mat::Zero(cfg.n_features, d);
  p.layers.resize(cfg.n_layers);
  for (auto& layer : p.layers) {
    layer.components.resize(cfg.n_components);
    for (auto& comp : layer.components) {
      comp.b = Mat::Zero(d, n);
      comp.c = Mat::Zero(d, n);
      comp.d_skip = Vec::Zero(d);
      comp.tau_raw = 0.0;
    }
    layer.se_w1 = Mat::Zero(d, r);
    layer.se_w2 = Mat::Zero(r, d);
    layer.ln1_gamma = Vec::Zero(d);
    layer.ln1_beta = Vec::Zero(d);
    layer.ln2_gamma = Vec::Zero(d);
    layer.ln2_beta = Vec::Zero(d);
    layer.glu_wa = Mat::Zero(d, h);
    layer.glu_wg = Mat::Zero(d, h);
    layer.glu_wdown = Mat::Zero(h, d);
  }
  p.w_head = Mat::Zero(d, cfg.output_dim);
  p.b_head = Vec::Zero(cfg.output_dim);
  return p;
}

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gauss = [&](Mat& m, double std) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * normal(rng);
  };
  const int d = cfg.width;
  ModelParams p = zeros_like(cfg);
  const LegsOperator legs = build_legs(cfg.n_state);
  gauss(p.w_in, 1.0 / std::sqrt(double(cfg.n_features)));
  for (auto& layer : p.layers) {
    layer.components = init_components(legs, d, cfg.n_components, rng);
    gauss(layer.se_w1, 1.0 / std::sqrt(double(d)));
    gauss(layer.se_w2, 1.0 / std::sqrt(double(cfg.se_hidden())));
    layer.ln1_gamma.setOnes();
    layer.ln2_gamma.setOnes();
    gauss(layer.glu_wa, 1.0 / std::sqrt(double(d)));
    gauss(layer.glu_wg, 1.0 / std::sqrt(double(d)));
    gauss(layer.glu_wdown, 1.0 / std::sqrt(double(cfg.hidden())));
  }
  gauss(p.w_head, 1.0 / std::sqrt(double(d)));
  return p;
}

inline void check_params(const ModelParams& p, const ModelConfig& cfg) {
  const ModelParams ref = zeros_like(cfg);
  auto a = tensor_refs(p);
  auto b = tensor_refs(ref);
  require_shape(a.size() == b.size(), "params do not match config (tensor count)");
  for (std::size_t i = 0; i < a.size(); ++i)
    require_shape(a[i].rows == b[i].rows && a[i].cols == b[i].cols,
                  "params do not match config at " + b[i].name);
}

// ---------------------------------------------------------------- blocks

inline Mat embed(const Mat& x_std, const Mat& w_in) {
  if (!(x_std.cols() == w_in.rows()))
    throw ShapeError("embed: x is " + shape_str(x_std) + ", w_in is " + shape_str(w_in));
  return x_std * w_in;
}

/// U[t,c] = sum_{tau < L_k} taps[c,tau] * H[t - tau, c], zero for t - tau < 0.
/// Rows before `first_row` are not computed; the result has L - first_row rows.
inline Mat depthwise_causal_conv(const Mat& h, const Mat& taps, Eigen::Index first_row = 0) {
  if (!(taps.rows() == h.cols() && taps.cols() >= 1 && first_row >= 0 && first_row < h.rows()))
    throw ShapeError("depthwise_causal_conv: taps " + shape_str(taps) + " vs input " + shape_str(h));
  const Mat taps_t = taps.transpose();  // L_k x d, one lag per row
  const Eigen::Index len = h.rows(), l_k = taps.cols();
  Mat u = Mat::Zero(len - first_row, h.cols());
  for (Eigen::Index t = first_row; t < len; ++t) {
    const Eigen::Index lags = std::min<Eigen::Index>(l_k, t + 1);
    for (Eigen::Index tau = 0; tau < lags; ++tau)
      u.row(t - first_row) += taps_t.row(tau).cwiseProduct(h.row(t - tau));
  }
  return u;
}

/// Squeeze rows: running mean (causal) or whole-window mean broadcast.
inline Mat se_squeeze(const Mat& h_prev, SqueezeMode mode) {
  Mat s(h_prev.rows(), h_prev.cols());
  if (mode == SqueezeMode::global) {
    const RowVec mean = h_prev.colwise().mean();
    s.rowwise() = mean;
    return s;
  }
  RowVec acc = RowVec::Zero(h_prev.cols());
  for (Eigen::Index t = 0; t < h_prev.rows(); ++t) {
    acc += h_prev.row(t);
    s.row(t) = acc / double(t + 1);
  }
  return s;
}

struct SeGate {
  Mat squeeze;  // L x d
  Mat hidden_pre;  // L x ceil(d/r), before phi
  Mat gate;     // L x d, entries in (0,1)
};

/// gate = sigmoid(phi(s W1) W2) per row of the squeeze, from `first_row` on.
inline SeGate se_gate(const Mat& h_prev, const Mat& se_w1, const Mat& se_w2, SqueezeMode mode,
                      Eigen::Index first_row = 0) {
  if (!(se_w1.rows() == h_prev.cols() && se_w2.rows() == se_w1.cols() &&
                    se_w2.cols() == h_prev.cols()))
    throw ShapeError("se_gate: weights " + shape_str(se_w1) + "/" + shape_str(se_w2) +
                    " incompatible with width " + std::to_string(h_prev.cols()));
  SeGate out;
  out.squeeze = se_squeeze(h_prev, mode).bottomRows(h_prev.rows() - first_row);
  out.hidden_pre = out.squeeze * se_w1;
  const Mat act = out.hidden_pre.unaryExpr([](double v) { return gelu(v); });
  out.gate = (act * se_w2).unaryExpr([](double v) { return sigmoid(v); });
  return out;
}

/// Applies a gate to the convolution output, row by row.
inline Mat apply_gate(const Mat& u, const Mat& gate) {
  require_shape(u.rows() == gate.rows() && u.cols() == gate.cols(), "apply_gate: shape mismatch");
  return u.cwiseProduct(gate);
}

/// (z - mean) / (std + eps) * gamma + beta with population std.
inline RowVec layer_norm(const RowVec& z, const Vec& gamma, const Vec& beta, double eps) {
  require_shape(gamma.size() == z.size() && beta.size() == z.size(), "layer_norm: shape mismatch");
  const double mu = z.mean();
  const double sd = std::sqrt((z.array() - mu).square().mean());
  return ((z.array() - mu) / (sd + eps) * gamma.transpose().array() + beta.transpose().array())
      .matrix();
}

struct NormStats {
  Mat xhat;  // normalized, before affine
  Vec std;   // per row
};

inline Mat layer_norm_rows(const Mat& z, const Vec& gamma, const Vec& beta, double eps,
                           NormStats* stats) {
  require_shape(gamma.size() == z.cols() && beta.size() == z.cols(), "layer_norm: shape mismatch");
  Mat xhat(z.rows(), z.cols());
  Vec sd(z.rows());
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    const double mu = z.row(t).mean();
    const double s = std::sqrt((z.row(t).array() - mu).square().mean());
    sd(t) = s;
    xhat.row(t) = (z.row(t).array() - mu) / (s + eps);
  }
  Mat out = (xhat.array().rowwise() * gamma.transpose().array()).rowwise() +
            beta.transpose().array();
  if (stats) {
    stats->xhat = std::move(xhat);
    stats->std = std::move(sd);
  }
  return out;
}

struct GluCache {
  Mat a_pre;  // L x h
  Mat g_pre;  // L x h
  Mat cdf;    // standard normal cdf of a_pre, so phi(a) = a * cdf
  Mat gate;   // sigmoid(g_pre)
  Mat prod;   // phi(a_pre) * sigmoid(g_pre)
};

/// Z = (phi(Y Wa) * sigmoid(Y Wg)) Wdown.
inline Mat glu_mix(const Mat& y, const Mat& glu_wa, const Mat& glu_wg, const Mat& glu_wdown,
                   GluCache* cache = nullptr) {
  if (!(glu_wa.rows() == y.cols() && glu_wg.rows() == y.cols() &&
                    glu_wa.cols() == glu_wg.cols() && glu_wdown.rows() == glu_wa.cols() &&
                    glu_wdown.cols() == y.cols()))
    throw ShapeError("glu_mix: weight shapes incompatible with input " + shape_str(y));
  GluCache local;
  GluCache& c = cache ? *cache : local;
  c.a_pre.noalias() = y * glu_wa;
  c.g_pre.noalias() = y * glu_wg;
  c.cdf.resize(c.a_pre.rows(), c.a_pre.cols());
  c.gate.resize(c.a_pre.rows(), c.a_pre.cols());
  c.prod.resize(c.a_pre.rows(), c.a_pre.cols());
  for (Eigen::Index i = 0; i < c.prod.size(); ++i) {
    const double a = c.a_pre.data()[i];
    c.cdf.data()[i] = 0.5 * (1.0 + std::erf(a * M_SQRT1_2));
    c.gate.data()[i] = sigmoid(c.g_pre.data()[i]);
    c.prod.data()[i] = a * c.cdf.data()[i] * c.gate.data()[i];
  }
  Mat z;
  z.noalias() = c.prod * glu_wdown;
  return z;
}

// ---------------------------------------------------------------- forward

enum class Mode { train, eval };

struct LayerTrace {
  Mat input;      // H^(l-1)
  Mat conv;       // U^(l)
  SeGate se;
  Mat drop1;      // inverted-dropout mask on the gated branch (empty: none)
  Mat pre_norm1;  // H^(l-1) + dropout(U * g)
  NormStats norm1;
  Mat y;          // Y^(l)
  GluCache glu;
  Mat drop2;
  Mat pre_norm2;  // Y + dropout(Z)
  NormStats norm2;
  Mat output;     // H^(l)
};

struct ForwardTrace {
  Mat x;
  std::vector<LayerTrace> layers;
  Vec y_hat;
  std::uint64_t params_fingerprint = 0;
};

/// FNV-1a over every parameter byte; ties a trace to the params it saw.
inline std::uint64_t params_fingerprint(const ModelParams& p) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& t : tensor_refs(p)) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data);
    for (std::size_t i = 0; i < std::size_t(t.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

inline std::vector<KernelBank> build_kernels(const LegsOperator& legs, const ModelParams& p,
                                             const ModelConfig& cfg, bool keep_states) {
  std::vector<KernelBank> banks;
  banks.reserve(p.layers.size());
  for (const auto& layer : p.layers)
    banks.push_back(build_kernel_bank(legs, layer.components, cfg.kernel_len, keep_states));
  return banks;
}

namespace detail {

// Each 64-bit draw decides two entries; an entry is dropped when its 32-bit
// half falls below rate * 2^32.
inline Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::mt19937_64& rng) {
  const double keep = 1.0 / (1.0 - rate);
  const auto cut = std::uint32_t(std::min(std::ldexp(rate, 32), 4294967295.0));
  Mat m(rows, cols);
  double* out = m.data();
  const Eigen::Index n = m.size();
  for (Eigen::Index i = 0; i < n; i += 2) {
    const std::uint64_t r = rng();
    out[i] = std::uint32_t(r) < cut ? 0.0 : keep;
    if (i + 1 < n) out[i + 1] = std::uint32_t(r >> 32) < cut ? 0.0 : keep;
  }
  return m;
}

}  // namespace detail

/// How much of the last layer to compute. Only its final row reaches the
/// head, so `head_row` evaluates that layer on one row; `full` keeps every
/// row (for inspecting activations).
enum class Extent { head_row, full };

/// One window through the network with prebuilt kernels. Fills `trace` when
/// given; dropout is active only in train mode.
inline Vec forward_with_kernels(const ModelParams& p, const ModelConfig& cfg,
                                std::span<const KernelBank> banks, const Mat& x_std, Mode mode,
                                std::uint64_t seed, ForwardTrace* trace,
                                Extent extent = Extent::head_row) {
  if (!(x_std.rows() == cfg.window && x_std.cols() == cfg.n_features))
    throw ShapeError("forward: window is " + shape_str(x_std) + ", expected " +
                    std::to_string(cfg.window) + "x" + std::to_string(cfg.n_features));
  require_shape(banks.size() == p.layers.size(), "forward: kernel bank count mismatch");
  const bool drop = mode == Mode::train && cfg.dropout > 0.0;
  std::mt19937_64 rng(seed);
  if (trace) {
    trace->x = x_std;
    trace->layers.assign(p.layers.size(), LayerTrace{});
  }
  Mat h = embed(x_std, p.w_in);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    LayerTrace local;
    LayerTrace& lt = trace ? trace->layers[l] : local;
    const bool last = l + 1 == p.layers.size();
    const Eigen::Index first = (last && extent == Extent::head_row) ? h.rows() - 1 : 0;
    lt.conv = depthwise_causal_conv(h, banks[l].taps, first);
    lt.se = se_gate(h, layer.se_w1, layer.se_w2, cfg.squeeze, first);
    Mat gated = apply_gate(lt.conv, lt.se.gate);
    if (drop) {
      lt.drop1 = detail::dropout_mask(gated.rows(), gated.cols(), cfg.dropout, rng);
      gated.array() *= lt.drop1.array();
    }
    lt.pre_norm1 = h.bottomRows(h.rows() - first) + gated;
    lt.y = layer_norm_rows(lt.pre_norm1, layer.ln1_gamma, layer.ln1_beta, cfg.ln_epsilon,
                           &lt.norm1);
    Mat z = glu_mix(lt.y, layer.glu_wa, layer.glu_wg, layer.glu_wdown, &lt.glu);
    if (drop) {
      lt.drop2 = detail::dropout_mask(z.rows(), z.cols(), cfg.dropout, rng);
      z.array() *= lt.drop2.array();
    }
    lt.pre_norm2 = lt.y + z;
    Mat out = layer_norm_rows(lt.pre_norm2, layer.ln2_gamma, layer.ln2_beta, cfg.ln_epsilon,
                              &lt.norm2);
    lt.input = std::move(h);
    if (trace) lt.output = out;
    h = std::move(out);
  }
  Vec y_hat = (h.row(h.rows() - 1) * p.w_head).transpose() + p.b_head;
  if (trace) trace->y_hat = y_hat;
  return y_hat;
}

struct ForwardResult {
  Vec y_hat;
  std::optional<ForwardTrace> trace;  // train mode only
};

/// Full forward: kernels rebuilt from the current (tau, B, C, D); the train
/// trace covers every row of every layer.
inline ForwardResult forward(const ModelParams& p, const ModelConfig& cfg, const Mat& x_std,
                             Mode mode, std::uint64_t seed) {
  cfg.validate();
  check_params(p, cfg);
  const LegsOperator legs = build_legs(cfg.n_state);
  const auto banks = build_kernels(legs, p, cfg, false);
  ForwardResult out;
  if (mode == Mode::train) {
    out.trace.emplace();
    out.y_hat = forward_with_kernels(p, cfg, banks, x_std, mode, seed, &*out.trace, Extent::full);
    out.trace->params_fingerprint = params_fingerprint(p);
  } else {
    out.y_hat = forward_with_kernels(p, cfg, banks, x_std, mode, seed, nullptr);
  }
  return out;
}

/// Eval-mode model with kernels built once.
class Forecaster {
 public:
  Forecaster(ModelConfig cfg, ModelParams params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    check_params(params_, cfg_);
    banks_ = build_kernels(build_legs(cfg_.n_state), params_, cfg_, false);
  }

  Vec predict(const Mat& x_std) const {
    return forward_with_kernels(params_, cfg_, banks_, x_std, Mode::eval, 0, nullptr);
  }

  const ModelConfig& config() const { return cfg_; }
  const ModelParams& params() const { return params_; }
  const std::vector<KernelBank>& kernels() const { return banks_; }

 private:
  ModelConfig cfg_;
  ModelParams params_;
  std::vector<KernelBank> banks_;
};

}  // namespace ms3m
