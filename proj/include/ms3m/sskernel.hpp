#pragma once

// Multi-scale state-space kernels: the LegS operator, its bilinear
// discretization, depthwise impulse responses and their M-component mixture.

#include "ms3m/common.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ms3m {

/// Continuous-time HiPPO-LegS operator (lower triangular, Hurwitz) and its
/// reference input vector.
struct LegsOperator {
  int n_state = 0;
  Mat a_ct;
  Vec b_ref;
};

inline LegsOperator build_legs(int n_state) {
  if (n_state < 1) throw ShapeError("build_legs: n_state must be >= 1");
  LegsOperator op;
  op.n_state = n_state;
  op.a_ct = Mat::Zero(n_state, n_state);
  op.b_ref.resize(n_state);
  for (int i = 0; i < n_state; ++i) {
    for (int j = 0; j < i; ++j) {
      op.a_ct(i, j) = -std::sqrt(double(2 * i + 1) * double(2 * j + 1));
    }
    op.a_ct(i, i) = -double(i + 1);
    op.b_ref(i) = std::sqrt(double(2 * i + 1));
  }
  return op;
}

struct DiscreteTransition {
  double dt = 0.0;
  Mat a_disc;
};

namespace detail {

inline bool is_lower_triangular(const Mat& a) {
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = i + 1; j < a.cols(); ++j)
      if (a(i, j) != 0.0) return false;
  return true;
}

// Solves (I - dt/2 A) X = rhs.
inline Mat solve_shifted(const Mat& a_ct, double dt, const Mat& rhs) {
  const Eigen::Index n = a_ct.rows();
  Mat lhs = Mat::Identity(n, n) - 0.5 * dt * a_ct;
  if (is_lower_triangular(a_ct)) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(std::abs(lhs(i, i)) > 0.0) || !std::isfinite(lhs(i, i)))
        throw NumericError("discretize: singular system (I - dt/2 A) at row " +
                           std::to_string(i));
    }
    return lhs.triangularView<Eigen::Lower>().solve(rhs);
  }
  Eigen::FullPivLU<Mat> lu(lhs);
  if (!lu.isInvertible())
    throw NumericError("discretize: singular system (I - dt/2 A)");
  return lu.solve(rhs);
}

}  // namespace detail

/// Bilinear (Tustin) map A = (I - dt/2 A_ct)^{-1} (I + dt/2 A_ct), by linear
/// solve rather than explicit inversion.
inline DiscreteTransition discretize(const LegsOperator& op, double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt))
    throw ShapeError("discretize: dt must be finite and > 0");
  const Eigen::Index n = op.a_ct.rows();
  require_shape(n == op.a_ct.cols() && n > 0, "discretize: a_ct must be square");
  DiscreteTransition out;
  out.dt = dt;
  const Mat rhs = Mat::Identity(n, n) + 0.5 * dt * op.a_ct;
  out.a_disc = detail::solve_shifted(op.a_ct, dt, rhs);
  return out;
}

/// dA(dt)/d(dt) = 1/2 (I - dt/2 A_ct)^{-1} A_ct (I + A(dt)).
inline Mat discretize_derivative(const LegsOperator& op, const DiscreteTransition& trans) {
  const Eigen::Index n = op.a_ct.rows();
  require_shape(trans.a_disc.rows() == n && trans.a_disc.cols() == n,
                "discretize_derivative: transition does not match operator");
  const Mat rhs = 0.5 * op.a_ct * (Mat::Identity(n, n) + trans.a_disc);
  return detail::solve_shifted(op.a_ct, trans.dt, rhs);
}

/// One mixture component. Rows of b and c belong to embedded channels.
struct SsmComponent {
  Mat b;         // d x N
  Mat c;         // d x N
  Vec d_skip;    // d
  double tau_raw = 0.0;

  double dt() const { return softplus(tau_raw); }
  Eigen::Index channels() const { return b.rows(); }
};

inline void check_component(const SsmComponent& comp, Eigen::Index n_state) {
  require_shape(comp.b.cols() == n_state && comp.c.cols() == n_state,
                "component: b and c must have N columns");
  require_shape(comp.b.rows() == comp.c.rows() && comp.d_skip.size() == comp.b.rows(),
                "component: b, c, d_skip must agree on channel count");
}

/// Depthwise taps (d x l_k). Column 0 is <c_row, b_row> + d_skip, column l is
/// <c_row, A^l b_row>, propagated as v_l = A v_{l-1}.
inline Mat impulse_response(const SsmComponent& comp, const DiscreteTransition& trans, int l_k) {
  if (l_k < 1) throw ShapeError("impulse_response: l_k must be >= 1");
  check_component(comp, trans.a_disc.rows());
  const Eigen::Index d = comp.channels();
  Mat taps(d, l_k);
  const Mat ct = comp.c.transpose();
  Mat v = comp.b.transpose();  // N x d, one column per channel
  taps.col(0) = ct.cwiseProduct(v).colwise().sum().transpose() + comp.d_skip;
  for (int l = 1; l < l_k; ++l) {
    v = trans.a_disc * v;
    taps.col(l) = ct.cwiseProduct(v).colwise().sum().transpose();
  }
  return taps;
}

/// Elementwise sum in the given component order.
inline Mat mix_taps(std::span<const Mat> components) {
  if (components.empty()) throw ShapeError("mix_taps: empty component list");
  Mat out = components[0];
  for (std::size_t m = 1; m < components.size(); ++m) {
    require_shape(components[m].rows() == out.rows() && components[m].cols() == out.cols(),
                  "mix_taps: component " + std::to_string(m) + " has shape " +
                      shape_str(components[m]) + ", expected " + shape_str(out));
    out += components[m];
  }
  return out;
}

/// Largest eigenvalue magnitude. Triangular inputs read the diagonal (their
/// exact spectrum); anything else goes through a full real eigensolve.
inline double spectral_radius(const Mat& a) {
  require_shape(a.rows() == a.cols() && a.rows() > 0, "spectral_radius: matrix must be square");
  const bool lower = detail::is_lower_triangular(a);
  const bool upper = detail::is_lower_triangular(a.transpose());
  if (lower || upper) return a.diagonal().cwiseAbs().maxCoeff();
  Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(a), false);
  if (es.info() != Eigen::Success)
    throw NumericError("spectral_radius: eigensolver did not converge (N=" +
                       std::to_string(a.rows()) + ")");
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Induced 2-norm (largest singular value).
inline double induced_norm2(const Mat& a) {
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd{Eigen::MatrixXd(a)};
  return svd.singularValues()(0);
}

struct TailBound {
  bool applicable = false;
  double alpha = 0.0;
  Vec per_channel;  // empty when not applicable
};

/// Geometric bound on the truncated tail sum_{l >= l_k} |k_c[l]| per channel,
/// valid when alpha = ||A||_2 < 1.
inline TailBound tail_bound(const SsmComponent& comp, const DiscreteTransition& trans, int l_k) {
  check_component(comp, trans.a_disc.rows());
  TailBound out;
  out.alpha = induced_norm2(trans.a_disc);
  if (!(out.alpha < 1.0)) return out;
  out.applicable = true;
  const double scale = std::pow(out.alpha, l_k) / (1.0 - out.alpha);
  out.per_channel.resize(comp.channels());
  for (Eigen::Index c = 0; c < comp.channels(); ++c)
    out.per_channel(c) = comp.c.row(c).norm() * comp.b.row(c).norm() * scale;
  return out;
}

/// Per-layer kernel bank, with the propagated states kept for the reverse pass.
struct KernelBank {
  Mat taps;  // d x l_k
  int l_k = 0;
  std::vector<Mat> per_component_taps;
  std::vector<DiscreteTransition> transitions;
  std::vector<std::vector<Mat>> states;  // [m][l] = A^l B^T, N x d
};

inline KernelBank build_kernel_bank(const LegsOperator& op, std::span<const SsmComponent> comps,
                                    int l_k, bool keep_states) {
  if (comps.empty()) throw ShapeError("build_kernel_bank: no components");
  if (l_k < 1) throw ShapeError("build_kernel_bank: l_k must be >= 1");
  KernelBank bank;
  bank.l_k = l_k;
  for (const auto& comp : comps) {
    check_component(comp, op.n_state);
    const double dt = comp.dt();
    if (!(std::isfinite(dt) && dt > 0.0))
      throw NumericError("build_kernel_bank: time step softplus(tau_raw) = " + std::to_string(dt) +
                         " is not a finite positive number");
    DiscreteTransition trans = discretize(op, dt);
    const Eigen::Index d = comp.channels();
    Mat taps(d, l_k);
    const Mat ct = comp.c.transpose();
    std::vector<Mat> states;
    Mat v = comp.b.transpose();
    taps.col(0) = ct.cwiseProduct(v).colwise().sum().transpose() + comp.d_skip;
    if (keep_states) states.push_back(v);
    for (int l = 1; l < l_k; ++l) {
      v = trans.a_disc * v;
      taps.col(l) = ct.cwiseProduct(v).colwise().sum().transpose();
      if (keep_states) states.push_back(v);
    }
    bank.per_component_taps.push_back(std::move(taps));
    bank.transitions.push_back(std::move(trans));
    bank.states.push_back(std::move(states));
  }
  bank.taps = mix_taps(bank.per_component_taps);
  return bank;
}

/// Reverse pass from d(loss)/d(taps) into every component's (b, c, d_skip,
/// tau_raw). The mixture is a plain sum, so each component sees the same
/// d_taps. Gradients are accumulated into `grads`.
inline void kernel_backward(const LegsOperator& op, std::span<const SsmComponent> comps,
                            const KernelBank& bank, const Mat& d_taps,
                            std::span<SsmComponent> grads) {
  require_shape(grads.size() == comps.size() && bank.states.size() == comps.size(),
                "kernel_backward: component count mismatch");
  require_shape(d_taps.rows() == bank.taps.rows() && d_taps.cols() == bank.l_k,
                "kernel_backward: d_taps shape mismatch");
  const int l_k = bank.l_k;
  for (std::size_t m = 0; m < comps.size(); ++m) {
    const auto& comp = comps[m];
    const auto& states = bank.states[m];
    require_shape(int(states.size()) == l_k, "kernel_backward: bank built without states");
    const Mat& a = bank.transitions[m].a_disc;
    const Mat ct = comp.c.transpose();
    auto& g = grads[m];

    g.d_skip += d_taps.col(0);

    Mat dct = Mat::Zero(ct.rows(), ct.cols());
    for (int l = 0; l < l_k; ++l) dct += states[l] * d_taps.col(l).asDiagonal();
    g.c += dct.transpose();

    // Adjoint of v_l = A v_{l-1}: lambda_l = C^T g_l + A^T lambda_{l+1}.
    Mat lambda = ct * d_taps.col(l_k - 1).asDiagonal();
    Mat da = Mat::Zero(a.rows(), a.cols());
    for (int l = l_k - 1; l >= 1; --l) {
      da.noalias() += lambda * states[l - 1].transpose();
      Mat prev = ct * d_taps.col(l - 1).asDiagonal();
      prev.noalias() += a.transpose() * lambda;
      lambda = std::move(prev);
    }
    g.b += lambda.transpose();

    if (l_k > 1) {
      const Mat da_ddt = discretize_derivative(op, bank.transitions[m]);
      const double d_dt = da.cwiseProduct(da_ddt).sum();
      g.tau_raw += d_dt * sigmoid(comp.tau_raw);
    }
  }
}

/// Time-scale initialization: M steps log-spaced over [dt_lo, dt_hi].
inline std::vector<double> initial_time_steps(int n_components, double dt_lo = 0.05,
                                              double dt_hi = 2.0) {
  std::vector<double> out(n_components);
  if (n_components == 1) {
    out[0] = std::sqrt(dt_lo * dt_hi);
    return out;
  }
  for (int m = 0; m < n_components; ++m) {
    const double frac = double(m) / double(n_components - 1);
    out[m] = dt_lo * std::pow(dt_hi / dt_lo, frac);
  }
  return out;
}

/// B near b_ref (noise std 0.01), C ~ N(0, 1/N), zero skip, log-spaced dt.
template <class Rng>
std::vector<SsmComponent> init_components(const LegsOperator& op, int channels, int n_components,
                                          Rng& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  const int n = op.n_state;
  const double c_std = 1.0 / std::sqrt(double(n));
  const auto steps = initial_time_steps(n_components);
  std::vector<SsmComponent> out(n_components);
  for (int m = 0; m < n_components; ++m) {
    auto& comp = out[m];
    comp.b.resize(channels, n);
    comp.c.resize(channels, n);
    for (int ch = 0; ch < channels; ++ch)
      for (int i = 0; i < n; ++i) {
        comp.b(ch, i) = op.b_ref(i) + 0.01 * noise(rng);
        comp.c(ch, i) = c_std * noise(rng);
      }
    comp.d_skip = Vec::Zero(channels);
    comp.tau_raw = softplus_inverse(steps[m]);
  }
  return out;
}

}  // namespace ms3m
