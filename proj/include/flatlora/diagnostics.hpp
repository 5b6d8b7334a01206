/* Copyright 2026 The flatlora Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License. */
#pragma once

// Flatness measurements: first-order SAM sharpness in the merged-weight
// space, the sharpness seen by the EMA perturbation, a sampling reference for
// the neighborhood maximum, empirical smoothness constants, and the
// balancedness experiment on a rank-one factorization.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "flatlora/linalg.hpp"
#include "flatlora/model.hpp"
#include "flatlora/optimizers.hpp"
#include "flatlora/rng.hpp"

namespace flatlora {

struct SharpnessMeasure {
  double value = 0.0;
  std::size_t degenerate_layers = 0;
};

namespace detail {

inline double stacked_norm(std::span<const Matrix> ms) {
  double s = 0.0;
  for (const Matrix& m : ms) {
    const double n = frobenius_norm(m);
    s += n * n;
  }
  return std::sqrt(s);
}

}  // namespace detail

/// L(W + eps) - L(W) on the merged weights, eps = rho * grad_w / ||grad_w||
/// per layer.
inline SharpnessMeasure sharpness_sam(const Network& net, const Batch& batch,
                                      double rho) {
  if (rho < 0.0) throw DomainError("sharpness_sam: rho must be non-negative");
  auto [base_loss, grad_w] = merged_weight_gradients(net, batch);
  SharpnessMeasure out;
  std::vector<Matrix> eps;
  eps.reserve(grad_w.size());
  for (const Matrix& g : grad_w) {
    SamDirection d = sam_direction(g.data(), rho, DirectionVariant::standard);
    if (d.degenerate) ++out.degenerate_layers;
    eps.push_back(matrixize(d.values, g.rows(), g.cols()));
  }
  out.value = loss_with_weight_offsets(net, batch, eps) - base_loss;
  return out;
}

/// Sharpness under the low-rank flat perturbation E^B computed fresh at the
/// current parameters: L(B + E^B, A) - L(B, A).
inline double sharpness_lowrank(const Network& net, const Batch& batch, double rho,
                                const SamOptions& opts = {}) {
  const GradientSet g = backward(net, batch);
  const LowRankPerturbation p = perturbation_from_gradients(net, g, rho, opts);
  Network probe = net;
  BPerturbation applied(probe, p.e_b);
  return loss(probe, batch) - g.loss;
}

/// L(B + EMA, A) - L(B, A), with B the unperturbed factor whether or not the
/// EMA perturbation is currently applied to `net`.
inline double sharpness_ema(const Network& net, const Batch& batch,
                            const PerturbState& state) {
  Network probe = net;
  if (state.currently_applied) {
    for (std::size_t l = 0; l < probe.layers.size(); ++l) {
      probe.layers[l].b() = state.saved_b[l];
    }
  }
  const double base = loss(probe, batch);
  BPerturbation applied(probe, state.ema_e_b);
  return loss(probe, batch) - base;
}

/// One row of the EMA-vs-fresh sharpness comparison, all at the unperturbed
/// parameters w_t. s_sam uses the low-rank flat perturbation recomputed at
/// w_t with radius rho_t; s_ema uses the stored EMA perturbation.
struct SharpnessReport {
  std::size_t step = 0;
  double s_sam = 0.0;
  double s_ema = 0.0;
  double gap = 0.0;  // |s_ema - s_sam|
  double bound_rhs = std::numeric_limits<double>::quiet_NaN();
};

/// Empirical stand-ins for the smoothness, gradient-bound, and variance
/// constants. These are lower bounds on the true suprema, not bounds.
struct AssumptionConstants {
  double tau_hat = 0.0;
  double g_hat = 0.0;
  double sigma_hat = 0.0;
};

/// (tau*rho0/sqrt(t-1) + G + sigma^2) * (rho0/sqrt(t) + rho0*(1-beta)^(t-1) + rho0)
inline double ema_gap_bound(const AssumptionConstants& c, double rho0, double beta,
                            std::size_t t) {
  if (t < 2) throw DomainError("ema_gap_bound: requires t >= 2");
  const double td = static_cast<double>(t);
  const double lhs = c.tau_hat * rho0 / std::sqrt(td - 1.0) + c.g_hat +
                     c.sigma_hat * c.sigma_hat;
  const double rhs = rho0 / std::sqrt(td) + rho0 * std::pow(1.0 - beta, td - 1.0) + rho0;
  return lhs * rhs;
}

/// Constants are measured in the merged-weight space. tau_hat is the largest
/// gradient-difference ratio over random nearby pairs on the full data;
/// g_hat the largest minibatch gradient norm; sigma_hat the root mean squared
/// deviation of minibatch gradients from the full-data gradient.
inline AssumptionConstants estimate_assumption_constants(
    const Network& net, const Batch& full_data, std::span<const Batch> minibatches,
    std::size_t n_probes, std::uint64_t seed, double probe_radius = 0.05) {
  if (n_probes < 2) throw DomainError("estimate_assumption_constants: n_probes < 2");
  Rng rng(seed);
  AssumptionConstants c;

  auto random_offsets = [&](double radius) {
    std::vector<Matrix> off;
    for (const LoRALinear& layer : net.layers) {
      off.push_back(rng.normal_matrix(layer.out_dim(), layer.in_dim()));
    }
    const double n = detail::stacked_norm(off);
    for (Matrix& m : off) m *= radius / n;
    return off;
  };
  for (std::size_t i = 0; i < n_probes; ++i) {
    const std::vector<Matrix> u = random_offsets(probe_radius);
    const std::vector<Matrix> v = random_offsets(probe_radius);
    const auto gu = merged_weight_gradients(net, full_data, u).second;
    const auto gv = merged_weight_gradients(net, full_data, v).second;
    double num = 0.0, den = 0.0;
    for (std::size_t l = 0; l < u.size(); ++l) {
      const Matrix dg = gu[l] - gv[l];
      const Matrix dw = u[l] - v[l];
      num += std::pow(frobenius_norm(dg), 2);
      den += std::pow(frobenius_norm(dw), 2);
    }
    if (den > 0.0) c.tau_hat = std::max(c.tau_hat, std::sqrt(num / den));
  }

  const auto full_grad = merged_weight_gradients(net, full_data).second;
  double var = 0.0;
  for (const Batch& b : minibatches) {
    const auto g = merged_weight_gradients(net, b).second;
    c.g_hat = std::max(c.g_hat, detail::stacked_norm(g));
    double d = 0.0;
    for (std::size_t l = 0; l < g.size(); ++l) {
      d += std::pow(frobenius_norm(g[l] - full_grad[l]), 2);
    }
    var += d;
  }
  if (!minibatches.empty()) {
    c.sigma_hat = std::sqrt(var / static_cast<double>(minibatches.size()));
  }
  return c;
}

/// Fills a SharpnessReport. `net` may sit at the EMA-perturbed point; the
/// unperturbed B is taken from the state. The bound is filled in only when
/// constants are given and step >= 2.
inline SharpnessReport sharpness_report(const Network& net, const Batch& batch,
                                        const PerturbState& state,
                                        const SamOptions& opts = {},
                                        const AssumptionConstants* constants = nullptr) {
  SharpnessReport r;
  r.step = state.step_index;
  Network clean = net;
  if (state.currently_applied) {
    for (std::size_t l = 0; l < clean.layers.size(); ++l) clean.layers[l].b() = state.saved_b[l];
  }
  const double rho_t = state.step_index == 0
                           ? state.rho0
                           : rho_at(state.rho0, state.step_index, state.schedule);
  r.s_ema = sharpness_ema(clean, batch, state);
  r.s_sam = sharpness_lowrank(clean, batch, rho_t, opts);
  r.gap = std::abs(r.s_ema - r.s_sam);
  if (constants && state.step_index >= 2) {
    r.bound_rhs = ema_gap_bound(*constants, state.rho0, state.beta, state.step_index);
  }
  return r;
}

/// Brute-force reference for max over per-layer balls ||E_l||_F <= rho of
/// L(W + E) - L(W): the best of n_samples uniform-on-sphere draws and the SAM
/// direction itself.
inline double neighborhood_max_oracle(const Network& net, const Batch& batch,
                                      double rho, std::size_t n_samples,
                                      std::uint64_t seed) {
  if (n_samples < 1) throw DomainError("neighborhood_max_oracle: n_samples < 1");
  const double base = loss(net, batch);
  double best = base + sharpness_sam(net, batch, rho).value;
  Rng rng(seed);
  std::vector<Matrix> eps(net.layers.size());
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      Matrix e = rng.normal_matrix(net.layers[l].out_dim(), net.layers[l].in_dim());
      const double n = frobenius_norm(e);
      e *= n > 0.0 ? rho / n : 0.0;
      eps[l] = std::move(e);
    }
    best = std::max(best, loss_with_weight_offsets(net, batch, eps));
  }
  return best - base;
}

/// (||x||^2 - ||y||^2) / 2
inline double balancedness(std::span<const double> x, std::span<const double> y) {
  return 0.5 * (dot(x, x) - dot(y, y));
}

struct BalancednessTrace {
  std::vector<double> b;          // balancedness before each step
  std::vector<double> db_dt_abs;  // |B_{t+1} - B_t| / eta
  std::vector<double> rhs;        // rho / (s ||y_t||) * ||g_x~||
};

/// Flat-LoRA on L(x y^T) = ||x y^T - M*||_F^2 / 2 with x in R^n, y in R^m:
///   x~ = x + (rho/s) * G y / (||G|| ||y||^2),  y~ = y
///   x <- x - eta * G~ y~,  y <- y - eta * G~^T x~
/// with G and G~ the full-space gradients at (x, y) and (x~, y~). The
/// initial factors are Gaussian, rescaled to equal norms.
inline BalancednessTrace run_scale_invariant_flow(const Matrix& target, double rho,
                                                  double scale, double eta,
                                                  std::size_t steps,
                                                  std::uint64_t seed) {
  if (!(scale > 0.0)) throw DomainError("scale-invariant flow: scale <= 0");
  const std::size_t n = target.rows(), m = target.cols();
  Rng rng(seed);
  std::vector<double> x = rng.normal_vector(n);
  std::vector<double> y = rng.normal_vector(m);
  const double init_norm = std::sqrt(0.5 * frobenius_norm(target));
  const double nx = norm2(x), ny = norm2(y);
  for (double& v : x) v *= init_norm / nx;
  for (double& v : y) v *= init_norm / ny;

  // G = x y^T - M*
  auto residual = [&](std::span<const double> xs, std::span<const double> ys) {
    Matrix g(n, m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g(i, j) = xs[i] * ys[j] - target(i, j);
    return g;
  };

  BalancednessTrace trace;
  trace.b.reserve(steps);
  trace.db_dt_abs.reserve(steps);
  trace.rhs.reserve(steps);
  std::vector<double> x_t(n), gx(n), gy(m);
  for (std::size_t t = 0; t < steps; ++t) {
    const double y_norm = norm2(y);
    if (y_norm < 1e-12) {
      throw NumericalError("scale-invariant flow: degenerate factor y at step " +
                           std::to_string(t));
    }
    const Matrix g = residual(x, y);
    const double g_norm = frobenius_norm(g);
    // x~ = x + (rho/s) * (G/||G||) * y^+ with y^+ = y^T / ||y||^2
    x_t = x;
    if (g_norm > 0.0) {
      const double k = rho / (scale * g_norm * y_norm * y_norm);
      for (std::size_t i = 0; i < n; ++i) x_t[i] += k * dot(g.row(i), y);
    }
    const Matrix g_t = residual(x_t, y);
    for (std::size_t i = 0; i < n; ++i) gx[i] = dot(g_t.row(i), y);
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += g_t(i, j) * x_t[i];
      gy[j] = s;
    }
    const double b_before = balancedness(x, y);
    for (std::size_t i = 0; i < n; ++i) x[i] -= eta * gx[i];
    for (std::size_t j = 0; j < m; ++j) y[j] -= eta * gy[j];
    const double b_after = balancedness(x, y);

    trace.b.push_back(b_before);
    trace.db_dt_abs.push_back(std::abs(b_after - b_before) / eta);
    trace.rhs.push_back(std::abs(rho / (scale * y_norm) * norm2(gx)));
  }
  return trace;
}

struct LossMatchResidual {
  double projected_diff = 0.0;        // |L(W0+s(B+E^B)A) - L(W0+sBA+E^W A^+ A)|
  double unprojected_residual = 0.0;  // ||E^W (I - A^+ A)||_F
};

/// Compares the loss after perturbing B in layer `layer` with the loss after
/// adding the row-space projection of e_w_bar to that layer's merged weight.
inline LossMatchResidual loss_match_residual(const Network& net, const Batch& batch,
                                             std::size_t layer,
                                             const Matrix& e_w_bar,
                                             const Matrix& e_b,
                                             double tol = kDefaultRankTol) {
  if (layer >= net.layers.size()) throw ShapeError("loss_match_residual: bad layer");
  const Matrix& a = net.layers[layer].a();
  const Matrix projector = row_space_projector(a, tol);
  const Matrix projected = matmul(e_w_bar, projector);

  std::vector<Matrix> offsets(net.layers.size());
  offsets[layer] = projected;
  const double full_space = loss_with_weight_offsets(net, batch, offsets);

  Network probe = net;
  std::vector<Matrix> e(net.layers.size());
  for (std::size_t l = 0; l < e.size(); ++l) {
    e[l] = l == layer ? e_b : Matrix(probe.layers[l].b().rows(),
                                     probe.layers[l].b().cols());
  }
  BPerturbation applied(probe, e);
  const double low_rank = loss(probe, batch);

  return {std::abs(low_rank - full_space), frobenius_norm(e_w_bar - projected)};
}

}  // namespace flatlora
