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

// Step rules for low-rank adapters:
//   lora        plain momentum SGD on (B, A)
//   lora-sam    independent SAM perturbations on B and A
//   flat-lora   SAM perturbation in the merged-weight space, transferred to B
//               through the pseudo-inverse of A (two gradient evaluations)
//   eflat-lora  the same transfer, but the applied perturbation is an EMA of
//               past ones so each step needs a single gradient evaluation
//
// All sharpness-aware steps normalize the perturbation per layer.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flatlora/linalg.hpp"
#include "flatlora/model.hpp"

namespace flatlora {

enum class RhoSchedule { constant, inverse_sqrt };
enum class DirectionVariant { standard, sign_scaled };
enum class OptimizerKind { lora, lora_sam, flat_lora, eflat_lora };

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::lora: return "lora";
    case OptimizerKind::lora_sam: return "lora-sam";
    case OptimizerKind::flat_lora: return "flat-lora";
    case OptimizerKind::eflat_lora: return "eflat-lora";
  }
  return "?";
}
inline std::string_view to_string(RhoSchedule s) {
  return s == RhoSchedule::constant ? "constant" : "inverse-sqrt";
}
inline std::string_view to_string(DirectionVariant v) {
  return v == DirectionVariant::standard ? "standard" : "signed";
}

/// Perturbation radius at step t >= 1.
inline double rho_at(double rho0, std::size_t t, RhoSchedule schedule) {
  if (t == 0) throw DomainError("rho_at: step index starts at 1");
  if (schedule == RhoSchedule::constant) return rho0;
  return rho0 / std::sqrt(static_cast<double>(t));
}

/// Gradient norms below this are treated as zero; the layer gets no
/// perturbation.
inline constexpr double kDegenerateGradNorm = 1e-20;

struct SamDirection {
  std::vector<double> values;
  bool degenerate = false;
};

/// rho * g / ||g|| (standard) or rho * |g| / ||g|| (sign-scaled). Both have
/// norm rho; a zero gradient yields a zero vector flagged as degenerate.
inline SamDirection sam_direction(std::span<const double> g, double rho,
                                  DirectionVariant variant) {
  if (!(rho >= 0.0)) throw DomainError("sam_direction: rho must be non-negative");
  SamDirection out{std::vector<double>(g.size(), 0.0), false};
  const double n = norm2(g);
  if (!(n >= kDegenerateGradNorm)) {
    out.degenerate = true;
    return out;
  }
  const double k = rho / n;
  for (std::size_t i = 0; i < g.size(); ++i) {
    out.values[i] = k * (variant == DirectionVariant::standard ? g[i] : std::abs(g[i]));
  }
  return out;
}

namespace detail {

// 0.5 * [(1/s) grad_b (A^T)^+ + (1/s) (B^T)^+ grad_a], using (M^T)^+ = (M^+)^T.
inline Matrix reconstruct_from_pinv(const Matrix& grad_b, const Matrix& grad_a,
                                    const Matrix& a_pinv, const Matrix& b_pinv,
                                    double scale) {
  Matrix g = matmul_nt(grad_b, a_pinv);
  g += matmul_tn(b_pinv, grad_a);
  g *= 0.5 / scale;
  return g;
}

}  // namespace detail

/// Estimate of the merged-weight gradient from the two factor gradients.
inline Matrix reconstruct_full_gradient(const Matrix& grad_b, const Matrix& grad_a,
                                        const Matrix& a, const Matrix& b,
                                        double scale,
                                        double tol = kDefaultRankTol) {
  if (!(scale > 0.0)) throw DomainError("reconstruct_full_gradient: scale <= 0");
  if (!grad_b.same_shape(b) || !grad_a.same_shape(a) || b.cols() != a.rows()) {
    throw ShapeError("reconstruct_full_gradient: grad_b " + grad_b.shape() +
                     ", B " + b.shape() + ", grad_a " + grad_a.shape() + ", A " +
                     a.shape());
  }
  return detail::reconstruct_from_pinv(grad_b, grad_a, pseudo_inverse(a, tol),
                                       pseudo_inverse(b, tol), scale);
}

/// E^B = (1/s) * E^W * A^+.
inline Matrix full_to_lowrank_perturbation(const Matrix& e_w_bar, const Matrix& a,
                                           double scale,
                                           double tol = kDefaultRankTol) {
  if (!(scale > 0.0)) throw DomainError("full_to_lowrank_perturbation: scale <= 0");
  if (e_w_bar.cols() != a.cols()) {
    throw ShapeError("full_to_lowrank_perturbation: E^W " + e_w_bar.shape() +
                     " vs A " + a.shape());
  }
  Matrix e_b = matmul(e_w_bar, pseudo_inverse(a, tol));
  e_b *= 1.0 / scale;
  return e_b;
}

/// Fault injection for the verify mutation check. Never set in normal use.
enum class Fault { none, skip_revert };

struct SamOptions {
  DirectionVariant variant = DirectionVariant::standard;
  double svd_tol = kDefaultRankTol;
  Fault fault = Fault::none;
};

struct LowRankPerturbation {
  std::vector<Matrix> e_w_bar;  // intended full-space perturbation per layer
  std::vector<Matrix> e_b;      // its transfer onto B
  std::size_t degenerate_layers = 0;

  double full_norm() const {
    double s = 0.0;
    for (const Matrix& m : e_w_bar) {
      const double n = frobenius_norm(m);
      s += n * n;
    }
    return std::sqrt(s);
  }
};

/// Per-layer flat perturbation from gradients already evaluated at the
/// network's current parameters.
inline LowRankPerturbation perturbation_from_gradients(const Network& net,
                                                       const GradientSet& grads,
                                                       double rho,
                                                       const SamOptions& opts) {
  if (rho < 0.0) throw DomainError("perturbation radius must be non-negative");
  if (grads.layers.size() != net.layers.size()) {
    throw ShapeError("gradient set does not match network depth");
  }
  LowRankPerturbation out;
  out.e_w_bar.reserve(net.layers.size());
  out.e_b.reserve(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const LoRALinear& layer = net.layers[l];
    const Matrix a_pinv = pseudo_inverse_fast(layer.a(), opts.svd_tol);
    const Matrix b_pinv = pseudo_inverse_fast(layer.b(), opts.svd_tol);
    const Matrix g_bar = detail::reconstruct_from_pinv(
        grads.layers[l].grad_b, grads.layers[l].grad_a, a_pinv, b_pinv,
        layer.scale());
    SamDirection dir = sam_direction(g_bar.data(), rho, opts.variant);
    if (dir.degenerate) ++out.degenerate_layers;
    Matrix e_w = matrixize(dir.values, g_bar.rows(), g_bar.cols());
    Matrix e_b = matmul(e_w, a_pinv);
    e_b *= 1.0 / layer.scale();
    out.e_w_bar.push_back(std::move(e_w));
    out.e_b.push_back(std::move(e_b));
  }
  return out;
}

/// One backward pass at the current parameters, then the per-layer transfer.
inline LowRankPerturbation perturbation_from_rho(const Network& net,
                                                 const Batch& batch, double rho,
                                                 const SamOptions& opts = {}) {
  return perturbation_from_gradients(net, backward(net, batch), rho, opts);
}

struct BaseUpdateConfig {
  double learning_rate = 0.05;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

/// Velocity buffers for B and A, allocated on first use.
struct MomentumBuffers {
  std::vector<Matrix> b;
  std::vector<Matrix> a;
};

/// v := mu*v + (g + lambda*p);  p := p - eta*v. Touches B and A only.
inline void base_update(Network& net, const GradientSet& grads,
                        const BaseUpdateConfig& cfg, MomentumBuffers& buffers) {
  if (grads.layers.size() != net.layers.size()) {
    throw ShapeError("base_update: gradient set does not match network depth");
  }
  if (buffers.b.empty()) {
    for (const LoRALinear& layer : net.layers) {
      buffers.b.emplace_back(layer.b().rows(), layer.b().cols());
      buffers.a.emplace_back(layer.a().rows(), layer.a().cols());
    }
  }
  auto update = [&](Matrix& param, const Matrix& grad, Matrix& v) {
    if (!grad.same_shape(param)) {
      throw ShapeError("base_update: gradient " + grad.shape() + " vs parameter " +
                       param.shape());
    }
    for (std::size_t i = 0; i < param.size(); ++i) {
      double& vi = v.data()[i];
      double& pi = param.data()[i];
      vi = cfg.momentum * vi + (grad.data()[i] + cfg.weight_decay * pi);
      pi -= cfg.learning_rate * vi;
    }
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    update(net.layers[l].b(), grads.layers[l].grad_b, buffers.b[l]);
    update(net.layers[l].a(), grads.layers[l].grad_a, buffers.a[l]);
  }
}

struct StepStats {
  int grad_evals = 0;
  double loss_original = 0.0;
  double loss_perturbed = 0.0;
  double perturb_norm = 0.0;
  std::size_t degenerate_layers = 0;
  std::chrono::nanoseconds wall_time{0};
};

namespace detail {

class StepTimer {
 public:
  explicit StepTimer(StepStats& s)
      : stats_(s), start_(std::chrono::steady_clock::now()) {}
  ~StepTimer() { stats_.wall_time = std::chrono::steady_clock::now() - start_; }

 private:
  StepStats& stats_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

inline StepStats lora_step(Network& net, const Batch& batch,
                           const BaseUpdateConfig& cfg, MomentumBuffers& buffers) {
  StepStats stats;
  {
    detail::StepTimer timer(stats);
    const GradientSet g = backward(net, batch);
    stats.grad_evals = 1;
    stats.loss_original = stats.loss_perturbed = g.loss;
    base_update(net, g, cfg, buffers);
  }
  return stats;
}

/// Naive SAM on both factors: E^B = rho*grad_b/||grad_b||, E^A likewise.
inline StepStats lora_sam_step(Network& net, const Batch& batch, double rho,
                               const BaseUpdateConfig& cfg,
                               MomentumBuffers& buffers) {
  if (rho < 0.0) throw DomainError("lora_sam_step: rho must be non-negative");
  StepStats stats;
  {
    detail::StepTimer timer(stats);
    const GradientSet g0 = backward(net, batch);
    stats.loss_original = g0.loss;

    std::vector<Matrix> saved_b, saved_a;
    saved_b.reserve(net.layers.size());
    saved_a.reserve(net.layers.size());
    double norm_sq = 0.0;
    auto perturb = [&](Matrix& param, const Matrix& grad) {
      const SamDirection d = sam_direction(grad.data(), rho, DirectionVariant::standard);
      if (d.degenerate) ++stats.degenerate_layers;
      for (std::size_t i = 0; i < param.size(); ++i) {
        param.data()[i] += d.values[i];
        norm_sq += d.values[i] * d.values[i];
      }
    };
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      saved_b.push_back(net.layers[l].b());
      saved_a.push_back(net.layers[l].a());
      perturb(net.layers[l].b(), g0.layers[l].grad_b);
      perturb(net.layers[l].a(), g0.layers[l].grad_a);
    }
    stats.perturb_norm = std::sqrt(norm_sq);

    const GradientSet g1 = backward(net, batch);
    stats.loss_perturbed = g1.loss;
    stats.grad_evals = 2;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      net.layers[l].b() = std::move(saved_b[l]);
      net.layers[l].a() = std::move(saved_a[l]);
    }
    base_update(net, g1, cfg, buffers);
  }
  return stats;
}

/// Full-space SAM perturbation transferred onto B (A is not perturbed);
/// the update uses gradients at (B + E^B, A).
inline StepStats flat_lora_step(Network& net, const Batch& batch, double rho,
                                const BaseUpdateConfig& cfg,
                                MomentumBuffers& buffers,
                                const SamOptions& opts = {}) {
  if (rho < 0.0) throw DomainError("flat_lora_step: rho must be non-negative");
  StepStats stats;
  {
    detail::StepTimer timer(stats);
    const GradientSet g0 = backward(net, batch);
    stats.loss_original = g0.loss;
    const LowRankPerturbation p = perturbation_from_gradients(net, g0, rho, opts);
    stats.perturb_norm = p.full_norm();
    stats.degenerate_layers = p.degenerate_layers;

    BPerturbation applied(net, p.e_b);
    const GradientSet g1 = backward(net, batch);
    stats.loss_perturbed = g1.loss;
    stats.grad_evals = 2;
    if (opts.fault == Fault::skip_revert) {
      applied.release();
    } else {
      applied.revert();
    }
    base_update(net, g1, cfg, buffers);
  }
  return stats;
}

/// EMA perturbation state. Between steps the network sits at the perturbed
/// point (B_t + ema_e_b, A_t); saved_b holds B_t exactly.
struct PerturbState {
  std::vector<Matrix> ema_e_b;
  std::vector<Matrix> last_e_b;
  std::vector<Matrix> saved_b;
  double rho0 = 0.05;
  double beta = 0.9;
  RhoSchedule schedule = RhoSchedule::inverse_sqrt;
  std::size_t step_index = 0;
  bool currently_applied = false;

  static PerturbState zeros(const Network& net, double rho0, double beta,
                            RhoSchedule schedule = RhoSchedule::inverse_sqrt) {
    if (!(beta > 0.0 && beta <= 1.0)) {
      throw DomainError("EMA coefficient beta must lie in (0, 1]");
    }
    if (rho0 < 0.0) throw DomainError("rho0 must be non-negative");
    PerturbState s;
    s.rho0 = rho0;
    s.beta = beta;
    s.schedule = schedule;
    for (const LoRALinear& layer : net.layers) {
      s.ema_e_b.emplace_back(layer.b().rows(), layer.b().cols());
      s.last_e_b.emplace_back(layer.b().rows(), layer.b().cols());
    }
    return s;
  }
};

/// Restores (B_t, A_t) exactly. No-op when nothing is applied.
inline void remove_ema_perturbation(Network& net, PerturbState& state) {
  if (!state.currently_applied) return;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    net.layers[l].b() = state.saved_b[l];
  }
  state.currently_applied = false;
}

/// Moves the network to (B_t + ema_e_b, A_t), remembering B_t.
inline void apply_ema_perturbation(Network& net, PerturbState& state) {
  if (state.currently_applied) {
    throw StateError("EMA perturbation is already applied");
  }
  if (state.ema_e_b.size() != net.layers.size()) {
    throw StateError("perturbation state does not match network depth");
  }
  state.saved_b.resize(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    state.saved_b[l] = net.layers[l].b();
    net.layers[l].b() += state.ema_e_b[l];
  }
  state.currently_applied = true;
}

/// Evaluates at unperturbed parameters for the lifetime of the scope. A null
/// state makes the scope a no-op.
class UnperturbedScope {
 public:
  UnperturbedScope(Network& net, PerturbState* state)
      : net_(net), state_(state), was_applied_(state && state->currently_applied) {
    if (state_) remove_ema_perturbation(net_, *state_);
  }
  UnperturbedScope(const UnperturbedScope&) = delete;
  UnperturbedScope& operator=(const UnperturbedScope&) = delete;
  ~UnperturbedScope() {
    if (was_applied_) apply_ema_perturbation(net_, *state_);
  }

 private:
  Network& net_;
  PerturbState* state_;
  bool was_applied_;
};

/// One gradient evaluation at the currently applied perturbed point. The
/// fresh perturbation E^B_t comes from those same gradients with radius
/// rho_t; the network is then reverted, updated, and moved to the next
/// perturbed point B_t + EMA_t.
inline StepStats eflat_lora_step(Network& net, const Batch& batch,
                                 PerturbState& state, const BaseUpdateConfig& cfg,
                                 MomentumBuffers& buffers,
                                 const SamOptions& opts = {}) {
  if (state.ema_e_b.size() != net.layers.size()) {
    throw StateError("perturbation state does not match network depth");
  }
  // Before the first step the network is unperturbed and the EMA is zero;
  // afterwards the perturbation must be in place.
  if (state.currently_applied != (state.step_index > 0)) {
    throw StateError(state.step_index == 0
                         ? "EMA perturbation applied before the first step"
                         : "EMA perturbation was removed and not re-applied");
  }
  StepStats stats;
  {
    detail::StepTimer timer(stats);
    const GradientSet g = backward(net, batch);
    stats.grad_evals = 1;
    stats.loss_perturbed = g.loss;

    const std::size_t t = state.step_index + 1;
    const double rho = rho_at(state.rho0, t, state.schedule);
    LowRankPerturbation p = perturbation_from_gradients(net, g, rho, opts);
    stats.perturb_norm = p.full_norm();
    stats.degenerate_layers = p.degenerate_layers;

    remove_ema_perturbation(net, state);
    base_update(net, g, cfg, buffers);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      Matrix& ema = state.ema_e_b[l];
      ema *= 1.0 - state.beta;
      ema.add_scaled(p.e_b[l], state.beta);
      state.last_e_b[l] = std::move(p.e_b[l]);
    }
    state.step_index = t;
    apply_ema_perturbation(net, state);
  }
  return stats;
}

struct MemoryCounts {
  std::size_t trainable = 0;  // sum over layers of n*r + r*m
  double optimizer_extra = 0.0;  // elements beyond plain LoRA
};

inline MemoryCounts param_and_memory_counts(const Network& net, OptimizerKind kind) {
  MemoryCounts c;
  for (const LoRALinear& layer : net.layers) {
    c.trainable += layer.out_dim() * layer.rank() + layer.rank() * layer.in_dim();
  }
  const double p = static_cast<double>(c.trainable);
  switch (kind) {
    case OptimizerKind::lora: c.optimizer_extra = 0.0; break;
    // Stored originals of B and A plus the gradient of A.
    case OptimizerKind::lora_sam:
    case OptimizerKind::flat_lora: c.optimizer_extra = 1.5 * p; break;
    // Stored originals plus the EMA perturbation.
    case OptimizerKind::eflat_lora: c.optimizer_extra = 2.0 * p; break;
  }
  return c;
}

/// Stateful wrapper that dispatches to one of the four step rules and keeps
/// the momentum buffers, EMA state, and step counter together.
class LowRankOptimizer {
 public:
  struct Settings {
    OptimizerKind kind = OptimizerKind::lora;
    BaseUpdateConfig base;
    double rho0 = 0.05;
    double beta = 0.9;
    RhoSchedule schedule = RhoSchedule::constant;
    SamOptions sam;
  };

  LowRankOptimizer(const Network& net, Settings settings)
      : settings_(settings) {
    if (settings_.kind == OptimizerKind::eflat_lora) {
      state_ = PerturbState::zeros(net, settings_.rho0, settings_.beta,
                                   settings_.schedule);
    }
  }

  StepStats step(Network& net, const Batch& batch) {
    ++t_;
    const double rho = rho_at(settings_.rho0, t_, settings_.schedule);
    switch (settings_.kind) {
      case OptimizerKind::lora:
        return lora_step(net, batch, settings_.base, buffers_);
      case OptimizerKind::lora_sam:
        return lora_sam_step(net, batch, rho, settings_.base, buffers_);
      case OptimizerKind::flat_lora:
        return flat_lora_step(net, batch, rho, settings_.base, buffers_,
                              settings_.sam);
      case OptimizerKind::eflat_lora:
        return eflat_lora_step(net, batch, *state_, settings_.base, buffers_,
                               settings_.sam);
    }
    return {};
  }

  /// Radius used by the most recent step (rho0 before any step).
  double current_rho() const {
    return t_ == 0 ? settings_.rho0 : rho_at(settings_.rho0, t_, settings_.schedule);
  }
  std::size_t steps_taken() const noexcept { return t_; }
  const Settings& settings() const noexcept { return settings_; }
  PerturbState* perturb_state() noexcept { return state_ ? &*state_ : nullptr; }
  const PerturbState* perturb_state() const noexcept {
    return state_ ? &*state_ : nullptr;
  }

  /// Removes any applied EMA perturbation until the scope ends.
  UnperturbedScope unperturbed(Network& net) {
    return {net, state_ ? &*state_ : nullptr};
  }

 private:
  Settings settings_;
  MomentumBuffers buffers_;
  std::optional<PerturbState> state_;
  std::size_t t_ = 0;
};

}  // namespace flatlora
