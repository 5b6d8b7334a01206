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

// Self-check suite behind `flatlora verify`. Every check reports the worst
// residual it observed against a fixed tolerance. Checks compare library
// routines with small reference computations written out here (naive loops,
// finite differences, explicit compositions of the step rules).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "flatlora/config.hpp"
#include "flatlora/diagnostics.hpp"
#include "flatlora/experiment.hpp"
#include "flatlora/linalg.hpp"
#include "flatlora/model.hpp"
#include "flatlora/optimizers.hpp"
#include "flatlora/rng.hpp"

namespace flatlora {

struct CheckResult {
  std::string module;
  std::string invariant;
  double residual = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  bool informational = false;  // reported, never a failure
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) {
      return c.informational || c.passed;
    });
  }
};

struct VerifyOptions {
  std::uint64_t seed = 20260101;
  std::size_t trials = 50;
  Fault fault = Fault::none;  // injected into every flat-lora step exercised
};

inline void print_report(std::ostream& out, const VerifyReport& report) {
  for (const CheckResult& c : report.checks) {
    const char* tag = c.informational ? "INFO" : (c.passed ? "PASS" : "FAIL");
    out << '[' << tag << "] " << c.module << ": " << c.invariant
        << "  residual=" << detail::format_double(c.residual);
    if (!c.informational) out << "  tol=" << detail::format_double(c.tolerance);
    out << '\n';
  }
}

namespace detail {

struct RandomNetSpec {
  std::size_t max_dim = 8;
  std::size_t min_layers = 1;
  std::size_t max_layers = 3;
  bool smooth_only = false;  // exclude relu (finite differences)
};

// Random network with nonzero B so every gradient path is exercised.
inline Network random_network(Rng& rng, const RandomNetSpec& spec) {
  const std::size_t depth =
      spec.min_layers + rng.below(spec.max_layers - spec.min_layers + 1);
  std::vector<std::size_t> dims(depth + 1);
  for (auto& d : dims) d = 1 + rng.below(spec.max_dim);
  Network net;
  const std::size_t act = rng.below(spec.smooth_only ? 2 : 3);
  net.activation = act == 0 ? Activation::tanh
                            : (act == 1 ? Activation::identity : Activation::relu);
  net.loss = rng.below(2) == 0 ? LossKind::mse : LossKind::softmax_cross_entropy;
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t n = dims[l + 1], m = dims[l];
    const std::size_t r = 1 + rng.below(std::min(n, m));
    const double s = 0.5 + rng.uniform();
    net.layers.emplace_back(rng.normal_matrix(n, m, 0.7), rng.normal_matrix(n, r, 0.5),
                            rng.normal_matrix(r, m, 0.5), s);
  }
  return net;
}

inline Batch random_batch(Rng& rng, const Network& net, std::size_t size) {
  Batch b{rng.normal_matrix(net.input_dim(), size),
          Matrix(net.output_dim(), size)};
  if (net.loss == LossKind::mse) {
    b.targets = rng.normal_matrix(net.output_dim(), size);
  } else {
    for (std::size_t j = 0; j < size; ++j) b.targets(rng.below(net.output_dim()), j) = 1.0;
  }
  return b;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline double max_abs_diff_all(const Network& x, const Network& y) {
  double d = 0.0;
  for (std::size_t l = 0; l < x.layers.size(); ++l) {
    d = std::max(d, max_abs_diff(x.layers[l].b(), y.layers[l].b()));
    d = std::max(d, max_abs_diff(x.layers[l].a(), y.layers[l].a()));
  }
  return d;
}

class CheckRecorder {
 public:
  explicit CheckRecorder(VerifyReport& r) : report_(r) {}

  void add(std::string module, std::string invariant, double residual,
           double tolerance) {
    report_.checks.push_back({std::move(module), std::move(invariant), residual,
                              tolerance, residual <= tolerance, false});
  }
  void info(std::string module, std::string invariant, double value) {
    report_.checks.push_back(
        {std::move(module), std::move(invariant), value, 0.0, true, true});
  }
  // Runs `body`; an exception is recorded as a failure of that check.
  void guarded(const std::string& module, const std::string& invariant,
               double tolerance, const std::function<double()>& body) {
    try {
      add(module, invariant, body(), tolerance);
    } catch (const std::exception& e) {
      report_.checks.push_back({module, invariant + " (threw: " + e.what() + ")",
                                std::numeric_limits<double>::infinity(), tolerance,
                                false, false});
    }
  }

 private:
  VerifyReport& report_;
};

}  // namespace detail

/// Runs every invariant check. Fault injection, when set, is applied to the
/// flat-lora steps so the suite can demonstrate that it notices.
inline VerifyReport verify(const VerifyOptions& opt = {}) {
  using namespace detail;
  VerifyReport report;
  CheckRecorder rec(report);
  Rng rng(opt.seed);
  SamOptions sam;
  sam.fault = opt.fault;

  // linalg
  rec.guarded("linalg", "Moore-Penrose conditions (relative)", 1e-9, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const std::size_t r = 1 + rng.below(8), c = 1 + rng.below(8);
      const std::size_t k = 1 + rng.below(std::min(r, c));
      const Matrix m = matmul(rng.normal_matrix(r, k), rng.normal_matrix(k, c));
      const Matrix p = pseudo_inverse(m);
      const Matrix mp = matmul(m, p), pm = matmul(p, m);
      worst = std::max({worst,
                        max_abs_diff(matmul(mp, m), m) / std::max(1.0, frobenius_norm(m)),
                        max_abs_diff(matmul(pm, p), p) / std::max(1.0, frobenius_norm(p)),
                        max_abs_diff(mp, transpose(mp)), max_abs_diff(pm, transpose(pm))});
    }
    return worst;
  });
  rec.guarded("linalg", "projectors idempotent and symmetric", 1e-10, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(10);
      const Matrix a = rng.normal_matrix(r, c);
      for (const Matrix& p : {row_space_projector(a), col_space_projector(a)}) {
        worst = std::max({worst, max_abs_diff(matmul(p, p), p),
                          max_abs_diff(p, transpose(p))});
      }
    }
    return worst;
  });
  rec.guarded("linalg", "vectorize/matrixize round trip is exact", 0.0, [&] {
    const Matrix m = rng.normal_matrix(5, 7);
    return matrixize(vectorize(m), 5, 7) == m ? 0.0 : 1.0;
  });
  rec.guarded("linalg", "matmul agrees with triple loop", 1e-12, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const std::size_t i = 1 + rng.below(16), k = 1 + rng.below(16), j = 1 + rng.below(16);
      const Matrix a = rng.normal_matrix(i, k), b = rng.normal_matrix(k, j);
      worst = std::max(worst, max_abs_diff(matmul(a, b), naive_matmul(a, b)));
    }
    return worst;
  });

  // model
  rec.guarded("model", "gradients match central differences (relative)", 1e-4, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < std::max<std::size_t>(opt.trials / 10, 3); ++t) {
      Network net = random_network(rng, {6, 1, 3, true});
      const Batch batch = random_batch(rng, net, 1 + rng.below(6));
      const GradientSet g = backward(net, batch);
      constexpr double h = 1e-5;
      for (std::size_t l = 0; l < net.layers.size(); ++l) {
        for (int which = 0; which < 2; ++which) {
          Matrix& p = which == 0 ? net.layers[l].b() : net.layers[l].a();
          const Matrix& an = which == 0 ? g.layers[l].grad_b : g.layers[l].grad_a;
          for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p.data()[i];
            p.data()[i] = orig + h;
            const double up = loss(net, batch);
            p.data()[i] = orig - h;
            const double dn = loss(net, batch);
            p.data()[i] = orig;
            const double fd = (up - dn) / (2 * h);
            const double a = an.data()[i];
            worst = std::max(worst, std::abs(a - fd) /
                                        std::max({std::abs(a), std::abs(fd), 1e-5}));
          }
        }
      }
    }
    return worst;
  });
  rec.guarded("model", "chain identities grad_b = s G A^T, grad_a = s B^T G", 1e-10, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const Network net = random_network(rng, {});
      const Batch batch = random_batch(rng, net, 1 + rng.below(8));
      const GradientSet g = backward(net, batch, true);
      for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& L = net.layers[l];
        const Matrix& gw = *g.layers[l].grad_w;
        worst = std::max(worst, max_abs_diff(g.layers[l].grad_b,
                                             naive_matmul(gw, transpose(L.a())) * L.scale()));
        worst = std::max(worst, max_abs_diff(g.layers[l].grad_a,
                                             naive_matmul(transpose(L.b()), gw) * L.scale()));
      }
    }
    return worst;
  });
  rec.guarded("optimizers", "reconstruction equals 0.5 (G P_A + P_B G)", 1e-9, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const Network net = random_network(rng, {});
      const Batch batch = random_batch(rng, net, 1 + rng.below(8));
      const GradientSet g = backward(net, batch, true);
      for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& L = net.layers[l];
        const Matrix& gw = *g.layers[l].grad_w;
        const Matrix expect = (naive_matmul(gw, row_space_projector(L.a())) +
                               naive_matmul(col_space_projector(L.b()), gw)) * 0.5;
        const Matrix got = reconstruct_full_gradient(g.layers[l].grad_b, g.layers[l].grad_a,
                                                     L.a(), L.b(), L.scale());
        worst = std::max(worst, max_abs_diff(got, expect));
      }
    }
    return worst;
  });
  rec.guarded("model", "forward equals merged-weight network", 1e-12, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const Network net = random_network(rng, {});
      const Batch batch = random_batch(rng, net, 1 + rng.below(8));
      Matrix h = batch.inputs;
      for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& L = net.layers[l];
        const Matrix w = L.w0() + naive_matmul(L.b(), L.a()) * L.scale();
        h = naive_matmul(w, h);
        if (l + 1 < net.layers.size()) detail::activate(net.activation, h);
      }
      worst = std::max(worst, max_abs_diff(forward(net, batch).predictions, h));
    }
    return worst;
  });

  // optimizers
  const BaseUpdateConfig base{0.05, 0.9, 1e-3};
  rec.guarded("optimizers", "W0 frozen under every step rule", 0.0, [&] {
    double changed = 0.0;
    Network net = random_network(rng, {});
    const Batch batch = random_batch(rng, net, 4);
    std::vector<Matrix> w0;
    for (const auto& L : net.layers) w0.push_back(L.w0());
    MomentumBuffers mb;
    PerturbState st = PerturbState::zeros(net, 0.05, 0.9);
    for (int k = 0; k < 3; ++k) {
      lora_step(net, batch, base, mb);
      lora_sam_step(net, batch, 0.05, base, mb);
      remove_ema_perturbation(net, st);
      flat_lora_step(net, batch, 0.05, base, mb, sam);
      if (st.step_index > 0) apply_ema_perturbation(net, st);
      eflat_lora_step(net, batch, st, base, mb, sam);
    }
    for (std::size_t l = 0; l < w0.size(); ++l) changed += !(net.layers[l].w0() == w0[l]);
    return changed;
  });
  rec.guarded("optimizers", "rho = 0 reproduces the plain LoRA step", 1e-12, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials / 5 + 1; ++t) {
      const Network start = random_network(rng, {});
      const Batch batch = random_batch(rng, start, 4);
      Network ref = start;
      MomentumBuffers mref;
      lora_step(ref, batch, base, mref);
      Network x = start, y = start, z = start;
      MomentumBuffers mx, my, mz;
      lora_sam_step(x, batch, 0.0, base, mx);
      flat_lora_step(y, batch, 0.0, base, my, sam);
      PerturbState st = PerturbState::zeros(z, 0.0, 0.9);
      eflat_lora_step(z, batch, st, base, mz, sam);
      remove_ema_perturbation(z, st);
      worst = std::max({worst, max_abs_diff_all(ref, x), max_abs_diff_all(ref, y),
                        max_abs_diff_all(ref, z)});
    }
    return worst;
  });
  rec.guarded("optimizers", "flat-lora step equals reference composition", 1e-12, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials / 5 + 1; ++t) {
      const Network start = random_network(rng, {});
      const Batch batch = random_batch(rng, start, 4);
      const double rho = 0.05 + 0.1 * rng.uniform();
      Network got = start;
      MomentumBuffers mg;
      flat_lora_step(got, batch, rho, base, mg, sam);

      Network ref = start;
      MomentumBuffers mr;
      const GradientSet g0 = backward(ref, batch);
      const LowRankPerturbation p = perturbation_from_gradients(ref, g0, rho, {});
      Network probe = ref;
      for (std::size_t l = 0; l < probe.layers.size(); ++l) probe.layers[l].b() += p.e_b[l];
      base_update(ref, backward(probe, batch), base, mr);
      worst = std::max(worst, max_abs_diff_all(ref, got));
    }
    return worst;
  });
  rec.guarded("optimizers", "per-layer perturbation norm equals rho", 1e-10, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const Network net = random_network(rng, {});
      const Batch batch = random_batch(rng, net, 4);
      const double rho = 0.01 + rng.uniform();
      const LowRankPerturbation p = perturbation_from_rho(net, batch, rho, sam);
      for (const Matrix& e : p.e_w_bar) {
        const double n = frobenius_norm(e);
        if (n > 0.0) worst = std::max(worst, std::abs(n - rho));
      }
    }
    return worst;
  });
  double unprojected = 0.0;
  rec.guarded("optimizers", "loss-match identity with projected perturbation", 1e-10, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const Network net = random_network(rng, {});
      const Batch batch = random_batch(rng, net, 4);
      const LowRankPerturbation p = perturbation_from_rho(net, batch, 0.1, sam);
      for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const LossMatchResidual r =
            loss_match_residual(net, batch, l, p.e_w_bar[l], p.e_b[l]);
        worst = std::max(worst, r.projected_diff);
        unprojected = std::max(unprojected, r.unprojected_residual);
      }
    }
    return worst;
  });
  rec.info("optimizers", "max ||E^W (I - A^+ A)||_F not representable through B",
           unprojected);
  rec.guarded("optimizers", "exact transfer when A is square and invertible", 1e-9, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const std::size_t m = 1 + rng.below(6), n = m + rng.below(4);
      Network net;
      net.activation = Activation::identity;
      net.layers.emplace_back(rng.normal_matrix(n, m), rng.normal_matrix(n, m),
                              rng.normal_matrix(m, m) + Matrix::identity(m) * 3.0,
                              0.5 + rng.uniform());
      const Batch batch = random_batch(rng, net, 4);
      const LowRankPerturbation p = perturbation_from_rho(net, batch, 0.2, sam);
      const auto& L = net.layers[0];
      worst = std::max(worst, max_abs_diff(effective_full_perturbation(p.e_b[0], L.a(),
                                                                       L.scale()),
                                           p.e_w_bar[0]));
    }
    return worst;
  });
  rec.guarded("optimizers", "EMA equals closed-form geometric sum over 10 steps", 1e-10, [&] {
    Network net = random_network(rng, {});
    const Batch batch = random_batch(rng, net, 6);
    const double beta = 0.3;
    PerturbState st = PerturbState::zeros(net, 0.1, beta);
    MomentumBuffers mb;
    std::vector<std::vector<Matrix>> history;
    for (int k = 0; k < 10; ++k) {
      eflat_lora_step(net, batch, st, base, mb, sam);
      history.push_back(st.last_e_b);
    }
    double worst = 0.0;
    const std::size_t t = history.size();
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      Matrix closed(st.ema_e_b[l].rows(), st.ema_e_b[l].cols());
      for (std::size_t k = 1; k <= t; ++k) {
        closed.add_scaled(history[k - 1][l],
                          beta * std::pow(1.0 - beta, static_cast<double>(t - k)));
      }
      worst = std::max(worst, max_abs_diff(closed, st.ema_e_b[l]));
    }
    return worst;
  });
  rec.guarded("optimizers", "gradient evaluations per step are 1, 2, 2, 1", 0.0, [&] {
    Network net = random_network(rng, {});
    const Batch batch = random_batch(rng, net, 4);
    MomentumBuffers mb;
    PerturbState st = PerturbState::zeros(net, 0.05, 0.9);
    Network n2 = net, n3 = net, n4 = net;
    MomentumBuffers m2, m3, m4;
    const int a = lora_step(net, batch, base, mb).grad_evals;
    const int b = lora_sam_step(n2, batch, 0.05, base, m2).grad_evals;
    const int c = flat_lora_step(n3, batch, 0.05, base, m3, sam).grad_evals;
    const int d = eflat_lora_step(n4, batch, st, base, m4, sam).grad_evals;
    return static_cast<double>(std::abs(a - 1) + std::abs(b - 2) + std::abs(c - 2) +
                               std::abs(d - 1));
  });

  // diagnostics
  rec.guarded("diagnostics", "neighborhood oracle >= SAM sharpness", 0.0, [&] {
    double worst = 0.0;
    for (std::size_t t = 0; t < opt.trials / 5 + 1; ++t) {
      const Network net = random_network(rng, {});
      const Batch batch = random_batch(rng, net, 4);
      const double s = sharpness_sam(net, batch, 0.05).value;
      const double o = neighborhood_max_oracle(net, batch, 0.05, 20, rng.next_u64());
      worst = std::max(worst, s - o);
    }
    return worst;
  });
  rec.guarded("diagnostics", "balancedness drift within bound (eta=1e-4, 10% slack)", 0.0,
              [&] {
                Matrix target = matmul(rng.normal_matrix(6, 1), rng.normal_matrix(1, 5));
                const BalancednessTrace tr =
                    run_scale_invariant_flow(target, 0.1, 1.0, 1e-4, 1000, rng.next_u64());
                double worst = 0.0;
                for (std::size_t i = 0; i < tr.rhs.size(); ++i) {
                  worst = std::max(worst, tr.db_dt_abs[i] - 1.1 * tr.rhs[i]);
                }
                return std::max(worst, 0.0);
              });

  // harness
  rec.guarded("harness", "config text round trip", 0.0, [&] {
    ExperimentConfig c;
    c.optimizer = OptimizerKind::eflat_lora;
    c.rho0 = 0.123;
    c.layer_dims = {5, 7, 3};
    c.rank = 2;
    return serialize(parse_config_string(serialize(c))) == serialize(c) ? 0.0 : 1.0;
  });
  rec.guarded("harness", "metrics CSV replays bit-identically", 0.0, [&] {
    ExperimentConfig c;
    c.optimizer = OptimizerKind::flat_lora;
    c.layer_dims = {6, 6, 3};
    c.rank = 2;
    c.steps = 40;
    c.eval_every = 10;
    c.train_size = 64;
    c.eval_size = 32;
    c.batch_size = 16;
    c.seed = rng.next_u64() % 1000;
    RunOptions ro;
    ro.sam_overrides = sam;
    std::ostringstream a, b;
    write_metrics_csv(a, run_experiment(c, ro).records);
    write_metrics_csv(b, run_experiment(c, ro).records);
    return a.str() == b.str() ? 0.0 : 1.0;
  });
  return report;
}

}  // namespace flatlora
