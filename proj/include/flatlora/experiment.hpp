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

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flatlora/config.hpp"
#include "flatlora/diagnostics.hpp"
#include "flatlora/model.hpp"
#include "flatlora/optimizers.hpp"
#include "flatlora/tasks.hpp"

namespace flatlora {

/// One row of the metrics CSV. Columns appear in declaration order.
struct MetricsRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double sharpness_sam = 0.0;
  double sharpness_ema = std::numeric_limits<double>::quiet_NaN();
  double gap = std::numeric_limits<double>::quiet_NaN();
  double balancedness = 0.0;
  std::size_t grad_evals_cumulative = 0;
  double wall_time_ms_cumulative = 0.0;
  double perturb_norm = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,train_loss,eval_loss,sharpness_sam,sharpness_ema,gap,balancedness,"
    "grad_evals_cumulative,wall_time_ms_cumulative,perturb_norm";

inline std::string to_csv_row(const MetricsRecord& r) {
  using detail::format_double;
  std::string s = std::to_string(r.step);
  for (double v : {r.train_loss, r.eval_loss, r.sharpness_sam, r.sharpness_ema,
                   r.gap, r.balancedness}) {
    s += ',';
    s += format_double(v);
  }
  s += ',' + std::to_string(r.grad_evals_cumulative);
  s += ',' + format_double(r.wall_time_ms_cumulative);
  s += ',' + format_double(r.perturb_norm);
  return s;
}

inline void write_metrics_csv(std::ostream& out,
                              const std::vector<MetricsRecord>& records) {
  out << kMetricsHeader << '\n';
  for (const MetricsRecord& r : records) out << to_csv_row(r) << '\n';
}

struct RunSummary {
  std::string config_hash;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::lora;
  std::size_t steps = 0;
  double final_train_loss = 0.0;
  double final_eval_loss = 0.0;
  double final_sharpness = 0.0;
  std::optional<double> final_eval_accuracy;  // classification tasks
  double total_wall_time_ms = 0.0;
  std::size_t total_grad_evals = 0;
  double median_step_time_us = 0.0;
  std::optional<double> speed_ratio_vs_lora;  // filled in by bench
};

inline nlohmann::json to_json(const RunSummary& s) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {
      {"config_hash", s.config_hash},
      {"seed", s.seed},
      {"optimizer", std::string(to_string(s.optimizer))},
      {"steps", s.steps},
      {"final_train_loss", s.final_train_loss},
      {"final_eval_loss", s.final_eval_loss},
      {"final_sharpness_sam", s.final_sharpness},
      {"final_eval_accuracy", opt(s.final_eval_accuracy)},
      {"total_wall_time_ms", s.total_wall_time_ms},
      {"total_grad_evals", s.total_grad_evals},
      {"median_step_time_us", s.median_step_time_us},
      {"speed_ratio_vs_lora", opt(s.speed_ratio_vs_lora)},
  };
}

struct RunResult {
  std::vector<MetricsRecord> records;
  RunSummary summary;
  std::vector<double> step_time_ns;  // wall time of each step function call
  Network final_network;             // unperturbed parameters after the run
};

struct RunOptions {
  /// Called with each record as soon as it is computed.
  std::function<void(const MetricsRecord&)> on_record;
  SamOptions sam_overrides;  // fault injection only; variant/tol come from cfg
};

/// Raised when a step produces a non-finite loss or parameter.
class NumericalAbort : public NumericalError {
 public:
  NumericalAbort(std::size_t step, const std::string& what)
      : NumericalError("step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

inline double factor_balancedness(const Network& net) {
  double b = 0.0;
  for (const LoRALinear& layer : net.layers) {
    b += 0.5 * (std::pow(frobenius_norm(layer.b()), 2) -
                std::pow(frobenius_norm(layer.a()), 2));
  }
  return b;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

inline LowRankOptimizer::Settings optimizer_settings(const ExperimentConfig& c) {
  LowRankOptimizer::Settings s;
  s.kind = c.optimizer;
  s.base = {c.eta, c.momentum, c.weight_decay};
  s.rho0 = c.rho0;
  s.beta = c.beta;
  s.schedule = c.effective_schedule();
  s.sam.variant = c.direction_variant;
  s.sam.svd_tol = c.svd_tol;
  return s;
}

/// Trains for cfg.steps. Diagnostics run every eval_every steps and after the
/// last step, always at unperturbed parameters; eval_every = 0 disables them.
/// Only the step function itself is timed.
inline RunResult run_experiment(const ExperimentConfig& cfg,
                                const RunOptions& options = {}) {
  validate(cfg);
  const Task task = generate_task(cfg);
  Network net = build_network(cfg, task);
  LowRankOptimizer::Settings settings = optimizer_settings(cfg);
  settings.sam.fault = options.sam_overrides.fault;
  LowRankOptimizer opt(net, settings);
  BatchSampler sampler(task.train, cfg.batch_size, Rng(cfg.seed).split(3).next_u64());

  RunResult result;
  result.step_time_ns.reserve(cfg.steps);
  std::size_t grad_evals = 0;
  double wall_ms = 0.0;
  double last_perturb = 0.0;

  auto record = [&](std::size_t step) {
    UnperturbedScope scope = opt.unperturbed(net);
    MetricsRecord r;
    r.step = step;
    r.train_loss = loss(net, task.train);
    r.eval_loss = loss(net, task.eval);
    r.sharpness_sam = sharpness_sam(net, task.train, cfg.rho0).value;
    if (const PerturbState* st = opt.perturb_state()) {
      const SharpnessReport rep = sharpness_report(net, task.train, *st, settings.sam);
      r.sharpness_ema = rep.s_ema;
      r.gap = rep.gap;
    }
    r.balancedness = factor_balancedness(net);
    r.grad_evals_cumulative = grad_evals;
    r.wall_time_ms_cumulative = cfg.csv_wall_time ? wall_ms : 0.0;
    r.perturb_norm = last_perturb;
    if (options.on_record) options.on_record(r);
    result.records.push_back(r);
  };

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const Batch batch = sampler.next();
    const StepStats stats = opt.step(net, batch);
    grad_evals += static_cast<std::size_t>(stats.grad_evals);
    const double ns = static_cast<double>(stats.wall_time.count());
    wall_ms += ns * 1e-6;
    result.step_time_ns.push_back(ns);
    last_perturb = stats.perturb_norm;
    if (!std::isfinite(stats.loss_original) || !std::isfinite(stats.loss_perturbed)) {
      throw NumericalAbort(step, "non-finite loss");
    }
    bool finite = true;
    for (const LoRALinear& layer : net.layers) {
      finite = finite && layer.b().all_finite() && layer.a().all_finite();
    }
    if (!finite) throw NumericalAbort(step, "non-finite parameters");
    if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      record(step);
    }
  }

  {
    UnperturbedScope scope = opt.unperturbed(net);
    result.final_network = net;
  }
  RunSummary& s = result.summary;
  s.config_hash = config_hash(cfg);
  s.seed = cfg.seed;
  s.optimizer = cfg.optimizer;
  s.steps = cfg.steps;
  s.final_train_loss = loss(result.final_network, task.train);
  s.final_eval_loss = loss(result.final_network, task.eval);
  s.final_sharpness = sharpness_sam(result.final_network, task.train, cfg.rho0).value;
  if (task.loss == LossKind::softmax_cross_entropy) {
    s.final_eval_accuracy = accuracy(result.final_network, task.eval);
  }
  s.total_wall_time_ms = wall_ms;
  s.total_grad_evals = grad_evals;
  s.median_step_time_us = median(result.step_time_ns) * 1e-3;
  return result;
}

struct RunFiles {
  std::filesystem::path csv;
  std::filesystem::path summary;
};

inline RunFiles output_paths(const ExperimentConfig& cfg,
                             const std::filesystem::path& dir) {
  const std::string stem = config_hash(cfg) + "_" + std::to_string(cfg.seed);
  return {dir / (stem + ".csv"), dir / (stem + ".summary.json")};
}

/// Runs the experiment, streaming records into `<hash>_<seed>.csv` and
/// writing `<hash>_<seed>.summary.json` at the end.
inline RunResult run_to_directory(const ExperimentConfig& cfg,
                                  const std::filesystem::path& dir,
                                  RunOptions options = {}) {
  std::filesystem::create_directories(dir);
  const RunFiles files = output_paths(cfg, dir);
  std::ofstream csv(files.csv, std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + files.csv.string());
  csv << kMetricsHeader << '\n';
  auto user = options.on_record;
  options.on_record = [&](const MetricsRecord& r) {
    csv << to_csv_row(r) << '\n';
    csv.flush();
    if (user) user(r);
  };
  RunResult result = run_experiment(cfg, options);
  std::ofstream js(files.summary, std::ios::binary);
  nlohmann::json j = to_json(result.summary);
  j["config"] = serialize(cfg);
  js << j.dump(2) << '\n';
  return result;
}

}  // namespace flatlora
