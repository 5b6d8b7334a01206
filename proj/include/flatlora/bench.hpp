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

// Per-step cost of each optimizer relative to plain LoRA on one task.

#include <ostream>
#include <vector>

#include "json.hpp"

#include "flatlora/config.hpp"
#include "flatlora/experiment.hpp"
#include "flatlora/optimizers.hpp"

namespace flatlora {

struct BenchRow {
  OptimizerKind optimizer = OptimizerKind::lora;
  double median_step_us = 0.0;
  double speed_ratio = 0.0;       // median step time / lora median step time
  double grad_evals_per_step = 0.0;
  double grad_eval_ratio = 0.0;
  MemoryCounts memory;
};

struct BenchReport {
  std::string config_hash;
  std::size_t repeats = 0;
  std::vector<BenchRow> rows;

  const BenchRow& row(OptimizerKind k) const {
    for (const BenchRow& r : rows)
      if (r.optimizer == k) return r;
    throw std::out_of_range("optimizer not benchmarked");
  }
};

/// Runs `base` once per optimizer per repeat with diagnostics disabled. Runs
/// are interleaved across optimizers so slow drift in machine load affects
/// all of them alike. Only the optimizer differs between runs.
inline BenchReport bench(const ExperimentConfig& base, std::size_t repeats,
                         std::vector<OptimizerKind> kinds = {
                             OptimizerKind::lora, OptimizerKind::lora_sam,
                             OptimizerKind::flat_lora, OptimizerKind::eflat_lora}) {
  if (repeats == 0) throw DomainError("bench: repeats must be positive");
  if (std::find(kinds.begin(), kinds.end(), OptimizerKind::lora) == kinds.end()) {
    kinds.insert(kinds.begin(), OptimizerKind::lora);
  }
  std::vector<std::vector<double>> times(kinds.size());
  std::vector<std::size_t> evals(kinds.size(), 0), steps(kinds.size(), 0);
  std::vector<MemoryCounts> memory(kinds.size());
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    for (std::size_t k = 0; k < kinds.size(); ++k) {
      ExperimentConfig cfg = base;
      cfg.optimizer = kinds[k];
      cfg.eval_every = 0;
      RunResult r = run_experiment(cfg);
      times[k].insert(times[k].end(), r.step_time_ns.begin(), r.step_time_ns.end());
      evals[k] += r.summary.total_grad_evals;
      steps[k] += cfg.steps;
      memory[k] = param_and_memory_counts(r.final_network, kinds[k]);
    }
  }
  BenchReport report;
  report.config_hash = config_hash(base);
  report.repeats = repeats;
  double lora_med = 0.0, lora_evals = 0.0;
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    BenchRow row;
    row.optimizer = kinds[k];
    row.median_step_us = median(times[k]) * 1e-3;
    row.grad_evals_per_step =
        steps[k] ? static_cast<double>(evals[k]) / static_cast<double>(steps[k]) : 0.0;
    row.memory = memory[k];
    if (kinds[k] == OptimizerKind::lora) {
      lora_med = row.median_step_us;
      lora_evals = row.grad_evals_per_step;
    }
    report.rows.push_back(row);
  }
  for (BenchRow& row : report.rows) {
    row.speed_ratio = lora_med > 0.0 ? row.median_step_us / lora_med : 0.0;
    row.grad_eval_ratio = lora_evals > 0.0 ? row.grad_evals_per_step / lora_evals : 0.0;
  }
  return report;
}

inline void write_bench_csv(std::ostream& out, const BenchReport& r) {
  using detail::format_double;
  out << "optimizer,median_step_us,speed_ratio,grad_evals_per_step,grad_eval_ratio,"
         "trainable_params,optimizer_extra_elements\n";
  for (const BenchRow& row : r.rows) {
    out << to_string(row.optimizer) << ',' << format_double(row.median_step_us) << ','
        << format_double(row.speed_ratio) << ','
        << format_double(row.grad_evals_per_step) << ','
        << format_double(row.grad_eval_ratio) << ',' << row.memory.trainable << ','
        << format_double(row.memory.optimizer_extra) << '\n';
  }
}

inline nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const BenchRow& row : r.rows) {
    rows.push_back({{"optimizer", std::string(to_string(row.optimizer))},
                    {"median_step_us", row.median_step_us},
                    {"speed_ratio", row.speed_ratio},
                    {"grad_evals_per_step", row.grad_evals_per_step},
                    {"grad_eval_ratio", row.grad_eval_ratio},
                    {"trainable_params", row.memory.trainable},
                    {"optimizer_extra_elements", row.memory.optimizer_extra}});
  }
  return {{"config_hash", r.config_hash}, {"repeats", r.repeats}, {"rows", rows}};
}

}  // namespace flatlora
