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

// Experiment configuration. The file format is flat `key = value` text, one
// key per line, with `#` starting a comment. Unknown keys are errors.
//
//   task               teacher-student | two-cluster | matrix-factorization
//   layer_dims         comma-separated widths, input first (16,16,4)
//   rank, scale        LoRA rank r and scale s
//   optimizer          lora | lora-sam | flat-lora | eflat-lora
//   rho0, beta         perturbation radius and EMA coefficient
//   eta, momentum, weight_decay
//   rho_schedule       constant | inverse-sqrt | auto (inverse-sqrt for
//                      eflat-lora, constant otherwise)
//   direction_variant  standard | signed
//   batch_size, steps, eval_every (0 disables diagnostics), seed, svd_tol
//   activation         tanh | relu | identity
//   train_size, eval_size, noise_std, base_shift, cluster_separation
//   csv_wall_time      true | false; write measured time into the CSV

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flatlora/errors.hpp"
#include "flatlora/model.hpp"
#include "flatlora/optimizers.hpp"

namespace flatlora {

enum class TaskKind { teacher_student, two_cluster, matrix_factorization };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::teacher_student: return "teacher-student-regression";
    case TaskKind::two_cluster: return "two-cluster-classification";
    case TaskKind::matrix_factorization: return "matrix-factorization";
  }
  return "?";
}
inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

struct ExperimentConfig {
  TaskKind task = TaskKind::teacher_student;
  std::vector<std::size_t> layer_dims{16, 16, 4};
  std::size_t rank = 4;
  double scale = 1.0;
  OptimizerKind optimizer = OptimizerKind::lora;
  double rho0 = 0.05;
  double beta = 0.9;
  double eta = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::optional<RhoSchedule> rho_schedule;  // unset: resolved per optimizer
  DirectionVariant direction_variant = DirectionVariant::standard;
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  std::size_t eval_every = 100;
  std::uint64_t seed = 0;
  double svd_tol = kDefaultRankTol;
  Activation activation = Activation::tanh;
  std::size_t train_size = 512;
  std::size_t eval_size = 256;
  double noise_std = 0.01;
  double base_shift = 0.5;
  double cluster_separation = 10.0;
  bool csv_wall_time = false;

  RhoSchedule effective_schedule() const {
    if (rho_schedule) return *rho_schedule;
    return optimizer == OptimizerKind::eflat_lora ? RhoSchedule::inverse_sqrt
                                                  : RhoSchedule::constant;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* first = v.data();
  const char* last = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last) {
    throw ConfigError(key + ": cannot parse '" + v + "' as a number");
  }
  return out;
}

// Shortest round-trip decimal, independent of the global locale.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

inline TaskKind parse_task(const std::string& v) {
  // Short forms are accepted as aliases.
  if (v == "teacher-student-regression" || v == "teacher-student") {
    return TaskKind::teacher_student;
  }
  if (v == "two-cluster-classification" || v == "two-cluster") {
    return TaskKind::two_cluster;
  }
  if (v == "matrix-factorization") return TaskKind::matrix_factorization;
  throw ConfigError("task: unknown value '" + v + "'");
}
inline OptimizerKind parse_optimizer(const std::string& v) {
  if (v == "lora") return OptimizerKind::lora;
  if (v == "lora-sam") return OptimizerKind::lora_sam;
  if (v == "flat-lora") return OptimizerKind::flat_lora;
  if (v == "eflat-lora") return OptimizerKind::eflat_lora;
  throw ConfigError("optimizer: unknown value '" + v + "'");
}

/// Applies one `key = value` assignment.
inline void set_config_value(ExperimentConfig& c, const std::string& key,
                             const std::string& v) {
  using detail::parse_number;
  if (key == "task") {
    c.task = parse_task(v);
  } else if (key == "layer_dims") {
    c.layer_dims.clear();
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      c.layer_dims.push_back(parse_number<std::size_t>(key, detail::trim(item)));
    }
  } else if (key == "rank") {
    c.rank = parse_number<std::size_t>(key, v);
  } else if (key == "scale") {
    c.scale = parse_number<double>(key, v);
  } else if (key == "optimizer") {
    c.optimizer = parse_optimizer(v);
  } else if (key == "rho0") {
    c.rho0 = parse_number<double>(key, v);
  } else if (key == "beta") {
    c.beta = parse_number<double>(key, v);
  } else if (key == "eta") {
    c.eta = parse_number<double>(key, v);
  } else if (key == "momentum") {
    c.momentum = parse_number<double>(key, v);
  } else if (key == "weight_decay") {
    c.weight_decay = parse_number<double>(key, v);
  } else if (key == "rho_schedule") {
    if (v == "constant") c.rho_schedule = RhoSchedule::constant;
    else if (v == "inverse-sqrt") c.rho_schedule = RhoSchedule::inverse_sqrt;
    else if (v == "auto") c.rho_schedule.reset();
    else throw ConfigError("rho_schedule: unknown value '" + v + "'");
  } else if (key == "direction_variant") {
    if (v == "standard") c.direction_variant = DirectionVariant::standard;
    else if (v == "signed") c.direction_variant = DirectionVariant::sign_scaled;
    else throw ConfigError("direction_variant: unknown value '" + v + "'");
  } else if (key == "batch_size") {
    c.batch_size = parse_number<std::size_t>(key, v);
  } else if (key == "steps") {
    c.steps = parse_number<std::size_t>(key, v);
  } else if (key == "eval_every") {
    c.eval_every = parse_number<std::size_t>(key, v);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "svd_tol") {
    c.svd_tol = parse_number<double>(key, v);
  } else if (key == "activation") {
    if (v == "tanh") c.activation = Activation::tanh;
    else if (v == "relu") c.activation = Activation::relu;
    else if (v == "identity") c.activation = Activation::identity;
    else throw ConfigError("activation: unknown value '" + v + "'");
  } else if (key == "train_size") {
    c.train_size = parse_number<std::size_t>(key, v);
  } else if (key == "eval_size") {
    c.eval_size = parse_number<std::size_t>(key, v);
  } else if (key == "noise_std") {
    c.noise_std = parse_number<double>(key, v);
  } else if (key == "base_shift") {
    c.base_shift = parse_number<double>(key, v);
  } else if (key == "cluster_separation") {
    c.cluster_separation = parse_number<double>(key, v);
  } else if (key == "csv_wall_time") {
    if (v == "true") c.csv_wall_time = true;
    else if (v == "false") c.csv_wall_time = false;
    else throw ConfigError("csv_wall_time: expected true or false");
  } else {
    throw ConfigError("unknown key '" + key + "'");
  }
}

/// Every violated constraint, each naming its field. Empty when valid.
inline std::vector<std::string> validation_errors(const ExperimentConfig& c) {
  std::vector<std::string> errs;
  if (c.layer_dims.size() < 2) {
    errs.push_back("layer_dims: need at least an input and an output width");
  }
  for (std::size_t d : c.layer_dims) {
    if (d == 0) errs.push_back("layer_dims: widths must be positive");
  }
  if (c.rank == 0) errs.push_back("rank: must be at least 1");
  for (std::size_t i = 0; i + 1 < c.layer_dims.size(); ++i) {
    if (c.rank > std::min(c.layer_dims[i], c.layer_dims[i + 1])) {
      errs.push_back("rank: " + std::to_string(c.rank) + " exceeds min(" +
                     std::to_string(c.layer_dims[i]) + ", " +
                     std::to_string(c.layer_dims[i + 1]) + ")");
      break;
    }
  }
  if (!(c.scale > 0.0)) errs.push_back("scale: must be positive");
  if (!(c.rho0 >= 0.0)) errs.push_back("rho0: must be non-negative");
  if (!(c.beta > 0.0 && c.beta < 1.0)) errs.push_back("beta: must lie in (0, 1)");
  if (!(c.eta > 0.0)) errs.push_back("eta: must be positive");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) {
    errs.push_back("momentum: must lie in [0, 1)");
  }
  if (!(c.weight_decay >= 0.0)) errs.push_back("weight_decay: must be non-negative");
  if (c.batch_size == 0) errs.push_back("batch_size: must be positive");
  if (!(c.svd_tol > 0.0 && c.svd_tol < 1.0)) errs.push_back("svd_tol: must lie in (0, 1)");
  if (c.train_size == 0) errs.push_back("train_size: must be positive");
  if (c.eval_size == 0) errs.push_back("eval_size: must be positive");
  if (!(c.noise_std >= 0.0)) errs.push_back("noise_std: must be non-negative");
  if (c.task == TaskKind::two_cluster && !c.layer_dims.empty() &&
      c.layer_dims.back() != 2) {
    errs.push_back("layer_dims: two-cluster needs an output width of 2");
  }
  if (c.task == TaskKind::matrix_factorization && c.layer_dims.size() != 2) {
    errs.push_back("layer_dims: matrix-factorization uses a single layer (m,n)");
  }
  return errs;
}

inline void validate(const ExperimentConfig& c) {
  const auto errs = validation_errors(c);
  if (errs.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw ConfigError(msg);
}

inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    try {
      set_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate(c);
  return c;
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

/// Canonical `key = value` text; parse_config(serialize(c)) reproduces c.
inline std::string serialize(const ExperimentConfig& c, bool include_seed = true) {
  using detail::format_double;
  std::ostringstream o;
  o << "task = " << to_string(c.task) << "\n";
  o << "layer_dims = ";
  for (std::size_t i = 0; i < c.layer_dims.size(); ++i) {
    o << (i ? "," : "") << c.layer_dims[i];
  }
  o << "\n";
  o << "rank = " << c.rank << "\n";
  o << "scale = " << format_double(c.scale) << "\n";
  o << "optimizer = " << to_string(c.optimizer) << "\n";
  o << "rho0 = " << format_double(c.rho0) << "\n";
  o << "beta = " << format_double(c.beta) << "\n";
  o << "eta = " << format_double(c.eta) << "\n";
  o << "momentum = " << format_double(c.momentum) << "\n";
  o << "weight_decay = " << format_double(c.weight_decay) << "\n";
  o << "rho_schedule = " << (c.rho_schedule ? to_string(*c.rho_schedule) : "auto") << "\n";
  o << "direction_variant = " << to_string(c.direction_variant) << "\n";
  o << "batch_size = " << c.batch_size << "\n";
  o << "steps = " << c.steps << "\n";
  o << "eval_every = " << c.eval_every << "\n";
  if (include_seed) o << "seed = " << c.seed << "\n";
  o << "svd_tol = " << format_double(c.svd_tol) << "\n";
  o << "activation = " << to_string(c.activation) << "\n";
  o << "train_size = " << c.train_size << "\n";
  o << "eval_size = " << c.eval_size << "\n";
  o << "noise_std = " << format_double(c.noise_std) << "\n";
  o << "base_shift = " << format_double(c.base_shift) << "\n";
  o << "cluster_separation = " << format_double(c.cluster_separation) << "\n";
  o << "csv_wall_time = " << (c.csv_wall_time ? "true" : "false") << "\n";
  return o.str();
}

/// 64-bit FNV-1a of the canonical text without the seed, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : serialize(c, false)) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
  return out;
}

}  // namespace flatlora
