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

// flatlora command line: run, sweep, verify, bench.
//
// Exit status: 0 ok, 1 config error or failed invariant, 2 numerical abort.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flatlora/flatlora.hpp"

namespace {

namespace fs = std::filesystem;
using namespace flatlora;

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kNumerical = 2;

std::string default_out_dir() {
  const char* env = std::getenv("FLATLORA_OUT_DIR");
  return env && *env ? env : "out";
}

void report_run(const RunResult& r, const RunFiles& files) {
  std::cout << to_string(r.summary.optimizer) << " seed=" << r.summary.seed
            << " train_loss=" << detail::format_double(r.summary.final_train_loss)
            << " eval_loss=" << detail::format_double(r.summary.final_eval_loss)
            << " sharpness=" << detail::format_double(r.summary.final_sharpness)
            << " -> " << files.csv.string() << '\n';
}

int cmd_run(const std::string& config_path, const std::string& out) {
  const ExperimentConfig cfg = load_config(config_path);
  const RunResult r = run_to_directory(cfg, out);
  report_run(r, output_paths(cfg, out));
  return kOk;
}

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos <= list.size()) {
    const std::size_t comma = std::min(list.find(',', pos), list.size());
    const std::string tok = detail::trim(std::string_view(list).substr(pos, comma - pos));
    if (!tok.empty()) seeds.push_back(detail::parse_number<std::uint64_t>("seeds", tok));
    pos = comma + 1;
  }
  if (seeds.empty()) throw ConfigError("seeds: empty list");
  return seeds;
}

// Each seed is an independent run with its own output files.
int cmd_sweep(const std::string& config_path, const std::string& seed_list,
              const std::string& out) {
  const ExperimentConfig base = load_config(config_path);
  std::vector<std::future<RunResult>> jobs;
  std::vector<ExperimentConfig> cfgs;
  for (std::uint64_t seed : parse_seeds(seed_list)) {
    ExperimentConfig c = base;
    c.seed = seed;
    cfgs.push_back(c);
  }
  for (const ExperimentConfig& c : cfgs) {
    jobs.push_back(std::async(std::launch::async, [c, out] { return run_to_directory(c, out); }));
  }
  int status = kOk;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    try {
      report_run(jobs[i].get(), output_paths(cfgs[i], out));
    } catch (const NumericalError& e) {
      std::cerr << "seed " << cfgs[i].seed << ": numerical abort: " << e.what() << '\n';
      status = kNumerical;
    }
  }
  return status;
}

int cmd_verify(const std::string& mutate, std::uint64_t seed, std::size_t trials) {
  VerifyOptions opt;
  opt.seed = seed;
  opt.trials = trials;
  if (mutate == "skip-revert") {
    opt.fault = Fault::skip_revert;
  } else if (!mutate.empty()) {
    throw ConfigError("mutate: unknown fault '" + mutate + "'");
  }
  const VerifyReport report = verify(opt);
  print_report(std::cout, report);
  const bool ok = report.all_passed();
  std::cout << (ok ? "verify: all invariants hold\n" : "verify: FAILED\n");
  return ok ? kOk : kInvalid;
}

int cmd_bench(const std::string& config_path, std::size_t repeats, const std::string& out) {
  const ExperimentConfig cfg = load_config(config_path);
  const BenchReport rep = bench(cfg, repeats);
  fs::create_directories(out);
  const std::string stem = rep.config_hash + "_" + std::to_string(cfg.seed) + ".bench";
  std::ofstream csv(fs::path(out) / (stem + ".csv"), std::ios::binary);
  write_bench_csv(csv, rep);
  std::ofstream js(fs::path(out) / (stem + ".json"), std::ios::binary);
  js << to_json(rep).dump(2) << '\n';
  write_bench_csv(std::cout, rep);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flatlora: sharpness-aware low-rank adaptation at desk scale"};
  app.require_subcommand(1);
  const std::string out_default = default_out_dir();

  std::string config, out = out_default, seeds, mutate;
  std::size_t repeats = 5, trials = 50;
  std::uint64_t verify_seed = VerifyOptions{}.seed;

  auto* run = app.add_subcommand("run", "train one configuration");
  run->add_option("--config", config, "config file (key = value)")->required();
  run->add_option("--out", out, "output directory (default $FLATLORA_OUT_DIR or ./out)");

  auto* sweep = app.add_subcommand("sweep", "train one configuration over several seeds");
  sweep->add_option("--config", config)->required();
  sweep->add_option("--seeds", seeds, "comma separated")->required();
  sweep->add_option("--out", out);

  auto* ver = app.add_subcommand("verify", "run the invariant suite");
  ver->add_option("--mutate", mutate, "inject a fault: skip-revert");
  ver->add_option("--seed", verify_seed);
  ver->add_option("--trials", trials, "random cases per check");

  auto* ben = app.add_subcommand("bench", "per-step time of every optimizer vs lora");
  ben->add_option("--config", config)->required();
  ben->add_option("--repeats", repeats)->check(CLI::PositiveNumber);
  ben->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*run) return cmd_run(config, out);
    if (*sweep) return cmd_sweep(config, seeds, out);
    if (*ver) return cmd_verify(mutate, verify_seed, trials);
    if (*ben) return cmd_bench(config, repeats, out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  }
  return kInvalid;
}
