// Copyright 2026 The ctgshift Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// ctgshift command line.
//
//   ctgshift run <config.json> [--out DIR]
//   ctgshift gen-data <config.json> <out.jsonl>
//   ctgshift evian <config.json> <out.json>
//   ctgshift gradcheck [--instances N]
//   ctgshift version
//
// Exit codes: 0 success, 2 bad config or arguments, 3 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ctgshift/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr double kGradTolerance = 1e-4;

std::ofstream open_output(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ctgshift::Error("cannot write '" + p.string() + "'");
  return out;
}

int cmd_run(const std::string& config, const std::string& out_override) {
  const auto cfg = ctgshift::load_experiment_config(config);
  const std::filesystem::path out = out_override.empty() ? cfg.output_dir : out_override;
  const auto res = ctgshift::run_experiment(cfg, out);
  std::cout << "wrote " << res.rows.size() << " rows to " << (out / "results.csv").string() << '\n';
  return 0;
}

// Training environments (or the EviaN corpus) for the first seed.
int cmd_gen_data(const std::string& config, const std::string& out_path) {
  const auto cfg = ctgshift::load_experiment_config(config);
  const std::uint64_t seed = cfg.seeds.front();
  auto out = open_output(out_path);
  std::size_t n = 0;
  if (cfg.kind == ctgshift::ExperimentKind::kEvianPipeline) {
    const auto corpus = ctgshift::experiment_corpus(cfg, seed);
    ctgshift::write_jsonl(out, corpus);
    n = corpus.size();
  } else {
    for (const auto& env : ctgshift::experiment_training_envs(cfg, seed)) {
      ctgshift::write_jsonl(out, env);
      n += env.size();
    }
  }
  std::cout << "wrote " << n << " examples to " << out_path << '\n';
  return 0;
}

int cmd_evian(const std::string& config, const std::string& out_path) {
  const auto cfg = ctgshift::load_experiment_config(config);
  const std::uint64_t seed = cfg.seeds.front();
  const auto corpus = ctgshift::experiment_corpus(cfg, seed);
  const auto res = ctgshift::evian_partition(
      corpus.examples, ctgshift::experiment_evian_config(cfg, seed, cfg.evian.corruption));
  auto out = open_output(out_path);
  out << ctgshift::evian_report_json(res).dump(2) << '\n';
  std::cout << "corrupted accuracy " << res.corrupted_accuracy << '\n';
  return 0;
}

int cmd_gradcheck(int instances) {
  bool ok = true;
  for (const auto& r : ctgshift::run_gradcheck_suite(instances)) {
    const bool pass = r.max_rel_error < kGradTolerance;
    ok = ok && pass;
    std::printf("%-6s instances=%d max_rel_error=%.3e %s\n",
                std::string(ctgshift::to_string(r.kind)).c_str(), r.instances, r.max_rel_error,
                pass ? "ok" : "FAIL");
  }
  return ok ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctgshift: spurious-correlation experiments for toxicity classifiers"};
  app.require_subcommand(1);

  std::string config, out_path, out_dir;
  int instances = 20;

  auto* run = app.add_subcommand("run", "Run an experiment config");
  run->add_option("config", config, "Experiment JSON")->required();
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");

  auto* gen = app.add_subcommand("gen-data", "Write the generated examples as JSONL");
  gen->add_option("config", config, "Experiment JSON")->required();
  gen->add_option("out", out_path, "Output JSONL file")->required();

  auto* evian = app.add_subcommand("evian", "Infer environments and write the bucket report");
  evian->add_option("config", config, "Experiment JSON")->required();
  evian->add_option("out", out_path, "Output JSON file")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every objective");
  grad->add_option("--instances", instances, "Random instances per kind")->check(CLI::PositiveNumber);

  auto* version = app.add_subcommand("version", "Print the version");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config, out_dir);
    if (*gen) return cmd_gen_data(config, out_path);
    if (*evian) return cmd_evian(config, out_path);
    if (*grad) return cmd_gradcheck(instances);
    if (*version) {
      std::cout << "ctgshift " << ctgshift::kVersion << '\n';
      return 0;
    }
  } catch (const ctgshift::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
