// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowsolve/flowsolve.hpp"

#include <CLI11.hpp>

int main(int argc, char** argv) {
  CLI::App app{"Training-free linear inverse problem solving with flow models"};
  app.require_subcommand(1);

  flowsolve::CommandOptions opt;
  std::uint64_t seed = 0;
  std::string config;
  std::string sweep;

  const auto common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "Replace the solver seed");
    cmd->add_option("--threads", opt.threads, "Worker threads (default: FLOWSOLVE_THREADS or all cores)");
    cmd->add_option("--out", opt.output_dir, "Output directory (default: the config's output_dir)");
    cmd->add_flag("--timing", opt.timing, "Record wall-clock times in metrics files");
  };

  CLI::App* solve = app.add_subcommand("solve", "Run the configured solve");
  solve->add_option("config", config, "Run config (JSON)")->required();
  common(solve);

  CLI::App* oracle = app.add_subcommand("compare-oracle", "Compare the guided field against the exact one");
  oracle->add_option("config", config, "Run config (JSON)")->required();
  common(oracle);

  CLI::App* ablate = app.add_subcommand("ablate", "Sweep solver settings over a Cartesian grid");
  ablate->add_option("config", config, "Run config (JSON)")->required();
  ablate->add_option("--sweep", sweep, "Sweep spec: JSON file, JSON object, or axis=v1,v2;axis=...")->required();
  common(ablate);

  std::string a_file, b_file;
  flowsolve::Index channels = 1, window = 8;
  CLI::App* metrics = app.add_subcommand("metrics", "MSE, PSNR and SSIM between two images");
  metrics->add_option("a", a_file, "First image (.bin tensor or .pgm)")->required();
  metrics->add_option("b", b_file, "Second image (.bin tensor or .pgm)")->required();
  metrics->add_option("--channels", channels, "Channel planes stacked along the rows");
  metrics->add_option("--window", window, "SSIM window side");
  metrics->add_option("--seed", seed, "Accepted for uniformity; metrics are deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : flowsolve::kExitConfigError;
  }

  for (CLI::App* cmd : {solve, oracle, ablate})
    if (cmd->parsed() && cmd->count("--seed") > 0) opt.seed = seed;

  if (solve->parsed()) return flowsolve::cmd_solve(config, opt);
  if (oracle->parsed()) return flowsolve::cmd_compare_oracle(config, opt);
  if (ablate->parsed()) return flowsolve::cmd_ablate(config, sweep, opt);
  return flowsolve::cmd_metrics(a_file, b_file, channels, window, opt);
}
