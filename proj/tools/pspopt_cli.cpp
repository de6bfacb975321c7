// pspopt: batch front-end for stochastic microstructure design runs.
//
//   pspopt generate-data --config cfg.json --seed 1 --out runs/a
//   pspopt optimize      --config cfg.json --seed 1 --out runs/a [--resume runs/a]
//   pspopt baseline      --config cfg.json --seed 1 --out runs/b
//   pspopt evaluate      --config cfg.json --seed 1 --out runs/a
//   pspopt export-plots  --config cfg.json --out runs/a
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include <CLI11.hpp>
#include <iostream>

#include "pspopt/runner.hpp"

namespace {

psp::cli::RunConfig load_config(const std::string& path, std::uint64_t seed,
                                const std::string& out, int threads) {
  nlohmann::json j;
  if (!path.empty()) j = psp::io::read_json(path);
  auto cfg = psp::cli::RunConfig::from_json(j);
  cfg.master_seed = seed;
  if (!out.empty()) cfg.out_dir = out;
  cfg.threads = threads;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stochastic process-structure-property inversion"};
  app.require_subcommand(1);

  std::string config_path, out_dir, resume;
  std::uint64_t seed = 0;
  int threads = 1;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "master seed (all sub-seeds derived by labeled hashing)");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--threads", threads, "worker-thread cap for oracle/ELBO batches");
  app.add_option("--resume", resume, "checkpoint directory for optimize");

  auto* gen = app.add_subcommand("generate-data", "ancestral-sample and label an initial dataset");
  auto* opt = app.add_subcommand("optimize", "run the active-learning optimization loop");
  auto* bas = app.add_subcommand("baseline", "random-acquisition control at equal budget");
  auto* eva = app.add_subcommand("evaluate", "Monte Carlo reference estimate of the objective");
  auto* exp = app.add_subcommand("export-plots", "emit plot-ready CSV series from a run directory");

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = load_config(config_path, seed, out_dir, threads);
    if (gen->parsed()) return psp::cli::cmd_generate_data(cfg);
    if (opt->parsed()) return psp::cli::cmd_optimize(cfg, resume);
    if (bas->parsed()) return psp::cli::cmd_baseline(cfg);
    if (eva->parsed()) return psp::cli::cmd_evaluate(cfg);
    if (exp->parsed()) return psp::cli::cmd_export_plots(cfg);
  } catch (const psp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
