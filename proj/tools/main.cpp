// Tool entry point: flag parsing and exit-code mapping around cli::run.
#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "epsest/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"state estimation under a tube-insensitive quadratic loss"};
  std::string config_path;
  std::string mode_override;
  std::string plot_table;
  std::uint64_t seed = 0;
  double tol = 0;

  app.add_option("--config", config_path, "run configuration (JSON)")->required();
  app.add_option("--mode", mode_override,
                 "override the configured mode (simulate, smooth-h2, smooth-eps, "
                 "estimate-constrained, predict, moving-horizon, compare)");
  app.add_option("--seed", seed, "override the noise seed");
  app.add_option("--tol", tol, "override the solver tolerance");
  app.add_option("--plot-table", plot_table, "also write a flat CSV plot table to this path");
  CLI11_PARSE(app, argc, argv);

  try {
    epsest::cli::RunConfig cfg = epsest::cli::parse_config_file(config_path);
    if (!mode_override.empty()) cfg.mode = mode_override;
    if (app.count("--seed")) cfg.seed = seed;
    if (app.count("--tol")) cfg.tol = tol;
    if (!plot_table.empty()) cfg.plot_table_path = plot_table;
    epsest::cli::run(cfg);
    return 0;
  } catch (const epsest::cli::ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  } catch (const epsest::InfeasibleError& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return 3;
  } catch (const epsest::SolverError& e) {
    std::fprintf(stderr, "solver: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
