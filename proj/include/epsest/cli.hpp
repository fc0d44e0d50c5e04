// Command-line front end: JSON run configuration, measurement CSV ingestion,
// orchestration of the estimators, and result/plot-table emission. All
// floating-point output carries 17 significant digits so runs reproduce
// bit-for-bit from their own files.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "epsest/epsest.hpp"

namespace epsest::cli {

/// A malformed configuration or an I/O failure (exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SimSpec {
  VecX<double> x0;                 // empty: start at the prior mean
  std::optional<Index> cap_index;  // saturating state coordinate, if any
  double cap_value = 0.0;
};

struct RunConfig {
  std::string mode;  // simulate | smooth-h2 | smooth-eps | estimate-constrained |
                     // predict | moving-horizon | compare
  SystemModel<double> model;
  WeightSpec<double> weights;
  std::vector<ConstraintFamily<double>> families;
  Index horizon = 0;        // steps to simulate when no input CSV is given
  Index window = 0;         // moving-horizon window length
  Index predict_steps = 0;  // j for predict / moving-horizon
  std::uint64_t seed = 0;
  std::string input_path;   // measurement CSV; empty = simulate internally
  std::string output_path;  // result JSON (or measurement CSV for simulate)
  std::string plot_table_path;
  double tol = 1e-9;
  long max_iter = 200000;
  std::optional<NoiseSpec<double>> noise;
  SimSpec sim;
};

RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_text(const std::string& text);

/// Executes one configuration. Throws ConfigError / SolverError /
/// InfeasibleError; the tool maps these to exit codes 1 / 2 / 3.
void run(const RunConfig& config);

/// Measurement CSV: header `k,y1,...,ym`, k strictly 1,2,...,N.
MatX<double> read_measurement_csv(const std::string& path, Index m);
void write_measurement_csv(const std::string& path, const MatX<double>& measurements);

/// printf "%.17g" (shared by every emitter).
std::string format_double(double value);

}  // namespace epsest::cli
