#include "epsest/cli.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace epsest::cli {

using nlohmann::json;

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

namespace {

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

[[noreturn]] void fail(const std::string& what) { throw ConfigError("config: " + what); }

MatX<double> parse_matrix(const json& node, const std::string& name) {
  if (!node.is_array() || node.empty() || !node.front().is_array())
    fail(name + " must be a non-empty array of rows");
  const Index rows = static_cast<Index>(node.size());
  const Index cols = static_cast<Index>(node.front().size());
  MatX<double> M(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const auto& row = node[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != cols)
      fail(name + " rows have inconsistent lengths");
    for (Index j = 0; j < cols; ++j) M(i, j) = row[static_cast<std::size_t>(j)].get<double>();
  }
  return M;
}

VecX<double> parse_vector(const json& node, const std::string& name) {
  if (!node.is_array()) fail(name + " must be an array");
  VecX<double> v(static_cast<Index>(node.size()));
  for (Index i = 0; i < v.size(); ++i) v(i) = node[static_cast<std::size_t>(i)].get<double>();
  return v;
}

ConstraintFamily<double> parse_family(const json& node) {
  ConstraintFamily<double> fam;
  const std::string kind = node.at("kind").get<std::string>();
  if (kind == "state_bound")
    fam.kind = ConstraintKind::StateBound;
  else if (kind == "average_bound")
    fam.kind = ConstraintKind::AverageBound;
  else if (kind == "noise_bound")
    fam.kind = ConstraintKind::NoiseBound;
  else if (kind == "increment_bound")
    fam.kind = ConstraintKind::IncrementBound;
  else
    fail("unsupported constraint kind '" + kind + "'");
  if (node.contains("L")) fam.L = parse_matrix(node["L"], "constraint L");
  if (node.contains("upper")) fam.upper = parse_vector(node["upper"], "constraint upper");
  if (node.contains("lower")) fam.lower = parse_vector(node["lower"], "constraint lower");
  if (node.contains("upper_mean_y"))
    fam.upper_mean_y = parse_matrix(node["upper_mean_y"], "constraint upper_mean_y");
  if (node.contains("lower_mean_y"))
    fam.lower_mean_y = parse_matrix(node["lower_mean_y"], "constraint lower_mean_y");
  if (node.contains("bound")) fam.bound = parse_vector(node["bound"], "constraint bound");
  if (node.contains("lag")) fam.lag = node["lag"].get<Index>();
  if (node.contains("y_diff_coeff")) fam.y_diff_coeff = node["y_diff_coeff"].get<double>();
  return fam;
}

// Serializes with our own walker so numbers keep 17 significant digits.
void dump_json(const json& node, std::ostream& os) {
  switch (node.type()) {
    case json::value_t::object: {
      os << '{';
      bool first = true;
      for (auto it = node.begin(); it != node.end(); ++it) {
        if (!first) os << ',';
        first = false;
        os << json(it.key()).dump() << ':';
        dump_json(it.value(), os);
      }
      os << '}';
      break;
    }
    case json::value_t::array: {
      os << '[';
      for (std::size_t i = 0; i < node.size(); ++i) {
        if (i) os << ',';
        dump_json(node[i], os);
      }
      os << ']';
      break;
    }
    case json::value_t::number_float:
      os << format_double(node.get<double>());
      break;
    default:
      os << node.dump();
  }
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::filesystem::path target(path);
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail("cannot open '" + tmp.string() + "' for writing");
    os << text;
    if (!os.good()) fail("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) fail("cannot move result into place at '" + path + "': " + ec.message());
}

json matrix_time_major(const MatX<double>& M) {
  // columns are time steps; emit one array per step
  json out = json::array();
  for (Index k = 0; k < M.cols(); ++k) {
    json col = json::array();
    for (Index i = 0; i < M.rows(); ++i) col.push_back(M(i, k));
    out.push_back(std::move(col));
  }
  return out;
}

json vector_json(const VecX<double>& v) {
  json out = json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

json diagnostics_json(const SolveDiagnostics<double>& d) {
  return json{{"status", to_string(d.status)},
              {"iterations", d.iterations},
              {"kkt_residual", d.kkt_residual},
              {"ridge", d.ridge},
              {"dual_objective", d.dual_objective}};
}

json kkt_json(const KktReport<double>& rep) {
  return json{{"state_stationarity", rep.state_stationarity},
              {"init_stationarity", rep.init_stationarity},
              {"terminal_costate", rep.terminal_costate},
              {"disturbance_stationarity", rep.disturbance_stationarity},
              {"eta_stationarity", rep.eta_stationarity},
              {"complementary_slackness_max", rep.complementary_slackness_max},
              {"primal_feasibility_max", rep.primal_feasibility_max},
              {"dual_feasibility_min", rep.dual_feasibility_min},
              {"multiplier_split_gap", rep.multiplier_split_gap},
              {"tol", rep.tol},
              {"passed", rep.passed}};
}

json estimate_json(const EstimateResult<double>& est, const KktReport<double>& kkt) {
  json out{{"xhat", matrix_time_major(est.xhat)},
           {"what", matrix_time_major(est.what)},
           {"eta", matrix_time_major(est.eta)},
           {"lambda", matrix_time_major(est.lambda)},
           {"vhat", matrix_time_major(est.vhat)},
           {"objective", est.primal_objective},
           {"kkt", kkt_json(kkt)}};
  if (est.dual) {
    out["dual"] = json{{"theta", vector_json(est.dual->theta)},
                       {"zeta", vector_json(est.dual->zeta)},
                       {"xi", vector_json(est.dual->xi)},
                       {"gamma", vector_json(est.dual->gamma)},
                       {"beta", vector_json(est.dual->beta)},
                       {"diagnostics", diagnostics_json(est.dual->diagnostics)}};
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

double parse_strict_double(const std::string& field, const std::string& context) {
  double value = 0;
  const char* begin = field.data();
  const char* end = begin + field.size();
  const auto res = std::from_chars(begin, end, value);
  if (res.ec != std::errc() || res.ptr != end)
    fail("bad numeric field '" + field + "' in " + context);
  return value;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

MatX<double> read_measurement_csv(const std::string& path, Index m) {
  std::ifstream is(path);
  if (!is) fail("cannot open measurement file '" + path + "'");
  std::string line;
  if (!std::getline(is, line)) fail("measurement file '" + path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::ostringstream header;
  header << "k";
  for (Index i = 1; i <= m; ++i) header << ",y" << i;
  if (line != header.str())
    fail("measurement header must be '" + header.str() + "', got '" + line + "'");

  std::vector<VecX<double>> cols;
  Index expected_k = 1;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (static_cast<Index>(fields.size()) != m + 1)
      fail("measurement row has " + std::to_string(fields.size()) + " fields, expected " +
           std::to_string(m + 1));
    const double kval = parse_strict_double(fields[0], "measurement index column");
    if (kval != static_cast<double>(expected_k))
      fail("measurement index must increase by one from 1; got '" + fields[0] + "' at row " +
           std::to_string(expected_k));
    VecX<double> y(m);
    for (Index i = 0; i < m; ++i)
      y(i) = parse_strict_double(fields[static_cast<std::size_t>(i) + 1], "measurement row");
    cols.push_back(std::move(y));
    ++expected_k;
  }
  if (cols.empty()) fail("measurement file '" + path + "' has no data rows");
  MatX<double> out(m, static_cast<Index>(cols.size()));
  for (Index k = 0; k < out.cols(); ++k) out.col(k) = cols[static_cast<std::size_t>(k)];
  return out;
}

void write_measurement_csv(const std::string& path, const MatX<double>& measurements) {
  std::ostringstream os;
  os << "k";
  for (Index i = 1; i <= measurements.rows(); ++i) os << ",y" << i;
  os << "\n";
  for (Index k = 0; k < measurements.cols(); ++k) {
    os << (k + 1);
    for (Index i = 0; i < measurements.rows(); ++i)
      os << ',' << format_double(measurements(i, k));
    os << "\n";
  }
  write_text_atomic(path, os.str());
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

RunConfig parse_config_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  try {
    cfg.mode = doc.at("mode").get<std::string>();
    const auto& model = doc.at("model");
    cfg.model.A = parse_matrix(model.at("A"), "model.A");
    cfg.model.B = parse_matrix(model.at("B"), "model.B");
    cfg.model.C = parse_matrix(model.at("C"), "model.C");
    cfg.model.xbar0 = parse_vector(model.at("xbar0"), "model.xbar0");
    const auto& weights = doc.at("weights");
    cfg.weights.P = parse_matrix(weights.at("P"), "weights.P");
    cfg.weights.Q = parse_matrix(weights.at("Q"), "weights.Q");
    cfg.weights.R = parse_matrix(weights.at("R"), "weights.R");
    cfg.weights.eps = parse_vector(weights.at("eps"), "weights.eps");
    if (doc.contains("constraints"))
      for (const auto& node : doc["constraints"]) cfg.families.push_back(parse_family(node));
    if (doc.contains("horizon")) cfg.horizon = doc["horizon"].get<Index>();
    if (doc.contains("window")) cfg.window = doc["window"].get<Index>();
    if (doc.contains("predict_steps")) cfg.predict_steps = doc["predict_steps"].get<Index>();
    if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("input")) cfg.input_path = doc["input"].get<std::string>();
    if (doc.contains("output")) cfg.output_path = doc["output"].get<std::string>();
    if (doc.contains("plot_table")) cfg.plot_table_path = doc["plot_table"].get<std::string>();
    if (doc.contains("tol")) cfg.tol = doc["tol"].get<double>();
    if (doc.contains("max_iter")) cfg.max_iter = doc["max_iter"].get<long>();
    if (doc.contains("noise")) {
      const auto& nz = doc["noise"];
      NoiseSpec<double> spec;
      spec.gauss_scale_w = nz.value("gauss_scale_w", 0.0);
      spec.sin_amp_w = nz.value("sin_amp_w", 0.0);
      spec.gauss_scale_v = nz.value("gauss_scale_v", 0.0);
      spec.sin_amp_v = nz.value("sin_amp_v", 0.0);
      spec.bias_v = nz.value("bias_v", 0.0);
      cfg.noise = spec;
    }
    if (doc.contains("sim")) {
      const auto& sim = doc["sim"];
      if (sim.contains("x0")) cfg.sim.x0 = parse_vector(sim["x0"], "sim.x0");
      if (sim.contains("cap_index")) cfg.sim.cap_index = sim["cap_index"].get<Index>();
      if (sim.contains("cap_value")) cfg.sim.cap_value = sim["cap_value"].get<double>();
    }
  } catch (const json::exception& e) {
    fail(std::string("missing or mistyped field: ") + e.what());
  }
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open config file '" + path + "'");
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return parse_config_text(buffer.str());
}

// ---------------------------------------------------------------------------
// run()
// ---------------------------------------------------------------------------

namespace {

struct SimOutput {
  MatX<double> measurements;
  MatX<double> true_states;  // n x (K+1); empty when data came from a file
};

SimOutput obtain_measurements(const RunConfig& cfg) {
  SimOutput out;
  if (!cfg.input_path.empty()) {
    out.measurements = read_measurement_csv(cfg.input_path, cfg.model.m());
    return out;
  }
  if (cfg.horizon < 1) fail("simulation requires 'horizon' >= 1");
  NoiseSpec<double> spec = cfg.noise.value_or(NoiseSpec<double>{0, 0, 0, 0, 0, 0});
  spec.seed = cfg.seed;
  const auto [w, v] = generate_noise(spec, cfg.horizon, cfg.model.l(), cfg.model.m());
  const VecX<double> x0 = cfg.sim.x0.size() > 0 ? cfg.sim.x0 : cfg.model.xbar0;
  if (x0.size() != cfg.model.n()) fail("sim.x0 length does not match the state dimension");
  const Trajectory<double> traj =
      cfg.sim.cap_index ? simulate_with_state_cap(cfg.model, x0, w, v, *cfg.sim.cap_index,
                                                  cfg.sim.cap_value)
                        : simulate(cfg.model, x0, w, v);
  out.measurements = traj.measurements;
  out.true_states = traj.states;
  return out;
}

ConstraintSet<double> build_constraints(const RunConfig& cfg, Index horizon,
                                        const MatX<double>& measurements) {
  if (cfg.families.empty()) return ConstraintSet<double>::none(horizon);
  std::vector<ConstraintSet<double>> sets;
  for (const auto& fam : cfg.families)
    sets.push_back(encode_constraint_family(fam, cfg.model, horizon, measurements));
  return merge_constraints(sets);
}

void require_converged(const EstimateResult<double>& est, const std::string& stage) {
  if (est.dual && est.dual->diagnostics.status != QpStatus::Converged) {
    std::ostringstream msg;
    msg << stage << ": solver stopped at " << to_string(est.dual->diagnostics.status)
        << " with KKT residual " << format_double(est.dual->diagnostics.kkt_residual);
    throw SolverError(msg.str());
  }
}

std::string plot_table(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << "\n";
  }
  return os.str();
}

json mae_json(const MatX<double>& xhat, const MatX<double>& truth) {
  const Index n = truth.rows();
  const Index cols = std::min(xhat.cols(), truth.cols());
  json out = json::array();
  for (Index i = 0; i < n; ++i) {
    double acc = 0;
    for (Index k = 0; k < cols; ++k) acc += std::abs(xhat(i, k) - truth(i, k));
    out.push_back(acc / static_cast<double>(cols));
  }
  return out;
}

void emit(const RunConfig& cfg, const json& result, const std::string& table) {
  std::ostringstream os;
  dump_json(result, os);
  os << "\n";
  if (!cfg.output_path.empty())
    write_text_atomic(cfg.output_path, os.str());
  else
    std::fputs(os.str().c_str(), stdout);
  if (!cfg.plot_table_path.empty()) write_text_atomic(cfg.plot_table_path, table);
}

}  // namespace

void run(const RunConfig& cfg) {
  validate_model(cfg.model, cfg.weights);
  const EstimatorOptions<double> opts{cfg.tol, cfg.max_iter};
  const Index n = cfg.model.n(), m = cfg.model.m();

  if (cfg.mode == "simulate") {
    if (cfg.input_path.empty() && cfg.horizon < 1) fail("simulate requires 'horizon'");
    const SimOutput sim = obtain_measurements(cfg);
    if (cfg.output_path.empty()) fail("simulate requires 'output' for the measurement CSV");
    write_measurement_csv(cfg.output_path, sim.measurements);
    if (!cfg.plot_table_path.empty()) {
      std::vector<std::string> header{"k"};
      for (Index i = 1; i <= m; ++i) header.push_back("y" + std::to_string(i));
      for (Index i = 1; i <= n; ++i) header.push_back("x" + std::to_string(i));
      std::vector<std::vector<std::string>> rows;
      for (Index k = 0; k < sim.true_states.cols(); ++k) {
        std::vector<std::string> row{std::to_string(k)};
        for (Index i = 0; i < m; ++i)
          row.push_back(k >= 1 ? format_double(sim.measurements(i, k - 1)) : "");
        for (Index i = 0; i < n; ++i) row.push_back(format_double(sim.true_states(i, k)));
        rows.push_back(std::move(row));
      }
      write_text_atomic(cfg.plot_table_path, plot_table(header, rows));
    }
    return;
  }

  const SimOutput sim = obtain_measurements(cfg);
  const MatX<double>& y = sim.measurements;
  const Index N = y.cols();
  json result{{"mode", cfg.mode}, {"n", n}, {"m", m}, {"l", cfg.model.l()}, {"N", N}};
  if (sim.true_states.size() > 0) result["truth"] = matrix_time_major(sim.true_states);

  auto audited = [&](const EstimateResult<double>& est, const ConstraintSet<double>& cs) {
    return estimate_json(est, check_kkt(cfg.model, cfg.weights, y, cs, est, 1e-6));
  };
  auto simple_table = [&](const EstimateResult<double>& est) {
    std::vector<std::string> header{"k"};
    for (Index i = 1; i <= m; ++i) header.push_back("y" + std::to_string(i));
    for (Index i = 1; i <= n; ++i) header.push_back("xhat" + std::to_string(i));
    if (sim.true_states.size() > 0)
      for (Index i = 1; i <= n; ++i) header.push_back("x" + std::to_string(i));
    std::vector<std::vector<std::string>> rows;
    for (Index k = 0; k < est.xhat.cols(); ++k) {
      std::vector<std::string> row{std::to_string(k)};
      for (Index i = 0; i < m; ++i)
        row.push_back(k >= 1 && k <= N ? format_double(y(i, k - 1)) : "");
      for (Index i = 0; i < n; ++i) row.push_back(format_double(est.xhat(i, k)));
      if (sim.true_states.size() > 0)
        for (Index i = 0; i < n; ++i)
          row.push_back(k < sim.true_states.cols() ? format_double(sim.true_states(i, k)) : "");
      rows.push_back(std::move(row));
    }
    return plot_table(header, rows);
  };

  if (cfg.mode == "smooth-h2") {
    const auto est = h2_smooth(cfg.model, cfg.weights, y);
    result["estimate"] = audited(est, ConstraintSet<double>::none(N));
    emit(cfg, result, simple_table(est));
  } else if (cfg.mode == "smooth-eps") {
    const auto est = eps_smooth(cfg.model, cfg.weights, y, opts);
    require_converged(est, "smooth-eps");
    result["estimate"] = audited(est, ConstraintSet<double>::none(N));
    emit(cfg, result, simple_table(est));
  } else if (cfg.mode == "estimate-constrained") {
    const auto cs = build_constraints(cfg, N, y);
    const auto est = eps_smooth_constrained(cfg.model, cfg.weights, y, cs, opts);
    require_converged(est, "estimate-constrained");
    result["estimate"] = audited(est, cs);
    emit(cfg, result, simple_table(est));
  } else if (cfg.mode == "predict") {
    if (cfg.predict_steps < 1) fail("predict requires 'predict_steps' >= 1");
    const auto cs = build_constraints(cfg, N + cfg.predict_steps, y);
    const auto est = eps_predict(cfg.model, cfg.weights, y, cs, cfg.predict_steps, opts);
    require_converged(est, "predict");
    result["estimate"] = audited(est, cs);
    emit(cfg, result, simple_table(est));
  } else if (cfg.mode == "moving-horizon") {
    if (cfg.window < 1) fail("moving-horizon requires 'window' >= 1");
    WindowConstraintBuilder<double> builder;
    if (!cfg.families.empty())
      builder = [&](Index, Index horizon) { return build_constraints(cfg, horizon, y); };
    const auto steps =
        moving_horizon(cfg.model, cfg.weights, y, cfg.window, builder, cfg.predict_steps, opts);
    json jsteps = json::array();
    for (const auto& step : steps) {
      if (step.window.dual && step.window.dual->diagnostics.status != QpStatus::Converged) {
        std::ostringstream msg;
        msg << "moving-horizon window ending at t=" << step.time << ": solver stopped at "
            << to_string(step.window.dual->diagnostics.status);
        throw SolverError(msg.str());
      }
      json js{{"time", step.time}, {"filtered", vector_json(step.filtered)}};
      if (step.predicted.size() > 0) js["predicted"] = vector_json(step.predicted);
      if (step.window.dual) js["diagnostics"] = diagnostics_json(step.window.dual->diagnostics);
      jsteps.push_back(std::move(js));
    }
    result["steps"] = std::move(jsteps);
    std::vector<std::string> header{"t"};
    for (Index i = 1; i <= n; ++i) header.push_back("filtered" + std::to_string(i));
    if (cfg.predict_steps > 0)
      for (Index i = 1; i <= n; ++i) header.push_back("predicted" + std::to_string(i));
    std::vector<std::vector<std::string>> rows;
    for (const auto& step : steps) {
      std::vector<std::string> row{std::to_string(step.time)};
      for (Index i = 0; i < n; ++i) row.push_back(format_double(step.filtered(i)));
      if (cfg.predict_steps > 0)
        for (Index i = 0; i < n; ++i) row.push_back(format_double(step.predicted(i)));
      rows.push_back(std::move(row));
    }
    emit(cfg, result, plot_table(header, rows));
  } else if (cfg.mode == "compare") {
    if (sim.true_states.size() == 0)
      fail("compare needs simulated data (provide 'horizon'/'noise', not 'input')");
    const auto cs = build_constraints(cfg, N, y);
    const auto h2 = h2_smooth(cfg.model, cfg.weights, y);
    const auto eps = eps_smooth(cfg.model, cfg.weights, y, opts);
    require_converged(eps, "compare/eps");
    const auto con = cs.rows() > 0 ? eps_smooth_constrained(cfg.model, cfg.weights, y, cs, opts)
                                   : eps;
    require_converged(con, "compare/constrained");
    result["estimates"] = json{{"h2", audited(h2, ConstraintSet<double>::none(N))},
                               {"eps", audited(eps, ConstraintSet<double>::none(N))},
                               {"constrained", audited(con, cs)}};
    result["mae"] = json{{"h2", mae_json(h2.xhat, sim.true_states)},
                         {"eps", mae_json(eps.xhat, sim.true_states)},
                         {"constrained", mae_json(con.xhat, sim.true_states)}};
    std::vector<std::string> header{"k"};
    for (Index i = 1; i <= m; ++i) header.push_back("y" + std::to_string(i));
    for (const char* tag : {"h2", "eps", "con"})
      for (Index i = 1; i <= n; ++i)
        header.push_back(std::string("xhat_") + tag + "_" + std::to_string(i));
    for (Index i = 1; i <= n; ++i) header.push_back("x" + std::to_string(i));
    std::vector<std::vector<std::string>> rows;
    for (Index k = 0; k <= N; ++k) {
      std::vector<std::string> row{std::to_string(k)};
      for (Index i = 0; i < m; ++i) row.push_back(k >= 1 ? format_double(y(i, k - 1)) : "");
      for (const auto* est : {&h2, &eps, &con})
        for (Index i = 0; i < n; ++i) row.push_back(format_double(est->xhat(i, k)));
      for (Index i = 0; i < n; ++i) row.push_back(format_double(sim.true_states(i, k)));
      rows.push_back(std::move(row));
    }
    emit(cfg, result, plot_table(header, rows));
  } else {
    fail("unknown mode '" + cfg.mode + "'");
  }
}

}  // namespace epsest::cli
