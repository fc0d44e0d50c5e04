// Independent ground-truth machinery: a brute-force primal solve over the
// original variables (states eliminated by forward substitution), a KKT
// auditor for estimator outputs, the primal objective evaluator, and a seeded
// random instance generator for cross-route testing.
#pragma once

#include <algorithm>
#include <random>

#include "epsest/core.hpp"
#include "epsest/estimators.hpp"
#include "epsest/model.hpp"
#include "epsest/operators.hpp"
#include "epsest/qp.hpp"

namespace epsest {

/// Residuals of the first-order optimality system, one scalar per condition
/// group; `passed` means every group is within `tol` (dual feasibility is
/// allowed to dip to -tol).
template <typename Scalar>
struct KktReport {
  Scalar state_stationarity = 0;
  Scalar init_stationarity = 0;
  Scalar terminal_costate = 0;
  Scalar disturbance_stationarity = 0;
  Scalar eta_stationarity = 0;
  Scalar complementary_slackness_max = 0;
  Scalar primal_feasibility_max = 0;
  Scalar dual_feasibility_min = 0;
  Scalar multiplier_split_gap = 0;  // max |(gamma+beta) - |theta|| and |zeta - |theta||
  Scalar tol = 0;
  bool passed = false;
};

/// Evaluates the primal objective of `result` (horizon must match; the
/// explicit argument guards against auditing a predictor result as a
/// smoother one).
template <typename Scalar>
Scalar objective_value(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights,
                       const MatX<Scalar>& measurements, const EstimateResult<Scalar>& result,
                       Index horizon) {
  if (horizon != result.horizon())
    throw DimensionError("objective horizon does not match the result");
  return primal_objective_value(model, weights, measurements, result.xhat, result.what,
                                result.eta);
}

template <typename Scalar>
KktReport<Scalar> check_kkt(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights,
                            const MatX<Scalar>& measurements, const ConstraintSet<Scalar>& cs,
                            const EstimateResult<Scalar>& result, Scalar tol = Scalar(1e-6)) {
  const Index N = measurements.cols(), m = model.m();
  const Index H = result.horizon();
  const Index p = cs.rows();
  const bool has_dual = result.dual.has_value();

  KktReport<Scalar> rep;
  rep.tol = tol;

  const Scalar scale =
      Scalar(1) + std::max({result.lambda.template lpNorm<Eigen::Infinity>(),
                            result.xhat.template lpNorm<Eigen::Infinity>(),
                            result.what.template lpNorm<Eigen::Infinity>(),
                            measurements.template lpNorm<Eigen::Infinity>()});

  const VecX<Scalar> xi = has_dual ? result.dual->xi : VecX<Scalar>();
  MatX<Scalar> theta_cols;
  if (has_dual)
    theta_cols = Eigen::Map<const MatX<Scalar>>(result.dual->theta.data(), m, N);

  // Costate stationarity. With a dual present the measurement term enters
  // through eta; the quadratic smoother's conditions use the raw residual.
  for (Index k = 1; k <= H; ++k) {
    VecX<Scalar> resid = result.lambda.col(k - 1) - model.A.transpose() * result.lambda.col(k);
    if (k <= N) {
      const VecX<Scalar> fit = has_dual
                                   ? VecX<Scalar>(measurements.col(k - 1) - result.eta.col(k - 1))
                                   : VecX<Scalar>(measurements.col(k - 1));
      resid -= model.C.transpose() * weights.R * (fit - model.C * result.xhat.col(k));
    }
    if (p > 0 && xi.size() > 0) resid += cs.U[k - 1].transpose() * xi;
    rep.state_stationarity =
        std::max(rep.state_stationarity, resid.template lpNorm<Eigen::Infinity>() / scale);
  }
  rep.init_stationarity = (weights.P * (result.xhat.col(0) - model.xbar0) -
                           model.A.transpose() * result.lambda.col(0))
                              .template lpNorm<Eigen::Infinity>() /
                          scale;
  rep.terminal_costate = result.lambda.col(H).template lpNorm<Eigen::Infinity>() / scale;
  for (Index k = 0; k < H; ++k) {
    VecX<Scalar> resid = weights.Q * result.what.col(k) -
                         model.B.transpose() * result.lambda.col(k);
    if (p > 0 && xi.size() > 0) resid += cs.V[k].transpose() * xi;
    rep.disturbance_stationarity =
        std::max(rep.disturbance_stationarity, resid.template lpNorm<Eigen::Infinity>() / scale);
  }
  if (has_dual) {
    for (Index k = 1; k <= N; ++k) {
      const VecX<Scalar> resid = weights.R * result.eta.col(k - 1) -
                                 weights.R * result.vhat.col(k - 1) + theta_cols.col(k - 1);
      rep.eta_stationarity =
          std::max(rep.eta_stationarity, resid.template lpNorm<Eigen::Infinity>() / scale);
    }
  }

  // Primal feasibility: state recursion, tube bounds, constraint rows.
  for (Index k = 0; k < H; ++k) {
    const VecX<Scalar> resid =
        result.xhat.col(k + 1) - model.A * result.xhat.col(k) - model.B * result.what.col(k);
    rep.primal_feasibility_max =
        std::max(rep.primal_feasibility_max, resid.template lpNorm<Eigen::Infinity>() / scale);
  }
  for (Index k = 0; k < N; ++k)
    rep.primal_feasibility_max = std::max(
        rep.primal_feasibility_max, (result.eta.col(k).cwiseAbs() - weights.eps).maxCoeff());
  VecX<Scalar> slack;
  if (p > 0) {
    VecX<Scalar> lhs = VecX<Scalar>::Zero(p);
    for (Index k = 1; k <= H; ++k) lhs += cs.U[k - 1] * result.xhat.col(k);
    for (Index k = 0; k < H; ++k) lhs += cs.V[k] * result.what.col(k);
    slack = cs.a - lhs;
    rep.primal_feasibility_max =
        std::max(rep.primal_feasibility_max, (-slack).maxCoeff() / scale);
  }

  auto slackness = [](Scalar mult, Scalar gap) {
    return std::abs(mult * gap) / ((Scalar(1) + std::abs(mult)) * (Scalar(1) + std::abs(gap)));
  };

  if (has_dual) {
    const auto& dual = *result.dual;
    rep.dual_feasibility_min = 0;
    if (dual.gamma.size() > 0)
      rep.dual_feasibility_min = std::min(dual.gamma.minCoeff(), dual.beta.minCoeff());
    if (dual.xi.size() > 0)
      rep.dual_feasibility_min = std::min(rep.dual_feasibility_min, dual.xi.minCoeff());
    for (Index k = 0; k < N; ++k) {
      for (Index i = 0; i < m; ++i) {
        const Index idx = k * m + i;
        const Scalar ge = weights.eps(i) - result.eta(i, k);
        const Scalar be = weights.eps(i) + result.eta(i, k);
        rep.complementary_slackness_max =
            std::max({rep.complementary_slackness_max, slackness(dual.gamma(idx), ge),
                      slackness(dual.beta(idx), be)});
        const Scalar theta = dual.theta(idx);
        rep.multiplier_split_gap = std::max(
            {rep.multiplier_split_gap, std::abs(dual.gamma(idx) + dual.beta(idx) - std::abs(theta)),
             std::abs(dual.zeta(idx) - std::abs(theta))});
      }
    }
    for (Index i = 0; i < dual.xi.size(); ++i)
      rep.complementary_slackness_max =
          std::max(rep.complementary_slackness_max, slackness(dual.xi(i), slack(i)));
  }

  rep.passed = rep.state_stationarity <= tol && rep.init_stationarity <= tol &&
               rep.terminal_costate <= tol && rep.disturbance_stationarity <= tol &&
               rep.eta_stationarity <= tol && rep.complementary_slackness_max <= tol &&
               rep.primal_feasibility_max <= tol && rep.dual_feasibility_min >= -tol &&
               rep.multiplier_split_gap <= tol;
  return rep;
}

/// Overload for unconstrained results.
template <typename Scalar>
KktReport<Scalar> check_kkt(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights,
                            const MatX<Scalar>& measurements, const EstimateResult<Scalar>& result,
                            Scalar tol = Scalar(1e-6)) {
  return check_kkt(model, weights, measurements,
                   ConstraintSet<Scalar>::none(result.horizon()), result, tol);
}

/// Solves the primal problem directly over (x0, w_0..w_{H-1}, eta_1..eta_N)
/// with the states eliminated by forward substitution, using the active-set
/// QP. Independent of the dual route; intended as the test oracle at small
/// scale (at most ~300 decision variables).
template <typename Scalar>
EstimateResult<Scalar> primal_brute_force(const SystemModel<Scalar>& model,
                                          const WeightSpec<Scalar>& weights,
                                          const MatX<Scalar>& measurements,
                                          const ConstraintSet<Scalar>& constraints, Index j = 0,
                                          const EstimatorOptions<Scalar>& opts = {}) {
  validate_model(model, weights);
  check_constraints(model, constraints);
  const Index N = measurements.cols(), n = model.n(), l = model.l(), m = model.m();
  const Index H = N + j;
  if (constraints.horizon != H) throw DimensionError("constraint horizon must equal N + j");
  const Index d = n + H * l + N * m;
  if (d > 300) throw DimensionError("brute-force oracle scale guard exceeded (> 300 variables)");
  const Index p = constraints.rows();

  // residual stack: r = y - E [x0; w; eta], E = [Obs, Fbar, I]
  MatX<Scalar> E(N * m, d);
  E.leftCols(n) = observability_stack(model, N);
  E.middleCols(n, N * l) = impulse_response_matrix(model, N);
  E.middleCols(n + N * l, (H - N) * l).setZero();
  E.rightCols(N * m) = MatX<Scalar>::Identity(N * m, N * m);
  VecX<Scalar> ystack(N * m);
  for (Index k = 0; k < N; ++k) ystack.segment(k * m, m) = measurements.col(k);

  const MatX<Scalar> Rstack = tile_block_diag(weights.R, N);
  QpProblem<Scalar> qp;
  qp.H = MatX<Scalar>::Zero(d, d);
  qp.H.topLeftCorner(n, n) = weights.P;
  qp.H.block(n, n, H * l, H * l) = tile_block_diag(weights.Q, H);
  qp.H += E.transpose() * Rstack * E;
  qp.q = -E.transpose() * (Rstack * ystack);
  qp.q.head(n) -= weights.P * model.xbar0;

  const Index r = 2 * N * m + p;
  qp.A = MatX<Scalar>::Zero(r, d);
  qp.b.resize(r);
  qp.A.block(0, n + H * l, N * m, N * m) = MatX<Scalar>::Identity(N * m, N * m);
  qp.A.block(N * m, n + H * l, N * m, N * m) = -MatX<Scalar>::Identity(N * m, N * m);
  const VecX<Scalar> epsst = eps_stack(weights.eps, N);
  qp.b.segment(0, N * m) = epsst;
  qp.b.segment(N * m, N * m) = epsst;
  if (p > 0) {
    const auto maps = constraint_maps(model, constraints, N);
    qp.A.block(2 * N * m, 0, p, n) = -maps.H.bottomRows(p);  // sum_k U_k A^k
    qp.A.block(2 * N * m, n, p, H * l) = maps.G.transpose() + maps.Vstack;
    qp.b.segment(2 * N * m, p) = constraints.a;
  }

  const QpSolution<Scalar> qs = solve_ineq_qp(qp, opts.tol, opts.max_iter);
  if (qs.status == QpStatus::Infeasible)
    throw InfeasibleError("primal constraint set is infeasible");

  EstimateResult<Scalar> out;
  out.xhat.resize(n, H + 1);
  out.xhat.col(0) = qs.z.head(n);
  out.what = Eigen::Map<const MatX<Scalar>>(qs.z.data() + n, l, H);
  for (Index k = 0; k < H; ++k)
    out.xhat.col(k + 1) = model.A * out.xhat.col(k) + model.B * out.what.col(k);
  out.eta = Eigen::Map<const MatX<Scalar>>(qs.z.data() + n + H * l, m, N);
  out.vhat.resize(m, N);
  for (Index k = 1; k <= N; ++k)
    out.vhat.col(k - 1) = measurements.col(k - 1) - model.C * out.xhat.col(k);
  out.primal_objective =
      primal_objective_value(model, weights, measurements, out.xhat, out.what, out.eta);

  // Multipliers of the tube rows are exactly the split dual variables; the
  // costates follow from the same backward sweep the estimators use.
  DualSolution<Scalar> dual;
  dual.gamma = qs.multipliers.segment(0, N * m);
  dual.beta = qs.multipliers.segment(N * m, N * m);
  dual.xi = qs.multipliers.segment(2 * N * m, p);
  dual.theta = dual.gamma - dual.beta;
  dual.zeta = dual.gamma + dual.beta;
  {
    EstimateResult<Scalar> scratch;
    const auto fac = WeightFactors<Scalar>::from(weights);
    const MatX<Scalar> theta_cols = Eigen::Map<const MatX<Scalar>>(dual.theta.data(), m, N);
    detail::reconstruct(model, fac, constraints, theta_cols, dual.xi, H, scratch);
    out.lambda = scratch.lambda;
  }
  const MatX<Scalar> T = constrained_gram(model, weights, constraints, N);
  const QpProblem<Scalar> split =
      detail::assemble_split_qp(T, prior_residuals(model, measurements), epsst,
                                constraint_offset(model, constraints));
  VecX<Scalar> zsplit(2 * N * m + p);
  zsplit << dual.gamma, dual.beta, dual.xi;
  dual.diagnostics.status = qs.status;
  dual.diagnostics.iterations = qs.iterations;
  dual.diagnostics.kkt_residual = qs.kkt_residual;
  dual.diagnostics.ridge = qs.ridge;
  dual.diagnostics.dual_objective =
      -(Scalar(0.5) * zsplit.dot(split.H * zsplit) + split.q.dot(zsplit));
  out.dual = std::move(dual);
  return out;
}

// ---------------------------------------------------------------------------
// Seeded random instances for cross-route tests
// ---------------------------------------------------------------------------

template <typename Scalar>
struct RandomInstance {
  SystemModel<Scalar> model;
  WeightSpec<Scalar> weights;
  MatX<Scalar> measurements;
  ConstraintSet<Scalar> constraints;  // horizon N + j (p may be 0)
  Index j = 0;
};

struct RandomInstanceOptions {
  Index max_n = 3;
  Index max_l = 2;
  Index max_m = 2;
  Index max_steps = 8;
  bool allow_constraints = true;
  bool allow_prediction = true;
};

/// Draws a dimensionally small instance with PD weights (G'G + 0.1 I), a
/// spectral radius damped A, simulated measurements, and (half the time)
/// constraint rows placed either slack or active at the unconstrained
/// optimum. Deterministic in the seed.
template <typename Scalar>
RandomInstance<Scalar> make_random_instance(std::uint64_t seed,
                                            const RandomInstanceOptions& o = {}) {
  std::mt19937_64 engine(seed);
  auto uniform = [&engine]() {
    return static_cast<double>(engine() >> 11) * 0x1.0p-53 + 0x1.0p-53;
  };
  auto pick = [&](Index lo, Index hi) {
    return lo + static_cast<Index>(uniform() * double(hi - lo + 1)) % (hi - lo + 1);
  };
  GaussianSampler gauss(engine());
  auto randn_mat = [&gauss](Index rows, Index cols) {
    MatX<Scalar> M(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index c = 0; c < cols; ++c) M(i, c) = Scalar(gauss());
    return M;
  };

  RandomInstance<Scalar> inst;
  const Index n = pick(1, o.max_n), l = pick(1, o.max_l), m = pick(1, o.max_m);
  const Index N = pick(2, o.max_steps);
  inst.j = o.allow_prediction && uniform() < 0.5 ? pick(1, 3) : 0;

  inst.model.A = randn_mat(n, n);
  const Eigen::EigenSolver<MatX<Scalar>> eig(inst.model.A);
  const Scalar rho = eig.eigenvalues().cwiseAbs().maxCoeff();
  if (rho > Scalar(0.9)) inst.model.A *= Scalar(0.9) / rho;
  inst.model.B = randn_mat(n, l);
  inst.model.C = randn_mat(m, n);
  inst.model.xbar0 = randn_mat(n, 1);

  auto spd = [&](Index dim) {
    const MatX<Scalar> G = randn_mat(dim, dim);
    return MatX<Scalar>(G.transpose() * G + Scalar(0.1) * MatX<Scalar>::Identity(dim, dim));
  };
  inst.weights.P = spd(n);
  inst.weights.Q = spd(l);
  inst.weights.R = spd(m);
  inst.weights.eps.resize(m);
  for (Index i = 0; i < m; ++i) inst.weights.eps(i) = Scalar(0.1 + 1.9 * uniform());

  const VecX<Scalar> x0 = inst.model.xbar0 + VecX<Scalar>(randn_mat(n, 1));
  const MatX<Scalar> w = randn_mat(l, N);
  const MatX<Scalar> v = randn_mat(m, N);
  inst.measurements = simulate(inst.model, x0, w, v).measurements;

  const Index horizon = N + inst.j;
  inst.constraints = ConstraintSet<Scalar>::none(horizon);
  if (o.allow_constraints && uniform() < 0.5) {
    const Index p = pick(1, 2);
    inst.constraints.U.assign(horizon, MatX<Scalar>::Zero(p, n));
    inst.constraints.V.assign(horizon, MatX<Scalar>::Zero(p, l));
    for (Index k = 0; k < horizon; ++k) {
      if (uniform() < 0.7) inst.constraints.U[k] = randn_mat(p, n);
      if (uniform() < 0.5) inst.constraints.V[k] = randn_mat(p, l);
    }
    // place the bound relative to the unconstrained optimum: slack half the
    // time, cutting into it the other half
    const EstimateResult<Scalar> base =
        inst.j > 0 ? eps_predict(inst.model, inst.weights, inst.measurements,
                                 ConstraintSet<Scalar>::none(horizon), inst.j)
                   : eps_smooth(inst.model, inst.weights, inst.measurements);
    VecX<Scalar> value = VecX<Scalar>::Zero(p);
    for (Index k = 1; k <= horizon; ++k) value += inst.constraints.U[k - 1] * base.xhat.col(k);
    for (Index k = 0; k < horizon; ++k) value += inst.constraints.V[k] * base.what.col(k);
    VecX<Scalar> margin(p);
    const bool active = uniform() < 0.5;
    for (Index i = 0; i < p; ++i) {
      const Scalar mag = Scalar(0.1 + 0.9 * uniform());
      margin(i) = active ? -mag : mag;
    }
    inst.constraints.a = value + margin;
  }
  return inst;
}

}  // namespace epsest
