// The four batch estimators: quadratic-loss smoother, tube-loss smoother,
// tube-loss estimator with linear inequality constraints, and the constrained
// predictor, plus a moving-horizon driver that re-solves on a sliding window.
//
// All of them reconstruct the state estimate from the dual variables through
// the shared backward costate / forward state recursions; the dual itself is
// obtained from a nonnegativity QP after splitting the innovation vector into
// positive and negative parts.
#pragma once

#include <functional>
#include <optional>
#include <sstream>
#include <utility>

#include "epsest/core.hpp"
#include "epsest/model.hpp"
#include "epsest/operators.hpp"
#include "epsest/qp.hpp"

namespace epsest {

template <typename Scalar>
struct SolveDiagnostics {
  QpStatus status = QpStatus::Converged;
  long iterations = 0;
  Scalar kkt_residual = 0;
  Scalar ridge = 0;
  Scalar dual_objective = 0;
};

/// Dual variables of one solve. theta = gamma - beta is the tube analogue of
/// the scaled innovation; zeta = gamma + beta equals |theta| at the optimum;
/// xi are the multipliers of the stacked inequality rows (empty when p = 0).
template <typename Scalar>
struct DualSolution {
  VecX<Scalar> theta;
  VecX<Scalar> zeta;
  VecX<Scalar> xi;
  VecX<Scalar> gamma;
  VecX<Scalar> beta;
  SolveDiagnostics<Scalar> diagnostics;
};

/// Full reconstruction of one estimate over horizon H (= N, or N+j for
/// prediction): states x_0..x_H, disturbances w_0..w_{H-1}, measurement slack
/// eta_1..eta_N, costates lambda_0..lambda_H (lambda_H = 0 by construction),
/// residuals v_k = y_k - C x_k, and the primal objective re-evaluated from
/// the reconstructed variables.
template <typename Scalar>
struct EstimateResult {
  MatX<Scalar> xhat;    // n x (H+1)
  MatX<Scalar> what;    // l x H
  MatX<Scalar> eta;     // m x N
  MatX<Scalar> lambda;  // n x (H+1)
  MatX<Scalar> vhat;    // m x N
  Scalar primal_objective = 0;
  std::optional<DualSolution<Scalar>> dual;

  Index horizon() const { return what.cols(); }
};

template <typename Scalar>
struct EstimatorOptions {
  Scalar tol = Scalar(1e-9);
  long max_iter = 200000;
};

/// Exact evaluation of the primal objective (with its 1/2 factor) at the
/// given variables; the disturbance sum runs over all columns of what.
template <typename Scalar>
Scalar primal_objective_value(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights,
                              const MatX<Scalar>& measurements, const MatX<Scalar>& xhat,
                              const MatX<Scalar>& what, const MatX<Scalar>& eta) {
  const Index N = measurements.cols();
  const VecX<Scalar> d0 = xhat.col(0) - model.xbar0;
  Scalar value = d0.dot(weights.P * d0);
  for (Index k = 0; k < what.cols(); ++k) value += what.col(k).dot(weights.Q * what.col(k));
  for (Index k = 1; k <= N; ++k) {
    VecX<Scalar> r = measurements.col(k - 1) - model.C * xhat.col(k);
    if (eta.size() > 0) r -= eta.col(k - 1);
    value += r.dot(weights.R * r);
  }
  return Scalar(0.5) * value;
}

namespace detail {

/// Split nonnegativity QP over z = [gamma; beta; xi]: with theta = gamma-beta
/// the dual objective becomes 0.5 z' (S' T S) z + [eps-Y; eps+Y; abar]' z.
template <typename Scalar>
QpProblem<Scalar> assemble_split_qp(const MatX<Scalar>& T, const VecX<Scalar>& Y,
                                    const VecX<Scalar>& epsst, const VecX<Scalar>& abar) {
  const Index nm = Y.size();
  const Index p = abar.size();
  QpProblem<Scalar> qp;
  qp.H.resize(2 * nm + p, 2 * nm + p);
  const auto T11 = T.topLeftCorner(nm, nm);
  const auto T12 = T.topRightCorner(nm, p);
  const auto T22 = T.bottomRightCorner(p, p);
  qp.H.topLeftCorner(nm, nm) = T11;
  qp.H.block(0, nm, nm, nm) = -T11;
  qp.H.block(nm, 0, nm, nm) = -T11;
  qp.H.block(nm, nm, nm, nm) = T11;
  qp.H.block(0, 2 * nm, nm, p) = T12;
  qp.H.block(nm, 2 * nm, nm, p) = -T12;
  qp.H.block(2 * nm, 0, p, nm) = T12.transpose();
  qp.H.block(2 * nm, nm, p, nm) = -T12.transpose();
  qp.H.bottomRightCorner(p, p) = T22;
  qp.q.resize(2 * nm + p);
  qp.q << epsst - Y, epsst + Y, abar;
  return qp;
}

/// Backward costate sweep and forward state/disturbance reconstruction shared
/// by every estimator. theta columns cover k = 1..N; past N (prediction) the
/// costate recursion carries only the constraint term.
template <typename Scalar>
void reconstruct(const SystemModel<Scalar>& model, const WeightFactors<Scalar>& fac,
                 const ConstraintSet<Scalar>& cs, const MatX<Scalar>& theta_cols,
                 const VecX<Scalar>& xi, Index horizon, EstimateResult<Scalar>& out) {
  const Index n = model.n(), l = model.l();
  const Index N = theta_cols.cols();
  const Index p = xi.size();
  out.lambda = MatX<Scalar>::Zero(n, horizon + 1);
  for (Index k = horizon; k >= 1; --k) {
    VecX<Scalar> lam = model.A.transpose() * out.lambda.col(k);
    if (k <= N) lam += model.C.transpose() * theta_cols.col(k - 1);
    if (p > 0) lam -= cs.U[k - 1].transpose() * xi;
    out.lambda.col(k - 1) = lam;
  }
  out.xhat.resize(n, horizon + 1);
  out.what.resize(l, horizon);
  out.xhat.col(0) = model.xbar0 + fac.Pinv * model.A.transpose() * out.lambda.col(0);
  for (Index k = 0; k < horizon; ++k) {
    VecX<Scalar> w = fac.Qinv * model.B.transpose() * out.lambda.col(k);
    if (p > 0) w -= fac.Qinv * cs.V[k].transpose() * xi;
    out.what.col(k) = w;
    out.xhat.col(k + 1) = model.A * out.xhat.col(k) + model.B * w;
  }
}

template <typename Scalar>
void fill_residual_slack(const SystemModel<Scalar>& model, const WeightFactors<Scalar>& fac,
                         const MatX<Scalar>& measurements, const MatX<Scalar>& theta_cols,
                         EstimateResult<Scalar>& out) {
  const Index N = measurements.cols(), m = model.m();
  out.vhat.resize(m, N);
  out.eta.resize(m, N);
  for (Index k = 1; k <= N; ++k) {
    out.vhat.col(k - 1) = measurements.col(k - 1) - model.C * out.xhat.col(k);
    out.eta.col(k - 1) = out.vhat.col(k - 1) - fac.Rinv * theta_cols.col(k - 1);
  }
}

/// eta outside the tube on a converged solve means the dual and the
/// reconstruction disagree; that is a solver failure, not something to clip.
template <typename Scalar>
void require_eta_in_tube(const MatX<Scalar>& eta, const VecX<Scalar>& eps, QpStatus status) {
  if (status != QpStatus::Converged) return;
  const Scalar slack = Scalar(1e-6);
  for (Index k = 0; k < eta.cols(); ++k) {
    const Scalar excess = (eta.col(k).cwiseAbs() - eps).maxCoeff();
    if (excess > slack) {
      std::ostringstream msg;
      msg << "slack variable left the tube by " << excess << " at step " << (k + 1);
      throw SolverError(msg.str());
    }
  }
}

template <typename Scalar>
EstimateResult<Scalar> solve_dual_problem(const SystemModel<Scalar>& model,
                                          const WeightSpec<Scalar>& weights,
                                          const MatX<Scalar>& measurements,
                                          const ConstraintSet<Scalar>& cs, Index horizon,
                                          const EstimatorOptions<Scalar>& opts) {
  validate_model(model, weights);
  check_constraints(model, cs);
  if (cs.horizon != horizon) throw DimensionError("constraint horizon mismatch");
  const Index N = measurements.cols(), m = model.m();
  if (N < 1) throw DimensionError("need at least one measurement");
  const auto fac = WeightFactors<Scalar>::from(weights);

  const MatX<Scalar> T = constrained_gram(model, weights, cs, N);
  const VecX<Scalar> Y = prior_residuals(model, measurements);
  const VecX<Scalar> epsst = eps_stack(weights.eps, N);
  const VecX<Scalar> abar = constraint_offset(model, cs);
  const QpProblem<Scalar> qp = assemble_split_qp(T, Y, epsst, abar);
  const QpSolution<Scalar> qs = solve_nonneg_qp(qp, opts.tol, opts.max_iter);

  const Index nm = N * m;
  DualSolution<Scalar> dual;
  dual.gamma = qs.z.segment(0, nm);
  dual.beta = qs.z.segment(nm, nm);
  dual.xi = qs.z.segment(2 * nm, cs.rows());
  dual.theta = dual.gamma - dual.beta;
  dual.zeta = dual.gamma + dual.beta;
  dual.diagnostics = {qs.status, qs.iterations, qs.kkt_residual, qs.ridge, -qs.objective};

  if (qs.status != QpStatus::Converged &&
      dual.xi.template lpNorm<Eigen::Infinity>() > Scalar(1e8) && qs.objective < Scalar(-1e6))
    throw InfeasibleError("constraint set appears infeasible: multiplier growth with unbounded dual");

  EstimateResult<Scalar> out;
  MatX<Scalar> theta_cols = Eigen::Map<const MatX<Scalar>>(dual.theta.data(), m, N);
  reconstruct(model, fac, cs, theta_cols, dual.xi, horizon, out);
  fill_residual_slack(model, fac, measurements, theta_cols, out);
  require_eta_in_tube(out.eta, weights.eps, qs.status);
  out.primal_objective =
      primal_objective_value(model, weights, measurements, out.xhat, out.what, out.eta);
  out.dual = std::move(dual);
  return out;
}

}  // namespace detail

/// Quadratic-loss fixed-interval smoother. Solves the dual linear system
/// directly (the zero-tube limit of the tube smoother) and reconstructs the
/// state estimate through the same recursions; eta is identically zero.
template <typename Scalar>
EstimateResult<Scalar> h2_smooth(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights,
                                 const MatX<Scalar>& measurements) {
  validate_model(model, weights);
  const Index N = measurements.cols(), m = model.m();
  if (N < 1) throw DimensionError("need at least one measurement");
  const auto fac = WeightFactors<Scalar>::from(weights);
  const MatX<Scalar> M = measurement_gram(model, weights, N);
  Eigen::LLT<MatX<Scalar>> llt(M);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefiniteError("measurement Gram matrix failed to factorize");
  const VecX<Scalar> Y = prior_residuals(model, measurements);
  const VecX<Scalar> theta = llt.solve(Y);

  EstimateResult<Scalar> out;
  const MatX<Scalar> theta_cols = Eigen::Map<const MatX<Scalar>>(theta.data(), m, N);
  const auto cs = ConstraintSet<Scalar>::none(N);
  detail::reconstruct(model, fac, cs, theta_cols, VecX<Scalar>(), N, out);
  out.eta = MatX<Scalar>::Zero(m, N);
  out.vhat.resize(m, N);
  for (Index k = 1; k <= N; ++k)
    out.vhat.col(k - 1) = measurements.col(k - 1) - model.C * out.xhat.col(k);
  out.primal_objective =
      primal_objective_value(model, weights, measurements, out.xhat, out.what, out.eta);
  return out;
}

/// Tube-loss fixed-interval smoother (unconstrained).
template <typename Scalar>
EstimateResult<Scalar> eps_smooth(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights,
                                  const MatX<Scalar>& measurements,
                                  const EstimatorOptions<Scalar>& opts = {}) {
  return detail::solve_dual_problem(model, weights, measurements,
                                    ConstraintSet<Scalar>::none(measurements.cols()),
                                    measurements.cols(), opts);
}

/// Tube-loss smoother subject to stacked linear inequality rows over the data
/// horizon (constraints.horizon must equal the number of measurements).
template <typename Scalar>
EstimateResult<Scalar> eps_smooth_constrained(const SystemModel<Scalar>& model,
                                              const WeightSpec<Scalar>& weights,
                                              const MatX<Scalar>& measurements,
                                              const ConstraintSet<Scalar>& constraints,
                                              const EstimatorOptions<Scalar>& opts = {}) {
  if (constraints.horizon != measurements.cols())
    throw DimensionError("constraint horizon must equal the measurement count");
  return detail::solve_dual_problem(model, weights, measurements, constraints,
                                    measurements.cols(), opts);
}

/// Tube-loss prediction of x_{N+j}, j >= 1, from measurements y_1..y_N;
/// constraints (possibly empty) run over the full horizon N+j.
template <typename Scalar>
EstimateResult<Scalar> eps_predict(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights,
                                   const MatX<Scalar>& measurements,
                                   const ConstraintSet<Scalar>& constraints, Index j,
                                   const EstimatorOptions<Scalar>& opts = {}) {
  if (j < 1) throw DimensionError("prediction step count j must be >= 1");
  if (constraints.horizon != measurements.cols() + j)
    throw DimensionError("constraint horizon must equal N + j");
  return detail::solve_dual_problem(model, weights, measurements, constraints,
                                    measurements.cols() + j, opts);
}

template <typename Scalar>
struct MovingHorizonStep {
  Index time = 0;                  // absolute measurement index of the window end
  VecX<Scalar> filtered;           // estimate of x_time
  VecX<Scalar> predicted;          // estimate of x_{time+j}; empty when j = 0
  EstimateResult<Scalar> window;   // full solution of this window's problem
};

/// Builds the constraint rows for one window; receives the absolute time of
/// the window's state origin and the window horizon. A null builder means
/// unconstrained.
template <typename Scalar>
using WindowConstraintBuilder = std::function<ConstraintSet<Scalar>(Index origin, Index horizon)>;

/// Sliding-window driver: at each time t >= window it re-solves the batch
/// problem on the most recent `window` measurements, carrying the previous
/// window's estimate of the new origin state forward as the prior mean.
template <typename Scalar>
std::vector<MovingHorizonStep<Scalar>> moving_horizon(
    const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights, const MatX<Scalar>& stream,
    Index window, const WindowConstraintBuilder<Scalar>& constraints_builder = nullptr, Index j = 0,
    const EstimatorOptions<Scalar>& opts = {}) {
  if (window < 1) throw DimensionError("window must be >= 1");
  const Index total = stream.cols();
  if (total < 1) throw DimensionError("empty measurement stream");
  const Index W = std::min(window, total);

  std::vector<MovingHorizonStep<Scalar>> steps;
  SystemModel<Scalar> local = model;
  VecX<Scalar> prior = model.xbar0;
  for (Index t = W; t <= total; ++t) {
    local.xbar0 = prior;
    const MatX<Scalar> meas = stream.middleCols(t - W, W);
    const Index origin = t - W;
    EstimateResult<Scalar> est;
    if (j > 0) {
      const ConstraintSet<Scalar> cs = constraints_builder
                                           ? constraints_builder(origin, W + j)
                                           : ConstraintSet<Scalar>::none(W + j);
      est = eps_predict(local, weights, meas, cs, j, opts);
    } else if (constraints_builder) {
      est = eps_smooth_constrained(local, weights, meas, constraints_builder(origin, W), opts);
    } else {
      est = eps_smooth(local, weights, meas, opts);
    }
    MovingHorizonStep<Scalar> step;
    step.time = t;
    step.filtered = est.xhat.col(W);
    if (j > 0) step.predicted = est.xhat.col(W + j);
    prior = est.xhat.col(1);  // estimate of the next window's origin state
    step.window = std::move(est);
    steps.push_back(std::move(step));
  }
  return steps;
}

}  // namespace epsest
