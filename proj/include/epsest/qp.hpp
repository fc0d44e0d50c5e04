// Dense convex QP solvers.
//
// solve_nonneg_qp: minimize 0.5 z'Hz + q'z over z >= 0 by accelerated
// projected gradient (step 1/L from power iteration, momentum restart on
// non-monotone steps) with a periodic exact active-set polish. Termination is
// the projected-gradient KKT residual ||min(z, Hz+q)||_inf <= tol.
//
// solve_ineq_qp: minimize 0.5 z'Hz + q'z subject to A z <= b by a dual
// active-set method that starts from the unconstrained minimizer, adds the
// lowest-index violated row, and drops dual-blocking rows; complementary
// slackness holds exactly on the working set. Detects infeasibility when a
// violated row can neither be reduced nor traded against the working set.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "epsest/core.hpp"

namespace epsest {

enum class QpStatus { Converged, MaxIterations, Infeasible };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Converged: return "converged";
    case QpStatus::MaxIterations: return "max_iterations";
    case QpStatus::Infeasible: return "infeasible";
  }
  return "unknown";
}

/// 0.5 z'Hz + q'z with optional rows A z <= b (r = 0 when A is empty).
template <typename Scalar>
struct QpProblem {
  MatX<Scalar> H;
  VecX<Scalar> q;
  MatX<Scalar> A;  // r x d, may have zero rows
  VecX<Scalar> b;  // r
};

template <typename Scalar>
struct QpSolution {
  VecX<Scalar> z;
  Scalar objective = 0;
  Scalar kkt_residual = 0;
  long iterations = 0;
  QpStatus status = QpStatus::MaxIterations;
  VecX<Scalar> multipliers;  // per row of A (solve_ineq_qp only)
  Scalar ridge = 0;          // diagonal added when H failed to factorize
};

/// Optional per-iteration record (accepted iterates only).
template <typename Scalar>
struct QpTrace {
  std::vector<Scalar> objective_log;
};

namespace detail {

template <typename Scalar>
void require_symmetric(const MatX<Scalar>& H) {
  const Scalar scale = Scalar(1) + H.template lpNorm<Eigen::Infinity>();
  if ((H - H.transpose()).template lpNorm<Eigen::Infinity>() > Scalar(1e-10) * scale)
    throw DimensionError("QP matrix is not symmetric");
}

template <typename Scalar>
Scalar lipschitz_estimate(const MatX<Scalar>& H) {
  const Index d = H.rows();
  VecX<Scalar> v = VecX<Scalar>::Constant(d, Scalar(1) / std::sqrt(Scalar(d)));
  for (int it = 0; it < 100; ++it) {
    VecX<Scalar> w = H * v;
    const Scalar norm = w.norm();
    if (norm <= Scalar(0)) break;
    v = w / norm;
  }
  const Scalar lam = v.dot(H * v);
  return std::max(Scalar(1.01) * lam, Scalar(1e-12));
}

template <typename Scalar>
Scalar nonneg_kkt_residual(const MatX<Scalar>& H, const VecX<Scalar>& q, const VecX<Scalar>& z) {
  const VecX<Scalar> g = H * z + q;
  return z.cwiseMin(g).template lpNorm<Eigen::Infinity>();
}

/// Guesses the free set from the iterate, solves the reduced stationarity
/// system exactly, and returns the candidate if it passes the full KKT test.
template <typename Scalar>
bool try_polish(const MatX<Scalar>& H, const VecX<Scalar>& q, const VecX<Scalar>& z,
                Scalar current_res, Scalar tol, Scalar fz, VecX<Scalar>& out) {
  const Index d = z.size();
  const Scalar thresh = std::max(current_res, Scalar(1e-12));
  std::vector<Index> free;
  for (Index i = 0; i < d; ++i)
    if (z(i) > thresh) free.push_back(i);
  if (free.empty()) return false;
  const Index f = static_cast<Index>(free.size());
  MatX<Scalar> Hf(f, f);
  VecX<Scalar> qf(f);
  for (Index a = 0; a < f; ++a) {
    qf(a) = q(free[a]);
    for (Index c = 0; c < f; ++c) Hf(a, c) = H(free[a], free[c]);
  }
  Eigen::LDLT<MatX<Scalar>> ldlt(Hf);
  if (ldlt.info() != Eigen::Success) return false;
  const VecX<Scalar> zf = ldlt.solve(-qf);
  const Scalar solve_res = (Hf * zf + qf).template lpNorm<Eigen::Infinity>();
  if (solve_res > Scalar(1e-10) * (Scalar(1) + qf.template lpNorm<Eigen::Infinity>()))
    return false;  // reduced system inconsistent (singular block)
  if ((zf.array() < Scalar(0)).any()) return false;
  VecX<Scalar> cand = VecX<Scalar>::Zero(d);
  for (Index a = 0; a < f; ++a) cand(free[a]) = zf(a);
  if (nonneg_kkt_residual(H, q, cand) > tol) return false;
  const Scalar fc = Scalar(0.5) * cand.dot(H * cand) + q.dot(cand);
  if (fc > fz + Scalar(1e-12) * (Scalar(1) + std::abs(fz))) return false;
  out = std::move(cand);
  return true;
}

}  // namespace detail

template <typename Scalar>
QpSolution<Scalar> solve_nonneg_qp(const QpProblem<Scalar>& problem, Scalar tol = Scalar(1e-9),
                                   long max_iter = 200000, QpTrace<Scalar>* trace = nullptr) {
  detail::require_symmetric(problem.H);
  const Index d = problem.q.size();
  const MatX<Scalar> H = Scalar(0.5) * (problem.H + problem.H.transpose());
  const VecX<Scalar>& q = problem.q;
  const Scalar L = detail::lipschitz_estimate(H);

  QpSolution<Scalar> sol;
  VecX<Scalar> z = VecX<Scalar>::Zero(d);
  Scalar fz = 0;
  sol.kkt_residual = detail::nonneg_kkt_residual(H, q, z);
  if (trace) trace->objective_log.push_back(fz);
  if (sol.kkt_residual <= tol) {
    sol.z = z;
    sol.status = QpStatus::Converged;
    return sol;
  }

  VecX<Scalar> y = z;
  Scalar t = 1;
  const long check_every = 25;
  const Scalar diverge_norm = Scalar(1e12);
  long it = 0;
  for (it = 1; it <= max_iter; ++it) {
    VecX<Scalar> zn = (y - (H * y + q) / L).cwiseMax(Scalar(0));
    Scalar fn = Scalar(0.5) * zn.dot(H * zn) + q.dot(zn);
    if (fn > fz) {
      // momentum overshoot: restart from the last accepted iterate with a
      // plain projected-gradient step, which cannot increase the objective
      t = 1;
      zn = (z - (H * z + q) / L).cwiseMax(Scalar(0));
      fn = Scalar(0.5) * zn.dot(H * zn) + q.dot(zn);
      if (fn > fz) {
        zn = z;
        fn = fz;
      }
    }
    const Scalar tn = Scalar(0.5) * (Scalar(1) + std::sqrt(Scalar(1) + Scalar(4) * t * t));
    y = zn + ((t - Scalar(1)) / tn) * (zn - z);
    z = zn;
    fz = fn;
    t = tn;
    if (trace) trace->objective_log.push_back(fz);

    if (it % check_every == 0 || it == max_iter) {
      sol.kkt_residual = detail::nonneg_kkt_residual(H, q, z);
      if (sol.kkt_residual <= tol) {
        sol.status = QpStatus::Converged;
        break;
      }
      VecX<Scalar> polished;
      if (detail::try_polish(H, q, z, sol.kkt_residual, tol, fz, polished)) {
        z = std::move(polished);
        fz = Scalar(0.5) * z.dot(H * z) + q.dot(z);
        if (trace) trace->objective_log.push_back(fz);
        sol.kkt_residual = detail::nonneg_kkt_residual(H, q, z);
        sol.status = QpStatus::Converged;
        break;
      }
      if (z.template lpNorm<Eigen::Infinity>() > diverge_norm) break;  // unbounded below
    }
  }
  sol.z = z;
  sol.objective = fz;
  sol.iterations = std::min(it, max_iter);
  return sol;
}

template <typename Scalar>
QpSolution<Scalar> solve_ineq_qp(const QpProblem<Scalar>& problem, Scalar tol = Scalar(1e-9),
                                 long max_iter = 200000) {
  detail::require_symmetric(problem.H);
  const Index d = problem.q.size();
  const Index r = problem.A.rows();
  if (r > 0 && problem.A.cols() != d) throw DimensionError("constraint matrix width mismatch");
  if (problem.b.size() != r) throw DimensionError("constraint vector length mismatch");

  MatX<Scalar> H = Scalar(0.5) * (problem.H + problem.H.transpose());
  QpSolution<Scalar> sol;
  Eigen::LLT<MatX<Scalar>> llt(H);
  if (llt.info() != Eigen::Success) {
    sol.ridge = Scalar(1e-10) * H.trace() / Scalar(d);
    H.diagonal().array() += sol.ridge;
    llt.compute(H);
    if (llt.info() != Eigen::Success)
      throw NotPositiveDefiniteError("QP matrix is not positive semidefinite");
  }

  VecX<Scalar> z = llt.solve(-problem.q);
  VecX<Scalar> mu = VecX<Scalar>::Zero(r);
  std::vector<Index> work;  // active working set, insertion order
  const Scalar feas_tol =
      tol * (Scalar(1) + (r > 0 ? problem.b.template lpNorm<Eigen::Infinity>() : Scalar(0)));

  auto finish = [&](QpStatus status, long iters) {
    sol.z = z;
    sol.multipliers = mu;
    sol.objective = Scalar(0.5) * z.dot(problem.H * z) + problem.q.dot(z);
    Scalar res = (H * z + problem.q + (r > 0 ? VecX<Scalar>(problem.A.transpose() * mu)
                                             : VecX<Scalar>(VecX<Scalar>::Zero(d))))
                     .template lpNorm<Eigen::Infinity>();
    for (Index i = 0; i < r; ++i) {
      const Scalar s = problem.A.row(i).dot(z) - problem.b(i);
      res = std::max(res, std::max(s, Scalar(0)));
      res = std::max(res, std::abs(mu(i) * s));
    }
    sol.kkt_residual = res;
    sol.iterations = iters;
    sol.status = status;
    return sol;
  };

  long it = 0;
  while (it < max_iter) {
    ++it;
    // lowest-index violated row not already active
    Index p = -1;
    for (Index i = 0; i < r; ++i) {
      if (std::find(work.begin(), work.end(), i) != work.end()) continue;
      if (problem.A.row(i).dot(z) - problem.b(i) > feas_tol) {
        p = i;
        break;
      }
    }
    if (p < 0) return finish(QpStatus::Converged, it);

    const VecX<Scalar> ap = problem.A.row(p).transpose();
    while (it < max_iter) {
      ++it;
      const Index w = static_cast<Index>(work.size());
      VecX<Scalar> dz, dmu(w);
      if (w == 0) {
        dz = -llt.solve(ap);
      } else {
        MatX<Scalar> Aw(w, d);
        for (Index k = 0; k < w; ++k) Aw.row(k) = problem.A.row(work[k]);
        const MatX<Scalar> HiAwT = llt.solve(Aw.transpose());
        const MatX<Scalar> Kw = Aw * HiAwT;
        dmu = Kw.ldlt().solve(-(Aw * llt.solve(ap)));
        dz = -llt.solve(ap + Aw.transpose() * dmu);
      }
      const Scalar slope = ap.dot(dz);
      const Scalar sp = ap.dot(z) - problem.b(p);
      const Scalar kEps = Scalar(1e-14);
      Scalar alpha_full = std::numeric_limits<Scalar>::infinity();
      if (slope < -kEps) alpha_full = -sp / slope;
      Scalar alpha_block = std::numeric_limits<Scalar>::infinity();
      Index blocker = -1;
      for (Index k = 0; k < w; ++k) {
        if (dmu(k) < -kEps) {
          const Scalar cand = -mu(work[k]) / dmu(k);
          if (cand < alpha_block) {
            alpha_block = cand;
            blocker = k;
          }
        }
      }
      const Scalar alpha = std::min(alpha_full, alpha_block);
      if (!std::isfinite(alpha)) return finish(QpStatus::Infeasible, it);
      z += alpha * dz;
      for (Index k = 0; k < w; ++k) mu(work[k]) += alpha * dmu(k);
      mu(p) += alpha;
      if (alpha_block < alpha_full) {
        mu(work[blocker]) = 0;
        work.erase(work.begin() + blocker);
        continue;  // same violated row, reduced working set
      }
      work.push_back(p);
      break;
    }
  }
  return finish(QpStatus::MaxIterations, it);
}

}  // namespace epsest
