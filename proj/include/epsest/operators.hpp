// Builders for the stacked matrices behind the batch estimation duals: the
// disturbance-to-output impulse response, prior residual stack, measurement
// Gram matrix, and their constrained / prediction extensions, plus encoders
// for the supported linear-inequality constraint families.
#pragma once

#include <optional>
#include <vector>

#include "epsest/core.hpp"
#include "epsest/model.hpp"

namespace epsest {

/// Stacked linear inequality sum_k U_k x_k + sum_k V_k w_k <= a over a fixed
/// horizon. U[k-1] multiplies x_k (k = 1..horizon), V[k] multiplies w_k
/// (k = 0..horizon-1). p = a.size() rows; p = 0 means unconstrained.
template <typename Scalar>
struct ConstraintSet {
  Index horizon = 0;
  std::vector<MatX<Scalar>> U;
  std::vector<MatX<Scalar>> V;
  VecX<Scalar> a;

  Index rows() const { return a.size(); }

  static ConstraintSet none(Index horizon) {
    ConstraintSet c;
    c.horizon = horizon;
    c.a.resize(0);
    return c;
  }
};

template <typename Scalar>
void check_constraints(const SystemModel<Scalar>& model, const ConstraintSet<Scalar>& cs) {
  if (cs.rows() == 0) return;
  if (static_cast<Index>(cs.U.size()) != cs.horizon ||
      static_cast<Index>(cs.V.size()) != cs.horizon)
    throw DimensionError("constraint set must carry one U and one V per step");
  for (const auto& U : cs.U)
    if (U.rows() != cs.rows() || U.cols() != model.n())
      throw DimensionError("constraint U block has wrong shape");
  for (const auto& V : cs.V)
    if (V.rows() != cs.rows() || V.cols() != model.l())
      throw DimensionError("constraint V block has wrong shape");
}

/// Small inverses of the weights, each from one Cholesky solve. The big
/// block-diagonal stacks are tiled from these; no large inverse is formed.
template <typename Scalar>
struct WeightFactors {
  MatX<Scalar> Pinv, Qinv, Rinv;

  static WeightFactors from(const WeightSpec<Scalar>& w) {
    WeightFactors f;
    f.Pinv = invert_spd(w.P, "P");
    f.Qinv = invert_spd(w.Q, "Q");
    f.Rinv = invert_spd(w.R, "R");
    return f;
  }

  static MatX<Scalar> invert_spd(const MatX<Scalar>& M, const char* name) {
    Eigen::LLT<MatX<Scalar>> llt(M);
    if (llt.info() != Eigen::Success)
      throw NotPositiveDefiniteError(std::string(name) + " is not positive definite");
    return llt.solve(MatX<Scalar>::Identity(M.rows(), M.cols()));
  }
};

/// Dense powers A^0..A^kmax.
template <typename Scalar>
std::vector<MatX<Scalar>> matrix_powers(const MatX<Scalar>& A, Index kmax) {
  std::vector<MatX<Scalar>> out;
  out.reserve(static_cast<std::size_t>(kmax) + 1);
  out.push_back(MatX<Scalar>::Identity(A.rows(), A.cols()));
  for (Index k = 0; k < kmax; ++k) out.push_back(out.back() * A);
  return out;
}

/// Block lower-triangular Toeplitz map from stacked disturbances to stacked
/// outputs: block (i,k), 1-based, equals C A^{i-k} B for i >= k.
template <typename Scalar>
MatX<Scalar> impulse_response_matrix(const SystemModel<Scalar>& model, Index N) {
  const Index n = model.n(), l = model.l(), m = model.m();
  const auto Ap = matrix_powers(model.A, N);
  // Markov parameters C A^d B, d = 0..N-1
  std::vector<MatX<Scalar>> markov(static_cast<std::size_t>(N));
  for (Index d = 0; d < N; ++d) markov[d] = model.C * Ap[d] * model.B;
  MatX<Scalar> F = MatX<Scalar>::Zero(N * m, N * l);
  for (Index i = 1; i <= N; ++i)
    for (Index k = 1; k <= i; ++k)
      F.block((i - 1) * m, (k - 1) * l, m, l) = markov[i - k];
  (void)n;
  return F;
}

/// [C A; C A^2; ...; C A^N].
template <typename Scalar>
MatX<Scalar> observability_stack(const SystemModel<Scalar>& model, Index N) {
  const Index m = model.m();
  MatX<Scalar> O(N * m, model.n());
  MatX<Scalar> CA = model.C;
  for (Index k = 1; k <= N; ++k) {
    CA = CA * model.A;
    O.middleRows((k - 1) * m, m) = CA;
  }
  return O;
}

/// Stacked y_k - C A^k xbar0 for k = 1..N (measurements minus the open-loop
/// prediction from the prior mean).
template <typename Scalar>
VecX<Scalar> prior_residuals(const SystemModel<Scalar>& model, const MatX<Scalar>& measurements) {
  if (measurements.rows() != model.m())
    throw DimensionError("measurement dimension does not match C");
  const Index N = measurements.cols(), m = model.m();
  VecX<Scalar> Y(N * m);
  VecX<Scalar> xprop = model.xbar0;
  for (Index k = 1; k <= N; ++k) {
    xprop = model.A * xprop;
    Y.segment((k - 1) * m, m) = measurements.col(k - 1) - model.C * xprop;
  }
  return Y;
}

/// kron(I_count, block).
template <typename Scalar>
MatX<Scalar> tile_block_diag(const MatX<Scalar>& block, Index count) {
  MatX<Scalar> out = MatX<Scalar>::Zero(block.rows() * count, block.cols() * count);
  for (Index k = 0; k < count; ++k)
    out.block(k * block.rows(), k * block.cols(), block.rows(), block.cols()) = block;
  return out;
}

/// eps repeated N times, length N*m.
template <typename Scalar>
VecX<Scalar> eps_stack(const VecX<Scalar>& eps, Index N) {
  VecX<Scalar> out(eps.size() * N);
  for (Index k = 0; k < N; ++k) out.segment(k * eps.size(), eps.size()) = eps;
  return out;
}

/// Gram matrix of the stacked measurements under the weight model:
/// F Qinv F' + Rinv + [CA;..;CA^N] Pinv [..]'. Symmetric positive definite.
template <typename Scalar>
MatX<Scalar> measurement_gram(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights,
                              Index N) {
  const auto fac = WeightFactors<Scalar>::from(weights);
  const MatX<Scalar> F = impulse_response_matrix(model, N);
  const MatX<Scalar> O = observability_stack(model, N);
  MatX<Scalar> M = F * tile_block_diag(fac.Qinv, N) * F.transpose();
  M += tile_block_diag(fac.Rinv, N);
  M.noalias() += O * fac.Pinv * O.transpose();
  return Scalar(0.5) * (M + M.transpose());
}

/// The three extra maps a constraint set induces. With horizon H and p rows:
///   G       (H*l x p): block row i = sum_{k=i..H} B' A'^{k-i} U_k'
///   Vstack  (p x H*l): [V_0 ... V_{H-1}]
///   H       (N*m+p x n): [CA; ..; CA^N; -sum_{i=1..H} U_i A^i]
template <typename Scalar>
struct ConstraintMaps {
  MatX<Scalar> G;
  MatX<Scalar> Vstack;
  MatX<Scalar> H;
};

template <typename Scalar>
ConstraintMaps<Scalar> constraint_maps(const SystemModel<Scalar>& model,
                                       const ConstraintSet<Scalar>& cs, Index N) {
  check_constraints(model, cs);
  const Index n = model.n(), l = model.l(), m = model.m();
  const Index H = cs.horizon, p = cs.rows();
  ConstraintMaps<Scalar> out;
  out.G = MatX<Scalar>::Zero(H * l, p);
  out.Vstack = MatX<Scalar>::Zero(p, H * l);
  out.H = MatX<Scalar>::Zero(N * m + p, n);
  out.H.topRows(N * m) = observability_stack(model, N);
  if (p == 0) return out;
  // Backward accumulation: acc_i = U_i' + A' acc_{i+1} gives block row i of G
  // as B' acc_i and avoids refactoring powers of A.
  MatX<Scalar> acc = MatX<Scalar>::Zero(n, p);
  for (Index i = H; i >= 1; --i) {
    acc = cs.U[i - 1].transpose() + model.A.transpose() * acc;
    out.G.middleRows((i - 1) * l, l) = model.B.transpose() * acc;
    out.Vstack.middleCols((i - 1) * l, l) = cs.V[i - 1];
  }
  MatX<Scalar> bottom = MatX<Scalar>::Zero(p, n);
  MatX<Scalar> Ap = MatX<Scalar>::Identity(n, n);
  for (Index i = 1; i <= H; ++i) {
    Ap = Ap * model.A;
    bottom -= cs.U[i - 1] * Ap;
  }
  out.H.bottomRows(p) = bottom;
  return out;
}

/// Extended Gram matrix for the constrained problems, sized (N*m+p)^2. Its
/// top-left N*m block equals measurement_gram for the same inputs. When
/// cs.horizon > N the recursion horizon extends past the data (prediction)
/// and the impulse response is zero-padded accordingly.
template <typename Scalar>
MatX<Scalar> constrained_gram(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights,
                              const ConstraintSet<Scalar>& cs, Index N) {
  if (cs.horizon < N) throw DimensionError("constraint horizon shorter than data");
  const auto fac = WeightFactors<Scalar>::from(weights);
  const Index m = model.m(), l = model.l();
  const Index H = cs.horizon, p = cs.rows();
  MatX<Scalar> F(N * m, H * l);
  F.leftCols(N * l) = impulse_response_matrix(model, N);
  F.rightCols((H - N) * l).setZero();
  const auto maps = constraint_maps(model, cs, N);
  MatX<Scalar> S(N * m + p, H * l);
  S.topRows(N * m) = F;
  S.bottomRows(p) = -(maps.G.transpose() + maps.Vstack);
  MatX<Scalar> T = S * tile_block_diag(fac.Qinv, H) * S.transpose();
  T.topLeftCorner(N * m, N * m) += tile_block_diag(fac.Rinv, N);
  T.noalias() += maps.H * fac.Pinv * maps.H.transpose();
  return Scalar(0.5) * (T + T.transpose());
}

/// a - sum_{i=1..horizon} U_i A^i xbar0 (the constraint right-hand side seen
/// from the prior mean).
template <typename Scalar>
VecX<Scalar> constraint_offset(const SystemModel<Scalar>& model, const ConstraintSet<Scalar>& cs) {
  VecX<Scalar> abar = cs.a;
  VecX<Scalar> xprop = model.xbar0;
  for (Index i = 1; i <= cs.horizon; ++i) {
    xprop = model.A * xprop;
    if (cs.rows() > 0) abar -= cs.U[i - 1] * xprop;
  }
  return abar;
}

// ---------------------------------------------------------------------------
// Constraint family encoders
// ---------------------------------------------------------------------------

enum class ConstraintKind { StateBound, AverageBound, NoiseBound, IncrementBound };

/// Parameters for one encodable family. Meaning per kind:
///   StateBound:     L x_k <= upper + upper_mean_y * ybar            for all k
///   AverageBound:   lower(+mean terms) <= (1/H) sum_k L x_k <= upper(+mean terms)
///   NoiseBound:     |y_k - C x_k| <= bound  (rows built per measurement step)
///   IncrementBound: L (x_{k+lag} - x_k) <= upper + y_diff_coeff*(y_{k+lag}-y_k)
/// where ybar is the mean measurement vector. Empty vectors mean "side absent".
template <typename Scalar>
struct ConstraintFamily {
  ConstraintKind kind = ConstraintKind::StateBound;
  MatX<Scalar> L;             // rows x n (unused by NoiseBound)
  VecX<Scalar> upper;         // rows (or m for NoiseBound via `bound`)
  VecX<Scalar> lower;         // rows; empty = one-sided
  MatX<Scalar> upper_mean_y;  // rows x m; empty = no measurement dependence
  MatX<Scalar> lower_mean_y;  // rows x m
  VecX<Scalar> bound;         // NoiseBound only: per-channel cap, length m
  Index lag = 1;              // IncrementBound only
  Scalar y_diff_coeff = 0;    // IncrementBound only
};

namespace detail {

template <typename Scalar>
VecX<Scalar> mean_measurement(const MatX<Scalar>& measurements) {
  if (measurements.cols() == 0)
    throw DimensionError("constraint family requires measurements");
  return measurements.rowwise().mean();
}

template <typename Scalar>
void append_rows(ConstraintSet<Scalar>& cs, const std::vector<MatX<Scalar>>& U,
                 const std::vector<MatX<Scalar>>& V, const VecX<Scalar>& a) {
  const Index p0 = cs.rows(), pa = a.size();
  const Index H = cs.horizon;
  if (p0 == 0 && cs.U.empty()) {
    cs.U.assign(H, MatX<Scalar>::Zero(0, U[0].cols()));
    cs.V.assign(H, MatX<Scalar>::Zero(0, V[0].cols()));
  }
  for (Index k = 0; k < H; ++k) {
    MatX<Scalar> Uk(p0 + pa, U[k].cols());
    Uk << cs.U[k], U[k];
    cs.U[k] = std::move(Uk);
    MatX<Scalar> Vk(p0 + pa, V[k].cols());
    Vk << cs.V[k], V[k];
    cs.V[k] = std::move(Vk);
  }
  VecX<Scalar> anew(p0 + pa);
  anew << cs.a, a;
  cs.a = std::move(anew);
}

}  // namespace detail

/// Encodes one family into stacked (U, V, a) rows over the given horizon.
/// Measurement-dependent bounds are evaluated here, so the returned set holds
/// concrete numbers only. Double-sided bounds produce paired rows.
template <typename Scalar>
ConstraintSet<Scalar> encode_constraint_family(const ConstraintFamily<Scalar>& fam,
                                               const SystemModel<Scalar>& model, Index horizon,
                                               const MatX<Scalar>& measurements = MatX<Scalar>()) {
  const Index n = model.n(), l = model.l(), m = model.m();
  ConstraintSet<Scalar> cs = ConstraintSet<Scalar>::none(horizon);
  cs.U.assign(horizon, MatX<Scalar>::Zero(0, n));
  cs.V.assign(horizon, MatX<Scalar>::Zero(0, l));

  auto eval_bound = [&](const VecX<Scalar>& c, const MatX<Scalar>& mean_w) -> VecX<Scalar> {
    if (mean_w.size() == 0) return c;
    return c + mean_w * detail::mean_measurement(measurements);
  };

  switch (fam.kind) {
    case ConstraintKind::StateBound: {
      if (fam.L.cols() != n) throw DimensionError("state bound L has wrong column count");
      const Index r = fam.L.rows();
      const VecX<Scalar> up = eval_bound(fam.upper, fam.upper_mean_y);
      if (up.size() != r) throw DimensionError("state bound value has wrong length");
      std::vector<MatX<Scalar>> U(horizon), V(horizon);
      VecX<Scalar> a(horizon * r);
      for (Index k = 0; k < horizon; ++k) {
        U[k] = MatX<Scalar>::Zero(horizon * r, n);
        U[k].middleRows(k * r, r) = fam.L;
        V[k] = MatX<Scalar>::Zero(horizon * r, l);
        a.segment(k * r, r) = up;
      }
      detail::append_rows(cs, U, V, a);
      break;
    }
    case ConstraintKind::AverageBound: {
      if (fam.L.cols() != n) throw DimensionError("average bound L has wrong column count");
      const Index r = fam.L.rows();
      const MatX<Scalar> Lavg = fam.L / Scalar(horizon);
      auto add_side = [&](const VecX<Scalar>& c, const MatX<Scalar>& mean_w, Scalar sign) {
        if (c.size() == 0) return;
        if (c.size() != r) throw DimensionError("average bound value has wrong length");
        const VecX<Scalar> value = eval_bound(c, mean_w);
        std::vector<MatX<Scalar>> U(horizon, MatX<Scalar>(sign * Lavg));
        std::vector<MatX<Scalar>> V(horizon, MatX<Scalar>::Zero(r, l));
        detail::append_rows(cs, U, V, VecX<Scalar>(sign * value));
      };
      add_side(fam.upper, fam.upper_mean_y, Scalar(1));
      add_side(fam.lower, fam.lower_mean_y, Scalar(-1));
      break;
    }
    case ConstraintKind::NoiseBound: {
      // |y_k - C x_k| <= bound, one row pair per step with data:
      //   C x_k <= bound + y_k   and   -C x_k <= bound - y_k
      if (fam.bound.size() != m) throw DimensionError("noise bound has wrong length");
      const Index steps = std::min<Index>(horizon, measurements.cols());
      if (steps < 1) throw DimensionError("noise bound requires measurements");
      const Index p = 2 * m * steps;
      std::vector<MatX<Scalar>> U(horizon, MatX<Scalar>::Zero(p, n));
      std::vector<MatX<Scalar>> V(horizon, MatX<Scalar>::Zero(p, l));
      VecX<Scalar> a(p);
      for (Index k = 1; k <= steps; ++k) {
        const Index row = 2 * m * (k - 1);
        U[k - 1].middleRows(row, m) = model.C;
        U[k - 1].middleRows(row + m, m) = -model.C;
        a.segment(row, m) = fam.bound + measurements.col(k - 1);
        a.segment(row + m, m) = fam.bound - measurements.col(k - 1);
      }
      detail::append_rows(cs, U, V, a);
      break;
    }
    case ConstraintKind::IncrementBound: {
      if (fam.L.cols() != n) throw DimensionError("increment bound L has wrong column count");
      if (fam.lag < 1) throw DimensionError("increment lag must be >= 1");
      const Index r = fam.L.rows();
      const Index last = horizon - fam.lag;  // constraints for k = 1..last
      if (last < 1) throw DimensionError("increment lag exceeds horizon");
      if (fam.upper.size() != r) throw DimensionError("increment bound value has wrong length");
      const auto Ap = matrix_powers(model.A, fam.lag);
      const MatX<Scalar> Ldrift = fam.L * (Ap[fam.lag] - MatX<Scalar>::Identity(n, n));
      const Index p = last * r;
      std::vector<MatX<Scalar>> U(horizon, MatX<Scalar>::Zero(p, n));
      std::vector<MatX<Scalar>> V(horizon, MatX<Scalar>::Zero(p, l));
      VecX<Scalar> a(p);
      for (Index k = 1; k <= last; ++k) {
        const Index row = (k - 1) * r;
        U[k - 1].middleRows(row, r) = Ldrift;
        for (Index jj = 0; jj < fam.lag; ++jj)
          V[k + jj].middleRows(row, r) = fam.L * Ap[fam.lag - 1 - jj] * model.B;
        VecX<Scalar> value = fam.upper;
        if (fam.y_diff_coeff != Scalar(0)) {
          if (k + fam.lag > measurements.cols())
            throw DimensionError("increment bound references measurements past the data");
          // scalar coefficient applied to the first channel's difference
          value.array() += fam.y_diff_coeff *
                           (measurements(0, k + fam.lag - 1) - measurements(0, k - 1));
        }
        a.segment(row, r) = value;
      }
      detail::append_rows(cs, U, V, a);
      break;
    }
  }
  return cs;
}

/// Concatenates the rows of several encoded sets sharing one horizon.
template <typename Scalar>
ConstraintSet<Scalar> merge_constraints(const std::vector<ConstraintSet<Scalar>>& sets) {
  if (sets.empty()) return ConstraintSet<Scalar>::none(0);
  ConstraintSet<Scalar> out = sets.front();
  for (std::size_t i = 1; i < sets.size(); ++i) {
    const auto& s = sets[i];
    if (s.horizon != out.horizon) throw DimensionError("merged constraint horizons differ");
    if (s.rows() == 0) continue;
    if (out.rows() == 0) {
      out = s;
      continue;
    }
    detail::append_rows(out, s.U, s.V, s.a);
  }
  return out;
}

}  // namespace epsest
