// Linear time-invariant system model, trajectory simulation and the seeded
// noise generator used by the demo experiment.
//
// Index convention shared by the whole library:
//   states        x_0 .. x_K      (K+1 columns)
//   measurements  y_1 .. y_K      (K columns, column t holds y_{t+1})
//   disturbances  w_0 .. w_{K-1}  (K columns)
//   noises        v_1 .. v_K      (K columns)
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

#include "epsest/core.hpp"

namespace epsest {

/// x_{k+1} = A x_k + B w_k,  y_k = C x_k + v_k, with prior mean xbar0 for the
/// unknown initial state.
template <typename Scalar>
struct SystemModel {
  MatX<Scalar> A;      // n x n
  MatX<Scalar> B;      // n x l
  MatX<Scalar> C;      // m x n
  VecX<Scalar> xbar0;  // n

  Index n() const { return A.rows(); }
  Index l() const { return B.cols(); }
  Index m() const { return C.rows(); }
};

/// Positive-definite weights on initial-state deviation, disturbance and
/// measurement noise, plus the per-channel tube half-width eps (> 0).
template <typename Scalar>
struct WeightSpec {
  MatX<Scalar> P;    // n x n
  MatX<Scalar> Q;    // l x l
  MatX<Scalar> R;    // m x m
  VecX<Scalar> eps;  // m, strictly positive
};

template <typename Scalar>
struct Trajectory {
  MatX<Scalar> states;        // n x (K+1)
  MatX<Scalar> measurements;  // m x K
  MatX<Scalar> disturbances;  // l x K
  MatX<Scalar> noises;        // m x K

  Index steps() const { return measurements.cols(); }
};

/// Parameters of the demo noise model: a seeded Gaussian term plus a
/// period-4 sinusoid, and a constant bias on the measurement noise.
template <typename Scalar>
struct NoiseSpec {
  Scalar gauss_scale_w{4};
  Scalar sin_amp_w{4};
  Scalar gauss_scale_v{4};
  Scalar sin_amp_v{4};
  Scalar bias_v{-4};
  std::uint64_t seed{0};
};

/// sin(pi*k/2) for integer k, exact (period 4 by construction).
template <typename Scalar = double>
inline Scalar quarter_sin(long long k) {
  static constexpr int table[4] = {0, 1, 0, -1};
  long long r = k % 4;
  if (r < 0) r += 4;
  return Scalar(table[r]);
}

/// Standard normal sampler with a fully pinned-down algorithm so sequences
/// replay across platforms and languages: mt19937_64 raw draws are mapped to
/// uniforms in (0,1] via u = (x >> 11) * 2^-53 + 2^-53, and turned into
/// normals by Box-Muller evaluated in pairs (cos first, sin second).
class GaussianSampler {
 public:
  explicit GaussianSampler(std::uint64_t seed) : engine_(seed) {}

  double operator()() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  double next_uniform() {
    const std::uint64_t x = engine_();
    return static_cast<double>(x >> 11) * 0x1.0p-53 + 0x1.0p-53;
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

namespace detail {

template <typename Scalar>
inline void check_square(const MatX<Scalar>& M, const char* name) {
  if (M.rows() != M.cols())
    throw DimensionError(std::string(name) + " must be square");
}

template <typename Scalar>
inline void check_spd(const MatX<Scalar>& M, const char* name) {
  check_square(M, name);
  const Scalar scale = Scalar(1) + M.template lpNorm<Eigen::Infinity>();
  if ((M - M.transpose()).template lpNorm<Eigen::Infinity>() > Scalar(1e-12) * scale)
    throw NotPositiveDefiniteError(std::string(name) + " is not symmetric");
  Eigen::LLT<MatX<Scalar>> llt(M);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefiniteError(std::string(name) + " is not positive definite");
}

}  // namespace detail

/// Checks every dimension and definiteness invariant; throws on the first
/// violation, otherwise returns normally.
template <typename Scalar>
void validate_model(const SystemModel<Scalar>& model, const WeightSpec<Scalar>& weights) {
  detail::check_square(model.A, "A");
  const Index n = model.n();
  if (n < 1 || model.l() < 1 || model.m() < 1)
    throw DimensionError("model dimensions must satisfy n, l, m >= 1");
  if (model.B.rows() != n) throw DimensionError("B row count does not match A");
  if (model.C.cols() != n) throw DimensionError("C column count does not match A");
  if (model.xbar0.size() != n) throw DimensionError("xbar0 length does not match A");
  if (weights.P.rows() != n || weights.P.cols() != n)
    throw DimensionError("P must be n x n");
  if (weights.Q.rows() != model.l() || weights.Q.cols() != model.l())
    throw DimensionError("Q must be l x l");
  if (weights.R.rows() != model.m() || weights.R.cols() != model.m())
    throw DimensionError("R must be m x m");
  detail::check_spd(weights.P, "P");
  detail::check_spd(weights.Q, "Q");
  detail::check_spd(weights.R, "R");
  if (weights.eps.size() != model.m())
    throw DimensionError("eps length does not match measurement dimension");
  if (!(weights.eps.array() > Scalar(0)).all())
    throw NonPositiveEpsilonError("eps must be strictly positive elementwise");
}

/// Runs the recursions exactly as written; w and v must both have K columns.
template <typename Scalar>
Trajectory<Scalar> simulate(const SystemModel<Scalar>& model, const VecX<Scalar>& x0,
                            const MatX<Scalar>& w, const MatX<Scalar>& v) {
  if (w.cols() != v.cols())
    throw DimensionError("disturbance and noise sequences differ in length");
  if (w.cols() < 1) throw DimensionError("need at least one step");
  if (w.rows() != model.l()) throw DimensionError("disturbance dimension mismatch");
  if (v.rows() != model.m()) throw DimensionError("noise dimension mismatch");
  if (x0.size() != model.n()) throw DimensionError("x0 length mismatch");
  const Index K = w.cols();
  Trajectory<Scalar> out;
  out.states.resize(model.n(), K + 1);
  out.measurements.resize(model.m(), K);
  out.states.col(0) = x0;
  for (Index k = 0; k < K; ++k) {
    out.states.col(k + 1) = model.A * out.states.col(k) + model.B * w.col(k);
    out.measurements.col(k) = model.C * out.states.col(k + 1) + v.col(k);
  }
  out.disturbances = w;
  out.noises = v;
  return out;
}

/// Same as simulate() but clamps cap_row' * x to cap after every step, for
/// plants with a saturation nonlinearity. cap_row must select a single state
/// coordinate (one entry 1, rest 0).
template <typename Scalar>
Trajectory<Scalar> simulate_with_state_cap(const SystemModel<Scalar>& model,
                                           const VecX<Scalar>& x0, const MatX<Scalar>& w,
                                           const MatX<Scalar>& v, Index cap_index,
                                           Scalar cap_value) {
  if (cap_index < 0 || cap_index >= model.n())
    throw DimensionError("cap_index outside state dimension");
  if (w.cols() != v.cols())
    throw DimensionError("disturbance and noise sequences differ in length");
  const Index K = w.cols();
  Trajectory<Scalar> out;
  out.states.resize(model.n(), K + 1);
  out.measurements.resize(model.m(), K);
  out.states.col(0) = x0;
  for (Index k = 0; k < K; ++k) {
    VecX<Scalar> next = model.A * out.states.col(k) + model.B * w.col(k);
    if (next(cap_index) > cap_value) next(cap_index) = cap_value;
    out.states.col(k + 1) = next;
    out.measurements.col(k) = model.C * out.states.col(k + 1) + v.col(k);
  }
  out.disturbances = w;
  out.noises = v;
  return out;
}

/// Deterministic replay of the demo noise processes:
///   w_k = gauss_scale_w * r1_k + sin_amp_w * sin(pi k / 2),   k = 0..K-1
///   v_k = gauss_scale_v * r2_k + sin_amp_v * sin(pi k / 2) + bias_v,  k = 1..K
/// All r1 draws happen before all r2 draws; within a step, components are
/// drawn in order. Returns (w, v) as l x K and m x K matrices.
template <typename Scalar>
std::pair<MatX<Scalar>, MatX<Scalar>> generate_noise(const NoiseSpec<Scalar>& spec, Index K,
                                                     Index l = 1, Index m = 1) {
  if (K < 1) throw DimensionError("K must be >= 1");
  GaussianSampler gauss(spec.seed);
  MatX<Scalar> w(l, K), v(m, K);
  for (Index k = 0; k < K; ++k) {
    const Scalar s = spec.sin_amp_w * quarter_sin<Scalar>(k);
    for (Index i = 0; i < l; ++i) w(i, k) = spec.gauss_scale_w * Scalar(gauss()) + s;
  }
  for (Index k = 1; k <= K; ++k) {
    const Scalar s = spec.sin_amp_v * quarter_sin<Scalar>(k) + spec.bias_v;
    for (Index i = 0; i < m; ++i) v(i, k - 1) = spec.gauss_scale_v * Scalar(gauss()) + s;
  }
  return {std::move(w), std::move(v)};
}

}  // namespace epsest
