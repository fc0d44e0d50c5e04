#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "epsest/epsest.hpp"
#include "test_support.hpp"

using namespace epsest;

namespace {

MatX<double> open_loop_measurements(const SystemModel<double>& model, const VecX<double>& x0,
                                    Index N) {
  MatX<double> y(model.m(), N);
  VecX<double> x = x0;
  for (Index k = 0; k < N; ++k) {
    x = model.A * x;
    y.col(k) = model.C * x;
  }
  return y;
}

ConstraintSet<double> saturation_rows(const SystemModel<double>& model, Index horizon,
                                      double cap = 4.0) {
  ConstraintFamily<double> fam;
  fam.kind = ConstraintKind::StateBound;
  fam.L = MatX<double>(1, 2);
  fam.L << 0.0, 1.0;
  fam.upper = VecX<double>::Constant(1, cap);
  return encode_constraint_family(fam, model, horizon);
}

}  // namespace

TEST_CASE("quadratic smoother reproduces model-consistent data exactly") {
  auto model = testsup::demo_model();
  model.xbar0 << 0.5, -0.2;
  const auto y = open_loop_measurements(model, model.xbar0, 6);
  const auto est = h2_smooth(model, testsup::demo_weights(), y);
  CHECK(est.lambda.lpNorm<Eigen::Infinity>() <= 1e-12);
  CHECK(est.what.lpNorm<Eigen::Infinity>() <= 1e-12);
  CHECK(est.primal_objective <= 1e-20);
  VecX<double> x = model.xbar0;
  for (Index k = 0; k <= 6; ++k) {
    CHECK((est.xhat.col(k) - x).lpNorm<Eigen::Infinity>() <= 1e-10);
    x = model.A * x;
  }
}

TEST_CASE("quadratic smoother, scalar worked instance") {
  const auto est =
      h2_smooth(testsup::scalar_model(), testsup::scalar_weights(1.0), testsup::scalar_ones_measurements());
  CHECK(est.lambda(0, 0) == doctest::Approx(0.375).epsilon(1e-12));
  CHECK(est.lambda(0, 1) == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(est.lambda(0, 2) == 0.0);
  CHECK(est.xhat(0, 0) == doctest::Approx(0.375).epsilon(1e-12));
  CHECK(est.xhat(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(est.xhat(0, 2) == doctest::Approx(0.875).epsilon(1e-12));
  CHECK(est.what(0, 0) == doctest::Approx(0.375).epsilon(1e-12));
  CHECK(est.what(0, 1) == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(est.primal_objective == doctest::Approx(0.1875).epsilon(1e-12));
  CHECK_FALSE(est.dual.has_value());
}

TEST_CASE("quadratic smoother matches the covariance-form estimate") {
  // With zero prior mean the smoother must equal Exy * Eyy^-1 * y, both
  // moment matrices assembled here by direct summation.
  auto inst = make_random_instance<double>(21);
  inst.model.xbar0.setZero();
  const Index N = inst.measurements.cols();
  const Index n = inst.model.n(), m = inst.model.m(), l = inst.model.l();
  const auto fac = WeightFactors<double>::from(inst.weights);
  const auto Ap = matrix_powers(inst.model.A, N);

  MatX<double> Exy = MatX<double>::Zero(n * N, m * N);
  for (Index i = 1; i <= N; ++i)
    for (Index k = 1; k <= N; ++k) {
      MatX<double> blk = Ap[i] * fac.Pinv * Ap[k].transpose() * inst.model.C.transpose();
      for (Index s = 1; s <= std::min(i, k); ++s)
        blk += Ap[i - s] * inst.model.B * fac.Qinv * inst.model.B.transpose() *
               Ap[k - s].transpose() * inst.model.C.transpose();
      Exy.block((i - 1) * n, (k - 1) * m, n, m) = blk;
    }
  const MatX<double> Eyy = measurement_gram(inst.model, inst.weights, N);
  VecX<double> ystack(N * m);
  for (Index k = 0; k < N; ++k) ystack.segment(k * m, m) = inst.measurements.col(k);
  const VecX<double> xref = Exy * Eyy.llt().solve(ystack);

  const auto est = h2_smooth(inst.model, inst.weights, inst.measurements);
  for (Index k = 1; k <= N; ++k) {
    const VecX<double> diff = est.xhat.col(k) - xref.segment((k - 1) * n, n);
    CHECK(diff.lpNorm<Eigen::Infinity>() <= 1e-8 * (1 + xref.lpNorm<Eigen::Infinity>()));
  }
}

TEST_CASE("tube smoother: wide tube leaves the prior untouched") {
  const auto est = eps_smooth(testsup::scalar_model(), testsup::scalar_weights(2.0),
                              testsup::scalar_ones_measurements());
  REQUIRE(est.dual.has_value());
  CHECK(est.dual->theta.lpNorm<Eigen::Infinity>() == 0.0);  // optimality holds at the origin
  CHECK(est.xhat.lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(est.what.lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(est.primal_objective == 0.0);
  CHECK(est.eta(0, 0) == doctest::Approx(1.0));  // slack absorbs the whole residual
}

TEST_CASE("tube smoother collapses to the quadratic smoother as the tube vanishes") {
  const auto h2 =
      h2_smooth(testsup::scalar_model(), testsup::scalar_weights(1.0), testsup::scalar_ones_measurements());
  const auto eps = eps_smooth(testsup::scalar_model(), testsup::scalar_weights(1e-12),
                              testsup::scalar_ones_measurements());
  CHECK((h2.xhat - eps.xhat).lpNorm<Eigen::Infinity>() <= 1e-7);
  CHECK((h2.what - eps.what).lpNorm<Eigen::Infinity>() <= 1e-7);
}

TEST_CASE("tube smoother, scalar worked instance at eps = 0.5") {
  const auto est = eps_smooth(testsup::scalar_model(), testsup::scalar_weights(0.5),
                              testsup::scalar_ones_measurements());
  REQUIRE(est.dual.has_value());
  CHECK(est.dual->diagnostics.status == QpStatus::Converged);
  CHECK(est.dual->theta(0) == doctest::Approx(0.125).epsilon(1e-9));
  CHECK(est.dual->theta(1) == doctest::Approx(0.0625).epsilon(1e-9));
  CHECK(est.xhat(0, 0) == doctest::Approx(0.1875).epsilon(1e-9));
  CHECK(est.xhat(0, 1) == doctest::Approx(0.375).epsilon(1e-9));
  CHECK(est.xhat(0, 2) == doctest::Approx(0.4375).epsilon(1e-9));
  CHECK(est.eta(0, 0) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(est.eta(0, 1) == doctest::Approx(0.5).epsilon(1e-9));
  // strong duality and the exact split both hold at the optimum
  CHECK(est.dual->diagnostics.dual_objective ==
        doctest::Approx(est.primal_objective).epsilon(1e-9));
  CHECK((est.dual->zeta - est.dual->theta.cwiseAbs()).lpNorm<Eigen::Infinity>() <= 1e-9);
}

TEST_CASE("estimates are bitwise deterministic") {
  NoiseSpec<double> spec;
  spec.seed = 17;
  const auto model = testsup::demo_model();
  const auto [w, v] = generate_noise(spec, 12);
  VecX<double> x0(2);
  x0 << -1.0, 1.0;
  const auto y = simulate(model, x0, w, v).measurements;
  const auto a = eps_smooth(model, testsup::demo_weights(), y);
  const auto b = eps_smooth(model, testsup::demo_weights(), y);
  CHECK(a.xhat == b.xhat);
  CHECK(a.dual->theta == b.dual->theta);
}

TEST_CASE("constrained estimator with no rows equals the unconstrained one") {
  const auto model = testsup::demo_model();
  NoiseSpec<double> spec;
  spec.seed = 4;
  const auto [w, v] = generate_noise(spec, 8);
  VecX<double> x0(2);
  x0 << -1.0, 1.0;
  const auto y = simulate(model, x0, w, v).measurements;
  const auto plain = eps_smooth(model, testsup::demo_weights(), y);
  const auto constrained = eps_smooth_constrained(model, testsup::demo_weights(), y,
                                                  ConstraintSet<double>::none(8));
  CHECK(plain.xhat == constrained.xhat);
  CHECK(constrained.dual->xi.size() == 0);
}

TEST_CASE("slack constraints leave the estimate unchanged with zero multipliers") {
  const auto model = testsup::demo_model();
  NoiseSpec<double> spec;
  spec.seed = 9;
  const auto [w, v] = generate_noise(spec, 10);
  VecX<double> x0(2);
  x0 << -1.0, 1.0;
  const auto y = simulate(model, x0, w, v).measurements;
  const auto plain = eps_smooth(model, testsup::demo_weights(), y);
  const auto constrained = eps_smooth_constrained(model, testsup::demo_weights(), y,
                                                  saturation_rows(model, 10, 1e6));
  CHECK(constrained.dual->xi.lpNorm<Eigen::Infinity>() <= 1e-9);
  CHECK((plain.xhat - constrained.xhat).lpNorm<Eigen::Infinity>() <= 1e-8);
}

TEST_CASE("demo saturation run: feasible and tighter near the cap") {
  const auto model = testsup::demo_model();
  const auto weights = testsup::demo_weights();
  NoiseSpec<double> spec;
  spec.seed = 2;
  const Index N = 20;
  const auto [w, v] = generate_noise(spec, N);
  VecX<double> x0(2);
  x0 << -1.0, 1.0;
  const auto traj = simulate_with_state_cap(model, x0, w, v, 1, 4.0);
  const auto constrained =
      eps_smooth_constrained(model, weights, traj.measurements, saturation_rows(model, N));
  const auto h2 = h2_smooth(model, weights, traj.measurements);

  CHECK(constrained.xhat.row(1).maxCoeff() <= 4.0 + 1e-6);
  double err_con = 0, err_h2 = 0;
  int near = 0;
  for (Index k = 1; k <= N; ++k) {
    if (std::abs(traj.states(1, k) - 4.0) <= 0.5) {
      ++near;
      err_con += std::abs(constrained.xhat(1, k) - traj.states(1, k));
      err_h2 += std::abs(h2.xhat(1, k) - traj.states(1, k));
    }
  }
  REQUIRE(near > 0);
  CHECK(err_con < err_h2);
}

TEST_CASE("infeasible constraint rows fail loudly") {
  const auto model = testsup::demo_model();
  NoiseSpec<double> spec;
  spec.seed = 3;
  const auto [w, v] = generate_noise(spec, 6);
  VecX<double> x0(2);
  x0 << -1.0, 1.0;
  const auto y = simulate(model, x0, w, v).measurements;
  // second state simultaneously <= -1 and >= +1: empty set
  ConstraintFamily<double> lo, hi;
  lo.kind = hi.kind = ConstraintKind::StateBound;
  lo.L = MatX<double>(1, 2);
  lo.L << 0.0, 1.0;
  lo.upper = VecX<double>::Constant(1, -1.0);
  hi.L = MatX<double>(1, 2);
  hi.L << 0.0, -1.0;
  hi.upper = VecX<double>::Constant(1, -1.0);
  const auto cs = merge_constraints<double>(
      {encode_constraint_family(lo, model, 6), encode_constraint_family(hi, model, 6)});
  CHECK_THROWS_AS(
      eps_smooth_constrained(model, testsup::demo_weights(), y, cs),
      InfeasibleError);
}

TEST_CASE("prediction") {
  auto model = testsup::demo_model();
  model.xbar0 << 0.4, 0.3;
  const auto weights = testsup::demo_weights();
  NoiseSpec<double> spec;
  spec.seed = 12;
  const Index N = 8, j = 3;
  const auto [w, v] = generate_noise(spec, N);
  VecX<double> x0(2);
  x0 << -1.0, 1.0;
  const auto y = simulate(model, x0, w, v).measurements;

  SUBCASE("wide tube propagates the prior open loop") {
    auto wide = weights;
    wide.eps.setConstant(1e4);
    const auto est = eps_predict(model, wide, y, ConstraintSet<double>::none(N + j), j);
    CHECK(est.dual->theta.lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(est.lambda.lpNorm<Eigen::Infinity>() == 0.0);
    VecX<double> x = model.xbar0;
    for (Index k = 0; k < N + j; ++k) x = model.A * x;
    CHECK((est.xhat.col(N + j) - x).lpNorm<Eigen::Infinity>() <= 1e-12);
  }
  SUBCASE("vanishing tube reduces to propagated quadratic smoothing") {
    auto tiny = weights;
    tiny.eps.setConstant(1e-12);
    const auto est = eps_predict(model, tiny, y, ConstraintSet<double>::none(N + j), j);
    const auto h2 = h2_smooth(model, tiny, y);
    VecX<double> x = h2.xhat.col(N);
    for (Index s = 0; s < j; ++s) x = model.A * x;
    CHECK((est.xhat.col(N + j) - x).lpNorm<Eigen::Infinity>() <= 1e-7);
    // costate vanishes on the future segment, so lambda_N..lambda_{N+j} = 0
    for (Index k = N; k <= N + j; ++k)
      CHECK(est.lambda.col(k).lpNorm<Eigen::Infinity>() == 0.0);
  }
  SUBCASE("an active cap on the predicted state binds and matches the oracle") {
    const auto free = eps_predict(model, weights, y, ConstraintSet<double>::none(N + j), j);
    const double unconstrained = free.xhat(1, N + j);
    ConstraintSet<double> cs = ConstraintSet<double>::none(N + j);
    cs.U.assign(N + j, MatX<double>::Zero(1, 2));
    cs.V.assign(N + j, MatX<double>::Zero(1, 1));
    cs.U[N + j - 1] << 0.0, 1.0;
    cs.a = VecX<double>::Constant(1, unconstrained - 0.5);
    const auto capped = eps_predict(model, weights, y, cs, j);
    CHECK(capped.dual->xi(0) > 0.0);
    CHECK(capped.xhat(1, N + j) <= unconstrained - 0.5 + 1e-6);
    const auto oracle = primal_brute_force(model, weights, y, cs, j);
    CHECK((capped.xhat - oracle.xhat).lpNorm<Eigen::Infinity>() <=
          1e-5 * (1 + oracle.xhat.lpNorm<Eigen::Infinity>()));
  }
}

TEST_CASE("joint weight scaling leaves the estimate unchanged") {
  const auto model = testsup::demo_model();
  NoiseSpec<double> spec;
  spec.seed = 23;
  const auto [w, v] = generate_noise(spec, 9);
  VecX<double> x0(2);
  x0 << -1.0, 1.0;
  const auto y = simulate(model, x0, w, v).measurements;
  auto weights = testsup::demo_weights();
  const auto base = eps_smooth(model, weights, y);
  weights.P *= 3.7;
  weights.Q *= 3.7;
  weights.R *= 3.7;
  const auto scaled = eps_smooth(model, weights, y);
  CHECK((base.xhat - scaled.xhat).lpNorm<Eigen::Infinity>() <= 1e-7);
}

TEST_CASE("residual energy grows with the tube width") {
  const auto model = testsup::demo_model();
  NoiseSpec<double> spec;
  spec.seed = 29;
  const auto [w, v] = generate_noise(spec, 12);
  VecX<double> x0(2);
  x0 << -1.0, 1.0;
  const auto y = simulate(model, x0, w, v).measurements;
  double last = -1.0;
  for (const double eps : {0.0, 0.5, 1.0, 2.0, 5.0}) {
    const auto est = eps > 0.0 ? eps_smooth(model, testsup::demo_weights(eps), y)
                               : h2_smooth(model, testsup::demo_weights(), y);
    const double rss = est.vhat.squaredNorm();
    CHECK(rss >= last - 1e-9);
    last = rss;
  }
}

TEST_CASE("non-converged solves are flagged, not thrown") {
  const auto model = testsup::demo_model();
  NoiseSpec<double> spec;
  spec.seed = 31;
  const auto [w, v] = generate_noise(spec, 10);
  VecX<double> x0(2);
  x0 << -1.0, 1.0;
  const auto y = simulate(model, x0, w, v).measurements;
  EstimatorOptions<double> opts;
  opts.max_iter = 3;
  const auto est = eps_smooth(model, testsup::demo_weights(0.01), y, opts);
  CHECK(est.dual->diagnostics.status == QpStatus::MaxIterations);
  CHECK(est.dual->diagnostics.kkt_residual > opts.tol);
}

TEST_CASE("moving horizon") {
  const auto model = testsup::demo_model();
  const auto weights = testsup::demo_weights();

  SUBCASE("window at least as long as the stream is a single batch solve") {
    NoiseSpec<double> spec;
    spec.seed = 41;
    const auto [w, v] = generate_noise(spec, 7);
    VecX<double> x0(2);
    x0 << -1.0, 1.0;
    const auto y = simulate(model, x0, w, v).measurements;
    const auto steps = moving_horizon<double>(model, weights, y, 50);
    REQUIRE(steps.size() == 1);
    const auto batch = eps_smooth(model, weights, y);
    CHECK(steps[0].filtered == batch.xhat.col(7));
  }
  SUBCASE("constant scalar system converges into the tube") {
    auto sm = testsup::scalar_model();
    const double eps = 1e-3;
    const auto sw = testsup::scalar_weights(eps);
    const Index T = 14;
    const MatX<double> y = MatX<double>::Ones(1, T);  // true state pinned at 1
    const auto steps = moving_horizon<double>(sm, sw, y, 3);
    REQUIRE(steps.size() == T - 2);
    const double first_err = std::abs(steps.front().filtered(0) - 1.0);
    const double last_err = std::abs(steps.back().filtered(0) - 1.0);
    CHECK(last_err < first_err);
    CHECK(last_err <= 2 * eps + 1e-6);
  }
  SUBCASE("demo stream with window 10 runs 11 solves and keeps invariants") {
    NoiseSpec<double> spec;
    spec.seed = 43;
    const Index T = 20, W = 10;
    const auto [w, v] = generate_noise(spec, T);
    VecX<double> x0(2);
    x0 << -1.0, 1.0;
    const auto traj = simulate_with_state_cap(model, x0, w, v, 1, 4.0);
    WindowConstraintBuilder<double> builder = [&](Index, Index horizon) {
      return saturation_rows(model, horizon);
    };
    const auto steps = moving_horizon<double>(model, weights, traj.measurements, W, builder);
    REQUIRE(steps.size() == 11);
    for (const auto& step : steps) {
      const auto& est = step.window;
      REQUIRE(est.dual.has_value());
      CHECK(est.dual->diagnostics.status == QpStatus::Converged);
      CHECK(est.lambda.col(W).lpNorm<Eigen::Infinity>() == 0.0);
      CHECK(est.xhat.row(1).maxCoeff() <= 4.0 + 1e-6);
      for (Index k = 0; k < W; ++k) {
        const VecX<double> r =
            est.xhat.col(k + 1) - model.A * est.xhat.col(k) - model.B * est.what.col(k);
        CHECK(r.lpNorm<Eigen::Infinity>() <= 1e-9 * (1 + est.xhat.lpNorm<Eigen::Infinity>()));
      }
    }
  }
  SUBCASE("prediction output appears when requested") {
    NoiseSpec<double> spec;
    spec.seed = 47;
    const auto [w, v] = generate_noise(spec, 9);
    VecX<double> x0(2);
    x0 << -1.0, 1.0;
    const auto y = simulate(model, x0, w, v).measurements;
    const auto steps = moving_horizon<double>(model, weights, y, 5, nullptr, 2);
    REQUIRE(steps.size() == 5);
    for (const auto& s : steps) CHECK(s.predicted.size() == 2);
  }
}
