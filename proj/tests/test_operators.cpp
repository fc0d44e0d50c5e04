#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "epsest/epsest.hpp"
#include "test_support.hpp"

using namespace epsest;

namespace {

// Independent block oracle: C A^{i-k} B by repeated multiplication.
MatX<double> markov_block(const SystemModel<double>& model, Index i, Index k) {
  MatX<double> Ap = MatX<double>::Identity(model.n(), model.n());
  for (Index s = 0; s < i - k; ++s) Ap = model.A * Ap;
  return model.C * Ap * model.B;
}

}  // namespace

TEST_CASE("impulse response of the scalar identity system") {
  const auto model = testsup::scalar_model();
  const auto F = impulse_response_matrix(model, 2);
  MatX<double> expect(2, 2);
  expect << 1, 0, 1, 1;
  CHECK(F == expect);
  CHECK(impulse_response_matrix(model, 1)(0, 0) == 1.0);
}

TEST_CASE("impulse response of the demo system, frozen values") {
  const auto model = testsup::demo_model();
  const auto F = impulse_response_matrix(model, 3);
  REQUIRE(F.rows() == 3);
  REQUIRE(F.cols() == 3);
  CHECK(F(0, 0) == doctest::Approx(0.5));
  CHECK(F(1, 0) == doctest::Approx(2.5));
  CHECK(F(2, 0) == doctest::Approx(3.2));
  CHECK(F(2, 1) == doctest::Approx(2.5));
  CHECK(F(0, 1) == 0.0);
  CHECK(F(1, 2) == 0.0);
  for (Index i = 1; i <= 3; ++i)
    for (Index k = 1; k <= i; ++k)
      CHECK(F(i - 1, k - 1) == doctest::Approx(markov_block(model, i, k)(0, 0)).epsilon(1e-12));
}

TEST_CASE("random blocks of the impulse response match the direct product") {
  const auto inst = make_random_instance<double>(11);
  const Index N = 6;
  const auto F = impulse_response_matrix(inst.model, N);
  std::mt19937_64 rng(3);
  const Index m = inst.model.m(), l = inst.model.l();
  for (int trial = 0; trial < 5; ++trial) {
    const Index i = 1 + Index(rng() % N);
    const Index k = 1 + Index(rng() % i);
    const MatX<double> expect = markov_block(inst.model, i, k);
    const MatX<double> got = F.block((i - 1) * m, (k - 1) * l, m, l);
    CHECK((got - expect).lpNorm<Eigen::Infinity>() <= 1e-12 * (1 + expect.lpNorm<Eigen::Infinity>()));
  }
}

TEST_CASE("prior residuals") {
  SUBCASE("zero prior mean stacks the measurements") {
    auto model = testsup::demo_model();
    MatX<double> y(1, 3);
    y << 2.0, -1.0, 0.5;
    const VecX<double> Y = prior_residuals(model, y);
    CHECK(Y(0) == 2.0);
    CHECK(Y(1) == -1.0);
    CHECK(Y(2) == 0.5);
  }
  SUBCASE("constant scalar system subtracts the propagated prior") {
    auto model = testsup::scalar_model();
    model.xbar0 = VecX<double>::Ones(1);
    MatX<double> y(1, 2);
    y << 3.0, 5.0;
    const VecX<double> Y = prior_residuals(model, y);
    CHECK(Y(0) == 2.0);
    CHECK(Y(1) == 4.0);
  }
}

TEST_CASE("measurement Gram matrix, scalar case against the termwise oracle") {
  const auto M = measurement_gram(testsup::scalar_model(), testsup::scalar_weights(1.0), 2);
  // three addends evaluated by hand: F Qinv F' = [[1,1],[1,2]], Rinv = I,
  // obs-stack P^-1 term = ones(2)
  MatX<double> expect(2, 2);
  expect << 3, 2, 2, 4;
  CHECK((M - expect).lpNorm<Eigen::Infinity>() <= 1e-14);
}

TEST_CASE("doubling R halves only the noise addend") {
  const auto model = testsup::demo_model();
  auto w1 = testsup::demo_weights();
  auto w2 = testsup::demo_weights();
  w2.R *= 2.0;
  const Index N = 5;
  const auto M1 = measurement_gram(model, w1, N);
  const auto M2 = measurement_gram(model, w2, N);
  const MatX<double> halfRinv =
      0.5 * tile_block_diag(WeightFactors<double>::from(w1).Rinv, N);
  CHECK((M1 - M2 - halfRinv).lpNorm<Eigen::Infinity>() <= 1e-12);
}

TEST_CASE("demo Gram matrix at N = 20 is symmetric positive definite") {
  const auto M = measurement_gram(testsup::demo_model(), testsup::demo_weights(), 20);
  REQUIRE(M.rows() == 20);
  CHECK((M - M.transpose()).lpNorm<Eigen::Infinity>() <= 1e-12 * M.lpNorm<Eigen::Infinity>());
  Eigen::SelfAdjointEigenSolver<MatX<double>> eig(M);
  CHECK(eig.eigenvalues().minCoeff() > 0.0);
}

TEST_CASE("constraint maps") {
  SUBCASE("no rows reduces to the observability stack") {
    const auto model = testsup::demo_model();
    const auto maps = constraint_maps(model, ConstraintSet<double>::none(4), 4);
    CHECK(maps.G.cols() == 0);
    CHECK(maps.Vstack.rows() == 0);
    CHECK(maps.H.rows() == 4);
    CHECK((maps.H - observability_stack(model, 4)).lpNorm<Eigen::Infinity>() == 0.0);
  }
  SUBCASE("scalar single-row example") {
    const auto model = testsup::scalar_model();
    ConstraintSet<double> cs;
    cs.horizon = 2;
    cs.U = {MatX<double>::Ones(1, 1), MatX<double>::Zero(1, 1)};
    cs.V = {MatX<double>::Zero(1, 1), MatX<double>::Zero(1, 1)};
    cs.a = VecX<double>::Ones(1);
    const auto maps = constraint_maps(model, cs, 2);
    CHECK(maps.G(0, 0) == 1.0);
    CHECK(maps.G(1, 0) == 0.0);
    CHECK(maps.H(2, 0) == -1.0);  // bottom row: -sum U_i A^i
  }
  SUBCASE("demo saturation rows keep V empty of coefficients") {
    const auto model = testsup::demo_model();
    MatX<double> L(1, 2);
    L << 0.0, 1.0;
    ConstraintFamily<double> fam;
    fam.kind = ConstraintKind::StateBound;
    fam.L = L;
    fam.upper = VecX<double>::Constant(1, 4.0);
    const auto cs = encode_constraint_family(fam, model, 20);
    REQUIRE(cs.rows() == 20);
    const auto maps = constraint_maps(model, cs, 20);
    CHECK(maps.Vstack.isZero(0.0));
    CHECK(maps.G.rows() == 20);
    CHECK(maps.G.cols() == 20);
  }
}

TEST_CASE("extended Gram matrix") {
  const auto model = testsup::demo_model();
  const auto weights = testsup::demo_weights();

  SUBCASE("unconstrained case collapses to the measurement Gram") {
    const auto T = constrained_gram(model, weights, ConstraintSet<double>::none(6), 6);
    const auto M = measurement_gram(model, weights, 6);
    CHECK((T - M).lpNorm<Eigen::Infinity>() <= 1e-12);
  }
  SUBCASE("top-left block always equals the measurement Gram") {
    const auto inst = make_random_instance<double>(17);
    const Index N = inst.measurements.cols();
    const auto T = constrained_gram(inst.model, inst.weights, inst.constraints, N);
    const auto M = measurement_gram(inst.model, inst.weights, N);
    const Index nm = N * inst.model.m();
    CHECK((T.topLeftCorner(nm, nm) - M).lpNorm<Eigen::Infinity>() <=
          1e-10 * (1 + M.lpNorm<Eigen::Infinity>()));
    CHECK((T - T.transpose()).lpNorm<Eigen::Infinity>() <=
          1e-12 * (1 + T.lpNorm<Eigen::Infinity>()));
    Eigen::SelfAdjointEigenSolver<MatX<double>> eig(T);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-10 * T.lpNorm<Eigen::Infinity>());
  }
  SUBCASE("scalar constrained case against a termwise script") {
    const auto smodel = testsup::scalar_model();
    const auto sweights = testsup::scalar_weights(1.0);
    ConstraintSet<double> cs;
    cs.horizon = 2;
    cs.U = {MatX<double>::Ones(1, 1), MatX<double>::Zero(1, 1)};
    cs.V = {MatX<double>::Zero(1, 1), MatX<double>::Zero(1, 1)};
    cs.a = VecX<double>::Ones(1);
    const auto T = constrained_gram(smodel, sweights, cs, 2);
    // termwise: F = [[1,0],[1,1]], G = (1,0)', V = 0, H = [1;1;-1]
    MatX<double> S(3, 2);
    S << 1, 0, 1, 1, -1, 0;
    MatX<double> expect = S * S.transpose();
    expect.topLeftCorner(2, 2) += MatX<double>::Identity(2, 2);
    MatX<double> Hm(3, 1);
    Hm << 1, 1, -1;
    expect += Hm * Hm.transpose();
    CHECK((T - expect).lpNorm<Eigen::Infinity>() <= 1e-14);
  }
}

TEST_CASE("prediction padding") {
  SUBCASE("unconstrained prediction Gram equals the smoother Gram") {
    const auto model = testsup::demo_model();
    const auto weights = testsup::demo_weights();
    const Index N = 5, j = 2;
    const auto T = constrained_gram(model, weights, ConstraintSet<double>::none(N + j), N);
    const auto M = measurement_gram(model, weights, N);
    CHECK((T - M).lpNorm<Eigen::Infinity>() <= 1e-12);
  }
  SUBCASE("demo shapes at N = 20, j = 2 with saturation rows") {
    const auto model = testsup::demo_model();
    MatX<double> L(1, 2);
    L << 0.0, 1.0;
    ConstraintFamily<double> fam;
    fam.kind = ConstraintKind::StateBound;
    fam.L = L;
    fam.upper = VecX<double>::Constant(1, 4.0);
    const auto cs = encode_constraint_family(fam, model, 22);
    REQUIRE(cs.rows() == 22);
    const auto maps = constraint_maps(model, cs, 20);
    CHECK(maps.G.rows() == 22);      // (N+j) * l
    CHECK(maps.G.cols() == 22);      // p
    CHECK(maps.H.rows() == 20 + 22); // N*m + p
    const auto T = constrained_gram(model, testsup::demo_weights(), cs, 20);
    CHECK(T.rows() == 42);
  }
}

TEST_CASE("epsilon stack repeats the tube widths") {
  VecX<double> eps(2);
  eps << 0.5, 2.0;
  const auto st = eps_stack(eps, 3);
  REQUIRE(st.size() == 6);
  for (int k = 0; k < 3; ++k) {
    CHECK(st(2 * k) == 0.5);
    CHECK(st(2 * k + 1) == 2.0);
  }
}

TEST_CASE("constraint family encoders") {
  const auto model = testsup::demo_model();

  SUBCASE("state bound tiles L along the diagonal") {
    MatX<double> L(1, 2);
    L << 0.0, 1.0;
    ConstraintFamily<double> fam;
    fam.kind = ConstraintKind::StateBound;
    fam.L = L;
    fam.upper = VecX<double>::Constant(1, 4.0);
    const auto cs = encode_constraint_family(fam, model, 20);
    REQUIRE(cs.rows() == 20);
    CHECK((cs.a.array() == 4.0).all());
    for (Index k = 1; k <= 20; ++k) {
      CHECK(cs.U[k - 1](k - 1, 1) == 1.0);
      CHECK(cs.U[k - 1].cwiseAbs().sum() == 1.0);  // single entry per block
      CHECK(cs.V[k - 1].isZero(0.0));
    }
  }
  SUBCASE("noise bound produces paired rows") {
    ConstraintFamily<double> fam;
    fam.kind = ConstraintKind::NoiseBound;
    fam.bound = VecX<double>::Constant(1, 2.0);
    MatX<double> y(1, 3);
    y << 1.0, -0.5, 2.0;
    const auto cs = encode_constraint_family(fam, model, 3, y);
    REQUIRE(cs.rows() == 6);
    // row 0: C x_1 <= 2 + y_1 ; row 1: -C x_1 <= 2 - y_1
    CHECK(cs.U[0].row(0) == model.C.row(0));
    CHECK(cs.U[0].row(1) == (-model.C).row(0));
    CHECK(cs.a(0) == 3.0);
    CHECK(cs.a(1) == 1.0);
    CHECK(cs.a(4) == 4.0);
    CHECK(cs.a(5) == 0.0);
  }
  SUBCASE("average bound spreads L/horizon and reads the measurement mean") {
    MatX<double> L(1, 2);
    L << 1.0, 0.0;
    ConstraintFamily<double> fam;
    fam.kind = ConstraintKind::AverageBound;
    fam.L = L;
    fam.upper = VecX<double>::Zero(1);
    fam.upper_mean_y = MatX<double>::Identity(1, 1);
    MatX<double> y(1, 4);
    y << 1.0, 2.0, 3.0, 6.0;
    const auto cs = encode_constraint_family(fam, model, 4, y);
    REQUIRE(cs.rows() == 1);
    CHECK(cs.a(0) == doctest::Approx(3.0));  // mean of y
    for (Index k = 0; k < 4; ++k) CHECK(cs.U[k](0, 0) == doctest::Approx(0.25));
  }
  SUBCASE("increment bound satisfies its defining identity on a trajectory") {
    MatX<double> L(1, 2);
    L << 1.0, -0.5;
    ConstraintFamily<double> fam;
    fam.kind = ConstraintKind::IncrementBound;
    fam.L = L;
    fam.lag = 2;
    fam.upper = VecX<double>::Constant(1, 0.0);
    const Index H = 6;
    const auto cs = encode_constraint_family(fam, model, H);
    REQUIRE(cs.rows() == H - 2);
    NoiseSpec<double> spec;
    spec.seed = 31;
    const auto [w, v] = generate_noise(spec, H);
    VecX<double> x0(2);
    x0 << 0.3, -0.7;
    const auto traj = simulate(model, x0, w, v);
    VecX<double> lhs = VecX<double>::Zero(cs.rows());
    for (Index k = 1; k <= H; ++k) lhs += cs.U[k - 1] * traj.states.col(k);
    for (Index k = 0; k < H; ++k) lhs += cs.V[k] * traj.disturbances.col(k);
    for (Index k = 1; k <= H - 2; ++k) {
      const double expect = (L * (traj.states.col(k + 2) - traj.states.col(k)))(0);
      CHECK(lhs(k - 1) == doctest::Approx(expect).epsilon(1e-10));
    }
  }
  SUBCASE("unknown dimensions rejected") {
    ConstraintFamily<double> fam;
    fam.kind = ConstraintKind::StateBound;
    fam.L = MatX<double>::Ones(1, 3);  // wrong n
    fam.upper = VecX<double>::Ones(1);
    CHECK_THROWS_AS(encode_constraint_family(fam, model, 5), DimensionError);
  }
}

TEST_CASE("merging constraint sets concatenates rows") {
  const auto model = testsup::demo_model();
  MatX<double> L1(1, 2), L2(1, 2);
  L1 << 0.0, 1.0;
  L2 << 1.0, 0.0;
  ConstraintFamily<double> f1, f2;
  f1.kind = f2.kind = ConstraintKind::StateBound;
  f1.L = L1;
  f1.upper = VecX<double>::Constant(1, 4.0);
  f2.L = L2;
  f2.upper = VecX<double>::Constant(1, 9.0);
  const auto merged = merge_constraints<double>(
      {encode_constraint_family(f1, model, 3), encode_constraint_family(f2, model, 3)});
  CHECK(merged.rows() == 6);
  CHECK(merged.a.head(3).isConstant(4.0));
  CHECK(merged.a.tail(3).isConstant(9.0));
}
