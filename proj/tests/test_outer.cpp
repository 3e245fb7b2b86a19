#include "support.hpp"

#include <gtest/gtest.h>

using namespace afto;
using namespace afto::testing;

namespace {

struct Setup {
  QuadraticBuild b;
  Polytope poly2{Layer::two};
  PrimalState s;
  DualState du;
};

Setup make_setup(std::uint64_t seed, std::size_t cuts = 2) {
  Setup st;
  st.b = build_quadratic_problem(small_spec(seed));
  const Dims d = st.b.problem->dims();
  std::mt19937_64 rng(seed + 100);
  for (std::size_t l = 0; l < cuts; ++l) st.poly2.add(random_cut(Layer::two, d, rng, l + 1));
  st.s = random_state(d, rng);
  st.du = random_duals(d, cuts, rng);
  return st;
}

}  // namespace

TEST(Lagrangian, ZeroDualsGiveSumOfLevelOne) {
  auto st = make_setup(1);
  DualState zero = DualState::zeros(st.b.problem->dims());
  zero.lambda.assign(st.poly2.size(), 0.0);
  EXPECT_NEAR(lagrangian(st.s, zero, st.poly2, *st.b.problem), sum_f1(*st.b.problem, st.s), 1e-12);
}

TEST(Lagrangian, ConsensusRemovesThetaTerms) {
  auto st = make_setup(2, 0);
  for (auto& v : st.s.x[0]) v = st.s.z[0];
  EXPECT_NEAR(lagrangian(st.s, st.du, st.poly2, *st.b.problem), sum_f1(*st.b.problem, st.s), 1e-12);
}

TEST(Lagrangian, HandComputedValue) {
  auto st = make_setup(3);
  double ref = sum_f1(*st.b.problem, st.s);
  for (std::size_t j = 0; j < 2; ++j) ref += st.du.theta[j].dot(st.s.x[0][j] - st.s.z[0]);
  for (std::size_t l = 0; l < st.poly2.size(); ++l) ref += st.du.lambda[l] * (st.poly2[l].lhs(st.s) - st.poly2[l].c);
  EXPECT_NEAR(lagrangian(st.s, st.du, st.poly2, *st.b.problem), ref, 1e-12);
}

TEST(Regularization, InitialCoefficient) {
  OuterConfig c;
  c.eta_lambda = 0.1;
  c.c1_floor = 1e-3;
  EXPECT_DOUBLE_EQ(reg_c1(c, 0), 10.0);
  EXPECT_LT(reg_c1(c, 100), 10.0);
  c.c1_floor = 50.0;
  EXPECT_DOUBLE_EQ(reg_c1(c, 0), 50.0);
  EXPECT_THROW(regularized_lagrangian(PrimalState{}, DualState{}, Polytope{}, *build_quadratic_problem(small_spec()).problem, c, -1),
               ConfigError);
}

TEST(Projections, LambdaAndTheta) {
  EXPECT_EQ(project_lambda(-0.5, 4.0), 0.0);
  EXPECT_DOUBLE_EQ(project_lambda(2.0 * std::sqrt(4.0), 4.0), std::sqrt(4.0));
  EXPECT_DOUBLE_EQ(project_lambda(1.5, 4.0), 1.5);
  const Vec th = (Vec(3) << -10, 0.2, 10).finished();
  const Vec p = project_theta(th, 9.0, 3);  // bound sqrt(9)/3 = 1
  EXPECT_DOUBLE_EQ(p[0], -1.0);
  EXPECT_DOUBLE_EQ(p[1], 0.2);
  EXPECT_DOUBLE_EQ(p[2], 1.0);
}

TEST(LagrangianGradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto st = make_setup(seed);
    const auto& p = *st.b.problem;
    OuterConfig cfg;
    cfg.eta_lambda = 0.3;
    for (bool reg : {false, true}) {
      std::optional<std::pair<OuterConfig, std::int64_t>> r;
      if (reg) r = std::make_pair(cfg, std::int64_t{7});
      const auto g = lagrangian_gradient(st.s, st.du, st.poly2, p, r);
      auto value = [&](const PrimalState& s, const DualState& du) {
        return reg ? regularized_lagrangian(s, du, st.poly2, p, cfg, 7) : lagrangian(s, du, st.poly2, p);
      };
      const Vec fd = fd_over_state([&](const PrimalState& s) { return value(s, st.du); }, st.s);
      EXPECT_LE(rel_err(g.primal.flatten(), fd), 1e-6);
      for (std::size_t l = 0; l < st.poly2.size(); ++l) {
        auto f = [&](const Vec& v) {
          DualState du = st.du;
          du.lambda[l] = v[0];
          return value(st.s, du);
        };
        EXPECT_LE(rel_err(Vec::Constant(1, g.lambda[l]), finite_diff_grad(f, Vec::Constant(1, st.du.lambda[l]), 1e-6)),
                  1e-6);
      }
      for (std::size_t j = 0; j < 2; ++j) {
        auto f = [&](const Vec& v) {
          DualState du = st.du;
          du.theta[j] = v;
          return value(st.s, du);
        };
        EXPECT_LE(rel_err(g.theta[j], finite_diff_grad(f, st.du.theta[j], 1e-6)), 1e-6);
      }
    }
  }
}

TEST(MasterStep, MatchesHandRolledReference) {
  auto st = make_setup(4);
  const auto& p = *st.b.problem;
  OuterConfig cfg;
  cfg.eta_z = {0.1, 0.2, 0.05};
  cfg.eta_lambda = 0.4;
  cfg.eta_theta = 0.3;
  cfg.project_bounds = false;
  const std::int64_t t = 3;

  PrimalState ref = st.s;
  DualState rdu = st.du;
  Vec gz1 = Vec::Zero(2);
  for (const auto& th : rdu.theta) gz1 -= th;
  for (std::size_t l = 0; l < st.poly2.size(); ++l) gz1 += rdu.lambda[l] * st.poly2[l].a[0];
  ref.z[0] -= cfg.eta_z[0] * gz1;
  for (std::size_t i = 1; i < 3; ++i) {
    Vec g = Vec::Zero(2);
    for (std::size_t l = 0; l < st.poly2.size(); ++l) g += rdu.lambda[l] * st.poly2[l].a[i];
    ref.z[i] -= cfg.eta_z[i] * g;
  }
  const double c1 = std::max(cfg.c1_floor, 1.0 / (cfg.eta_lambda * std::pow(4.0, 0.25)));
  const double c2 = std::max(cfg.c2_floor, 1.0 / (cfg.eta_theta * std::pow(4.0, 0.25)));
  for (std::size_t l = 0; l < st.poly2.size(); ++l) {
    const double r = st.poly2[l].lhs(ref) - st.poly2[l].c;
    rdu.lambda[l] = std::clamp(rdu.lambda[l] + cfg.eta_lambda * (r - c1 * rdu.lambda[l]), 0.0, std::sqrt(cfg.alpha4));
  }
  for (std::size_t j = 0; j < 2; ++j)
    rdu.theta[j] = project_theta(rdu.theta[j] + cfg.eta_theta * (ref.x[0][j] - ref.z[0] - c2 * rdu.theta[j]),
                                 cfg.alpha5, 2);

  master_step(st.s, st.du, st.poly2, p, cfg, t);
  EXPECT_LE((st.s.flatten() - ref.flatten()).cwiseAbs().maxCoeff(), 1e-12);
  for (std::size_t l = 0; l < rdu.lambda.size(); ++l) EXPECT_NEAR(st.du.lambda[l], rdu.lambda[l], 1e-12);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_LE((st.du.theta[j] - rdu.theta[j]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MasterStep, GaussSeidelDiffersFromJacobi) {
  auto st = make_setup(5);
  const auto& p = *st.b.problem;
  OuterConfig cfg;
  cfg.eta_z = {0.3, 0.3, 0.3};
  cfg.eta_lambda = 0.5;
  PrimalState s = st.s;
  DualState du = st.du;
  master_step(s, du, st.poly2, p, cfg, 0);
  // Jacobi: duals read the pre-update z.
  DualState jac = st.du;
  const auto g = lagrangian_gradient(st.s, st.du, st.poly2, p, std::make_pair(cfg, std::int64_t{0}));
  for (std::size_t l = 0; l < jac.lambda.size(); ++l)
    jac.lambda[l] = project_lambda(jac.lambda[l] + cfg.eta_lambda * g.lambda[l], cfg.alpha4);
  double diff = 0.0;
  for (std::size_t l = 0; l < jac.lambda.size(); ++l) diff += std::abs(jac.lambda[l] - du.lambda[l]);
  EXPECT_GT(diff, 1e-6);
}

TEST(WorkerStep, GradientStepWithProjection) {
  auto st = make_setup(6);
  const auto& p = *st.b.problem;
  OuterConfig cfg;
  cfg.eta_x = {0.1, 0.1, 0.1};
  StaleView v{st.s, st.du, st.poly2, 0};
  const auto g = worker_gradient(st.s, st.du, st.poly2, p, 1);
  const auto out = worker_step(1, v, p, cfg);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_LE((out[i] - project_ball_sq(st.s.x[i][1] - 0.1 * g[i], 25.0)).norm(), 1e-14);
  cfg.eta_x = {1e6, 1e6, 1e6};
  const auto big = worker_step(1, v, p, cfg);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(big[i].squaredNorm(), 25.0 + 1e-9);
}

TEST(Gap, ZeroAtUnconstrainedMinimizer) {
  auto b = build_quadratic_problem(small_spec(7));
  const PrimalState s = b.oracle.as_state(2);
  const DualState du = DualState::zeros(b.problem->dims());
  const auto g = stationarity_gap(s, du, Polytope(Layer::two), *b.problem, OuterConfig{});
  EXPECT_LE(g.squared_norm(), 1e-20);
}

TEST(Gap, DualResidualAtActiveBound) {
  auto st = make_setup(8, 1);
  OuterConfig cfg;
  st.du.lambda[0] = 0.0;
  // Strongly satisfied cut: ascent would go negative, projected residual is zero.
  Polytope poly(Layer::two);
  Cut c = st.poly2[0];
  c.c = c.lhs(st.s) + 100.0;
  poly.add(c);
  const auto g = stationarity_gap(st.s, st.du, poly, *st.b.problem, cfg);
  EXPECT_EQ(g.lambda[0], 0.0);
  c.c = c.lhs(st.s) - 2.0;
  Polytope viol(Layer::two);
  viol.add(c);
  EXPECT_NEAR(stationarity_gap(st.s, st.du, viol, *st.b.problem, cfg).lambda[0], -2.0, 1e-12);
}

TEST(StepSizes, GoldenValues) {
  StepSizeInputs in;
  in.L = 1.0;
  in.eta_lambda = 0.1;
  in.eta_theta = 0.1;
  in.c1_floor = 1.0;
  in.c2_floor = 1.0;
  in.M = 1;
  in.gamma = 1;
  in.N = 1;
  const auto s = prescribe_step_sizes(in);
  EXPECT_NEAR(s.eta_x, 2.0 / 161.2, 1e-15);
  EXPECT_DOUBLE_EQ(s.eta_z, s.eta_x);
  EXPECT_NEAR(s.theta_cap, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.lambda_cap, 2.0 / 3.0, 1e-15);
}

TEST(StepSizes, StalenessCapBinds) {
  StepSizeInputs in;
  in.tau = 10;
  in.k1 = 1;
  in.N = 4;
  in.eta_lambda = 1e-4;
  const auto s = prescribe_step_sizes(in);
  EXPECT_NEAR(s.lambda_cap, 1.0 / 1200.0, 1e-15);
  EXPECT_NE(s.binding.find("30"), std::string::npos);
}

TEST(StepSizes, ThetaViolationNamesInequality) {
  StepSizeInputs in;
  in.eta_theta = 5.0;
  try {
    prescribe_step_sizes(in);
    FAIL() << "expected a violation";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("η_θ ≤ 2/(L+2c₂⁰)"), std::string::npos);
  }
}

TEST(StepSizes, StepsShrinkWithLipschitzConstant) {
  StepSizeInputs in;
  in.L = 0.5;
  in.eta_lambda = in.eta_theta = 0.01;
  const double a = prescribe_step_sizes(in).eta_x;
  in.L *= 4;
  const double b = prescribe_step_sizes(in).eta_x;
  EXPECT_LT(b, a);
}

TEST(StepSizes, RejectsNonPositiveInputs) {
  StepSizeInputs in;
  in.L = 0;
  EXPECT_THROW(prescribe_step_sizes(in), ConfigError);
}

TEST(ProbeLipschitz, BoundedByHessianNorm) {
  auto b = build_quadratic_problem(small_spec(9));
  const auto& p = *b.problem;
  double bound = 0.0;
  for (Level lv : kLevels)
    for (std::size_t j = 0; j < 2; ++j) bound = std::max(bound, p.objective(lv, j).H.selfadjointView<Eigen::Lower>().operatorNorm());
  const double L = probe_lipschitz(p, 200, 1);
  EXPECT_GT(L, 0.0);
  EXPECT_LE(L, bound + 1e-9);
}

TEST(OuterConfig, Validation) {
  OuterConfig c;
  c.eta_lambda = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = OuterConfig{};
  c.T_pre = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = OuterConfig{};
  c.eta_x = {0, 0, 0};
  EXPECT_NO_THROW(c.validate());
}
