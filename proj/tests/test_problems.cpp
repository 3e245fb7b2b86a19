#include "support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace afto;
using namespace afto::testing;

// Quadratic builder

TEST(QuadraticBuilder, IdentityGivesZeroOracle) {
  QuadraticSpec s = small_spec(1, {3, 2, 4, 3});
  s.identity = true;
  const auto b = build_quadratic_problem(s);
  EXPECT_EQ(b.oracle.z1.norm(), 0.0);
  EXPECT_EQ(b.oracle.z2.norm(), 0.0);
  EXPECT_EQ(b.oracle.z3.norm(), 0.0);
}

TEST(QuadraticBuilder, OneDimensionalNestedClosedForm) {
  // f3 = a3/2 x3^2 - x3 (b31 x1 + b32 x2 + c3), f2 = a2/2 x2^2 - x2 (b21 x1 + c2),
  // f1 = 1/2 ||v - u||^2.
  const double a3 = 2, b31 = 1, b32 = 1, c3 = 1, a2 = 4, b21 = 2, c2 = 2;
  const Vec u = (Vec(3) << 1, 2, 3).finished();
  BlockQuadratic q3{Mat::Zero(3, 3), Vec::Zero(3), 0.0}, q2{Mat::Zero(3, 3), Vec::Zero(3), 0.0},
      q1{Mat::Identity(3, 3), -u, 0.5 * u.squaredNorm()};
  q3.H(2, 2) = a3;
  q3.H(2, 0) = q3.H(0, 2) = -b31;
  q3.H(2, 1) = q3.H(1, 2) = -b32;
  q3.g[2] = -c3;
  q2.H(1, 1) = a2;
  q2.H(1, 0) = q2.H(0, 1) = -b21;
  q2.g[1] = -c2;
  const QuadraticTrilevelProblem p({1, 1, 1, 1}, {std::vector{q1}, std::vector{q2}, std::vector{q3}}, {1e6, 1e6, 1e6},
                                   0.0);
  const auto o = p.solve_oracle();
  const double P = b21 / a2, pp = c2 / a2;
  const double q = (b31 + b32 * P) / a3, r = (b32 * pp + c3) / a3;
  const double x1 = (u[0] + P * (u[1] - pp) + q * (u[2] - r)) / (1 + P * P + q * q);
  EXPECT_NEAR(o.z1[0], x1, 1e-12);
  EXPECT_NEAR(o.z2[0], P * x1 + pp, 1e-12);
  EXPECT_NEAR(o.z3[0], (b31 * x1 + b32 * (P * x1 + pp) + c3) / a3, 1e-12);
}

TEST(QuadraticBuilder, LevelOneScalingLeavesArgmin) {
  QuadraticSpec s = small_spec(3, {3, 3, 3, 2});
  s.consistent_targets = false;
  const auto a = build_quadratic_problem(s);
  s.level1_scale = 100.0;
  const auto b = build_quadratic_problem(s);
  EXPECT_LE((a.oracle.z1 - b.oracle.z1).norm(), 1e-9);
  EXPECT_LE((a.oracle.z2 - b.oracle.z2).norm(), 1e-9);
  EXPECT_LE((a.oracle.z3 - b.oracle.z3).norm(), 1e-9);
}

TEST(QuadraticBuilder, OracleIsLevelThreeStationary) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto b = build_quadratic_problem(small_spec(seed, {3, 2, 4, 3}));
    Vec g = Vec::Zero(4);
    for (std::size_t j = 0; j < 3; ++j)
      g += b.problem->gradient(Level::three, j, Block::three, {b.oracle.z1, b.oracle.z2, b.oracle.z3});
    EXPECT_LE(g.norm(), 1e-10);
  }
}

TEST(QuadraticBuilder, DeterministicUnderSeed) {
  const auto a = build_quadratic_problem(small_spec(17)), b = build_quadratic_problem(small_spec(17));
  EXPECT_EQ(a.oracle.z1, b.oracle.z1);
  EXPECT_EQ(a.problem->objective(Level::two, 1).H, b.problem->objective(Level::two, 1).H);
}

TEST(QuadraticBuilder, RejectsOversizedBlocks) {
  EXPECT_THROW(build_quadratic_problem(small_spec(1, {21, 1, 1, 1})), ConfigError);
}

// Dataset

namespace {

Mat toy_rows(std::size_t n) {
  Mat m(static_cast<Eigen::Index>(n), 3);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    m(r, 0) = double(r);
    m(r, 1) = std::sin(double(r));
    m(r, 2) = 2.0 * double(r) - m(r, 1);
  }
  return m;
}

std::string toy_csv(bool header) {
  std::ostringstream os;
  write_csv_matrix(toy_rows(10), os, header ? std::vector<std::string>{"a", "b", "y"} : std::vector<std::string>{});
  return os.str();
}

}  // namespace

TEST(Dataset, TenRowSplit) {
  const auto ds = make_dataset(toy_rows(10), {0.6, 0.2, 0.2}, 1, 2);
  EXPECT_EQ(ds.train.size(), 6u);
  EXPECT_EQ(ds.val.size(), 2u);
  EXPECT_EQ(ds.test.size(), 2u);
  EXPECT_EQ(ds.train_shards[0].size() + ds.train_shards[1].size(), 6u);
  EXPECT_EQ(ds.val_shards[1].size(), 1u);
}

TEST(Dataset, DeterministicUnderSeed) {
  const auto a = make_dataset(toy_rows(30), {0.6, 0.2, 0.2}, 5, 3);
  const auto b = make_dataset(toy_rows(30), {0.6, 0.2, 0.2}, 5, 3);
  EXPECT_EQ(a.X, b.X);
  EXPECT_EQ(a.train_shards, b.train_shards);
  const auto c = make_dataset(toy_rows(30), {0.6, 0.2, 0.2}, 6, 3);
  EXPECT_NE(a.X, c.X);
}

TEST(Dataset, TrainFeaturesStandardized) {
  const auto ds = make_dataset(make_synthetic_linear({}), {0.6, 0.2, 0.2}, 2, 4);
  const Mat Xt = ds.rows_of(ds.train);
  for (Eigen::Index c = 0; c < Xt.cols(); ++c) {
    const double mean = Xt.col(c).mean();
    const double var = (Xt.col(c).array() - mean).square().mean();
    EXPECT_LE(std::abs(mean), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-10);
  }
}

TEST(Dataset, CsvWithAndWithoutHeader) {
  std::istringstream a(toy_csv(true)), b(toy_csv(false));
  const Mat ma = read_csv_matrix(a), mb = read_csv_matrix(b);
  EXPECT_EQ(ma.rows(), 10);
  EXPECT_EQ(ma, mb);
  EXPECT_EQ(ma, toy_rows(10));
}

TEST(Dataset, NonNumericCellReportsPosition) {
  std::istringstream is("1,2,3\n4,oops,6\n");
  try {
    read_csv_matrix(is);
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2, column 2"), std::string::npos);
  }
}

TEST(Dataset, TooFewRows) {
  EXPECT_THROW(make_dataset(toy_rows(4), {0.6, 0.2, 0.2}, 1, 4), ConfigError);
  EXPECT_THROW(make_dataset(toy_rows(10), {0.5, 0.2, 0.2}, 1, 1), ConfigError);
}

TEST(Dataset, LoadFromFile) {
  const std::string path = ::testing::TempDir() + "afto_toy.csv";
  {
    std::ofstream os(path);
    os << toy_csv(true);
  }
  const auto ds = load_dataset(path, {0.6, 0.2, 0.2}, 1, 2);
  EXPECT_EQ(ds.rows(), 10u);
  EXPECT_THROW(load_dataset(path + ".missing", {}, 1, 2), ConfigError);
}

// MLP and robust HPO

TEST(Mlp, GradientsMatchFiniteDifferences) {
  Mlp m{3, 4};
  std::mt19937_64 rng(1);
  const Vec w = m.init(2);
  const Mat X = Mat::Random(7, 3);
  const Vec y = gaussian(rng, 7);
  Vec gw;
  Mat gX;
  m.mse(w, X, y, &gw, &gX);
  EXPECT_LE(rel_err(gw, finite_diff_grad([&](const Vec& v) { return m.mse(v, X, y); }, w, 1e-6)), 1e-7);
  const Vec xf = Eigen::Map<const Vec>(X.data(), X.size());
  auto fx = [&](const Vec& v) { return m.mse(w, Eigen::Map<const Mat>(v.data(), 7, 3), y); };
  const Vec gxf = Eigen::Map<const Vec>(gX.data(), gX.size());
  EXPECT_LE(rel_err(gxf, finite_diff_grad(fx, xf, 1e-6)), 1e-7);
}

TEST(Mlp, PackUnpackRoundTrip) {
  Mlp m{2, 5};
  const Vec w = m.init(3);
  EXPECT_EQ(m.pack(m.unpack(w)), w);
  EXPECT_THROW(m.unpack(Vec::Zero(3)), DimensionError);
}

TEST(SmoothedL1, ValueAndGradient) {
  const Vec w = (Vec(3) << 0.0, 3.0, -4.0).finished();
  EXPECT_NEAR(smoothed_l1(w, 1e-3), std::sqrt(9 + 1e-6) + std::sqrt(16 + 1e-6) - 2e-3, 1e-14);
  EXPECT_LE(rel_err(smoothed_l1_grad(w, 1e-3),
                    finite_diff_grad([](const Vec& v) { return smoothed_l1(v, 1e-3); }, w, 1e-7)),
            1e-5);
}

namespace {

RegressionDataset small_data(std::size_t N = 2, double sigma = 0.1, std::uint64_t seed = 1) {
  SyntheticLinearSpec s;
  s.rows = 40;
  s.features = 3;
  s.seed = seed;
  return make_dataset(make_synthetic_linear(s), {0.6, 0.2, 0.2}, seed, N, sigma);
}

RobustHpoSpec small_hpo() {
  RobustHpoSpec s;
  s.mlp_layers = {4};
  return s;
}

}  // namespace

TEST(RobustHpo, BlockLayout) {
  const auto data = small_data(3);
  const RobustHpoProblem p(data, small_hpo());
  EXPECT_EQ(p.dims().d1, 1u);
  EXPECT_EQ(p.dims().d2, 8u * 3u);  // longest shard of 24 train rows over 3 workers
  EXPECT_EQ(p.dims().d3, static_cast<std::size_t>(Mlp{3, 4}.params()));
  EXPECT_EQ(p.dims().workers, 3u);
}

TEST(RobustHpo, GradientsMatchFiniteDifferences) {
  const auto data = small_data(2);
  const RobustHpoProblem p(data, small_hpo());
  std::mt19937_64 rng(4);
  for (int k = 0; k < 5; ++k) {
    const Blocks x{gaussian(rng, 1), gaussian(rng, static_cast<Eigen::Index>(p.dims().d2), 0.3),
                   gaussian(rng, static_cast<Eigen::Index>(p.dims().d3), 0.5)};
    for (Level lv : kLevels)
      for (Block blk : kBlocks) {
        Blocks probe = x;
        auto f = [&](const Vec& v) {
          probe[index(blk)] = v;
          return p.value(lv, 1, probe);
        };
        EXPECT_LE(rel_err(p.gradient(lv, 1, blk, x), finite_diff_grad(f, x[index(blk)], 1e-6)), 1e-6)
            << "level " << int(lv) << " block " << int(blk);
      }
  }
}

TEST(RobustHpo, HessianVectorMatchesGradientDifferences) {
  const auto data = small_data(2);
  const RobustHpoProblem p(data, small_hpo());
  std::mt19937_64 rng(5);
  const Blocks x{gaussian(rng, 1), gaussian(rng, static_cast<Eigen::Index>(p.dims().d2), 0.3),
                 gaussian(rng, static_cast<Eigen::Index>(p.dims().d3), 0.5)};
  const Vec v = gaussian(rng, static_cast<Eigen::Index>(p.dims().d3));
  // d/dw3 (grad_w f3 . v) versus a finite difference of the directional derivative.
  auto dir = [&](const Vec& w) {
    Blocks b = x;
    b[2] = w;
    return p.gradient(Level::three, 0, Block::three, b).dot(v);
  };
  const Vec ref = finite_diff_grad(dir, x[2], 1e-5);
  EXPECT_LE(rel_err(p.hessian_vector(Level::three, 0, Block::three, Block::three, x, v), ref), 1e-4);
}

TEST(RobustHpo, PureEvaluation) {
  const auto data = small_data(2);
  const RobustHpoProblem p(data, small_hpo());
  const PrimalState s = p.initial_state();
  const auto args = ConsensusView::arguments(Level::three, 0, s);
  EXPECT_EQ(p.value(Level::three, 0, args), p.value(Level::three, 0, args));
}

TEST(RobustHpo, LargePenaltyKeepsNoiseSmall) {
  const auto data = small_data(2);
  RobustHpoSpec spec = small_hpo();
  spec.c = 1e6;
  const RobustHpoProblem p(data, spec);
  const PrimalState s = p.initial_state();
  InnerConfig c;
  c.K = 200;
  c.eta_x = c.eta_z = c.eta_phi = 2e-7;
  const auto tr = solve_level2(p, {s.z[0], s.z[2], s.x[2]}, Polytope(Layer::one), nullptr, c);
  for (const auto& pj : tr.final_state().x) EXPECT_LE(pj.norm(), 1e-3);
}

TEST(RobustHpo, RegularizerVanishesForVeryNegativePhi) {
  const auto data = small_data(2);
  const RobustHpoProblem p(data, small_hpo());
  const PrimalState s = p.initial_state();
  const Blocks x{Vec::Constant(1, -20.0), Vec::Zero(static_cast<Eigen::Index>(p.dims().d2)), s.z[2]};
  const Vec full = p.gradient(Level::three, 0, Block::three, x);
  const Vec reg = full - [&] {
    Blocks y = x;
    y[0] = Vec::Constant(1, -1e4);
    return p.gradient(Level::three, 0, Block::three, y);
  }();
  EXPECT_LE(reg.lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(RobustHpo, EmptyPartitionRejected) {
  auto data = small_data(2);
  data.val_shards[1].clear();
  EXPECT_THROW(RobustHpoProblem(data, small_hpo()), ConfigError);
}

TEST(RobustHpo, SpecValidation) {
  RobustHpoSpec s;
  s.c = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = RobustHpoSpec{};
  s.smoothing = -1;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(EvaluateModel, ExactInterpolatorOnLinearData) {
  SyntheticLinearSpec s;
  s.rows = 50;
  s.features = 3;
  s.label_noise = 0.0;
  const auto data = make_dataset(make_synthetic_linear(s), {0.6, 0.2, 0.2}, 3, 2, 0.1);
  // Standardized targets stay affine in standardized features: recover the map, then
  // emulate it with tanh(e t)/e for tiny e.
  Mat A(static_cast<Eigen::Index>(data.rows()), 4);
  A << data.X, Vec::Ones(A.rows());
  const Vec coef = A.colPivHouseholderQr().solve(data.y);
  Mlp m{3, 1};
  Mlp::Parts parts;
  const double e = 1e-6;
  parts.W1 = e * coef.head(3).transpose();
  parts.b1 = Vec::Zero(1);
  parts.w2 = Vec::Constant(1, 1.0 / e);
  parts.b2 = coef[3];
  const auto sc = evaluate_model(m, m.pack(parts), data);
  EXPECT_LE(sc.mse_clean, 1e-10);
  EXPECT_GT(sc.mse_noisy, sc.mse_clean);
}

TEST(EvaluateModel, ZeroNoiseMatchesClean) {
  const auto data = small_data(2, 0.0);
  Mlp m{3, 4};
  const auto sc = evaluate_model(m, m.init(1), data);
  EXPECT_EQ(sc.mse_noisy, sc.mse_clean);
  EXPECT_THROW(evaluate_model(m, Vec::Zero(2), data), DimensionError);
}

TEST(EvaluateModel, NoisyTestIsSeeded) {
  const auto data = small_data(2, 0.3);
  EXPECT_EQ(data.noisy_test(), data.noisy_test());
}
