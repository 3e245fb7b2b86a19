#pragma once

// Synthetic trilevel problem built from per-worker quadratics, with the nested
// argmin available in closed form.
//
// Every objective is 1/2 v^T H v + g^T v + const in v = [x1; x2; x3]:
//   f3_j = 1/2 x3^T A3_j x3 - x3^T (B31_j x1 + B32_j x2 + c3_j)
//   f2_j = 1/2 x2^T A2_j x2 - x2^T (B21_j x1 + c2_j) + s (x2^T C_j x3 + 1/2 x3^T D_j x3)
//   f1_j = 1/2 (v - v*)^T Q_j (v - v*)
// With consistent targets v* lies on the lower-level solution path, so the
// nested optimum is v* itself.

#include "afto/core.hpp"

#include <Eigen/Eigenvalues>

#include <random>

namespace afto {

/// Quadratic objective 1/2 v^T H v + g^T v + k over the concatenated blocks.
struct BlockQuadratic {
  Mat H;
  Vec g;
  double k = 0.0;
};

struct QuadraticSpec {
  Dims dims{2, 2, 2, 2};
  std::uint64_t seed = 0;
  double conditioning = 10.0;   // eigenvalues of the SPD blocks lie in [1, conditioning]
  double coupling = 0.0;        // s: how strongly f2 depends on x3
  double cross_scale = 0.5;     // size of the B blocks
  double target_scale = 1.0;    // size of the linear terms and v*
  double level1_scale = 1.0;    // positive multiplier on every f1_j
  bool consistent_targets = true;
  bool identity = false;        // all SPD blocks = I, no cross terms, all centers 0
  std::array<double, 3> alphas{1e6, 1e6, 1e6};
  double mu = 0.0;
};

/// Nested closed-form solution.
struct QuadraticOracle {
  Vec z1, z2, z3;
  // Level-3 consensus argmin: x3 = M1 z1 + M2 z2 + m
  Mat M1, M2;
  Vec m;
  // Level-2 argmin with x3 substituted: x2 = P z1 + p
  Mat P;
  Vec p;

  PrimalState as_state(std::size_t N) const {
    PrimalState s;
    s.z = {z1, z2, z3};
    for (std::size_t i = 0; i < 3; ++i) s.x[i].assign(N, s.z[i]);
    return s;
  }
};

inline Mat random_orthogonal(std::mt19937_64& rng, Eigen::Index n) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat A(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) A(i, j) = gauss(rng);
  Eigen::HouseholderQR<Mat> qr(A);
  return qr.householderQ();
}

/// Random SPD matrix with eigenvalues log-uniform in [1, cond].
inline Mat random_spd(std::mt19937_64& rng, Eigen::Index n, double cond) {
  if (!(cond >= 1.0)) throw ConfigError("quadratic: conditioning must be >= 1");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Mat U = random_orthogonal(rng, n);
  Vec ev(n);
  for (Eigen::Index i = 0; i < n; ++i) ev[i] = std::exp(u(rng) * std::log(cond));
  if (n > 0) {
    ev[0] = 1.0;
    if (n > 1) ev[n - 1] = cond;
  }
  Mat S = U * ev.asDiagonal() * U.transpose();
  return 0.5 * (S + S.transpose());
}

inline Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale) {
  std::normal_distribution<double> gauss(0.0, scale);
  Mat A(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) A(i, j) = gauss(rng);
  return A;
}

inline Vec random_vec(std::mt19937_64& rng, Eigen::Index n, double scale) {
  std::normal_distribution<double> gauss(0.0, scale);
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = gauss(rng);
  return v;
}

class QuadraticTrilevelProblem final : public TrilevelProblem {
 public:
  /// Direct construction from explicit per-worker objectives (levels x workers).
  QuadraticTrilevelProblem(Dims dims, std::array<std::vector<BlockQuadratic>, 3> f, std::array<double, 3> alphas,
                           double mu)
      : TrilevelProblem(dims, alphas, mu), f_(std::move(f)) {
    const auto n = static_cast<Eigen::Index>(dims.total());
    for (const auto& lv : f_) {
      if (lv.size() != dims.workers) throw DimensionError("quadratic: need one objective per worker and level");
      for (const auto& q : lv)
        if (q.H.rows() != n || q.H.cols() != n || q.g.size() != n)
          throw DimensionError("quadratic: objective size mismatch");
    }
    offsets_ = {0, static_cast<Eigen::Index>(dims.d1), static_cast<Eigen::Index>(dims.d1 + dims.d2)};
  }

  const BlockQuadratic& objective(Level l, std::size_t j) const { return f_[index(l)][j]; }

  double value(Level level, std::size_t j, const Blocks& x) const override {
    const auto& q = objective(level, j);
    const Vec v = concat(x);
    return 0.5 * v.dot(q.H * v) + q.g.dot(v) + q.k;
  }

  Vec gradient(Level level, std::size_t j, Block b, const Blocks& x) const override {
    const auto& q = objective(level, j);
    const Vec v = concat(x);
    return rows(b, q.H) * v + q.g.segment(offsets_[index(b)], width(b));
  }

  bool has_second_derivatives() const override { return true; }

  Vec hessian_vector(Level level, std::size_t j, Block out, Block in, const Blocks&, const Vec& v) const override {
    const auto& q = objective(level, j);
    return q.H.block(offsets_[index(out)], offsets_[index(in)], width(out), width(in)) * v;
  }

  std::string name() const override { return "quadratic"; }

  /// Summed Hessian block and gradient segment over workers for one level.
  Mat sum_block(Level l, Block r, Block c) const {
    Mat acc = Mat::Zero(width(r), width(c));
    for (const auto& q : f_[index(l)]) acc += q.H.block(offsets_[index(r)], offsets_[index(c)], width(r), width(c));
    return acc;
  }
  Vec sum_linear(Level l, Block r) const {
    Vec acc = Vec::Zero(width(r));
    for (const auto& q : f_[index(l)]) acc += q.g.segment(offsets_[index(r)], width(r));
    return acc;
  }

  /// Nested argmin: level-3 consensus, then level 2 with x3 substituted, then level 1.
  QuadraticOracle solve_oracle() const {
    using B = Block;
    const Level L1 = Level::one, L2 = Level::two, L3 = Level::three;
    QuadraticOracle o;
    // Level 3: sum_j (H33 x3 + H31 z1 + H32 z2 + g3) = 0
    const Mat H33 = sum_block(L3, B::three, B::three);
    Eigen::LDLT<Mat> s3(H33);
    if (s3.info() != Eigen::Success || !(s3.vectorD().minCoeff() > 0))
      throw NumericError("quadratic oracle: level-3 system is singular");
    o.M1 = -s3.solve(sum_block(L3, B::three, B::one));
    o.M2 = -s3.solve(sum_block(L3, B::three, B::two));
    o.m = -s3.solve(sum_linear(L3, B::three));

    // Level 2 over (z1, x2) with x3 = M1 z1 + M2 x2 + m.
    const auto d1 = width(B::one), d2 = width(B::two), d3 = width(B::three);
    const Eigen::Index n = d1 + d2 + d3;
    Mat T = Mat::Zero(n, d1 + d2);
    T.topLeftCorner(d1 + d2, d1 + d2).setIdentity();
    T.block(d1 + d2, 0, d3, d1) = o.M1;
    T.block(d1 + d2, d1, d3, d2) = o.M2;
    Vec t0 = Vec::Zero(n);
    t0.tail(d3) = o.m;
    Mat H2 = Mat::Zero(n, n);
    Vec g2 = Vec::Zero(n);
    for (const auto& q : f_[index(L2)]) {
      H2 += q.H;
      g2 += q.g;
    }
    const Mat G = T.transpose() * H2 * T;
    const Vec qv = T.transpose() * (H2 * t0 + g2);
    const Mat G22 = G.bottomRightCorner(d2, d2);
    Eigen::LDLT<Mat> s2(G22);
    if (s2.info() != Eigen::Success || !(s2.vectorD().minCoeff() > 0))
      throw NumericError("quadratic oracle: level-2 reduced system is singular");
    o.P = -s2.solve(G.bottomLeftCorner(d2, d1));
    o.p = -s2.solve(qv.tail(d2));

    // Level 1 over z1 with v(z1) = W z1 + w0.
    Mat W(n, d1);
    W.topRows(d1).setIdentity();
    W.middleRows(d1, d2) = o.P;
    W.bottomRows(d3) = o.M1 + o.M2 * o.P;
    Vec w0 = Vec::Zero(n);
    w0.segment(d1, d2) = o.p;
    w0.tail(d3) = o.M2 * o.p + o.m;
    Mat H1 = Mat::Zero(n, n);
    Vec g1 = Vec::Zero(n);
    for (const auto& q : f_[index(L1)]) {
      H1 += q.H;
      g1 += q.g;
    }
    Eigen::LDLT<Mat> s1(W.transpose() * H1 * W);
    if (s1.info() != Eigen::Success || !(s1.vectorD().minCoeff() > 0))
      throw NumericError("quadratic oracle: level-1 reduced system is singular");
    o.z1 = -s1.solve(W.transpose() * (H1 * w0 + g1));
    o.z2 = o.P * o.z1 + o.p;
    o.z3 = o.M1 * o.z1 + o.M2 * o.z2 + o.m;
    return o;
  }

 private:
  Eigen::Index width(Block b) const { return static_cast<Eigen::Index>(dims_.size(b)); }

  Vec concat(const Blocks& x) const {
    for (Block b : kBlocks)
      if (x[index(b)].size() != width(b)) throw DimensionError("quadratic: block size mismatch");
    Vec v(static_cast<Eigen::Index>(dims_.total()));
    v << x[0], x[1], x[2];
    return v;
  }

  Mat rows(Block b, const Mat& H) const { return H.middleRows(offsets_[index(b)], width(b)); }

  std::array<std::vector<BlockQuadratic>, 3> f_;
  std::array<Eigen::Index, 3> offsets_{};
};

struct QuadraticBuild {
  std::unique_ptr<QuadraticTrilevelProblem> problem;
  QuadraticOracle oracle;
  std::uint64_t seed_used = 0;
  int regenerations = 0;
};

namespace detail {

inline std::unique_ptr<QuadraticTrilevelProblem> generate_quadratic(const QuadraticSpec& spec, std::uint64_t seed) {
  const auto& d = spec.dims;
  d.validate();
  for (auto n : {d.d1, d.d2, d.d3})
    if (n > 20) throw ConfigError("quadratic: each block dimension must be <= 20");
  const auto d1 = static_cast<Eigen::Index>(d.d1), d2 = static_cast<Eigen::Index>(d.d2),
             d3 = static_cast<Eigen::Index>(d.d3);
  const Eigen::Index n = d1 + d2 + d3;
  std::mt19937_64 rng(seed);
  const double cond = spec.identity ? 1.0 : spec.conditioning;
  const double cross = spec.identity ? 0.0 : spec.cross_scale;
  const double tgt = spec.identity ? 0.0 : spec.target_scale;
  auto spd = [&](Eigen::Index k) { return spec.identity ? Mat(Mat::Identity(k, k)) : random_spd(rng, k, cond); };

  std::array<std::vector<BlockQuadratic>, 3> f;
  for (std::size_t j = 0; j < d.workers; ++j) {
    // Level 3
    BlockQuadratic q3{Mat::Zero(n, n), Vec::Zero(n), 0.0};
    const Mat A3 = spd(d3);
    const Mat B31 = random_mat(rng, d3, d1, cross), B32 = random_mat(rng, d3, d2, cross);
    q3.H.block(d1 + d2, d1 + d2, d3, d3) = A3;
    q3.H.block(d1 + d2, 0, d3, d1) = -B31;
    q3.H.block(0, d1 + d2, d1, d3) = -B31.transpose();
    q3.H.block(d1 + d2, d1, d3, d2) = -B32;
    q3.H.block(d1, d1 + d2, d2, d3) = -B32.transpose();
    q3.g.tail(d3) = -random_vec(rng, d3, tgt);
    f[2].push_back(std::move(q3));

    // Level 2
    BlockQuadratic q2{Mat::Zero(n, n), Vec::Zero(n), 0.0};
    const Mat A2 = spd(d2);
    const Mat B21 = random_mat(rng, d2, d1, cross);
    q2.H.block(d1, d1, d2, d2) = A2;
    q2.H.block(d1, 0, d2, d1) = -B21;
    q2.H.block(0, d1, d1, d2) = -B21.transpose();
    q2.g.segment(d1, d2) = -random_vec(rng, d2, tgt);
    const Mat C = random_mat(rng, d2, d3, cross);
    const Mat D = spd(d3);
    if (spec.coupling != 0.0) {
      q2.H.block(d1, d1 + d2, d2, d3) = spec.coupling * C;
      q2.H.block(d1 + d2, d1, d3, d2) = spec.coupling * C.transpose();
      q2.H.block(d1 + d2, d1 + d2, d3, d3) = spec.coupling * D;
    }
    f[1].push_back(std::move(q2));

    // Level 1 (targets filled below)
    BlockQuadratic q1{spec.level1_scale * spd(n), Vec::Zero(n), 0.0};
    f[0].push_back(std::move(q1));
  }
  auto prob = std::make_unique<QuadraticTrilevelProblem>(d, std::move(f), spec.alphas, spec.mu);

  // Level-1 targets: either on the lower-level solution path or free.
  Vec vstar(n);
  if (spec.identity) {
    vstar.setZero();
  } else if (spec.consistent_targets) {
    // Temporarily solve the lower levels; their argmin maps do not involve f1.
    const QuadraticOracle o = prob->solve_oracle();
    const Vec u = random_vec(rng, d1, tgt);
    const Vec x2 = o.P * u + o.p;
    vstar << u, x2, o.M1 * u + o.M2 * x2 + o.m;
  } else {
    vstar = random_vec(rng, n, tgt);
  }
  std::array<std::vector<BlockQuadratic>, 3> f2;
  for (Level l : kLevels)
    for (std::size_t j = 0; j < d.workers; ++j) f2[index(l)].push_back(prob->objective(l, j));
  for (auto& q : f2[0]) {
    q.g = -(q.H * vstar);
    q.k = 0.5 * vstar.dot(q.H * vstar);
  }
  return std::make_unique<QuadraticTrilevelProblem>(d, std::move(f2), spec.alphas, spec.mu);
}

}  // namespace detail

/// Generates the problem and its nested oracle. A singular draw is regenerated with the next seed.
inline QuadraticBuild build_quadratic_problem(const QuadraticSpec& spec, int max_regenerations = 16) {
  QuadraticBuild out;
  for (int attempt = 0; attempt <= max_regenerations; ++attempt) {
    const std::uint64_t seed = spec.seed + static_cast<std::uint64_t>(attempt);
    try {
      auto prob = detail::generate_quadratic(spec, seed);
      out.oracle = prob->solve_oracle();
      out.problem = std::move(prob);
      out.seed_used = seed;
      out.regenerations = attempt;
      return out;
    } catch (const NumericError&) {
      continue;
    }
  }
  throw NumericError("build_quadratic_problem: every regeneration produced a singular system");
}

}  // namespace afto
