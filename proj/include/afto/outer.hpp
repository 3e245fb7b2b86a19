#pragma once

// Outer Lagrangian over the layer-II polytope, its regularized form, the
// asynchronous worker/master updates, and the stationarity gap.
//
//   L_p  = sum_j f1_j(x1_j, x2_j, x3_j) + sum_j theta_j.(x1_j - z1) + sum_l lambda_l r_l
//   L^_p = L_p - sum_l c1_t/2 lambda_l^2 - sum_j c2_t/2 ||theta_j||^2
//
// r_l is the layer-II cut residual a.z + b.x - c.

#include "afto/core.hpp"
#include "afto/polytope.hpp"

#include <algorithm>
#include <optional>
#include <sstream>

namespace afto {

struct OuterConfig {
  std::array<double, 3> eta_x{0.05, 0.05, 0.05};
  std::array<double, 3> eta_z{0.05, 0.05, 0.05};
  double eta_lambda = 0.1;
  double eta_theta = 0.1;
  double alpha4 = 1e4;
  double alpha5 = 1e4;
  double c1_floor = 1e-3;
  double c2_floor = 1e-3;
  double eps = 1e-4;
  int T_pre = 10;
  int T1 = 100;
  int max_iters = 1000;
  bool project_bounds = true;
  // Only iterations after the last refinement (t >= T1) may terminate the run.
  bool converge_after_T1 = true;

  // Zero primal steps freeze a block; dual steps, bounds and floors must be positive.
  void validate() const {
    for (double e : eta_x)
      if (e < 0) throw ConfigError("outer: eta_x must be nonnegative");
    for (double e : eta_z)
      if (e < 0) throw ConfigError("outer: eta_z must be nonnegative");
    if (!(eta_lambda > 0) || !(eta_theta > 0)) throw ConfigError("outer: dual step sizes must be positive");
    if (!(alpha4 > 0) || !(alpha5 > 0)) throw ConfigError("outer: dual bounds alpha4, alpha5 must be positive");
    if (!(c1_floor > 0) || !(c2_floor > 0)) throw ConfigError("outer: regularization floors must be positive");
    if (!(eps > 0)) throw ConfigError("outer: eps must be positive");
    if (T_pre < 1) throw ConfigError("outer: T_pre must be >= 1");
    if (T1 < 0) throw ConfigError("outer: T1 must be >= 0");
    if (max_iters < 1) throw ConfigError("outer: max_iters must be >= 1");
  }
};

/// c1_t = max(c1_floor, 1/(eta_lambda (t+1)^{1/4})).
inline double reg_c1(const OuterConfig& c, std::int64_t t) {
  return std::max(c.c1_floor, 1.0 / (c.eta_lambda * std::pow(static_cast<double>(t + 1), 0.25)));
}
inline double reg_c2(const OuterConfig& c, std::int64_t t) {
  return std::max(c.c2_floor, 1.0 / (c.eta_theta * std::pow(static_cast<double>(t + 1), 0.25)));
}

inline void check_outer_dims(const TrilevelProblem& p, const PrimalState& s, const DualState& du,
                             const Polytope& poly2) {
  s.check_dims(p.dims());
  if (du.lambda.size() != poly2.size()) throw DimensionError("outer: lambda count does not match polytope size");
  if (du.theta.size() != p.dims().workers) throw DimensionError("outer: theta count mismatch");
  for (const auto& t : du.theta)
    if (t.size() != static_cast<Eigen::Index>(p.dims().d1)) throw DimensionError("outer: theta size mismatch");
}

inline double sum_f1(const TrilevelProblem& p, const PrimalState& s) {
  return ConsensusView(p).total_value(Level::one, s);
}

inline double lagrangian(const PrimalState& s, const DualState& du, const Polytope& poly2, const TrilevelProblem& p) {
  check_outer_dims(p, s, du, poly2);
  double acc = sum_f1(p, s);
  for (std::size_t j = 0; j < s.workers(); ++j) acc += du.theta[j].dot(s.x[0][j] - s.z[0]);
  for (std::size_t l = 0; l < poly2.size(); ++l) acc += du.lambda[l] * cut_violation(poly2[l], s);
  return finite_or_throw(acc, "lagrangian");
}

inline double regularized_lagrangian(const PrimalState& s, const DualState& du, const Polytope& poly2,
                                     const TrilevelProblem& p, const OuterConfig& cfg, std::int64_t t) {
  if (t < 0) throw ConfigError("regularized_lagrangian: t must be >= 0");
  double acc = lagrangian(s, du, poly2, p);
  const double c1 = reg_c1(cfg, t), c2 = reg_c2(cfg, t);
  for (double l : du.lambda) acc -= 0.5 * c1 * l * l;
  for (const auto& th : du.theta) acc -= 0.5 * c2 * th.squaredNorm();
  return acc;
}

/// Gradient of L_p (regularized when `t` is set) with respect to every primal and dual block.
struct LagrangianGradient {
  PrimalState primal;
  std::vector<double> lambda;
  std::vector<Vec> theta;
};

/// d/dx_{.,j} of L_p for one worker.
inline std::array<Vec, 3> worker_gradient(const PrimalState& s, const DualState& du, const Polytope& poly2,
                                          const TrilevelProblem& p, std::size_t j) {
  const Blocks args = ConsensusView::arguments(Level::one, j, s);
  std::array<Vec, 3> g;
  for (Block b : kBlocks) g[index(b)] = p.gradient(Level::one, j, b, args);
  g[0] += du.theta[j];
  for (std::size_t l = 0; l < poly2.size(); ++l) {
    const Cut& c = poly2[l];
    for (std::size_t i = 0; i < 3; ++i)
      if (!c.b[i].empty()) g[i] += du.lambda[l] * c.b[i][j];
  }
  return g;
}

inline std::array<Vec, 3> consensus_gradient(const PrimalState& s, const DualState& du, const Polytope& poly2) {
  std::array<Vec, 3> g;
  for (std::size_t i = 0; i < 3; ++i) g[i] = Vec::Zero(s.z[i].size());
  for (const auto& th : du.theta) g[0] -= th;
  for (std::size_t l = 0; l < poly2.size(); ++l)
    for (std::size_t i = 0; i < 3; ++i) g[i] += du.lambda[l] * poly2[l].a[i];
  return g;
}

inline LagrangianGradient lagrangian_gradient(const PrimalState& s, const DualState& du, const Polytope& poly2,
                                              const TrilevelProblem& p,
                                              std::optional<std::pair<OuterConfig, std::int64_t>> reg = {}) {
  check_outer_dims(p, s, du, poly2);
  LagrangianGradient g;
  g.primal = PrimalState::zeros(p.dims());
  for (std::size_t j = 0; j < s.workers(); ++j) {
    auto gj = worker_gradient(s, du, poly2, p, j);
    for (std::size_t i = 0; i < 3; ++i) g.primal.x[i][j] = std::move(gj[i]);
  }
  g.primal.z = consensus_gradient(s, du, poly2);
  const double c1 = reg ? reg_c1(reg->first, reg->second) : 0.0;
  const double c2 = reg ? reg_c2(reg->first, reg->second) : 0.0;
  for (std::size_t l = 0; l < poly2.size(); ++l) g.lambda.push_back(cut_violation(poly2[l], s) - c1 * du.lambda[l]);
  for (std::size_t j = 0; j < s.workers(); ++j) g.theta.push_back(s.x[0][j] - s.z[0] - c2 * du.theta[j]);
  return g;
}

inline double project_lambda(double l, double alpha4) { return std::clamp(l, 0.0, std::sqrt(alpha4)); }

inline Vec project_theta(const Vec& th, double alpha5, std::size_t d1) {
  const double r = std::sqrt(alpha5) / static_cast<double>(d1);
  return th.cwiseMax(-r).cwiseMin(r);
}

/// What a worker sees: the master state, duals and layer-II polytope as of its last activation.
struct StaleView {
  PrimalState state;
  DualState duals;
  Polytope poly2{Layer::two};
  std::int64_t t = 0;
};

/// x_{i,j} <- x_{i,j} - eta_{x_i} grad_{x_{i,j}} L^_p evaluated at the stale view.
inline std::array<Vec, 3> worker_step(std::size_t j, const StaleView& view, const TrilevelProblem& p,
                                      const OuterConfig& cfg) {
  const auto g = worker_gradient(view.state, view.duals, view.poly2, p, j);
  std::array<Vec, 3> out;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!all_finite(g[i])) throw NumericError("worker_step: non-finite gradient at worker " + std::to_string(j));
    out[i] = view.state.x[i][j] - cfg.eta_x[i] * g[i];
    if (cfg.project_bounds) out[i] = project_ball_sq(out[i], p.alphas()[i]);
  }
  return out;
}

/// Gauss-Seidel master update: z1, z2, z3 in turn, then lambda with the new z, then theta
/// with the new z and lambda. Dual ascent uses the regularized Lagrangian at iteration t.
inline void master_step(PrimalState& s, DualState& du, const Polytope& poly2, const TrilevelProblem& p,
                        const OuterConfig& cfg, std::int64_t t) {
  check_outer_dims(p, s, du, poly2);
  for (std::size_t i = 0; i < 3; ++i) {
    // The z_i gradient is read off the current state, so later blocks see earlier updates.
    const Vec g = consensus_gradient(s, du, poly2)[i];
    if (!all_finite(g)) throw NumericError("master_step: non-finite z gradient");
    s.z[i] = s.z[i] - cfg.eta_z[i] * g;
    if (cfg.project_bounds) s.z[i] = project_ball_sq(s.z[i], p.alphas()[i]);
  }
  const double c1 = reg_c1(cfg, t), c2 = reg_c2(cfg, t);
  for (std::size_t l = 0; l < poly2.size(); ++l) {
    const double g = cut_violation(poly2[l], s) - c1 * du.lambda[l];
    if (!std::isfinite(g)) throw NumericError("master_step: non-finite lambda gradient");
    du.lambda[l] = project_lambda(du.lambda[l] + cfg.eta_lambda * g, cfg.alpha4);
  }
  for (std::size_t j = 0; j < s.workers(); ++j) {
    const Vec g = s.x[0][j] - s.z[0] - c2 * du.theta[j];
    du.theta[j] = project_theta(du.theta[j] + cfg.eta_theta * g, cfg.alpha5, p.dims().d1);
  }
  if (!s.finite() || !du.finite()) throw NumericError("master_step: non-finite state");
}

/// Blocks of the stationarity gap: primal gradients of L_p and projected-gradient residuals for the duals.
struct GapVector {
  PrimalState grad;
  std::vector<double> lambda;
  std::vector<Vec> theta;

  double squared_norm() const {
    double s = grad.squared_norm();
    for (double l : lambda) s += l * l;
    for (const auto& t : theta) s += t.squaredNorm();
    return s;
  }
};

inline GapVector stationarity_gap(const PrimalState& s, const DualState& du, const Polytope& poly2,
                                  const TrilevelProblem& p, const OuterConfig& cfg) {
  const auto g = lagrangian_gradient(s, du, poly2, p);
  GapVector out;
  out.grad = g.primal;
  for (std::size_t l = 0; l < poly2.size(); ++l) {
    const double proj = project_lambda(du.lambda[l] + cfg.eta_lambda * g.lambda[l], cfg.alpha4);
    out.lambda.push_back((du.lambda[l] - proj) / cfg.eta_lambda);
  }
  for (std::size_t j = 0; j < s.workers(); ++j) {
    const Vec proj = project_theta(du.theta[j] + cfg.eta_theta * g.theta[j], cfg.alpha5, p.dims().d1);
    out.theta.push_back((du.theta[j] - proj) / cfg.eta_theta);
  }
  if (!std::isfinite(out.squared_norm())) throw NumericError("stationarity_gap: non-finite value");
  return out;
}

// ---------------------------------------------------------------------------
// Step-size prescription

struct StepSizeInputs {
  double L = 1.0;
  double eta_lambda = 0.1;
  double eta_theta = 0.1;
  double c1_floor = 1.0;
  double c2_floor = 1.0;
  double M = 1.0;      // layer-II cut count at configuration time
  double gamma = 1.0;
  std::size_t N = 1;
  std::optional<double> tau;
  std::optional<double> k1;
};

struct StepSizePrescription {
  double eta_x = 0.0;  // shared by every x_i and z_i block
  double eta_z = 0.0;
  double lambda_cap = 0.0;
  double theta_cap = 0.0;
  std::string binding;  // which cap on eta_lambda is tightest
};

/// eta_x = eta_z = 2 / (L + eta_l M L^2 + eta_t N L^2 + 8 (M g L^2/(eta_l c1^2) + N g L^2/(eta_t c2^2))).
/// The dual caps use the floors as c1^0, c2^0.
inline StepSizePrescription prescribe_step_sizes(const StepSizeInputs& in) {
  if (!(in.L > 0)) throw ConfigError("prescribe_step_sizes: L must be positive");
  if (!(in.eta_lambda > 0) || !(in.eta_theta > 0)) throw ConfigError("prescribe_step_sizes: dual steps must be positive");
  if (!(in.c1_floor > 0) || !(in.c2_floor > 0)) throw ConfigError("prescribe_step_sizes: floors must be positive");
  const double L = in.L, L2 = L * L, n = static_cast<double>(in.N);
  StepSizePrescription out;
  out.theta_cap = 2.0 / (L + 2.0 * in.c2_floor);
  if (in.eta_theta > out.theta_cap) {
    std::ostringstream os;
    os << "violated: η_θ ≤ 2/(L+2c₂⁰) (eta_theta=" << in.eta_theta << ", cap=" << out.theta_cap << ")";
    throw NumericError(os.str());
  }
  out.lambda_cap = 2.0 / (L + 2.0 * in.c1_floor);
  out.binding = "η_λ < 2/(L+2c₁⁰)";
  if (in.tau && in.k1) {
    const double other = 1.0 / (30.0 * *in.tau * *in.k1 * n * L2);
    if (other < out.lambda_cap) {
      out.lambda_cap = other;
      out.binding = "η_λ < 1/(30τk₁NL²)";
    }
  }
  if (!(in.eta_lambda < out.lambda_cap)) {
    std::ostringstream os;
    os << "violated: " << out.binding << " (eta_lambda=" << in.eta_lambda << ", cap=" << out.lambda_cap << ")";
    throw NumericError(os.str());
  }
  const double denom = L + in.eta_lambda * in.M * L2 + in.eta_theta * n * L2 +
                       8.0 * (in.M * in.gamma * L2 / (in.eta_lambda * in.c1_floor * in.c1_floor) +
                              n * in.gamma * L2 / (in.eta_theta * in.c2_floor * in.c2_floor));
  out.eta_x = out.eta_z = 2.0 / denom;
  if (!(out.eta_x > 0) || !std::isfinite(out.eta_x)) throw NumericError("prescribe_step_sizes: no positive step");
  return out;
}

/// Largest ||grad f(a) - grad f(b)|| / ||a - b|| over random pairs in the alpha-balls,
/// across every level and worker, using the full three-block gradient.
inline double probe_lipschitz(const TrilevelProblem& p, std::size_t pairs = 100, std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto& d = p.dims();
  auto draw = [&]() {
    Blocks b;
    for (Block blk : kBlocks) {
      Vec v(static_cast<Eigen::Index>(d.size(blk)));
      for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = gauss(rng);
      const double r = std::min(1.0, std::sqrt(p.alpha(blk)));
      b[index(blk)] = v * (r / std::max(v.norm(), 1e-300));
    }
    return b;
  };
  auto full = [&](Level lv, std::size_t j, const Blocks& x) {
    Vec g(static_cast<Eigen::Index>(d.total()));
    Eigen::Index k = 0;
    for (Block blk : kBlocks) {
      const Vec gi = p.gradient(lv, j, blk, x);
      g.segment(k, gi.size()) = gi;
      k += gi.size();
    }
    return g;
  };
  auto flat = [&](const Blocks& x) {
    Vec v(static_cast<Eigen::Index>(d.total()));
    v << x[0], x[1], x[2];
    return v;
  };
  double L = 0.0;
  for (std::size_t k = 0; k < pairs; ++k) {
    const Blocks a = draw(), b = draw();
    const double dist = (flat(a) - flat(b)).norm();
    if (dist == 0.0) continue;
    for (Level lv : kLevels)
      for (std::size_t j = 0; j < d.workers; ++j) L = std::max(L, (full(lv, j, a) - full(lv, j, b)).norm() / dist);
  }
  return L;
}

}  // namespace afto
