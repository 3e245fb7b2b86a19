#pragma once

// K-round distributed augmented-Lagrangian unrolls for the level-3 and level-2
// problems, and the constraint functions h_I / h_II built from their endpoints.
//
// Level 3 (frozen z1, z2'):
//   L_{p,3} = sum_j f3_j(z1, z2', x_j) + phi_j^T (x_j - z) + k3/2 ||x_j - z||^2
// Level 2 (frozen z1, z3, {x3_j}, layer-I polytope):
//   L_{p,2} = sum_j f2_j(z1, x_j, x3_j) + phi_j^T (x_j - z) + k2/2 ||x_j - z||^2
//           + sum_l gamma_l (r_l + s_l) + rho2/2 (r_l + s_l)^2,
//   r_l = a1.z1 + a2.z + a3.z3 + sum_j b_j.x3_j - c_l.

#include "afto/core.hpp"
#include "afto/polytope.hpp"

#include <memory>
#include <optional>

namespace afto {

enum class GradMode { automatic, finite_diff, analytic_unroll };

inline const char* to_string(GradMode m) {
  switch (m) {
    case GradMode::automatic: return "auto";
    case GradMode::finite_diff: return "finite_diff";
    case GradMode::analytic_unroll: return "analytic_unroll";
  }
  return "?";
}

struct InnerConfig {
  int K = 20;
  double eta_x = 0.05;
  double eta_z = 0.05;
  double eta_phi = 0.05;
  double kappa2 = 1.0;
  double kappa3 = 1.0;
  double rho2 = 1.0;
  double eps1 = 1e-2;
  double eps2 = 1e-2;
  bool warm_start = false;
  GradMode grad_mode = GradMode::automatic;

  // Zero step sizes are accepted: the unroll then reproduces its initialization.
  void validate() const {
    if (K < 1) throw ConfigError("inner: K must be >= 1");
    if (eta_x < 0 || eta_z < 0 || eta_phi < 0) throw ConfigError("inner: step sizes must be nonnegative");
    if (!(kappa2 > 0) || !(kappa3 > 0) || !(rho2 > 0)) throw ConfigError("inner: penalties must be positive");
    if (!(eps1 > 0) || !(eps2 > 0)) throw ConfigError("inner: relaxation tolerances must be positive");
  }
};

/// One snapshot of an inner unroll. gamma/slack are empty for level 3.
struct InnerState {
  std::vector<Vec> x;
  Vec z;
  std::vector<Vec> phi;
  Vec gamma;
  Vec slack;

  static InnerState zeros(std::size_t workers, std::size_t dim, std::size_t cuts = 0) {
    InnerState s;
    s.x.assign(workers, Vec::Zero(static_cast<Eigen::Index>(dim)));
    s.z = Vec::Zero(static_cast<Eigen::Index>(dim));
    s.phi.assign(workers, Vec::Zero(static_cast<Eigen::Index>(dim)));
    s.gamma = Vec::Zero(static_cast<Eigen::Index>(cuts));
    s.slack = Vec::Zero(static_cast<Eigen::Index>(cuts));
    return s;
  }

  bool finite() const {
    for (const auto& v : x)
      if (!all_finite(v)) return false;
    for (const auto& v : phi)
      if (!all_finite(v)) return false;
    return all_finite(z) && all_finite(gamma) && all_finite(slack);
  }

  bool operator==(const InnerState& o) const {
    auto same = [](const std::vector<Vec>& a, const std::vector<Vec>& b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].size() != b[i].size() || a[i] != b[i]) return false;
      return true;
    };
    auto same_vec = [](const Vec& a, const Vec& b) { return a.size() == b.size() && a == b; };
    return same(x, o.x) && same(phi, o.phi) && same_vec(z, o.z) && same_vec(gamma, o.gamma) &&
           same_vec(slack, o.slack);
  }
};

/// The recorded K-round path; snapshots[K] is the argmin estimate.
struct UnrollTrace {
  Layer layer = Layer::one;
  // Frozen outer inputs. Level 3 uses z1 and z2p; level 2 uses z1, z3, x3.
  Vec z1;
  Vec z2p;
  Vec z3;
  std::vector<Vec> x3;
  std::vector<InnerState> snapshots;

  int rounds() const { return static_cast<int>(snapshots.size()) - 1; }
  const InnerState& final_state() const { return snapshots.back(); }
  const Vec& gamma_final() const { return snapshots.back().gamma; }
};

// ---------------------------------------------------------------------------
// Level 3

inline Blocks level3_args(const Vec& z1, const Vec& z2p, const Vec& x3) { return {z1, z2p, x3}; }

inline double level3_lagrangian(const TrilevelProblem& p, const Vec& z1, const Vec& z2p,
                                const InnerState& s, double kappa3) {
  double acc = 0.0;
  for (std::size_t j = 0; j < s.x.size(); ++j) {
    const Vec d = s.x[j] - s.z;
    acc += p.value(Level::three, j, level3_args(z1, z2p, s.x[j])) + s.phi[j].dot(d) +
           0.5 * kappa3 * d.squaredNorm();
  }
  return acc;
}

/// Gradient of L_{p,3} with respect to ({x_j}, z, {phi_j}), packed as an InnerState.
inline InnerState level3_gradient(const TrilevelProblem& p, const Vec& z1, const Vec& z2p,
                                  const InnerState& s, double kappa3) {
  InnerState g;
  g.z = Vec::Zero(s.z.size());
  for (std::size_t j = 0; j < s.x.size(); ++j) {
    const Vec d = s.x[j] - s.z;
    g.x.push_back(p.gradient(Level::three, j, Block::three, level3_args(z1, z2p, s.x[j])) + s.phi[j] +
                  kappa3 * d);
    g.z -= s.phi[j] + kappa3 * d;
    g.phi.push_back(d);
  }
  return g;
}

inline void check_level3_inputs(const TrilevelProblem& p, const Vec& z1, const Vec& z2p) {
  const auto& d = p.dims();
  if (z1.size() != static_cast<Eigen::Index>(d.d1) || z2p.size() != static_cast<Eigen::Index>(d.d2))
    throw DimensionError("solve_level3: frozen input size mismatch");
}

/// Runs K rounds: worker gradient steps on x_{3,j}', master step on z_3', dual ascent on phi_{3,j}.
inline UnrollTrace solve_level3(const TrilevelProblem& p, const Vec& z1, const Vec& z2p,
                                const InnerState* init, const InnerConfig& cfg) {
  cfg.validate();
  check_level3_inputs(p, z1, z2p);
  const auto& d = p.dims();
  UnrollTrace tr;
  tr.layer = Layer::one;
  tr.z1 = z1;
  tr.z2p = z2p;
  InnerState s = init ? *init : InnerState::zeros(d.workers, d.d3);
  s.gamma.resize(0);
  s.slack.resize(0);
  if (s.x.size() != d.workers || s.z.size() != static_cast<Eigen::Index>(d.d3))
    throw DimensionError("solve_level3: initialization size mismatch");
  tr.snapshots.reserve(static_cast<std::size_t>(cfg.K) + 1);
  tr.snapshots.push_back(s);
  for (int k = 0; k < cfg.K; ++k) {
    const InnerState g = level3_gradient(p, z1, z2p, s, cfg.kappa3);
    InnerState next = s;
    for (std::size_t j = 0; j < d.workers; ++j) next.x[j] = s.x[j] - cfg.eta_x * g.x[j];
    next.z = s.z - cfg.eta_z * g.z;
    for (std::size_t j = 0; j < d.workers; ++j) next.phi[j] = s.phi[j] + cfg.eta_phi * (next.x[j] - next.z);
    if (!next.finite()) throw NumericError("level-3 unroll: non-finite values at round " + std::to_string(k));
    s = std::move(next);
    tr.snapshots.push_back(s);
  }
  return tr;
}

/// ||[{x3_j - xhat_j}; z3 - zhat]||^2 against the trace's final estimate.
inline double eval_h1(const UnrollTrace& tr, const std::vector<Vec>& x3, const Vec& z3) {
  if (tr.layer != Layer::one) throw ConfigError("eval_h1: trace is not a level-3 unroll");
  const auto& f = tr.final_state();
  if (x3.size() != f.x.size() || z3.size() != f.z.size()) throw DimensionError("eval_h1: dimension mismatch");
  double acc = (z3 - f.z).squaredNorm();
  for (std::size_t j = 0; j < x3.size(); ++j) {
    if (x3[j].size() != f.x[j].size()) throw DimensionError("eval_h1: dimension mismatch");
    acc += (x3[j] - f.x[j]).squaredNorm();
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Level 2

/// Outer quantities frozen during a level-2 unroll.
struct Level2Frozen {
  Vec z1;
  Vec z3;
  std::vector<Vec> x3;
};

/// Part of each layer-I residual that does not depend on z2': a1.z1 + a3.z3 + sum b.x3 - c.
inline Vec layer1_offsets(const Polytope& poly1, const Level2Frozen& fr) {
  Vec off(static_cast<Eigen::Index>(poly1.size()));
  for (std::size_t l = 0; l < poly1.size(); ++l) {
    const Cut& c = poly1[l];
    double v = c.a[0].dot(fr.z1) + c.a[2].dot(fr.z3) - c.c;
    for (std::size_t j = 0; j < fr.x3.size(); ++j) v += c.b[2][j].dot(fr.x3[j]);
    off[static_cast<Eigen::Index>(l)] = v;
  }
  return off;
}

inline Vec layer1_residuals(const Polytope& poly1, const Vec& offsets, const Vec& z2p) {
  Vec r = offsets;
  for (std::size_t l = 0; l < poly1.size(); ++l) r[static_cast<Eigen::Index>(l)] += poly1[l].a[1].dot(z2p);
  return r;
}

inline Blocks level2_args(const Vec& z1, const Vec& x2, const Vec& x3) { return {z1, x2, x3}; }

inline double level2_lagrangian(const TrilevelProblem& p, const Level2Frozen& fr, const Polytope& poly1,
                                const InnerState& s, double kappa2, double rho2) {
  double acc = 0.0;
  for (std::size_t j = 0; j < s.x.size(); ++j) {
    const Vec d = s.x[j] - s.z;
    acc += p.value(Level::two, j, level2_args(fr.z1, s.x[j], fr.x3[j])) + s.phi[j].dot(d) +
           0.5 * kappa2 * d.squaredNorm();
  }
  const Vec r = layer1_residuals(poly1, layer1_offsets(poly1, fr), s.z);
  for (Eigen::Index l = 0; l < r.size(); ++l) {
    const double rs = r[l] + s.slack[l];
    acc += s.gamma[l] * rs + 0.5 * rho2 * rs * rs;
  }
  return acc;
}

/// Gradient of L_{p,2} with respect to ({x_j}, z, {phi_j}, {gamma_l}, {s_l}).
inline InnerState level2_gradient(const TrilevelProblem& p, const Level2Frozen& fr, const Polytope& poly1,
                                  const InnerState& s, double kappa2, double rho2) {
  InnerState g;
  g.z = Vec::Zero(s.z.size());
  for (std::size_t j = 0; j < s.x.size(); ++j) {
    const Vec d = s.x[j] - s.z;
    g.x.push_back(p.gradient(Level::two, j, Block::two, level2_args(fr.z1, s.x[j], fr.x3[j])) + s.phi[j] +
                  kappa2 * d);
    g.z -= s.phi[j] + kappa2 * d;
    g.phi.push_back(d);
  }
  const Vec r = layer1_residuals(poly1, layer1_offsets(poly1, fr), s.z);
  g.gamma = r + s.slack;
  g.slack = s.gamma + rho2 * (r + s.slack);
  for (std::size_t l = 0; l < poly1.size(); ++l) {
    const auto li = static_cast<Eigen::Index>(l);
    g.z += (s.gamma[li] + rho2 * (r[li] + s.slack[li])) * poly1[l].a[1];
  }
  return g;
}

inline void check_level2_inputs(const TrilevelProblem& p, const Level2Frozen& fr, const Polytope& poly1) {
  const auto& d = p.dims();
  if (fr.z1.size() != static_cast<Eigen::Index>(d.d1) || fr.z3.size() != static_cast<Eigen::Index>(d.d3) ||
      fr.x3.size() != d.workers)
    throw DimensionError("solve_level2: frozen input size mismatch");
  for (const auto& v : fr.x3)
    if (v.size() != static_cast<Eigen::Index>(d.d3)) throw DimensionError("solve_level2: x3 size mismatch");
  if (poly1.layer() != Layer::one) throw ConfigError("solve_level2: expected a layer-I polytope");
  for (const auto& c : poly1.cuts()) c.check_dims(d);
}

/// K rounds of primal-dual steps on L_{p,2}. Per round: worker steps on x_{2,j}',
/// master step on z_2', closed-form slack s_l = max(0, -r_l - gamma_l/rho2),
/// dual ascent on phi_{2,j} and gamma_l (gamma clamped at 0).
inline UnrollTrace solve_level2(const TrilevelProblem& p, const Level2Frozen& fr, const Polytope& poly1,
                                const InnerState* init, const InnerConfig& cfg) {
  cfg.validate();
  check_level2_inputs(p, fr, poly1);
  const auto& d = p.dims();
  const std::size_t m = poly1.size();
  UnrollTrace tr;
  tr.layer = Layer::two;
  tr.z1 = fr.z1;
  tr.z3 = fr.z3;
  tr.x3 = fr.x3;
  InnerState s = InnerState::zeros(d.workers, d.d2, m);
  if (init) {
    s.x = init->x;
    s.z = init->z;
    s.phi = init->phi;
    if (init->gamma.size() == static_cast<Eigen::Index>(m)) s.gamma = init->gamma;
  }
  if (s.x.size() != d.workers || s.z.size() != static_cast<Eigen::Index>(d.d2))
    throw DimensionError("solve_level2: initialization size mismatch");
  const Vec off = layer1_offsets(poly1, fr);
  const double rho = cfg.rho2;
  s.slack = (-layer1_residuals(poly1, off, s.z) - s.gamma / rho).cwiseMax(0.0);
  tr.snapshots.reserve(static_cast<std::size_t>(cfg.K) + 1);
  tr.snapshots.push_back(s);
  for (int k = 0; k < cfg.K; ++k) {
    const InnerState g = level2_gradient(p, fr, poly1, s, cfg.kappa2, rho);
    InnerState next = s;
    for (std::size_t j = 0; j < d.workers; ++j) next.x[j] = s.x[j] - cfg.eta_x * g.x[j];
    next.z = s.z - cfg.eta_z * g.z;
    const Vec r_next = layer1_residuals(poly1, off, next.z);
    next.slack = (-r_next - s.gamma / rho).cwiseMax(0.0);
    for (std::size_t j = 0; j < d.workers; ++j) next.phi[j] = s.phi[j] + cfg.eta_phi * (next.x[j] - next.z);
    next.gamma = (s.gamma + cfg.eta_phi * (r_next + next.slack)).cwiseMax(0.0);
    if (!next.finite()) throw NumericError("level-2 unroll: non-finite values at round " + std::to_string(k));
    s = std::move(next);
    tr.snapshots.push_back(s);
  }
  return tr;
}

inline double eval_h2(const UnrollTrace& tr, const std::vector<Vec>& x2, const Vec& z2) {
  if (tr.layer != Layer::two) throw ConfigError("eval_h2: trace is not a level-2 unroll");
  const auto& f = tr.final_state();
  if (x2.size() != f.x.size() || z2.size() != f.z.size()) throw DimensionError("eval_h2: dimension mismatch");
  double acc = (z2 - f.z).squaredNorm();
  for (std::size_t j = 0; j < x2.size(); ++j) {
    if (x2[j].size() != f.x[j].size()) throw DimensionError("eval_h2: dimension mismatch");
    acc += (x2[j] - f.x[j]).squaredNorm();
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Constraint functions over a full primal point

/// h_I or h_II as a function of a PrimalState. Blocks the function does not
/// read are ignored and receive zero gradient.
class ConstraintFunction {
 public:
  ConstraintFunction(const TrilevelProblem& p, InnerConfig cfg, std::optional<InnerState> init = std::nullopt)
      : problem_(&p), cfg_(cfg), init_(std::move(init)) {
    cfg_.validate();
  }
  virtual ~ConstraintFunction() = default;

  virtual Layer layer() const = 0;
  virtual UnrollTrace unroll(const PrimalState& point) const = 0;
  virtual double evaluate(const UnrollTrace& tr, const PrimalState& point) const = 0;

  double value(const PrimalState& point) const { return evaluate(unroll(point), point); }

  PrimalState gradient(const PrimalState& point, GradMode mode = GradMode::automatic) const {
    if (mode == GradMode::automatic)
      mode = problem_->has_second_derivatives() ? GradMode::analytic_unroll : GradMode::finite_diff;
    if (mode == GradMode::analytic_unroll) {
      if (!problem_->has_second_derivatives())
        throw NumericError("analytic-unroll gradient requires a problem with second derivatives");
      return analytic_gradient(point);
    }
    return fd_gradient(point);
  }

  /// Replaces the measured blocks of `point` by the unroll estimate at its frozen inputs (h becomes 0).
  virtual void fill_estimate(PrimalState& point) const = 0;
  /// Visits every measured (dependent) block of `point`.
  virtual void for_each_dependent(PrimalState& point, const std::function<void(Block, Vec&)>& fn) const = 0;
  /// Visits every frozen-input (independent) block of `point`.
  virtual void for_each_independent(PrimalState& point, const std::function<void(Block, Vec&)>& fn) const = 0;

  const TrilevelProblem& problem() const { return *problem_; }
  const InnerConfig& config() const { return cfg_; }
  const std::optional<InnerState>& init() const { return init_; }

 protected:
  virtual PrimalState analytic_gradient(const PrimalState& point) const = 0;

  /// Central differences. Dependent blocks reuse the trace; independent blocks re-run the unroll.
  PrimalState fd_gradient(const PrimalState& point) const {
    PrimalState g = PrimalState::zeros(problem_->dims());
    const double h = default_fd_step(point.flatten());
    const UnrollTrace tr = unroll(point);
    PrimalState probe = point;
    auto diff_block = [&](bool rerun) {
      return [&, rerun](Block, Vec& v) {
        // locate matching gradient slot via pointer offset into probe
        Vec* gslot = slot_in(g, probe, &v);
        for (Eigen::Index k = 0; k < v.size(); ++k) {
          const double orig = v[k];
          v[k] = orig + h;
          const double fp = rerun ? value(probe) : evaluate(tr, probe);
          v[k] = orig - h;
          const double fm = rerun ? value(probe) : evaluate(tr, probe);
          v[k] = orig;
          if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("constraint gradient: non-finite value at coordinate " + std::to_string(k));
          (*gslot)[k] = (fp - fm) / (2.0 * h);
        }
      };
    };
    for_each_dependent(probe, diff_block(false));
    for_each_independent(probe, diff_block(true));
    return g;
  }

  static Vec* slot_in(PrimalState& g, PrimalState& probe, const Vec* v) {
    for (std::size_t i = 0; i < 3; ++i) {
      if (&probe.z[i] == v) return &g.z[i];
      for (std::size_t j = 0; j < probe.x[i].size(); ++j)
        if (&probe.x[i][j] == v) return &g.x[i][j];
    }
    throw Error("constraint gradient: block not found");
  }

  const TrilevelProblem* problem_;
  InnerConfig cfg_;
  std::optional<InnerState> init_;
};

/// h_I({x3_j}, z1, z2', z3) = ||[{x3_j}; z3] - phi_I(z1, z2')||^2. The point's z2 slot holds z2'.
class LayerOneConstraint final : public ConstraintFunction {
 public:
  using ConstraintFunction::ConstraintFunction;

  Layer layer() const override { return Layer::one; }

  UnrollTrace unroll(const PrimalState& pt) const override {
    return solve_level3(*problem_, pt.z[0], pt.z[1], init_ ? &*init_ : nullptr, cfg_);
  }

  double evaluate(const UnrollTrace& tr, const PrimalState& pt) const override {
    return eval_h1(tr, pt.x[2], pt.z[2]);
  }

  void fill_estimate(PrimalState& pt) const override {
    const auto tr = unroll(pt);
    pt.x[2] = tr.final_state().x;
    pt.z[2] = tr.final_state().z;
  }

  void for_each_dependent(PrimalState& pt, const std::function<void(Block, Vec&)>& fn) const override {
    for (auto& v : pt.x[2]) fn(Block::three, v);
    fn(Block::three, pt.z[2]);
  }

  void for_each_independent(PrimalState& pt, const std::function<void(Block, Vec&)>& fn) const override {
    fn(Block::one, pt.z[0]);
    fn(Block::two, pt.z[1]);
  }

 protected:
  // Reverse-mode sweep through the K stored rounds.
  PrimalState analytic_gradient(const PrimalState& pt) const override {
    const auto& d = problem_->dims();
    const std::size_t N = d.workers;
    const UnrollTrace tr = unroll(pt);
    const auto& fin = tr.final_state();
    PrimalState g = PrimalState::zeros(d);
    std::vector<Vec> xbar(N);
    for (std::size_t j = 0; j < N; ++j) {
      const Vec dev = pt.x[2][j] - fin.x[j];
      g.x[2][j] = 2.0 * dev;
      xbar[j] = -2.0 * dev;
    }
    g.z[2] = 2.0 * (pt.z[2] - fin.z);
    Vec zbar = -2.0 * (pt.z[2] - fin.z);
    std::vector<Vec> phibar(N, Vec::Zero(static_cast<Eigen::Index>(d.d3)));
    Vec z1bar = Vec::Zero(static_cast<Eigen::Index>(d.d1));
    Vec z2bar = Vec::Zero(static_cast<Eigen::Index>(d.d2));
    const double ex = cfg_.eta_x, ez = cfg_.eta_z, ep = cfg_.eta_phi, kap = cfg_.kappa3;
    const double n = static_cast<double>(N);
    for (int k = tr.rounds() - 1; k >= 0; --k) {
      const InnerState& s = tr.snapshots[static_cast<std::size_t>(k)];
      // phi^{k+1} = phi^k + ep (x^{k+1} - z^{k+1})
      for (std::size_t j = 0; j < N; ++j) {
        xbar[j] += ep * phibar[j];
        zbar -= ep * phibar[j];
      }
      std::vector<Vec> xprev(N);
      Vec zprev = (1.0 - ez * kap * n) * zbar;
      std::vector<Vec> phiprev = phibar;
      for (std::size_t j = 0; j < N; ++j) {
        const Blocks args = level3_args(tr.z1, tr.z2p, s.x[j]);
        const Vec& v = xbar[j];
        // x^{k+1}_j = x_j - ex (grad f3_j + phi_j + kap (x_j - z))
        xprev[j] = v - ex * (problem_->hessian_vector(Level::three, j, Block::three, Block::three, args, v) +
                             kap * v);
        zprev += ex * kap * v;
        phiprev[j] -= ex * v;
        z1bar -= ex * problem_->hessian_vector(Level::three, j, Block::one, Block::three, args, v);
        z2bar -= ex * problem_->hessian_vector(Level::three, j, Block::two, Block::three, args, v);
        // z^{k+1} = z + ez sum phi_j + ez kap sum (x_j - z)
        xprev[j] += ez * kap * zbar;
        phiprev[j] += ez * zbar;
      }
      xbar = std::move(xprev);
      zbar = std::move(zprev);
      phibar = std::move(phiprev);
    }
    g.z[0] = z1bar;
    g.z[1] = z2bar;
    return g;
  }
};

/// h_II({x2_j}, {x3_j}, z1, z2, z3) = ||[{x2_j}; z2] - phi_II(z1, z3, {x3_j})||^2 for a fixed layer-I polytope.
class LayerTwoConstraint final : public ConstraintFunction {
 public:
  LayerTwoConstraint(const TrilevelProblem& p, InnerConfig cfg, Polytope poly1,
                     std::optional<InnerState> init = std::nullopt)
      : ConstraintFunction(p, cfg, std::move(init)), poly1_(std::move(poly1)) {}

  Layer layer() const override { return Layer::two; }
  const Polytope& layer_one_polytope() const { return poly1_; }

  static Level2Frozen frozen(const PrimalState& pt) { return {pt.z[0], pt.z[2], pt.x[2]}; }

  UnrollTrace unroll(const PrimalState& pt) const override {
    return solve_level2(*problem_, frozen(pt), poly1_, init_ ? &*init_ : nullptr, cfg_);
  }

  double evaluate(const UnrollTrace& tr, const PrimalState& pt) const override {
    return eval_h2(tr, pt.x[1], pt.z[1]);
  }

  void fill_estimate(PrimalState& pt) const override {
    const auto tr = unroll(pt);
    pt.x[1] = tr.final_state().x;
    pt.z[1] = tr.final_state().z;
  }

  void for_each_dependent(PrimalState& pt, const std::function<void(Block, Vec&)>& fn) const override {
    for (auto& v : pt.x[1]) fn(Block::two, v);
    fn(Block::two, pt.z[1]);
  }

  void for_each_independent(PrimalState& pt, const std::function<void(Block, Vec&)>& fn) const override {
    fn(Block::one, pt.z[0]);
    fn(Block::three, pt.z[2]);
    for (auto& v : pt.x[2]) fn(Block::three, v);
  }

 protected:
  PrimalState analytic_gradient(const PrimalState& pt) const override {
    const auto& d = problem_->dims();
    const std::size_t N = d.workers;
    const std::size_t m = poly1_.size();
    const UnrollTrace tr = unroll(pt);
    const auto& fin = tr.final_state();
    const Level2Frozen fr = frozen(pt);
    const Vec off = layer1_offsets(poly1_, fr);
    const double ex = cfg_.eta_x, ez = cfg_.eta_z, ep = cfg_.eta_phi, kap = cfg_.kappa2, rho = cfg_.rho2;
    const double n = static_cast<double>(N);

    PrimalState g = PrimalState::zeros(d);
    std::vector<Vec> xbar(N);
    for (std::size_t j = 0; j < N; ++j) {
      const Vec dev = pt.x[1][j] - fin.x[j];
      g.x[1][j] = 2.0 * dev;
      xbar[j] = -2.0 * dev;
    }
    g.z[1] = 2.0 * (pt.z[1] - fin.z);
    Vec zbar = -2.0 * (pt.z[1] - fin.z);
    std::vector<Vec> phibar(N, Vec::Zero(static_cast<Eigen::Index>(d.d2)));
    Vec gambar = Vec::Zero(static_cast<Eigen::Index>(m));
    Vec sbar = Vec::Zero(static_cast<Eigen::Index>(m));

    // Accumulated adjoints of the frozen inputs.
    Vec z1bar = Vec::Zero(static_cast<Eigen::Index>(d.d1));
    Vec z3bar = Vec::Zero(static_cast<Eigen::Index>(d.d3));
    std::vector<Vec> x3bar(N, Vec::Zero(static_cast<Eigen::Index>(d.d3)));
    auto push_offset = [&](std::size_t l, double w) {  // d offset_l / d theta scaled by w
      if (w == 0.0) return;
      const Cut& c = poly1_[l];
      z1bar += w * c.a[0];
      z3bar += w * c.a[2];
      for (std::size_t j = 0; j < N; ++j) x3bar[j] += w * c.b[2][j];
    };

    for (int k = tr.rounds() - 1; k >= 0; --k) {
      const InnerState& s = tr.snapshots[static_cast<std::size_t>(k)];
      const InnerState& s1 = tr.snapshots[static_cast<std::size_t>(k) + 1];
      const Vec r1 = layer1_residuals(poly1_, off, s1.z);
      const Vec r0 = layer1_residuals(poly1_, off, s.z);
      Vec rbar1 = Vec::Zero(static_cast<Eigen::Index>(m));
      Vec gamprev = Vec::Zero(static_cast<Eigen::Index>(m));

      // gamma^{k+1} = max(0, gamma + ep (r1 + s1))
      for (std::size_t l = 0; l < m; ++l) {
        const auto li = static_cast<Eigen::Index>(l);
        const double pre = s.gamma[li] + ep * (r1[li] + s1.slack[li]);
        if (pre > 0.0) {
          gamprev[li] += gambar[li];
          rbar1[li] += ep * gambar[li];
          sbar[li] += ep * gambar[li];
        }
      }
      // phi^{k+1} = phi + ep (x^{k+1} - z^{k+1})
      for (std::size_t j = 0; j < N; ++j) {
        xbar[j] += ep * phibar[j];
        zbar -= ep * phibar[j];
      }
      // s^{k+1} = max(0, -r1 - gamma/rho)
      for (std::size_t l = 0; l < m; ++l) {
        const auto li = static_cast<Eigen::Index>(l);
        if (-r1[li] - s.gamma[li] / rho > 0.0) {
          rbar1[li] -= sbar[li];
          gamprev[li] -= sbar[li] / rho;
        }
      }
      // r1 = off + a2 . z^{k+1}
      for (std::size_t l = 0; l < m; ++l) {
        const auto li = static_cast<Eigen::Index>(l);
        zbar += rbar1[li] * poly1_[l].a[1];
        push_offset(l, rbar1[li]);
      }

      // z^{k+1} = z - ez (-sum phi - kap sum (x - z) + sum u_l a2_l), u_l = gamma + rho (r0 + s)
      const Vec& w = zbar;
      Vec zprev = (1.0 - ez * kap * n) * w;
      std::vector<Vec> xprev(N);
      std::vector<Vec> phiprev = phibar;
      Vec sprev = Vec::Zero(static_cast<Eigen::Index>(m));
      for (std::size_t j = 0; j < N; ++j) {
        xprev[j] = ez * kap * w;
        phiprev[j] += ez * w;
      }
      for (std::size_t l = 0; l < m; ++l) {
        const auto li = static_cast<Eigen::Index>(l);
        const double ubar = -ez * poly1_[l].a[1].dot(w);
        gamprev[li] += ubar;
        sprev[li] += rho * ubar;
        zprev += rho * ubar * poly1_[l].a[1];
        push_offset(l, rho * ubar);
      }
      // x^{k+1}_j = x_j - ex (grad f2_j + phi_j + kap (x_j - z))
      for (std::size_t j = 0; j < N; ++j) {
        const Blocks args = level2_args(tr.z1, s.x[j], tr.x3[j]);
        const Vec& v = xbar[j];
        xprev[j] += v - ex * (problem_->hessian_vector(Level::two, j, Block::two, Block::two, args, v) + kap * v);
        zprev += ex * kap * v;
        phiprev[j] -= ex * v;
        z1bar -= ex * problem_->hessian_vector(Level::two, j, Block::one, Block::two, args, v);
        x3bar[j] -= ex * problem_->hessian_vector(Level::two, j, Block::three, Block::two, args, v);
      }
      xbar = std::move(xprev);
      zbar = std::move(zprev);
      phibar = std::move(phiprev);
      gambar = std::move(gamprev);
      sbar = std::move(sprev);
      (void)r0;
    }
    // s^0 = max(0, -r(z^0) - gamma^0/rho); z^0 and gamma^0 do not depend on the frozen inputs.
    const InnerState& s0 = tr.snapshots.front();
    const Vec r0 = layer1_residuals(poly1_, off, s0.z);
    for (std::size_t l = 0; l < m; ++l) {
      const auto li = static_cast<Eigen::Index>(l);
      if (-r0[li] - s0.gamma[li] / rho > 0.0) push_offset(l, -sbar[li]);
    }
    g.z[0] = z1bar;
    g.z[2] = z3bar;
    for (std::size_t j = 0; j < N; ++j) g.x[2][j] += x3bar[j];
    return g;
  }

 private:
  Polytope poly1_;
};

/// Gradient of a constraint function at `point` (finite differences or reverse-mode unroll).
inline PrimalState grad_h(const ConstraintFunction& h, const PrimalState& point,
                          GradMode mode = GradMode::automatic) {
  return h.gradient(point, mode);
}

}  // namespace afto
