#pragma once

// mu-cut generation from a constraint function and sampling-based validity checks.

#include "afto/inner.hpp"
#include "afto/polytope.hpp"

#include <random>

namespace afto {

/// Monotone id source shared by both layers of one run.
class CutIdSource {
 public:
  explicit CutIdSource(std::uint64_t first = 1) : next_(first) {}
  std::uint64_t next() { return next_++; }
  std::uint64_t peek() const { return next_; }

 private:
  std::uint64_t next_;
};

/// The inflation term multiplying mu on the right-hand side.
///
/// Layer I:  (N+1) a1 + a2 + a3 + sum_j ||x3_j||^2 + ||z1||^2 + ||z2'||^2 + ||z3||^2
/// Layer II: a1 + (N+1)(a2 + a3) + sum_{i=2,3} sum_j ||x_ij||^2 + sum_i ||z_i||^2
inline double cut_inflation(Layer layer, const PrimalState& anchor, const std::array<double, 3>& alphas) {
  const double n1 = static_cast<double>(anchor.workers()) + 1.0;
  double r = 0.0;
  if (layer == Layer::one) {
    r = n1 * alphas[0] + alphas[1] + alphas[2];
    for (const auto& v : anchor.x[2]) r += v.squaredNorm();
  } else {
    r = alphas[0] + n1 * (alphas[1] + alphas[2]);
    for (const auto& v : anchor.x[1]) r += v.squaredNorm();
    for (const auto& v : anchor.x[2]) r += v.squaredNorm();
  }
  for (const auto& v : anchor.z) r += v.squaredNorm();
  return r;
}

/// Half-space g.v <= c for h(v) <= eps from the weakly convex first-order bound at v0:
/// g.(v - v0) + h(v0) <= eps + mu * inflation.
struct HalfSpace {
  Vec g;
  double c = 0.0;
};

inline HalfSpace linearize(double h0, const Vec& g, const Vec& v0, double mu, double eps, double inflation) {
  if (!std::isfinite(h0)) throw NumericError("cut generation: non-finite constraint value");
  if (!all_finite(g)) throw NumericError("cut generation: non-finite gradient");
  if (mu < 0) throw ConfigError("cut generation: mu must be nonnegative");
  return {g, eps + mu * inflation - h0 + g.dot(v0)};
}

/// Assembles a Cut from h(anchor), its PrimalState-shaped gradient, and the anchor itself.
inline Cut make_mu_cut(Layer layer, double h0, const PrimalState& grad, const PrimalState& anchor, double mu,
                       double eps, const std::array<double, 3>& alphas, std::int64_t born_at = 0,
                       std::uint64_t id = 0) {
  if (!std::isfinite(h0)) throw NumericError("cut generation: non-finite constraint value");
  if (!grad.finite()) throw NumericError("cut generation: non-finite gradient");
  if (mu < 0) throw ConfigError("cut generation: mu must be nonnegative");
  Cut cut;
  cut.layer = layer;
  cut.born_at = born_at;
  cut.id = id;
  double gv0 = 0.0;
  for (Block blk : kBlocks) {
    const std::size_t i = index(blk);
    cut.a[i] = grad.z[i];
    gv0 += grad.z[i].dot(anchor.z[i]);
    if (Cut::uses_local(layer, blk)) {
      cut.b[i] = grad.x[i];
      for (std::size_t j = 0; j < grad.x[i].size(); ++j) gv0 += grad.x[i][j].dot(anchor.x[i][j]);
    }
  }
  cut.c = eps + mu * cut_inflation(layer, anchor, alphas) - h0 + gv0;
  if (!cut.finite()) throw NumericError("cut generation: non-finite coefficients");
  return cut;
}

struct GeneratedCut {
  Cut cut;
  double h_value = 0.0;
  UnrollTrace trace;
};

inline GeneratedCut generate_cut(const ConstraintFunction& h, const PrimalState& point, double mu, double eps,
                                 std::int64_t born_at = 0, std::uint64_t id = 0,
                                 GradMode mode = GradMode::automatic) {
  GeneratedCut out;
  out.trace = h.unroll(point);
  out.h_value = h.evaluate(out.trace, point);
  const PrimalState g = h.gradient(point, mode);
  out.cut = make_mu_cut(h.layer(), out.h_value, g, point, mu, eps, h.problem().alphas(), born_at, id);
  return out;
}

inline GeneratedCut generate_cut_I(const LayerOneConstraint& h, const PrimalState& point, double mu, double eps1,
                                   std::int64_t born_at = 0, std::uint64_t id = 0,
                                   GradMode mode = GradMode::automatic) {
  return generate_cut(h, point, mu, eps1, born_at, id, mode);
}

inline GeneratedCut generate_cut_II(const LayerTwoConstraint& h, const PrimalState& point, double mu, double eps2,
                                    std::int64_t born_at = 0, std::uint64_t id = 0,
                                    GradMode mode = GradMode::automatic) {
  return generate_cut(h, point, mu, eps2, born_at, id, mode);
}

// ---------------------------------------------------------------------------
// Validity sampling

struct CutReport {
  std::size_t samples = 0;
  std::size_t violations = 0;
  double max_violation = -std::numeric_limits<double>::infinity();
  std::size_t draws = 0;
  bool inconclusive = false;
};

inline constexpr std::size_t kMaxRejectionDraws = 1'000'000;

/// A violation must exceed this to count; absorbs rounding in a.z + b.x.
inline double violation_tolerance(double c) { return 1e-9 * (1.0 + std::abs(c)); }

/// Uniform draw from the ball {||v||^2 <= radius_sq}.
inline Vec sample_ball(std::mt19937_64& rng, Eigen::Index n, double radius_sq) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Vec v(n);
  for (Eigen::Index k = 0; k < n; ++k) v[k] = gauss(rng);
  const double nrm = v.norm();
  if (nrm == 0.0 || n == 0) return Vec::Zero(n);
  const double r = std::sqrt(radius_sq) * std::pow(unif(rng), 1.0 / static_cast<double>(n));
  return v * (r / nrm);
}

/// Checks g.v <= c on points drawn uniformly from the ball ||v||^2 <= radius_sq and
/// kept only when h(v) <= eps.
inline CutReport validate_halfspace(const HalfSpace& hs, const std::function<double(const Vec&)>& h, double eps,
                                    double radius_sq, std::size_t n_samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  CutReport rep;
  const double tol = violation_tolerance(hs.c);
  while (rep.samples < n_samples) {
    if (rep.draws >= kMaxRejectionDraws) {
      rep.inconclusive = true;
      break;
    }
    ++rep.draws;
    const Vec v = sample_ball(rng, hs.g.size(), radius_sq);
    if (!(h(v) <= eps)) continue;
    ++rep.samples;
    const double viol = hs.g.dot(v) - hs.c;
    rep.max_violation = std::max(rep.max_violation, viol);
    if (viol > tol) ++rep.violations;
  }
  return rep;
}

/// Draws a point of {h <= eps} inside the alpha-balls: independent blocks uniform in
/// their balls, dependent blocks at the unroll estimate plus a uniform offset of
/// squared radius eps. Returns false when the point leaves the alpha-balls.
inline bool sample_feasible_point(const ConstraintFunction& h, double eps, std::mt19937_64& rng, PrimalState& out) {
  const auto& p = h.problem();
  const auto& d = p.dims();
  out = PrimalState::zeros(d);
  const auto alphas = p.alphas();
  h.for_each_independent(out, [&](Block b, Vec& v) { v = sample_ball(rng, v.size(), alphas[index(b)]); });
  h.fill_estimate(out);
  Eigen::Index n = 0;
  h.for_each_dependent(out, [&](Block, Vec& v) { n += v.size(); });
  const Vec off = sample_ball(rng, n, eps);
  Eigen::Index k = 0;
  h.for_each_dependent(out, [&](Block, Vec& v) {
    v += off.segment(k, v.size());
    k += v.size();
  });
  for (Block b : kBlocks) {
    const double a = alphas[index(b)];
    if (out.z[index(b)].squaredNorm() > a) return false;
    for (const auto& v : out.x[index(b)])
      if (v.squaredNorm() > a) return false;
  }
  return true;
}

/// Samples points with h <= eps inside the alpha-balls and counts violations of `cut`.
inline CutReport validate_cut(const Cut& cut, const ConstraintFunction& h, double eps, std::size_t n_samples,
                              std::uint64_t seed) {
  if (cut.layer != h.layer()) throw ConfigError("validate_cut: cut layer does not match constraint function");
  std::mt19937_64 rng(seed);
  CutReport rep;
  const double tol = violation_tolerance(cut.c);
  PrimalState pt;
  while (rep.samples < n_samples) {
    if (rep.draws >= kMaxRejectionDraws) {
      rep.inconclusive = true;
      break;
    }
    ++rep.draws;
    if (!sample_feasible_point(h, eps, rng, pt)) continue;
    if (!(h.value(pt) <= eps)) continue;
    ++rep.samples;
    const double viol = cut_violation(cut, pt);
    rep.max_violation = std::max(rep.max_violation, viol);
    if (viol > tol) ++rep.violations;
  }
  return rep;
}

/// Weak-convexity estimate of a constraint function on points drawn like validate_cut's
/// sampler, plus extra points spread over the alpha-balls for the measured blocks.
inline double estimate_constraint_mu(const ConstraintFunction& h, double eps, std::size_t n_points,
                                     std::uint64_t seed, std::span<const PrimalState> extra = {}) {
  std::mt19937_64 rng(seed);
  std::vector<PrimalState> pts(extra.begin(), extra.end());
  PrimalState pt;
  std::size_t guard = 0;
  while (pts.size() < n_points + extra.size() && guard++ < 100 * n_points + 100) {
    if (sample_feasible_point(h, eps, rng, pt)) pts.push_back(pt);
  }
  if (pts.size() < 2) throw NumericError("estimate_constraint_mu: could not sample enough points");
  const PrimalState shape = pts.front();
  std::vector<Vec> flat;
  flat.reserve(pts.size());
  for (const auto& s : pts) flat.push_back(s.flatten());
  auto unpack = [&](const Vec& v) {
    PrimalState s = shape;
    s.unflatten(v);
    return s;
  };
  auto f = [&](const Vec& v) { return h.value(unpack(v)); };
  auto g = [&](const Vec& v) { return h.gradient(unpack(v)).flatten(); };
  return estimate_mu(f, g, flat);
}

}  // namespace afto
