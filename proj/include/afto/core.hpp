#pragma once

// Domain types for distributed trilevel problems: dimensions, the objective
// interface, primal/dual state containers, the consensus view, and the small
// numeric toolbox (ball projection, central differences, weak-convexity probe).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace afto {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or malformed input.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or an infeasible numeric request.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Objective level f_1, f_2, f_3.
enum class Level : int { one = 1, two = 2, three = 3 };
/// Variable block x_1, x_2, x_3 (and the matching consensus block z_i).
enum class Block : int { one = 1, two = 2, three = 3 };

inline constexpr std::array<Block, 3> kBlocks{Block::one, Block::two, Block::three};
inline constexpr std::array<Level, 3> kLevels{Level::one, Level::two, Level::three};

constexpr std::size_t index(Block b) { return static_cast<std::size_t>(b) - 1; }
constexpr std::size_t index(Level l) { return static_cast<std::size_t>(l) - 1; }

struct Dims {
  std::size_t d1 = 1;
  std::size_t d2 = 1;
  std::size_t d3 = 1;
  std::size_t workers = 1;

  std::size_t size(Block b) const {
    switch (b) {
      case Block::one: return d1;
      case Block::two: return d2;
      case Block::three: return d3;
    }
    return 0;
  }
  std::size_t total() const { return d1 + d2 + d3; }

  void validate() const {
    if (d1 < 1 || d2 < 1 || d3 < 1) throw ConfigError("dimensions d1, d2, d3 must be >= 1");
    if (workers < 1) throw ConfigError("worker count N must be >= 1");
  }

  bool operator==(const Dims&) const = default;
};

/// Arguments of a single objective evaluation f_{i,j}(x1, x2, x3).
using Blocks = std::array<Vec, 3>;

inline double finite_or_throw(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericError(what + ": non-finite value");
  return v;
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

/// Central-difference gradient (f(v + h e_k) - f(v - h e_k)) / 2h.
inline Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& v, double h) {
  if (!(h > 0.0)) throw NumericError("finite_diff_grad: step must be positive");
  Vec g(v.size());
  Vec probe = v;
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    const double orig = probe[k];
    probe[k] = orig + h;
    const double fp = f(probe);
    probe[k] = orig - h;
    const double fm = f(probe);
    probe[k] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " +
                         std::to_string(k));
    }
    g[k] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Step used whenever a derivative falls back to central differences.
inline double default_fd_step(const Vec& v) {
  const double inf = v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
  return 1e-5 * (1.0 + inf);
}

/// Projection onto {v : ||v||^2 <= alpha}.
inline Vec project_ball_sq(const Vec& v, double alpha) {
  if (alpha < 0.0) throw ConfigError("project_ball_sq: alpha must be nonnegative");
  const double sq = v.squaredNorm();
  if (sq <= alpha) return v;
  if (alpha == 0.0) return Vec::Zero(v.size());
  return v * (std::sqrt(alpha) / std::sqrt(sq));
}

/// Per-worker objectives of a distributed trilevel problem.
///
/// Level 3 is evaluated at (z1, z2', x3_j'), level 2 at (z1, x2_j', x3_j) and
/// level 1 at the worker-local blocks (x1_j, x2_j, x3_j); the interface itself
/// is agnostic and simply takes three block vectors.
class TrilevelProblem {
 public:
  TrilevelProblem(Dims dims, std::array<double, 3> alphas, double mu)
      : dims_(dims), alphas_(alphas), mu_(mu) {
    dims_.validate();
    for (double a : alphas_) {
      if (!(a > 0.0)) throw ConfigError("bounds alpha_i must be positive");
    }
    if (mu_ < 0.0) throw ConfigError("weak convexity mu must be nonnegative");
  }
  virtual ~TrilevelProblem() = default;

  const Dims& dims() const { return dims_; }
  const std::array<double, 3>& alphas() const { return alphas_; }
  double alpha(Block b) const { return alphas_[index(b)]; }
  double weak_convexity_mu() const { return mu_; }
  void set_alphas(std::array<double, 3> a) { alphas_ = a; }
  void set_weak_convexity_mu(double mu) { mu_ = mu; }

  virtual double value(Level level, std::size_t worker, const Blocks& x) const = 0;

  /// Gradient with respect to one block. Falls back to central differences.
  virtual Vec gradient(Level level, std::size_t worker, Block block, const Blocks& x) const {
    Blocks probe = x;
    auto f = [&](const Vec& v) {
      probe[index(block)] = v;
      return value(level, worker, probe);
    };
    const Vec& at = x[index(block)];
    return finite_diff_grad(f, at, default_fd_step(at));
  }

  virtual bool has_second_derivatives() const { return false; }

  /// (d/d out)(grad_in f . v): the mixed second-derivative block applied to v.
  virtual Vec hessian_vector(Level, std::size_t, Block, Block, const Blocks&, const Vec&) const {
    throw NumericError("problem does not expose second derivatives");
  }

  virtual std::string name() const { return "problem"; }

 protected:
  /// Central difference of grad_out along v in block `in`. Problems with exact
  /// gradients but no closed-form second derivatives can forward to this.
  Vec gradient_difference_hvp(Level level, std::size_t worker, Block out, Block in, const Blocks& x,
                              const Vec& v) const {
    const double vn = v.lpNorm<Eigen::Infinity>();
    if (vn == 0.0) return Vec::Zero(x[index(out)].size());
    const double h = default_fd_step(x[index(in)]) / vn;
    Blocks probe = x;
    probe[index(in)] = x[index(in)] + h * v;
    const Vec gp = gradient(level, worker, out, probe);
    probe[index(in)] = x[index(in)] - h * v;
    const Vec gm = gradient(level, worker, out, probe);
    return (gp - gm) / (2.0 * h);
  }

  Dims dims_;
  std::array<double, 3> alphas_;
  double mu_;
};

/// Local copies x[i][j] for every worker plus master-held consensus blocks z[i].
struct PrimalState {
  std::array<std::vector<Vec>, 3> x;
  std::array<Vec, 3> z;

  static PrimalState zeros(const Dims& d) {
    PrimalState s;
    for (Block b : kBlocks) {
      s.x[index(b)].assign(d.workers, Vec::Zero(static_cast<Eigen::Index>(d.size(b))));
      s.z[index(b)] = Vec::Zero(static_cast<Eigen::Index>(d.size(b)));
    }
    return s;
  }

  std::size_t workers() const { return x[0].size(); }
  Vec& local(Block b, std::size_t j) { return x[index(b)][j]; }
  const Vec& local(Block b, std::size_t j) const { return x[index(b)][j]; }
  Vec& consensus(Block b) { return z[index(b)]; }
  const Vec& consensus(Block b) const { return z[index(b)]; }

  bool finite() const {
    for (const auto& blk : x)
      for (const auto& v : blk)
        if (!all_finite(v)) return false;
    for (const auto& v : z)
      if (!all_finite(v)) return false;
    return true;
  }

  void check_dims(const Dims& d) const {
    for (Block b : kBlocks) {
      const auto n = static_cast<Eigen::Index>(d.size(b));
      if (x[index(b)].size() != d.workers) throw DimensionError("primal state: worker count mismatch");
      for (const auto& v : x[index(b)])
        if (v.size() != n) throw DimensionError("primal state: local block size mismatch");
      if (z[index(b)].size() != n) throw DimensionError("primal state: consensus block size mismatch");
    }
  }

  /// Flattened [x1_1..x1_N, x2_1.., x3_1.., z1, z2, z3].
  Vec flatten() const {
    Eigen::Index n = 0;
    for (const auto& blk : x)
      for (const auto& v : blk) n += v.size();
    for (const auto& v : z) n += v.size();
    Vec out(n);
    Eigen::Index k = 0;
    for (const auto& blk : x)
      for (const auto& v : blk) {
        out.segment(k, v.size()) = v;
        k += v.size();
      }
    for (const auto& v : z) {
      out.segment(k, v.size()) = v;
      k += v.size();
    }
    return out;
  }

  void unflatten(const Vec& flat) {
    Eigen::Index k = 0;
    for (auto& blk : x)
      for (auto& v : blk) {
        v = flat.segment(k, v.size());
        k += v.size();
      }
    for (auto& v : z) {
      v = flat.segment(k, v.size());
      k += v.size();
    }
    if (k != flat.size()) throw DimensionError("unflatten: size mismatch");
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& blk : x)
      for (const auto& v : blk) s += v.squaredNorm();
    for (const auto& v : z) s += v.squaredNorm();
    return s;
  }

  void project_bounds(const std::array<double, 3>& alphas) {
    for (Block b : kBlocks) {
      for (auto& v : x[index(b)]) v = project_ball_sq(v, alphas[index(b)]);
      z[index(b)] = project_ball_sq(z[index(b)], alphas[index(b)]);
    }
  }
};

/// Per-unroll inner multipliers kept with the outer duals for warm starts and checkpoints.
struct InnerDuals {
  std::vector<Vec> phi2;
  std::vector<Vec> phi3;
  std::vector<double> gamma;
  std::vector<double> slack;
};

struct DualState {
  std::vector<double> lambda;  // one per layer-II cut, in [0, sqrt(alpha4)]
  std::vector<Vec> theta;      // one per worker, ||.||_inf <= sqrt(alpha5)/d1
  InnerDuals inner;

  static DualState zeros(const Dims& d) {
    DualState s;
    s.theta.assign(d.workers, Vec::Zero(static_cast<Eigen::Index>(d.d1)));
    return s;
  }

  bool finite() const {
    for (double l : lambda)
      if (!std::isfinite(l)) return false;
    for (const auto& t : theta)
      if (!all_finite(t)) return false;
    return true;
  }
};

/// Equality x_{i,j} = z_i tying a worker-local copy to its consensus block.
struct EqualityDescriptor {
  Block block;
  std::size_t worker;
};

/// Consensus reformulation of a distributed trilevel problem. Pure bookkeeping:
/// it lists the equality constraints and routes evaluations to the per-worker
/// objectives with the argument pattern of each level.
class ConsensusView {
 public:
  explicit ConsensusView(const TrilevelProblem& p) : problem_(&p) {
    const auto& d = p.dims();
    for (Block b : kBlocks)
      for (std::size_t j = 0; j < d.workers; ++j) constraints_.push_back({b, j});
  }

  const std::vector<EqualityDescriptor>& constraints() const { return constraints_; }
  std::size_t count(Block b) const {
    std::size_t n = 0;
    for (const auto& c : constraints_) n += (c.block == b);
    return n;
  }
  const TrilevelProblem& problem() const { return *problem_; }

  /// Arguments of f_{level,j} in the consensus form.
  static Blocks arguments(Level level, std::size_t j, const PrimalState& s) {
    switch (level) {
      case Level::one: return {s.x[0][j], s.x[1][j], s.x[2][j]};
      case Level::two: return {s.z[0], s.x[1][j], s.x[2][j]};
      case Level::three: return {s.z[0], s.z[1], s.x[2][j]};
    }
    return {};
  }

  double local_value(Level level, std::size_t j, const PrimalState& s) const {
    return problem_->value(level, j, arguments(level, j, s));
  }

  double total_value(Level level, const PrimalState& s) const {
    double acc = 0.0;
    for (std::size_t j = 0; j < problem_->dims().workers; ++j) acc += local_value(level, j, s);
    return acc;
  }

 private:
  const TrilevelProblem* problem_;
  std::vector<EqualityDescriptor> constraints_;
};

inline ConsensusView reformulate_consensus(const TrilevelProblem& problem) {
  return ConsensusView(problem);
}

/// Smallest mu >= 0 for which f(x) >= f(x') + g(x')^T (x - x') - mu/2 ||x - x'||^2
/// holds on the sampled ordered pairs. pair_samples == 0 uses every ordered pair.
inline double estimate_mu(const std::function<double(const Vec&)>& f,
                          const std::function<Vec(const Vec&)>& grad,
                          std::span<const Vec> points, std::size_t pair_samples = 0,
                          std::uint64_t seed = 0) {
  if (points.size() < 2) throw NumericError("estimate_mu: need at least two sample points");
  std::vector<double> fv(points.size());
  std::vector<Vec> gv(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    fv[i] = finite_or_throw(f(points[i]), "estimate_mu");
    gv[i] = grad ? grad(points[i]) : finite_diff_grad(f, points[i], default_fd_step(points[i]));
  }
  double mu = 0.0;
  std::size_t used = 0;
  auto consider = [&](std::size_t a, std::size_t b) {  // x = points[a], x' = points[b]
    const Vec diff = points[a] - points[b];
    const double sq = diff.squaredNorm();
    if (sq == 0.0) return;
    ++used;
    const double gap = fv[b] + gv[b].dot(diff) - fv[a];
    mu = std::max(mu, 2.0 * gap / sq);
  };
  if (pair_samples == 0) {
    for (std::size_t a = 0; a < points.size(); ++a)
      for (std::size_t b = 0; b < points.size(); ++b)
        if (a != b) consider(a, b);
  } else {
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < pair_samples; ++k) {
      const std::size_t a = rng() % points.size();
      const std::size_t b = rng() % points.size();
      if (a != b) consider(a, b);
    }
  }
  if (used == 0) throw NumericError("estimate_mu: every sampled pair was coincident");
  return mu;
}

}  // namespace afto
