#pragma once

// Shared fixtures for the unit and acceptance suites.

#include "afto/afto.hpp"

#include <random>
#include <string>

namespace afto::testing {

inline std::string config_path(const std::string& name) { return std::string(AFTO_SOURCE_DIR) + "/configs/" + name; }

inline QuadraticSpec small_spec(std::uint64_t seed = 1, Dims d = {2, 2, 2, 2}) {
  QuadraticSpec s;
  s.dims = d;
  s.seed = seed;
  s.conditioning = 4.0;
  s.alphas = {25.0, 25.0, 25.0};
  return s;
}

inline Vec gaussian(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vec v(n);
  for (Eigen::Index k = 0; k < n; ++k) v[k] = g(rng);
  return v;
}

inline PrimalState random_state(const Dims& d, std::mt19937_64& rng, double scale = 1.0) {
  PrimalState s = PrimalState::zeros(d);
  for (std::size_t i = 0; i < 3; ++i) {
    s.z[i] = gaussian(rng, s.z[i].size(), scale);
    for (auto& v : s.x[i]) v = gaussian(rng, v.size(), scale);
  }
  return s;
}

inline DualState random_duals(const Dims& d, std::size_t cuts, std::mt19937_64& rng) {
  DualState du = DualState::zeros(d);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t l = 0; l < cuts; ++l) du.lambda.push_back(u(rng));
  for (auto& th : du.theta) th = gaussian(rng, th.size(), 0.5);
  return du;
}

/// Layer-II cut with random dense coefficients.
inline Cut random_cut(Layer layer, const Dims& d, std::mt19937_64& rng, std::uint64_t id) {
  Cut c;
  c.layer = layer;
  c.id = id;
  for (Block b : kBlocks) {
    const auto n = static_cast<Eigen::Index>(d.size(b));
    c.a[index(b)] = gaussian(rng, n);
    if (Cut::uses_local(layer, b))
      for (std::size_t j = 0; j < d.workers; ++j) c.b[index(b)].push_back(gaussian(rng, n));
  }
  c.c = gaussian(rng, 1)[0];
  return c;
}

/// max |a - b| / max(1, |b|) elementwise; a relative error that stays meaningful near zero.
inline double rel_err(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().cwiseQuotient(b.cwiseAbs().cwiseMax(1.0)).maxCoeff();
}

/// Central differences of f over the flattened PrimalState.
inline Vec fd_over_state(const std::function<double(const PrimalState&)>& f, const PrimalState& at, double h = 1e-6) {
  const Vec flat = at.flatten();
  PrimalState probe = at;
  auto g = [&](const Vec& v) {
    probe.unflatten(v);
    return f(probe);
  };
  return finite_diff_grad(g, flat, h);
}

inline RunConfig fast_run_config(const Dims& d) {
  RunConfig rc;
  rc.inner.K = 20;
  rc.inner.eta_x = rc.inner.eta_z = rc.inner.eta_phi = 0.1;
  rc.outer.eta_x = {0.1, 0.1, 0.1};
  rc.outer.eta_z = {0.1, 0.1, 0.1};
  rc.outer.eta_lambda = 0.5;
  rc.outer.eta_theta = 0.5;
  rc.outer.T_pre = 5;
  rc.outer.T1 = 20;
  rc.outer.max_iters = 60;
  rc.outer.eps = 1e-12;
  rc.sched.N = d.workers;
  rc.sched.S = d.workers;
  return rc;
}

}  // namespace afto::testing
