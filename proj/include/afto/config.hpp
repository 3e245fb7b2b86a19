#pragma once

// Declarative run configuration: an INI/TOML-style file of [section] key = value
// lines, plus "section.key=value" overrides. Unknown sections or keys are errors.

#include "afto/harness.hpp"
#include "afto/problems/dataset.hpp"
#include "afto/problems/quadratic.hpp"
#include "afto/problems/robust_hpo.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <fstream>
#include <map>

namespace afto {

enum class MuMode { fixed, estimate };

struct DatasetConfig {
  std::string path;  // empty: synthetic linear data
  SyntheticLinearSpec synthetic;
  SplitRatios ratios;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
};

struct AppConfig {
  std::string problem = "quadratic";  // quadratic | robust_hpo
  QuadraticSpec quad;
  DatasetConfig data;
  RobustHpoSpec hpo;
  RunConfig run;
  MuMode mu_mode = MuMode::fixed;
  std::size_t mu_samples = 200;
  // Rounds and step of the level-3 solve that produces the reported model.
  int model_K = 500;
  double model_eta = 0.1;

  AppConfig() { run.sched.S = 0; }  // 0: all workers
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string unquote(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
    return s.substr(1, s.size() - 2);
  return s;
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  if (!parse_number(unquote(v), out)) throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline long long to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d) || std::abs(d) > 9e15) throw ConfigError("config: " + key + " expects an integer");
  return static_cast<long long>(d);
}

inline std::size_t to_count(const std::string& key, const std::string& v) {
  const long long n = to_int(key, v);
  if (n < 0) throw ConfigError("config: " + key + " must be nonnegative");
  return static_cast<std::size_t>(n);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  const std::string s = unquote(v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

/// "[a, b, c]" or a bare scalar.
inline std::vector<std::string> to_items(const std::string& v) {
  std::string s = trim(v);
  if (!s.empty() && s.front() == '[') {
    if (s.back() != ']') throw ConfigError("config: unterminated list '" + v + "'");
    s = s.substr(1, s.size() - 2);
    std::vector<std::string> out;
    for (auto& item : split_csv_line(s))
      if (!trim(item).empty()) out.push_back(trim(item));
    return out;
  }
  return {s};
}

inline std::array<double, 3> to_triple(const std::string& key, const std::string& v) {
  const auto items = to_items(v);
  if (items.size() == 1) {
    const double d = to_double(key, items[0]);
    return {d, d, d};
  }
  if (items.size() != 3) throw ConfigError("config: " + key + " expects one value or a list of three");
  return {to_double(key, items[0]), to_double(key, items[1]), to_double(key, items[2])};
}

/// Drops '#' and ';' comments that are outside quotes.
inline std::string strip_comments(const std::string& text) {
  std::string out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    char quote = 0;
    std::size_t cut = line.size();
    for (std::size_t k = 0; k < line.size(); ++k) {
      const char ch = line[k];
      if (quote) {
        if (ch == quote) quote = 0;
      } else if (ch == '"' || ch == '\'') {
        quote = ch;
      } else if (ch == '#' || ch == ';') {
        cut = k;
        break;
      }
    }
    out += line.substr(0, cut);
    out += '\n';
  }
  return out;
}

}  // namespace detail

/// Setters for every recognized "section.key".
class ConfigKeys {
 public:
  explicit ConfigKeys(AppConfig& c) {
    using namespace detail;
    auto& q = c.quad;
    auto& in = c.run.inner;
    auto& out = c.run.outer;
    auto& sc = c.run.sched;
    auto& d = c.data;

    add("problem.kind", [&c](const std::string& k, const std::string& v) {
      c.problem = unquote(v);
      if (c.problem != "quadratic" && c.problem != "robust_hpo")
        throw ConfigError("config: " + k + " must be quadratic or robust_hpo");
    });
    add("problem.workers", [&](auto& k, auto& v) { q.dims.workers = to_count(k, v); });
    add("problem.alpha", [&](auto& k, auto& v) {
      q.alphas = to_triple(k, v);
      c.hpo.alphas = q.alphas;
    });
    add("problem.mu", [&](auto& k, auto& v) {
      q.mu = to_double(k, v);
      c.hpo.mu = q.mu;
    });

    add("quadratic.d1", [&](auto& k, auto& v) { q.dims.d1 = to_count(k, v); });
    add("quadratic.d2", [&](auto& k, auto& v) { q.dims.d2 = to_count(k, v); });
    add("quadratic.d3", [&](auto& k, auto& v) { q.dims.d3 = to_count(k, v); });
    add("quadratic.seed", [&](auto& k, auto& v) { q.seed = to_count(k, v); });
    add("quadratic.conditioning", [&](auto& k, auto& v) { q.conditioning = to_double(k, v); });
    add("quadratic.coupling", [&](auto& k, auto& v) { q.coupling = to_double(k, v); });
    add("quadratic.cross_scale", [&](auto& k, auto& v) { q.cross_scale = to_double(k, v); });
    add("quadratic.target_scale", [&](auto& k, auto& v) { q.target_scale = to_double(k, v); });
    add("quadratic.level1_scale", [&](auto& k, auto& v) { q.level1_scale = to_double(k, v); });
    add("quadratic.consistent_targets", [&](auto& k, auto& v) { q.consistent_targets = to_bool(k, v); });
    add("quadratic.identity", [&](auto& k, auto& v) { q.identity = to_bool(k, v); });

    add("dataset.path", [&](auto&, auto& v) { d.path = unquote(v); });
    add("dataset.seed", [&](auto& k, auto& v) { d.seed = to_count(k, v); });
    add("dataset.train", [&](auto& k, auto& v) { d.ratios.train = to_double(k, v); });
    add("dataset.val", [&](auto& k, auto& v) { d.ratios.val = to_double(k, v); });
    add("dataset.test", [&](auto& k, auto& v) { d.ratios.test = to_double(k, v); });
    add("dataset.noise_sigma", [&](auto& k, auto& v) { d.noise_sigma = to_double(k, v); });
    add("dataset.rows", [&](auto& k, auto& v) { d.synthetic.rows = to_count(k, v); });
    add("dataset.features", [&](auto& k, auto& v) { d.synthetic.features = static_cast<Eigen::Index>(to_count(k, v)); });
    add("dataset.latent", [&](auto& k, auto& v) { d.synthetic.latent = static_cast<Eigen::Index>(to_count(k, v)); });
    add("dataset.feature_noise", [&](auto& k, auto& v) { d.synthetic.feature_noise = to_double(k, v); });
    add("dataset.label_noise", [&](auto& k, auto& v) { d.synthetic.label_noise = to_double(k, v); });

    add("hpo.hidden", [&](auto& k, auto& v) {
      c.hpo.mlp_layers.clear();
      for (const auto& item : to_items(v)) c.hpo.mlp_layers.push_back(static_cast<Eigen::Index>(to_count(k, item)));
    });
    add("hpo.c", [&](auto& k, auto& v) { c.hpo.c = to_double(k, v); });
    add("hpo.smoothing", [&](auto& k, auto& v) { c.hpo.smoothing = to_double(k, v); });
    add("hpo.init_scale", [&](auto& k, auto& v) { c.hpo.init_scale = to_double(k, v); });
    add("hpo.phi_init", [&](auto& k, auto& v) { c.hpo.phi_init = to_double(k, v); });
    add("hpo.init_seed", [&](auto& k, auto& v) { c.hpo.init_seed = to_count(k, v); });
    add("hpo.model_K", [&](auto& k, auto& v) { c.model_K = static_cast<int>(to_int(k, v)); });
    add("hpo.model_eta", [&](auto& k, auto& v) { c.model_eta = to_double(k, v); });

    add("inner.K", [&](auto& k, auto& v) { in.K = static_cast<int>(to_int(k, v)); });
    add("inner.eta", [&](auto& k, auto& v) { in.eta_x = in.eta_z = in.eta_phi = to_double(k, v); });
    add("inner.eta_x", [&](auto& k, auto& v) { in.eta_x = to_double(k, v); });
    add("inner.eta_z", [&](auto& k, auto& v) { in.eta_z = to_double(k, v); });
    add("inner.eta_phi", [&](auto& k, auto& v) { in.eta_phi = to_double(k, v); });
    add("inner.kappa2", [&](auto& k, auto& v) { in.kappa2 = to_double(k, v); });
    add("inner.kappa3", [&](auto& k, auto& v) { in.kappa3 = to_double(k, v); });
    add("inner.rho2", [&](auto& k, auto& v) { in.rho2 = to_double(k, v); });
    add("inner.eps1", [&](auto& k, auto& v) { in.eps1 = to_double(k, v); });
    add("inner.eps2", [&](auto& k, auto& v) { in.eps2 = to_double(k, v); });
    add("inner.warm_start", [&](auto& k, auto& v) { in.warm_start = to_bool(k, v); });
    add("inner.grad_mode", [&](auto& k, auto& v) {
      const std::string s = unquote(v);
      if (s == "auto") in.grad_mode = GradMode::automatic;
      else if (s == "finite_diff") in.grad_mode = GradMode::finite_diff;
      else if (s == "analytic_unroll") in.grad_mode = GradMode::analytic_unroll;
      else throw ConfigError("config: " + k + " must be auto, finite_diff or analytic_unroll");
    });

    add("outer.eta_x", [&](auto& k, auto& v) { out.eta_x = to_triple(k, v); });
    add("outer.eta_z", [&](auto& k, auto& v) { out.eta_z = to_triple(k, v); });
    add("outer.eta_lambda", [&](auto& k, auto& v) { out.eta_lambda = to_double(k, v); });
    add("outer.eta_theta", [&](auto& k, auto& v) { out.eta_theta = to_double(k, v); });
    add("outer.alpha4", [&](auto& k, auto& v) { out.alpha4 = to_double(k, v); });
    add("outer.alpha5", [&](auto& k, auto& v) { out.alpha5 = to_double(k, v); });
    add("outer.c1_floor", [&](auto& k, auto& v) { out.c1_floor = to_double(k, v); });
    add("outer.c2_floor", [&](auto& k, auto& v) { out.c2_floor = to_double(k, v); });
    add("outer.eps", [&](auto& k, auto& v) { out.eps = to_double(k, v); });
    add("outer.T_pre", [&](auto& k, auto& v) { out.T_pre = static_cast<int>(to_int(k, v)); });
    add("outer.T1", [&](auto& k, auto& v) { out.T1 = static_cast<int>(to_int(k, v)); });
    add("outer.max_iters", [&](auto& k, auto& v) { out.max_iters = static_cast<int>(to_int(k, v)); });
    add("outer.project_bounds", [&](auto& k, auto& v) { out.project_bounds = to_bool(k, v); });
    add("outer.converge_after_T1", [&](auto& k, auto& v) { out.converge_after_T1 = to_bool(k, v); });

    add("schedule.S", [&](auto& k, auto& v) { sc.S = to_count(k, v); });
    add("schedule.tau", [&](auto& k, auto& v) { sc.tau = static_cast<int>(to_int(k, v)); });
    add("schedule.seed", [&](auto& k, auto& v) { sc.seed = to_count(k, v); });
    add("schedule.sync_mode", [&](auto& k, auto& v) { sc.sync_mode = to_bool(k, v); });
    add("schedule.parallel_workers", [&](auto& k, auto& v) { sc.parallel_workers = to_bool(k, v); });
    add("schedule.refinement_unit_latency", [&](auto& k, auto& v) { sc.refinement_unit_latency = to_double(k, v); });
    add("schedule.delay", [&](auto& k, auto& v) {
      const std::string s = unquote(v);
      if (s == "constant") sc.delay.kind = DelayModel::Kind::constant;
      else if (s == "uniform") sc.delay.kind = DelayModel::Kind::uniform;
      else throw ConfigError("config: " + k + " must be constant or uniform");
    });
    add("schedule.compute", [&](auto& k, auto& v) { sc.delay.compute = to_double(k, v); });
    add("schedule.compute_lo", [&](auto& k, auto& v) { sc.delay.lo = to_double(k, v); });
    add("schedule.compute_hi", [&](auto& k, auto& v) { sc.delay.hi = to_double(k, v); });
    add("schedule.link", [&](auto& k, auto& v) { sc.delay.link = to_double(k, v); });
    add("schedule.stragglers", [&](auto& k, auto& v) {
      sc.delay.stragglers.clear();
      for (const auto& item : to_items(v)) sc.delay.stragglers.push_back(to_count(k, item));
    });
    add("schedule.straggler_factor", [&](auto& k, auto& v) { sc.delay.factor = to_double(k, v); });

    add("cuts.mu1", [&](auto& k, auto& v) { c.run.mu1 = to_double(k, v); });
    add("cuts.mu2", [&](auto& k, auto& v) { c.run.mu2 = to_double(k, v); });
    add("cuts.mu_mode", [&](auto& k, auto& v) {
      const std::string s = unquote(v);
      if (s == "fixed") c.mu_mode = MuMode::fixed;
      else if (s == "estimate") c.mu_mode = MuMode::estimate;
      else throw ConfigError("config: " + k + " must be fixed or estimate");
    });
    add("cuts.mu_samples", [&](auto& k, auto& v) { c.mu_samples = to_count(k, v); });
    add("cuts.prune_tol", [&](auto& k, auto& v) { c.run.prune_tol = to_double(k, v); });
    add("cuts.freeze_level2", [&](auto& k, auto& v) { c.run.freeze_level2 = to_bool(k, v); });
  }

  void set(const std::string& key, const std::string& value) const {
    const auto it = setters_.find(key);
    if (it == setters_.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second(key, value);
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : setters_) out.push_back(k);
    return out;
  }

 private:
  using Setter = std::function<void(const std::string&, const std::string&)>;
  void add(const std::string& key, Setter s) { setters_.emplace(key, std::move(s)); }
  std::map<std::string, Setter> setters_;
};

/// Applies "section.key=value".
inline void apply_override(AppConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("config: override '" + assignment + "' is not key=value");
  ConfigKeys(c).set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void apply_text(AppConfig& c, const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream is(detail::strip_comments(text));
  try {
    boost::property_tree::ini_parser::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  const ConfigKeys keys(c);
  for (const auto& [section, body] : pt) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' must live in a [section]");
    for (const auto& [key, val] : body) keys.set(section + "." + key, val.data());
  }
}

/// Loads a config file. Derived fields (worker counts) are synced by finalize().
inline AppConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  AppConfig c;
  apply_text(c, ss.str());
  return c;
}

inline void finalize(AppConfig& c) {
  c.run.sched.N = c.quad.dims.workers;
  if (c.run.sched.S == 0) c.run.sched.S = c.run.sched.N;
  c.hpo.validate();
  c.run.inner.validate();
  c.run.outer.validate();
  c.run.sched.validate();
  if (c.mu_samples < 2) throw ConfigError("config: cuts.mu_samples must be >= 2");
  if (c.model_K < 1 || c.model_eta < 0) throw ConfigError("config: hpo.model_K must be >= 1 and model_eta >= 0");
}

/// A problem built from a config, with whatever reference data it comes with.
struct BuiltProblem {
  std::unique_ptr<TrilevelProblem> problem;
  std::optional<QuadraticOracle> oracle;
  std::optional<RegressionDataset> dataset;
  PrimalState initial;
  std::string note;  // e.g. regeneration message
};

inline RegressionDataset build_dataset(const AppConfig& c) {
  const std::size_t N = c.quad.dims.workers;
  if (!c.data.path.empty()) return load_dataset(c.data.path, c.data.ratios, c.data.seed, N, c.data.noise_sigma);
  SyntheticLinearSpec s = c.data.synthetic;
  s.seed = c.data.seed;
  return make_dataset(make_synthetic_linear(s), c.data.ratios, c.data.seed, N, c.data.noise_sigma);
}

inline BuiltProblem build_problem(const AppConfig& c) {
  BuiltProblem b;
  if (c.problem == "quadratic") {
    auto q = build_quadratic_problem(c.quad);
    if (q.regenerations > 0)
      b.note = "quadratic: regenerated " + std::to_string(q.regenerations) + " time(s), seed " +
               std::to_string(q.seed_used);
    b.oracle = q.oracle;
    b.initial = PrimalState::zeros(q.problem->dims());
    b.problem = std::move(q.problem);
  } else {
    b.dataset = build_dataset(c);
    auto p = std::make_unique<RobustHpoProblem>(*b.dataset, c.hpo);
    b.initial = p->initial_state();
    b.problem = std::move(p);
  }
  return b;
}

/// Weak-convexity estimate at refinement time for MuMode::estimate.
inline Simulation::MuProvider make_mu_provider(const AppConfig& c) {
  if (c.mu_mode == MuMode::fixed) return {};
  const std::size_t n = c.mu_samples;
  const std::uint64_t seed = c.run.sched.seed;
  const double eps1 = c.run.inner.eps1, eps2 = c.run.inner.eps2;
  return [n, seed, eps1, eps2](Layer layer, const ConstraintFunction& h, const PrimalState& pt) {
    const PrimalState extra[1] = {pt};
    return estimate_constraint_mu(h, layer == Layer::one ? eps1 : eps2, n, seed, extra);
  };
}

inline nlohmann::json to_json(const AppConfig& c) {
  nlohmann::json j;
  j["problem"] = c.problem;
  j["dims"] = {c.quad.dims.d1, c.quad.dims.d2, c.quad.dims.d3, c.quad.dims.workers};
  j["seed"] = c.quad.seed;
  j["inner"] = {{"K", c.run.inner.K},       {"eta_x", c.run.inner.eta_x},   {"eta_z", c.run.inner.eta_z},
                {"eta_phi", c.run.inner.eta_phi}, {"eps1", c.run.inner.eps1}, {"eps2", c.run.inner.eps2},
                {"grad_mode", to_string(c.run.inner.grad_mode)}, {"warm_start", c.run.inner.warm_start}};
  j["outer"] = {{"eta_x", c.run.outer.eta_x},   {"eta_z", c.run.outer.eta_z}, {"eta_lambda", c.run.outer.eta_lambda},
                {"eta_theta", c.run.outer.eta_theta}, {"eps", c.run.outer.eps},   {"T_pre", c.run.outer.T_pre},
                {"T1", c.run.outer.T1},         {"max_iters", c.run.outer.max_iters}};
  j["schedule"] = {{"N", c.run.sched.N},         {"S", c.run.sched.S},
                   {"tau", c.run.sched.tau},     {"sync_mode", c.run.sched.sync_mode},
                   {"stragglers", c.run.sched.delay.stragglers}, {"straggler_factor", c.run.sched.delay.factor}};
  return j;
}

}  // namespace afto
