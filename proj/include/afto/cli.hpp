#pragma once

// Command-line front end. cli_main() is the whole program; the executable is a
// thin wrapper so tests can drive every subcommand in-process.

#include "afto/afto.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>

namespace afto::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_path, "config file ([section] key = value)");
  sub->add_option("--set", c.overrides, "override, section.key=value (repeatable)");
  sub->add_option("--seed", c.seed, "seed for the problem, data split, init and delays");
}

inline AppConfig resolve(const Common& c) {
  AppConfig cfg = c.config_path.empty() ? AppConfig{} : load_config(c.config_path);
  if (c.seed) {
    cfg.quad.seed = *c.seed;
    cfg.data.seed = *c.seed;
    cfg.hpo.init_seed = *c.seed;
    cfg.run.sched.seed = *c.seed;
  }
  for (const auto& o : c.overrides) apply_override(cfg, o);
  finalize(cfg);
  return cfg;
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  os << text;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline Checkpoint load_checkpoint(const std::string& path) {
  try {
    return checkpoint_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path + ": " + e.what());
  }
}

/// Simulated time when the gap first reaches `target`, if it does.
inline std::optional<double> time_to_gap(const RunLog& log, double target) {
  for (const auto& r : log.records)
    if (r.gap_sq <= target) return r.sim_time;
  return std::nullopt;
}

inline nlohmann::json run_summary(const RunLog& log) {
  const auto& f = log.footer;
  nlohmann::json j;
  j["status"] = to_string(f.status);
  j["iterations"] = f.iterations;
  j["T_eps"] = f.T_eps ? nlohmann::json(*f.T_eps) : nlohmann::json(nullptr);
  j["final_gap_sq"] = f.final_gap_sq;
  j["sim_time"] = f.sim_time;
  j["C1_total"] = f.c1_total;
  j["C2"] = f.c2;
  j["refinements"] = f.refinements;
  if (!f.message.empty()) j["message"] = f.message;
  return j;
}

struct RunResult {
  RunLog log;
  Checkpoint checkpoint;
};

inline RunResult simulate(const AppConfig& cfg, const BuiltProblem& b,
                          std::function<void(const RefinementContext&)> observer = {}) {
  Simulation sim(*b.problem, cfg.run);
  sim.set_initial_state(b.initial);
  sim.mu_provider = make_mu_provider(cfg);
  sim.on_refinement = std::move(observer);
  RunResult r;
  r.log = sim.run();
  r.checkpoint = sim.checkpoint();
  return r;
}

inline int cmd_run(const Common& common, const std::string& jsonl, const std::string& csv,
                   const std::string& ckpt, std::ostream& out) {
  const AppConfig cfg = resolve(common);
  const BuiltProblem b = build_problem(cfg);
  const RunResult r = simulate(cfg, b);
  if (!jsonl.empty()) write_file(jsonl, to_jsonl(r.log));
  if (!csv.empty()) {
    std::ostringstream os;
    write_csv(r.log, os);
    write_file(csv, os.str());
  }
  if (!ckpt.empty()) write_file(ckpt, to_json(r.checkpoint).dump(2) + "\n");
  nlohmann::json s = run_summary(r.log);
  s["problem"] = cfg.problem;
  if (!b.note.empty()) s["note"] = b.note;
  const auto& st = r.checkpoint.state;
  if (b.oracle) {
    s["z_error"] = {(st.z[0] - b.oracle->z1).norm(), (st.z[1] - b.oracle->z2).norm(),
                    (st.z[2] - b.oracle->z3).norm()};
  }
  if (b.dataset) {
    InnerConfig mc = cfg.run.inner;
    mc.K = cfg.model_K;
    mc.eta_x = mc.eta_z = mc.eta_phi = cfg.model_eta;
    const auto& hp = static_cast<const RobustHpoProblem&>(*b.problem);
    const auto sc = evaluate_model(hp, level3_model(hp, st, mc), *b.dataset);
    s["mse_clean"] = sc.mse_clean;
    s["mse_noisy"] = sc.mse_noisy;
    s["f1_initial"] = ConsensusView(hp).total_value(Level::one, b.initial);
    s["f1_final"] = r.log.records.empty() ? s["f1_initial"] : nlohmann::json(r.log.records.back().f1);
  }
  out << s.dump(2) << "\n";
  return r.log.footer.status == RunStatus::numeric_abort ? kExitNumeric : kExitOk;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline int cmd_bench(const Common& common, double target, int seeds, const std::string& path, std::ostream& out) {
  if (seeds < 1) throw ConfigError("bench: --seeds must be >= 1");
  if (!(target > 0)) throw ConfigError("bench: --target must be positive");
  const AppConfig base = resolve(common);
  nlohmann::json runs = nlohmann::json::array();
  std::vector<double> ratios;
  bool aborted = false;
  for (int k = 0; k < seeds; ++k) {
    AppConfig cfg = base;
    const std::uint64_t seed = base.quad.seed + static_cast<std::uint64_t>(k);
    cfg.quad.seed = cfg.data.seed = cfg.hpo.init_seed = cfg.run.sched.seed = seed;
    const BuiltProblem b = build_problem(cfg);
    nlohmann::json row;
    row["seed"] = seed;
    std::optional<double> times[2];
    for (int m = 0; m < 2; ++m) {
      AppConfig c = cfg;
      c.run.sched.sync_mode = (m == 0);
      const RunResult r = simulate(c, b);
      aborted = aborted || r.log.footer.status == RunStatus::numeric_abort;
      times[m] = time_to_gap(r.log, target);
      const char* tag = m == 0 ? "sync" : "async";
      row[tag] = run_summary(r.log);
      row[std::string(tag) + "_time"] = times[m] ? nlohmann::json(*times[m]) : nlohmann::json(nullptr);
    }
    if (times[0] && times[1] && *times[0] > 0) {
      const double ratio = *times[1] / *times[0];
      row["ratio"] = ratio;
      ratios.push_back(ratio);
    } else {
      row["ratio"] = nullptr;
    }
    runs.push_back(row);
  }
  nlohmann::json s;
  s["target_gap_sq"] = target;
  s["config"] = to_json(base);
  s["runs"] = runs;
  const double med = median(ratios);
  s["median_ratio"] = ratios.empty() ? nlohmann::json(nullptr) : nlohmann::json(med);
  s["median_speedup"] = ratios.empty() ? nlohmann::json(nullptr) : nlohmann::json(1.0 - med);
  if (!path.empty()) write_file(path, s.dump(2) + "\n");
  out << s.dump(2) << "\n";
  return aborted ? kExitNumeric : kExitOk;
}

inline int cmd_gap(const Common& common, const std::string& ckpt, std::ostream& out) {
  const AppConfig cfg = resolve(common);
  const BuiltProblem b = build_problem(cfg);
  const Checkpoint c = load_checkpoint(ckpt);
  c.state.check_dims(b.problem->dims());
  DualState du = DualState::zeros(b.problem->dims());
  du.lambda = c.duals.lambda;
  du.theta = c.duals.theta;
  const GapVector g = stationarity_gap(c.state, du, c.poly2, *b.problem, cfg.run.outer);
  nlohmann::json j;
  j["t"] = c.t;
  j["gap_sq"] = g.squared_norm();
  j["primal_sq"] = g.grad.squared_norm();
  double lam = 0.0, th = 0.0;
  for (double v : g.lambda) lam += v * v;
  for (const auto& v : g.theta) th += v.squaredNorm();
  j["lambda_sq"] = lam;
  j["theta_sq"] = th;
  j["eps"] = cfg.run.outer.eps;
  j["stationary"] = g.squared_norm() <= cfg.run.outer.eps;
  out << j.dump(2) << "\n";
  return std::isfinite(g.squared_norm()) ? kExitOk : kExitNumeric;
}

inline int cmd_dump_polytope(const Common& common, const std::string& ckpt, const std::string& layer,
                             const std::string& path, std::ostream& out) {
  Polytope p1{Layer::one}, p2{Layer::two};
  int code = kExitOk;
  if (!ckpt.empty()) {
    const Checkpoint c = load_checkpoint(ckpt);
    p1 = c.poly1;
    p2 = c.poly2;
  } else {
    const AppConfig cfg = resolve(common);
    const BuiltProblem b = build_problem(cfg);
    const RunResult r = simulate(cfg, b);
    p1 = r.checkpoint.poly1;
    p2 = r.checkpoint.poly2;
    if (r.log.footer.status == RunStatus::numeric_abort) code = kExitNumeric;
  }
  nlohmann::json j;
  if (layer == "I") j = to_json(p1);
  else if (layer == "II") j = to_json(p2);
  else j = {{"P_I", to_json(p1)}, {"P_II", to_json(p2)}};
  if (!path.empty()) write_file(path, j.dump(2) + "\n");
  else out << j.dump(2) << "\n";
  return code;
}

inline int cmd_validate_cuts(const Common& common, std::size_t samples, std::ostream& out) {
  if (samples < 1) throw ConfigError("validate-cuts: --samples must be >= 1");
  const AppConfig cfg = resolve(common);
  const BuiltProblem b = build_problem(cfg);
  nlohmann::json cuts = nlohmann::json::array();
  std::size_t violations = 0, total = 0;
  bool inconclusive = false;
  std::uint64_t k = 0;
  auto observer = [&](const RefinementContext& ctx) {
    const std::pair<const Cut*, const ConstraintFunction*> items[2] = {{ctx.cut_one, ctx.h_one},
                                                                       {ctx.cut_two, ctx.h_two}};
    for (const auto& [cut, h] : items) {
      const double eps = cut->layer == Layer::one ? cfg.run.inner.eps1 : cfg.run.inner.eps2;
      const CutReport rep = validate_cut(*cut, *h, eps, samples, cfg.run.sched.seed + 7919 * ++k);
      violations += rep.violations;
      total += rep.samples;
      inconclusive = inconclusive || rep.inconclusive;
      cuts.push_back({{"id", cut->id},
                      {"layer", cut->layer == Layer::one ? "I" : "II"},
                      {"t", ctx.t},
                      {"samples", rep.samples},
                      {"violations", rep.violations},
                      {"max_violation", rep.max_violation},
                      {"inconclusive", rep.inconclusive}});
    }
  };
  const RunResult r = simulate(cfg, b, observer);
  nlohmann::json j;
  j["cuts"] = cuts;
  j["samples"] = total;
  j["violations"] = violations;
  j["inconclusive"] = inconclusive;
  j["status"] = to_string(r.log.footer.status);
  out << j.dump(2) << "\n";
  return r.log.footer.status == RunStatus::numeric_abort ? kExitNumeric : kExitOk;
}

inline int cmd_estimate_mu(const Common& common, std::size_t points, const std::string& ckpt, std::ostream& out) {
  if (points < 2) throw ConfigError("estimate-mu: --points must be >= 2");
  const AppConfig cfg = resolve(common);
  const BuiltProblem b = build_problem(cfg);
  PrimalState at = b.initial;
  Polytope p1{Layer::one};
  if (!ckpt.empty()) {
    const Checkpoint c = load_checkpoint(ckpt);
    c.state.check_dims(b.problem->dims());
    at = c.state;
    p1 = c.poly1;
  }
  const PrimalState extra[1] = {at};
  const LayerOneConstraint h1(*b.problem, cfg.run.inner);
  const LayerTwoConstraint h2(*b.problem, cfg.run.inner, p1);
  nlohmann::json j;
  j["mu_I"] = estimate_constraint_mu(h1, cfg.run.inner.eps1, points, cfg.run.sched.seed, extra);
  j["mu_II"] = estimate_constraint_mu(h2, cfg.run.inner.eps2, points, cfg.run.sched.seed + 1, extra);
  j["points"] = points;
  j["configured_mu"] = b.problem->weak_convexity_mu();
  out << j.dump(2) << "\n";
  return kExitOk;
}

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Asynchronous federated trilevel optimization: solver, simulator and benchmarks", "afto_cli"};
  app.require_subcommand(1);

  Common common;
  std::string jsonl = "run.jsonl", csv = "run.csv", ckpt_out, ckpt_in, layer = "both", out_path;
  double target = 1e-3;
  int seeds = 1;
  std::size_t samples = 1000, points = 200;

  auto* run = app.add_subcommand("run", "solve the configured problem and write the run log");
  add_common(run, common);
  run->add_option("--jsonl", jsonl, "run log (JSON lines)");
  run->add_option("--csv", csv, "per-iteration CSV");
  run->add_option("--checkpoint", ckpt_out, "write the final state, duals and polytopes here");

  auto* bench = app.add_subcommand("bench", "paired sync vs async comparison");
  add_common(bench, common);
  bench->add_option("--target", target, "gap level whose first crossing is timed");
  bench->add_option("--seeds", seeds, "number of consecutive seeds");
  bench->add_option("-o,--out", out_path, "summary JSON");

  auto* gap = app.add_subcommand("gap", "stationarity gap of a checkpoint");
  add_common(gap, common);
  gap->add_option("--checkpoint", ckpt_in, "checkpoint JSON")->required();

  auto* dump = app.add_subcommand("dump-polytope", "print the cut polytopes as JSON");
  add_common(dump, common);
  dump->add_option("--checkpoint", ckpt_in, "read polytopes from a checkpoint instead of running");
  dump->add_option("--layer", layer, "I, II or both")->check(CLI::IsMember({"I", "II", "both"}));
  dump->add_option("-o,--out", out_path, "output file (default: stdout)");

  auto* validate = app.add_subcommand("validate-cuts", "sample-check every cut generated during a run");
  add_common(validate, common);
  validate->add_option("--samples", samples, "feasible samples per cut");

  auto* mu = app.add_subcommand("estimate-mu", "empirical weak-convexity constants of h_I and h_II");
  add_common(mu, common);
  mu->add_option("--points", points, "sample points");
  mu->add_option("--checkpoint", ckpt_in, "estimate around a checkpoint state");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    if (*run) return cmd_run(common, jsonl, csv, ckpt_out, out);
    if (*bench) return cmd_bench(common, target, seeds, out_path, out);
    if (*gap) return cmd_gap(common, ckpt_in, out);
    if (*dump) return cmd_dump_polytope(common, ckpt_in, layer, out_path, out);
    if (*validate) return cmd_validate_cuts(common, samples, out);
    if (*mu) return cmd_estimate_mu(common, points, ckpt_in, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  err << app.help();
  return kExitConfig;
}

}  // namespace afto::cli
