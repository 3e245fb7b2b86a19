#pragma once

// Discrete-event parameter-server simulation: S-of-N activation with bounded
// staleness, periodic two-layer cut refinement, communication counters, and the
// JSONL / CSV run log.

#include "afto/cuts.hpp"
#include "afto/inner.hpp"
#include "afto/outer.hpp"
#include "afto/polytope.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <future>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

namespace afto {

struct DelayModel {
  enum class Kind { constant, uniform };
  Kind kind = Kind::constant;
  double compute = 1.0;  // constant compute time
  double lo = 1.0;       // uniform compute range
  double hi = 1.0;
  double link = 0.0;     // one-way link delay
  std::vector<std::size_t> stragglers;  // 1-based worker ids
  double factor = 1.0;

  void validate(std::size_t N) const {
    if (compute < 0 || link < 0 || lo < 0 || hi < lo) throw ConfigError("delay model: invalid delay parameters");
    if (!(factor > 0)) throw ConfigError("delay model: straggler factor must be positive");
    for (auto id : stragglers)
      if (id < 1 || id > N) throw ConfigError("delay model: straggler id " + std::to_string(id) + " outside 1..N");
  }

  bool is_straggler(std::size_t j) const {
    return std::find(stragglers.begin(), stragglers.end(), j + 1) != stragglers.end();
  }
};

struct ScheduleConfig {
  std::size_t N = 1;
  std::size_t S = 1;
  int tau = 10;
  DelayModel delay;
  std::uint64_t seed = 0;
  bool sync_mode = false;
  bool parallel_workers = false;
  double refinement_unit_latency = 0.0;

  std::size_t active_quota() const { return sync_mode ? N : S; }

  void validate() const {
    if (N < 1) throw ConfigError("schedule: N must be >= 1");
    if (S < 1 || S > N) throw ConfigError("schedule: S must satisfy 1 <= S <= N");
    if (tau < 1) throw ConfigError("schedule: tau must be >= 1");
    if (refinement_unit_latency < 0) throw ConfigError("schedule: refinement latency must be nonnegative");
    delay.validate(N);
  }
};

/// Per-worker round-trip generator: compute + 2 link, times the straggler factor.
class DelaySampler {
 public:
  DelaySampler(const DelayModel& m, std::size_t N, std::uint64_t seed) : model_(m) {
    for (std::size_t j = 0; j < N; ++j) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(j), 0x5eedu};
      rngs_.emplace_back(seq);
    }
  }

  double round_trip(std::size_t j) {
    double compute = model_.compute;
    if (model_.kind == DelayModel::Kind::uniform)
      compute = std::uniform_real_distribution<double>(model_.lo, model_.hi)(rngs_[j]);
    const double rt = compute + 2.0 * model_.link;
    return model_.is_straggler(j) ? rt * model_.factor : rt;
  }

 private:
  DelayModel model_;
  std::vector<std::mt19937_64> rngs_;
};

/// Picks the S earliest arrivals (ties to the lower id), then adds any worker whose
/// staleness would reach tau if skipped. Returned ids are ascending.
inline std::vector<std::size_t> schedule_epoch(std::span<const double> arrivals,
                                               std::span<const std::int64_t> last_active, std::int64_t t,
                                               std::size_t S, int tau) {
  const std::size_t N = arrivals.size();
  if (last_active.size() != N) throw DimensionError("schedule_epoch: length mismatch");
  if (S < 1 || S > N) throw ConfigError("schedule_epoch: S must satisfy 1 <= S <= N");
  std::vector<std::size_t> order(N);
  for (std::size_t j = 0; j < N; ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return arrivals[a] < arrivals[b]; });
  std::vector<bool> pick(N, false);
  for (std::size_t k = 0; k < S; ++k) pick[order[k]] = true;
  for (std::size_t j = 0; j < N; ++j)
    if (t - last_active[j] >= tau - 1) pick[j] = true;
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < N; ++j)
    if (pick[j]) out.push_back(j);
  return out;
}

// ---------------------------------------------------------------------------
// Communication counters

/// 32 |Q| (2 (d1 + d2 + d3) + d1 + |P_II|).
inline std::uint64_t comm_cost_iter(std::size_t active, const Dims& d, std::size_t poly2_size) {
  return 32ull * active * (2 * (d.d1 + d.d2 + d.d3) + d.d1 + poly2_size);
}

/// 32 N K (3 (d2 + d3) + 2 |P_II|) + 32 N |P_II| (2 (d2 + d3) + d1 + 1), for one refinement.
inline std::uint64_t comm_cost_refinement(std::size_t N, int K, const Dims& d, std::size_t poly2_size) {
  const std::uint64_t k = static_cast<std::uint64_t>(K);
  return 32ull * (N * k * (3 * (d.d2 + d.d3) + 2 * poly2_size) + N * poly2_size * (2 * (d.d2 + d.d3) + d.d1 + 1));
}

inline std::uint64_t comm_cost_cuts(std::span<const std::size_t> poly2_sizes, std::size_t N, int K, const Dims& d) {
  std::uint64_t acc = 0;
  for (auto m : poly2_sizes) acc += comm_cost_refinement(N, K, d, m);
  return acc;
}

// ---------------------------------------------------------------------------
// Run log

struct RefinementEvent {
  std::int64_t t = 0;
  std::uint64_t cut_one = 0;
  std::uint64_t cut_two = 0;
  double h_one = 0.0;
  double h_two = 0.0;
  double mu_one = 0.0;
  double mu_two = 0.0;
  std::vector<std::uint64_t> dropped;
  std::size_t poly1 = 0;
  std::size_t poly2 = 0;
  std::uint64_t c2 = 0;
};

struct IterRecord {
  std::int64_t t = 0;
  std::vector<std::size_t> active;        // 1-based ids
  std::vector<std::int64_t> staleness;    // t - t_hat_j before the step, per worker
  double sim_time = 0.0;
  double gap_sq = 0.0;
  double f1 = 0.0, f2 = 0.0, f3 = 0.0;
  std::size_t poly1 = 0;
  std::size_t poly2 = 0;
  std::size_t poly2_used = 0;  // |P_II| at the master step, enters C1
  std::uint64_t c1 = 0;
  std::vector<RefinementEvent> refinements;
};

enum class RunStatus { converged, max_iters, numeric_abort };

inline const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::converged: return "converged";
    case RunStatus::max_iters: return "max_iters";
    case RunStatus::numeric_abort: return "numeric_abort";
  }
  return "?";
}

struct RunFooter {
  std::optional<std::int64_t> T_eps;
  std::optional<std::int64_t> first_crossing;
  RunStatus status = RunStatus::max_iters;
  std::string message;
  std::int64_t iterations = 0;
  double sim_time = 0.0;
  double final_gap_sq = 0.0;
  std::uint64_t c1_total = 0;
  std::uint64_t c2 = 0;
  std::size_t refinements = 0;
  // Echoed so counters can be recomputed from the log alone.
  Dims dims;
  int K = 0;
};

struct RunLog {
  std::vector<IterRecord> records;
  std::vector<RefinementEvent> initial_refinements;  // fired before the first master step
  RunFooter footer;

  std::vector<RefinementEvent> all_refinements() const {
    std::vector<RefinementEvent> out = initial_refinements;
    for (const auto& r : records) out.insert(out.end(), r.refinements.begin(), r.refinements.end());
    return out;
  }
};

inline nlohmann::json to_json(const RefinementEvent& e) {
  return {{"t", e.t},           {"cut_I", e.cut_one}, {"cut_II", e.cut_two}, {"h_I", e.h_one},
          {"h_II", e.h_two},    {"mu_I", e.mu_one},   {"mu_II", e.mu_two},   {"dropped", e.dropped},
          {"P_I", e.poly1},     {"P_II", e.poly2},    {"C2", e.c2}};
}

inline RefinementEvent refinement_from_json(const nlohmann::json& j) {
  RefinementEvent e;
  e.t = j.at("t");
  e.cut_one = j.at("cut_I");
  e.cut_two = j.at("cut_II");
  e.h_one = j.at("h_I");
  e.h_two = j.at("h_II");
  e.mu_one = j.at("mu_I");
  e.mu_two = j.at("mu_II");
  e.dropped = j.at("dropped").get<std::vector<std::uint64_t>>();
  e.poly1 = j.at("P_I");
  e.poly2 = j.at("P_II");
  e.c2 = j.at("C2");
  return e;
}

inline nlohmann::json to_json(const IterRecord& r) {
  nlohmann::json j{{"type", "iter"},  {"t", r.t},       {"active", r.active}, {"staleness", r.staleness},
                   {"sim_time", r.sim_time}, {"gap_sq", r.gap_sq}, {"f1", r.f1}, {"f2", r.f2},
                   {"f3", r.f3},      {"P_I", r.poly1}, {"P_II", r.poly2},    {"P_II_used", r.poly2_used},
                   {"C1", r.c1}};
  j["refinements"] = nlohmann::json::array();
  for (const auto& e : r.refinements) j["refinements"].push_back(to_json(e));
  return j;
}

inline IterRecord iter_from_json(const nlohmann::json& j) {
  IterRecord r;
  r.t = j.at("t");
  r.active = j.at("active").get<std::vector<std::size_t>>();
  r.staleness = j.at("staleness").get<std::vector<std::int64_t>>();
  r.sim_time = j.at("sim_time");
  r.gap_sq = j.at("gap_sq");
  r.f1 = j.at("f1");
  r.f2 = j.at("f2");
  r.f3 = j.at("f3");
  r.poly1 = j.at("P_I");
  r.poly2 = j.at("P_II");
  r.poly2_used = j.at("P_II_used");
  r.c1 = j.at("C1");
  for (const auto& e : j.at("refinements")) r.refinements.push_back(refinement_from_json(e));
  return r;
}

inline nlohmann::json to_json(const RunFooter& f, const std::vector<RefinementEvent>& initial) {
  nlohmann::json j{{"type", "footer"},
                   {"status", to_string(f.status)},
                   {"message", f.message},
                   {"iterations", f.iterations},
                   {"sim_time", f.sim_time},
                   {"final_gap_sq", f.final_gap_sq},
                   {"C1_total", f.c1_total},
                   {"C2", f.c2},
                   {"refinements", f.refinements},
                   {"dims", {f.dims.d1, f.dims.d2, f.dims.d3}},
                   {"N", f.dims.workers},
                   {"K", f.K}};
  j["T_eps"] = f.T_eps ? nlohmann::json(*f.T_eps) : nlohmann::json(nullptr);
  j["first_crossing"] = f.first_crossing ? nlohmann::json(*f.first_crossing) : nlohmann::json(nullptr);
  j["initial_refinements"] = nlohmann::json::array();
  for (const auto& e : initial) j["initial_refinements"].push_back(to_json(e));
  return j;
}

inline void write_jsonl(const RunLog& log, std::ostream& os) {
  for (const auto& r : log.records) os << to_json(r).dump() << '\n';
  os << to_json(log.footer, log.initial_refinements).dump() << '\n';
}

inline std::string to_jsonl(const RunLog& log) {
  std::ostringstream os;
  write_jsonl(log, os);
  return os.str();
}

inline RunLog read_jsonl(std::istream& is) {
  RunLog log;
  std::string line;
  bool footer = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("type") == "iter") {
      log.records.push_back(iter_from_json(j));
    } else {
      footer = true;
      auto& f = log.footer;
      const std::string st = j.at("status");
      f.status = st == "converged" ? RunStatus::converged
                 : st == "numeric_abort" ? RunStatus::numeric_abort
                                         : RunStatus::max_iters;
      f.message = j.at("message");
      f.iterations = j.at("iterations");
      f.sim_time = j.at("sim_time");
      f.final_gap_sq = j.at("final_gap_sq");
      f.c1_total = j.at("C1_total");
      f.c2 = j.at("C2");
      f.refinements = j.at("refinements");
      const auto dd = j.at("dims").get<std::vector<std::size_t>>();
      f.dims = Dims{dd.at(0), dd.at(1), dd.at(2), j.at("N").get<std::size_t>()};
      f.K = j.at("K");
      if (!j.at("T_eps").is_null()) f.T_eps = j.at("T_eps").get<std::int64_t>();
      if (!j.at("first_crossing").is_null()) f.first_crossing = j.at("first_crossing").get<std::int64_t>();
      for (const auto& e : j.at("initial_refinements")) log.initial_refinements.push_back(refinement_from_json(e));
    }
  }
  if (!footer) throw ConfigError("run log: missing footer record");
  return log;
}

inline void write_csv(const RunLog& log, std::ostream& os) {
  os << "t,gap_sq,f1,f2,f3,sim_time,|P_I|,|P_II|,C1\n";
  os.precision(17);
  for (const auto& r : log.records)
    os << r.t << ',' << r.gap_sq << ',' << r.f1 << ',' << r.f2 << ',' << r.f3 << ',' << r.sim_time << ','
       << r.poly1 << ',' << r.poly2 << ',' << r.c1 << '\n';
}

/// Largest logged staleness; the run respects tau when this is <= tau.
inline std::int64_t max_staleness(const RunLog& log) {
  std::int64_t m = 0;
  for (const auto& r : log.records)
    for (auto s : r.staleness) m = std::max(m, s);
  return m;
}

inline bool validate_staleness(const RunLog& log, int tau) { return max_staleness(log) <= tau; }

/// Recomputes every C1 and the C2 total from logged sizes; true when all match exactly.
inline bool validate_counters(const RunLog& log) {
  const auto& d = log.footer.dims;
  std::uint64_t c1 = 0;
  for (const auto& r : log.records) {
    const auto expect = comm_cost_iter(r.active.size(), d, r.poly2_used);
    if (expect != r.c1) return false;
    c1 += expect;
  }
  std::vector<std::size_t> sizes;
  for (const auto& e : log.all_refinements()) {
    if (comm_cost_refinement(d.workers, log.footer.K, d, e.poly2) != e.c2) return false;
    sizes.push_back(e.poly2);
  }
  return c1 == log.footer.c1_total && comm_cost_cuts(sizes, d.workers, log.footer.K, d) == log.footer.c2;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json to_json(const PrimalState& s) {
  nlohmann::json j;
  for (std::size_t i = 0; i < 3; ++i) {
    auto arr = nlohmann::json::array();
    for (const auto& v : s.x[i]) arr.push_back(vec_to_json(v));
    j["x"].push_back(arr);
    j["z"].push_back(vec_to_json(s.z[i]));
  }
  return j;
}

inline PrimalState primal_from_json(const nlohmann::json& j) {
  PrimalState s;
  for (std::size_t i = 0; i < 3; ++i) {
    for (const auto& v : j.at("x").at(i)) s.x[i].push_back(vec_from_json(v));
    s.z[i] = vec_from_json(j.at("z").at(i));
  }
  return s;
}

struct Checkpoint {
  std::int64_t t = 0;
  PrimalState state;
  DualState duals;
  Polytope poly1{Layer::one};
  Polytope poly2{Layer::two};
};

inline nlohmann::json to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["t"] = c.t;
  j["state"] = to_json(c.state);
  j["lambda"] = c.duals.lambda;
  j["theta"] = nlohmann::json::array();
  for (const auto& v : c.duals.theta) j["theta"].push_back(vec_to_json(v));
  j["P_I"] = to_json(c.poly1);
  j["P_II"] = to_json(c.poly2);
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint c;
  c.t = j.at("t");
  c.state = primal_from_json(j.at("state"));
  c.duals.lambda = j.at("lambda").get<std::vector<double>>();
  for (const auto& v : j.at("theta")) c.duals.theta.push_back(vec_from_json(v));
  c.poly1 = polytope_from_json(j.at("P_I"));
  c.poly2 = polytope_from_json(j.at("P_II"));
  if (c.duals.lambda.size() != c.poly2.size()) throw ConfigError("checkpoint: lambda count does not match P_II");
  return c;
}

// ---------------------------------------------------------------------------
// Simulation

struct RunConfig {
  InnerConfig inner;
  OuterConfig outer;
  ScheduleConfig sched;
  double mu1 = 0.0;
  double mu2 = 0.0;
  // Freezes the level-2 block: no outer x2/z2 steps and a zero-step level-2 unroll.
  bool freeze_level2 = false;
  double prune_tol = 1e-10;

  void validate(const Dims& d) const {
    inner.validate();
    outer.validate();
    sched.validate();
    if (sched.N != d.workers) throw ConfigError("schedule N does not match problem worker count");
    if (mu1 < 0 || mu2 < 0) throw ConfigError("mu must be nonnegative");
    if (prune_tol < 0) throw ConfigError("prune tolerance must be nonnegative");
  }
};

/// Everything a refinement observer may inspect. Polytopes are given before and
/// after the additions and after pruning.
struct RefinementContext {
  std::int64_t t = 0;
  const PrimalState* point = nullptr;
  const Polytope* poly1_before = nullptr;
  const Polytope* poly1_added = nullptr;
  const Polytope* poly2_before = nullptr;
  const Polytope* poly2_added = nullptr;
  const Polytope* poly1_after = nullptr;
  const Polytope* poly2_after = nullptr;
  const Cut* cut_one = nullptr;
  const Cut* cut_two = nullptr;
  const LayerOneConstraint* h_one = nullptr;
  const LayerTwoConstraint* h_two = nullptr;
};

class Simulation {
 public:
  using MuProvider = std::function<double(Layer, const ConstraintFunction&, const PrimalState&)>;

  Simulation(const TrilevelProblem& p, RunConfig cfg) : problem_(&p), cfg_(std::move(cfg)) {
    cfg_.validate(p.dims());
    if (cfg_.freeze_level2) {
      cfg_.outer.eta_x[1] = 0.0;
      cfg_.outer.eta_z[1] = 0.0;
    }
    state_ = PrimalState::zeros(p.dims());
    duals_ = DualState::zeros(p.dims());
  }

  void set_initial_state(PrimalState s) {
    s.check_dims(problem_->dims());
    state_ = std::move(s);
  }

  std::function<void(const RefinementContext&)> on_refinement;
  MuProvider mu_provider;

  const PrimalState& state() const { return state_; }
  const DualState& duals() const { return duals_; }
  const Polytope& poly1() const { return poly1_; }
  const Polytope& poly2() const { return poly2_; }
  const RunConfig& config() const { return cfg_; }

  Checkpoint checkpoint() const { return {t_, state_, duals_, poly1_, poly2_}; }

  RunLog run() {
    const auto& d = problem_->dims();
    const auto& oc = cfg_.outer;
    const auto& sc = cfg_.sched;
    const std::size_t N = d.workers;
    RunLog log;
    log.footer.dims = d;
    log.footer.K = cfg_.inner.K;
    DelaySampler delays(sc.delay, N, sc.seed);
    double clock = 0.0;
    t_ = 0;

    auto fail = [&](const std::string& msg) {
      log.footer.status = RunStatus::numeric_abort;
      log.footer.message = msg;
    };

    try {
      if (oc.T1 > 0) log.initial_refinements.push_back(refine(0, clock));
    } catch (const NumericError& e) {
      fail(e.what());
      finish(log, clock);
      return log;
    }

    std::vector<StaleView> views(N, view(0));
    std::vector<std::int64_t> last(N, 0);
    std::vector<double> arrival(N);
    for (std::size_t j = 0; j < N; ++j) arrival[j] = clock + delays.round_trip(j);

    bool done = false;
    for (std::int64_t t = 0; t < oc.max_iters && !done; ++t) {
      IterRecord rec;
      rec.t = t;
      const auto active = schedule_epoch(arrival, last, t, sc.active_quota(), sc.tau);
      for (auto j : active) clock = std::max(clock, arrival[j]);
      for (std::size_t j = 0; j < N; ++j) rec.staleness.push_back(t - last[j]);
      for (auto j : active) rec.active.push_back(j + 1);

      const PrimalState good_state = state_;
      const DualState good_duals = duals_;
      try {
        const auto updates = compute_workers(active, views);
        for (std::size_t k = 0; k < active.size(); ++k)
          for (std::size_t i = 0; i < 3; ++i) state_.x[i][active[k]] = updates[k][i];
        rec.poly2_used = poly2_.size();
        master_step(state_, duals_, poly2_, *problem_, oc, t);
        t_ = t + 1;
        if (oc.T1 > 0 && (t + 1) % oc.T_pre == 0 && t + 1 <= oc.T1) rec.refinements.push_back(refine(t + 1, clock));
        rec.gap_sq = stationarity_gap(state_, duals_, poly2_, *problem_, oc).squared_norm();
        const ConsensusView cv(*problem_);
        rec.f1 = cv.total_value(Level::one, state_);
        rec.f2 = cv.total_value(Level::two, state_);
        rec.f3 = cv.total_value(Level::three, state_);
        if (!std::isfinite(rec.f1) || !std::isfinite(rec.f2) || !std::isfinite(rec.f3))
          throw NumericError("objective became non-finite at iteration " + std::to_string(t));
      } catch (const NumericError& e) {
        state_ = good_state;
        duals_ = good_duals;
        fail(e.what());
        break;
      }
      for (auto j : active) {
        last[j] = t + 1;
        views[j] = view(t + 1);
        arrival[j] = clock + delays.round_trip(j);
      }
      rec.sim_time = clock;
      rec.poly1 = poly1_.size();
      rec.poly2 = poly2_.size();
      rec.c1 = comm_cost_iter(active.size(), d, rec.poly2_used);
      const bool eligible = !(oc.converge_after_T1 && t + 1 < oc.T1);
      if (rec.gap_sq <= oc.eps && !log.footer.first_crossing) log.footer.first_crossing = t + 1;
      if (rec.gap_sq <= oc.eps && eligible) {
        log.footer.T_eps = t + 1;
        log.footer.status = RunStatus::converged;
        done = true;
      }
      log.records.push_back(std::move(rec));
    }
    finish(log, clock);
    return log;
  }

 private:
  StaleView view(std::int64_t t) const { return {state_, duals_, poly2_, t}; }

  std::vector<std::array<Vec, 3>> compute_workers(const std::vector<std::size_t>& active,
                                                  const std::vector<StaleView>& views) const {
    std::vector<std::array<Vec, 3>> out(active.size());
    if (cfg_.sched.parallel_workers && active.size() > 1) {
      std::vector<std::future<std::array<Vec, 3>>> fut;
      for (auto j : active)
        fut.push_back(std::async(std::launch::async,
                                 [this, j, &views] { return worker_step(j, views[j], *problem_, cfg_.outer); }));
      for (std::size_t k = 0; k < fut.size(); ++k) out[k] = fut[k].get();
    } else {
      for (std::size_t k = 0; k < active.size(); ++k)
        out[k] = worker_step(active[k], views[active[k]], *problem_, cfg_.outer);
    }
    return out;
  }

  InnerConfig level2_config() const {
    InnerConfig c = cfg_.inner;
    if (cfg_.freeze_level2) c.eta_x = c.eta_z = c.eta_phi = 0.0;
    return c;
  }

  /// One refinement event: layer-I cut, level-2 unroll against the enlarged P_I,
  /// layer-II cut, then pruning by gamma^K and lambda (the new layer-II cut is kept).
  RefinementEvent refine(std::int64_t t, double& clock) {
    const auto& ic = cfg_.inner;
    RefinementEvent ev;
    ev.t = t;
    const PrimalState point = state_;

    std::optional<InnerState> init3, init2;
    if (ic.warm_start) {
      init3 = warm3_;
      init2 = warm2_;
    }
    LayerOneConstraint h1(*problem_, ic, init3);
    ev.mu_one = mu_provider ? mu_provider(Layer::one, h1, point) : cfg_.mu1;
    const auto g1 = generate_cut_I(h1, point, ev.mu_one, ic.eps1, t, ids_.next(), ic.grad_mode);
    ev.cut_one = g1.cut.id;
    ev.h_one = g1.h_value;
    const Polytope p1_before = poly1_;
    const Polytope p1_added = add_cut(poly1_, g1.cut);

    LayerTwoConstraint h2(*problem_, level2_config(), p1_added, init2);
    ev.mu_two = mu_provider ? mu_provider(Layer::two, h2, point) : cfg_.mu2;
    const auto g2 = generate_cut_II(h2, point, ev.mu_two, ic.eps2, t, ids_.next(), ic.grad_mode);
    ev.cut_two = g2.cut.id;
    ev.h_two = g2.h_value;
    const Polytope p2_before = poly2_;
    const Polytope p2_added = add_cut(poly2_, g2.cut);
    std::vector<double> lambdas = duals_.lambda;
    lambdas.push_back(0.0);

    const Vec& gk = g2.trace.gamma_final();
    const std::vector<double> gamma(gk.data(), gk.data() + gk.size());
    auto dr = drop_inactive(p1_added, gamma, p2_added, lambdas, cfg_.prune_tol, {g2.cut.id});
    poly1_ = std::move(dr.one);
    poly2_ = std::move(dr.two);
    duals_.lambda = std::move(dr.lambda);
    ev.dropped = std::move(dr.dropped);
    ev.poly1 = poly1_.size();
    ev.poly2 = poly2_.size();
    ev.c2 = comm_cost_refinement(problem_->dims().workers, ic.K, problem_->dims(), ev.poly2);
    clock += cfg_.sched.refinement_unit_latency * static_cast<double>(ev.c2 / 32);

    if (ic.warm_start) {
      warm3_ = g1.trace.final_state();
      warm2_ = g2.trace.final_state();
    }
    if (on_refinement) {
      RefinementContext ctx;
      ctx.t = t;
      ctx.point = &point;
      ctx.poly1_before = &p1_before;
      ctx.poly1_added = &p1_added;
      ctx.poly2_before = &p2_before;
      ctx.poly2_added = &p2_added;
      ctx.poly1_after = &poly1_;
      ctx.poly2_after = &poly2_;
      ctx.cut_one = &g1.cut;
      ctx.cut_two = &g2.cut;
      ctx.h_one = &h1;
      ctx.h_two = &h2;
      on_refinement(ctx);
    }
    return ev;
  }

  void finish(RunLog& log, double clock) {
    auto& f = log.footer;
    f.iterations = static_cast<std::int64_t>(log.records.size());
    f.sim_time = clock;
    f.final_gap_sq = log.records.empty() ? 0.0 : log.records.back().gap_sq;
    for (const auto& r : log.records) f.c1_total += r.c1;
    const auto ev = log.all_refinements();
    f.refinements = ev.size();
    for (const auto& e : ev) f.c2 += e.c2;
  }

  const TrilevelProblem* problem_;
  RunConfig cfg_;
  PrimalState state_;
  DualState duals_;
  Polytope poly1_{Layer::one};
  Polytope poly2_{Layer::two};
  CutIdSource ids_;
  std::int64_t t_ = 0;
  std::optional<InnerState> warm3_, warm2_;
};

inline RunLog run(const TrilevelProblem& p, const RunConfig& cfg) {
  Simulation sim(p, cfg);
  return sim.run();
}

}  // namespace afto
