#include "support.hpp"

#include "afto/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace afto;
using namespace afto::testing;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "afto_cli");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> quick_quad(std::vector<std::string> extra = {}) {
  std::vector<std::string> a{"-c", config_path("quad.toml"), "--set", "inner.K=20", "--set", "outer.T1=20",
                             "--set", "outer.max_iters=50", "--set", "outer.T_pre=5"};
  a.insert(a.end(), extra.begin(), extra.end());
  return a;
}

std::vector<std::string> with(std::string cmd, std::vector<std::string> rest) {
  rest.insert(rest.begin(), std::move(cmd));
  return rest;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::path(::testing::TempDir()) / ("afto_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

// Config parsing

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"quad.toml", "quad_async.toml", "robust_hpo.toml"}) {
    AppConfig c = load_config(config_path(name));
    EXPECT_NO_THROW(finalize(c)) << name;
  }
}

TEST(Config, SectionsAndComments) {
  AppConfig c;
  apply_text(c, "[problem]\nworkers = 5 # five\n[inner]\nK = 7 ; seven\n[schedule]\nstragglers = [1, 3]\n");
  EXPECT_EQ(c.quad.dims.workers, 5u);
  EXPECT_EQ(c.run.inner.K, 7);
  EXPECT_EQ(c.run.sched.delay.stragglers, (std::vector<std::size_t>{1, 3}));
}

TEST(Config, OverrideWins) {
  AppConfig c = load_config(config_path("quad.toml"));
  apply_override(c, "inner.K=9");
  apply_override(c, "outer.eta_x=[0.2, 0.3, 0.4]");
  EXPECT_EQ(c.run.inner.K, 9);
  EXPECT_EQ(c.run.outer.eta_x[2], 0.4);
}

TEST(Config, UnknownKeyAndBadValue) {
  AppConfig c;
  EXPECT_THROW(apply_override(c, "inner.nope=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "inner.K"), ConfigError);
  EXPECT_THROW(apply_override(c, "inner.K=abc"), ConfigError);
  EXPECT_THROW(apply_text(c, "[inner]\nbogus = 2\n"), ConfigError);
  EXPECT_THROW(apply_text(c, "K = 2\n"), ConfigError);
}

TEST(Config, FinalizeFillsWorkerCount) {
  AppConfig c;
  apply_override(c, "problem.workers=3");
  finalize(c);
  EXPECT_EQ(c.run.sched.N, 3u);
  EXPECT_EQ(c.run.sched.S, 3u);
  apply_override(c, "schedule.S=5");
  EXPECT_THROW(finalize(c), ConfigError);
}

TEST(Config, DatasetFromCsvPath) {
  const fs::path dir = scratch_dir("csv");
  {
    std::ofstream os(dir / "d.csv");
    SyntheticLinearSpec s;
    s.rows = 60;
    s.features = 2;
    write_csv_matrix(make_synthetic_linear(s), os, {"x1", "x2", "y"});
  }
  AppConfig c;
  apply_override(c, "problem.kind=robust_hpo");
  apply_override(c, "dataset.path=" + (dir / "d.csv").string());
  apply_override(c, "hpo.hidden=3");
  finalize(c);
  const auto b = build_problem(c);
  ASSERT_TRUE(b.dataset.has_value());
  EXPECT_EQ(b.dataset->rows(), 60u);
  EXPECT_EQ(b.dataset->features(), 2);
}

// Commands

TEST(Cli, RunIsByteDeterministic) {
  const fs::path d = scratch_dir("det");
  std::string logs[2], csvs[2];
  for (int k = 0; k < 2; ++k) {
    const auto j = (d / ("r" + std::to_string(k) + ".jsonl")).string();
    const auto c = (d / ("r" + std::to_string(k) + ".csv")).string();
    const auto r = invoke(with("run", quick_quad({"--jsonl", j, "--csv", c})));
    ASSERT_EQ(r.code, 0) << r.err;
    logs[k] = slurp(j);
    csvs[k] = slurp(c);
  }
  EXPECT_FALSE(logs[0].empty());
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_EQ(csvs[0], csvs[1]);
  EXPECT_EQ(csvs[0].substr(0, csvs[0].find('\n')), "t,gap_sq,f1,f2,f3,sim_time,|P_I|,|P_II|,C1");
  std::istringstream is(logs[0]);
  const RunLog back = read_jsonl(is);
  EXPECT_EQ(back.footer.iterations, static_cast<int>(back.records.size()));
}

TEST(Cli, RunSummaryReportsOracleError) {
  const fs::path d = scratch_dir("sum");
  const auto r = invoke(with("run", quick_quad({"--jsonl", (d / "a.jsonl").string(), "--csv", (d / "a.csv").string()})));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("problem"), "quadratic");
  EXPECT_EQ(j.at("z_error").size(), 3u);
}

TEST(Cli, SeedFlagChangesRun) {
  const fs::path d = scratch_dir("seed");
  std::string logs[2];
  for (int k = 0; k < 2; ++k) {
    const auto j = (d / ("s" + std::to_string(k) + ".jsonl")).string();
    ASSERT_EQ(invoke(with("run", quick_quad({"--seed", std::to_string(k + 1), "--jsonl", j, "--csv", ""}))).code, 0);
    logs[k] = slurp(j);
  }
  EXPECT_NE(logs[0], logs[1]);
}

TEST(Cli, BenchSummaryFields) {
  const fs::path d = scratch_dir("bench");
  const auto path = (d / "bench.json").string();
  const auto r = invoke(with("bench", {"-c", config_path("quad_async.toml"), "--set", "outer.max_iters=300",
                                       "--set", "outer.T1=0", "--target", "1e-2", "--seeds", "2", "-o", path}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(path));
  ASSERT_TRUE(j.contains("median_ratio"));
  ASSERT_EQ(j.at("runs").size(), 2u);
  for (const auto& row : j.at("runs")) {
    EXPECT_TRUE(row.contains("sync_time"));
    EXPECT_TRUE(row.contains("async_time"));
    EXPECT_TRUE(row.contains("ratio"));
    EXPECT_TRUE(row.at("sync").contains("final_gap_sq"));
  }
}

TEST(Cli, CheckpointFeedsGapAndDump) {
  const fs::path d = scratch_dir("ckpt");
  const auto ck = (d / "ck.json").string();
  ASSERT_EQ(invoke(with("run", quick_quad({"--jsonl", "", "--csv", "", "--checkpoint", ck}))).code, 0);

  const auto g = invoke(with("gap", quick_quad({"--checkpoint", ck})));
  ASSERT_EQ(g.code, 0) << g.err;
  const auto gj = nlohmann::json::parse(g.out);
  EXPECT_NEAR(gj.at("gap_sq").get<double>(),
              gj.at("primal_sq").get<double>() + gj.at("lambda_sq").get<double>() + gj.at("theta_sq").get<double>(),
              1e-12 * (1 + gj.at("gap_sq").get<double>()));

  const auto poly = (d / "p.json").string();
  ASSERT_EQ(invoke(with("dump-polytope", {"--checkpoint", ck, "--layer", "II", "-o", poly})).code, 0);
  const Polytope p2 = polytope_from_json(nlohmann::json::parse(slurp(poly)));
  EXPECT_EQ(p2.layer(), Layer::two);
  EXPECT_GE(p2.size(), 1u);

  const auto both = invoke(with("dump-polytope", {"--checkpoint", ck}));
  ASSERT_EQ(both.code, 0);
  const auto bj = nlohmann::json::parse(both.out);
  EXPECT_TRUE(bj.contains("P_I"));
  EXPECT_TRUE(bj.contains("P_II"));
}

TEST(Cli, ValidateCutsFindsNoViolations) {
  const auto r = invoke(with("validate-cuts", quick_quad({"--set", "cuts.mu_mode=estimate", "--samples", "300"})));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_GT(j.at("cuts").size(), 0u);
  EXPECT_EQ(j.at("violations").get<std::size_t>(), 0u);
}

TEST(Cli, EstimateMuReportsBothLayers) {
  const auto r = invoke(with("estimate-mu", quick_quad({"--points", "20"})));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_GE(j.at("mu_I").get<double>(), 0.0);
  EXPECT_GE(j.at("mu_II").get<double>(), 0.0);
}

// Exit codes

TEST(CliExit, UnknownFlagPrintsUsage) {
  const auto r = invoke({"run", "--frobnicate"});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(CliExit, MissingSubcommand) {
  EXPECT_EQ(invoke({}).code, cli::kExitConfig);
  EXPECT_EQ(invoke({"fly"}).code, cli::kExitConfig);
}

TEST(CliExit, BadConfig) {
  EXPECT_EQ(invoke({"run", "-c", "/nonexistent/x.toml"}).code, cli::kExitConfig);
  EXPECT_EQ(invoke(with("run", quick_quad({"--set", "inner.K=-1"}))).code, cli::kExitConfig);
  EXPECT_EQ(invoke(with("run", quick_quad({"--set", "bogus.key=1"}))).code, cli::kExitConfig);
}

TEST(CliExit, NumericAbort) {
  const fs::path d = scratch_dir("abort");
  const auto j = (d / "a.jsonl").string();
  const auto r = invoke(with("run", quick_quad({"--set", "outer.eta_x=50", "--set", "outer.eta_z=50", "--set",
                                                 "outer.project_bounds=false", "--set", "outer.T1=0", "--set",
                                                 "outer.max_iters=2000", "--jsonl", j, "--csv", ""})));
  EXPECT_EQ(r.code, cli::kExitNumeric) << r.err;
  std::istringstream is(slurp(j));
  const RunLog log = read_jsonl(is);
  EXPECT_EQ(log.footer.status, RunStatus::numeric_abort);
  EXPECT_FALSE(log.footer.message.empty());
}

TEST(CliExit, HelpIsSuccess) {
  const auto r = invoke({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("validate-cuts"), std::string::npos);
}
