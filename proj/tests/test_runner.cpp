#include "rwdre/runner.hpp"

#include <cstdio>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <utility>

#include "doctest.h"
#include "json.hpp"
#include "rwdre/config.hpp"
#include "rwdre/errors.hpp"
#include "rwdre/io.hpp"

using namespace rwdre;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
  const std::string dir = "runner_out/" + name;
  fs::remove_all(dir);
  return dir;
}

const std::string kEnv =
    "[experiment]\n"
    "name = env-decay\n"
    "strategy = single_site\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 8\n"
    "\n"
    "[engine]\n"
    "kind = resampling\n"
    "\n"
    "[time]\n"
    "grid = 0.5 1 2\n"
    "\n"
    "[run]\n"
    "replicas = 400\n"
    "seed = 11\n";

json read_json(const std::string& path) { return json::parse(read_file(path)); }

}  // namespace

TEST_CASE("an environment decay run writes curve, summary and manifest") {
  const std::string dir = fresh_dir("env");
  const auto cfg = parse_config(kEnv);
  const RunResult res = run_experiment(cfg, dir);
  CHECK_FALSE(res.bound_violated);
  REQUIRE(res.artifacts.size() == 3);
  CHECK(res.artifacts[0] == "env-decay.curve.csv");
  CHECK(res.artifacts[1] == "env-decay.summary.json");
  CHECK(res.artifacts[2] == "manifest.json");
  for (const auto& name : res.artifacts) CHECK(fs::exists(dir + "/" + name));

  const std::string csv = read_file(dir + "/env-decay.curve.csv");
  CHECK(csv.rfind("t,estimate,se\n", 0) == 0);

  const json s = read_json(dir + "/env-decay.summary.json");
  CHECK(s["experiment"] == "env-decay");
  CHECK(s["lattice"]["L"] == 8);
  CHECK(s["engine"]["lambda"]["exact"] == true);
  REQUIRE(s["curve"]["times"].size() == 3);
  CHECK(s["curve"]["estimates"].size() == 3);
  CHECK(s["curve"]["se"].size() == 3);
  CHECK(s["curve"]["strategy"] == "single_site");
  // Site resampling forgets a single-site discrepancy at its clock rate, so
  // the measured curve must track e^{-t} within noise.
  CHECK(s["exact_within_3se"] == true);
  CHECK(s["exact_decay"]["kind"] == "exponential");
  CHECK(s["fit"]["r2"]["exact"] == true);
  CHECK(s["bound_violated"] == false);
}

TEST_CASE("the same config and seed reproduce every artifact byte for byte") {
  const std::string d1 = fresh_dir("det1");
  const std::string d2 = fresh_dir("det2");
  const auto cfg = parse_config(kEnv);
  run_experiment(cfg, d1);
  run_experiment(cfg, d2);
  CHECK(read_file(d1 + "/env-decay.curve.csv") == read_file(d2 + "/env-decay.curve.csv"));
  CHECK(read_file(d1 + "/env-decay.summary.json") == read_file(d2 + "/env-decay.summary.json"));

  json m1 = read_json(d1 + "/manifest.json");
  json m2 = read_json(d2 + "/manifest.json");
  m1.erase("wall_clock_seconds");
  m2.erase("wall_clock_seconds");
  CHECK(m1.dump() == m2.dump());
}

TEST_CASE("the manifest replays the run it describes") {
  const std::string d1 = fresh_dir("replay1");
  const std::string d2 = fresh_dir("replay2");
  run_experiment(parse_config(kEnv), d1);

  const json m = read_json(d1 + "/manifest.json");
  CHECK(m["experiment"] == "env-decay");
  CHECK(m["rng"] == "philox4x32-10");
  CHECK(m["version"].is_string());
  REQUIRE(m["artifacts"].size() == 2);  // the manifest does not list itself
  CHECK(m["artifacts"][0] == "env-decay.curve.csv");

  run_experiment(parse_config(m["config"].get<std::string>()), d2);
  CHECK(read_file(d1 + "/env-decay.curve.csv") == read_file(d2 + "/env-decay.curve.csv"));
  CHECK(read_file(d1 + "/env-decay.summary.json") == read_file(d2 + "/env-decay.summary.json"));
}

TEST_CASE("a failed write leaves no partial artifacts behind") {
  const std::string dir = fresh_dir("partial");
  fs::create_directories(dir + "/env-decay.summary.json");  // blocks the second write
  CHECK_THROWS_AS(run_experiment(parse_config(kEnv), dir), Error);
  CHECK_FALSE(fs::exists(dir + "/env-decay.curve.csv"));
  CHECK_FALSE(fs::exists(dir + "/manifest.json"));
}

TEST_CASE("a speed run checks its two estimator forms against each other") {
  const std::string dir = fresh_dir("speed");
  const std::string text =
      "[experiment]\n"
      "name = speed\n"
      "\n"
      "[lattice]\n"
      "d = 1\n"
      "L = 5\n"
      "\n"
      "[engine]\n"
      "kind = resampling\n"
      "\n"
      "[rates]\n"
      "jumps = 1 -1\n"
      "rate.0 = 1.2\n"
      "rate.1 = 0.8\n"
      "\n"
      "[time]\n"
      "horizon = 600\n"
      "burn_in = 5\n"
      "\n"
      "[run]\n"
      "replicas = 8\n"
      "seed = 3\n";
  const auto cfg = parse_config(text);
  const RunResult res = run_experiment(cfg, dir);
  CHECK_FALSE(res.bound_violated);
  const json s = read_json(dir + "/speed.summary.json");
  CHECK(s["forms_agree"] == true);
  const double v = s["v"][0]["value"].get<double>();
  const double se = s["v"][0]["se"].get<double>();
  CHECK(se > 0.0);
  // Environment-independent rates 1.2 right, 0.8 left: the drift is 0.4.
  CHECK(std::abs(v - 0.4) <= 4 * se);
  CHECK(s["v_stationary"][0]["se"].is_number());

  // Trajectory dumps are opt-in and capped at a few replicas.
  const std::string dir2 = fresh_dir("speed_dump");
  auto dump_cfg = parse_config(override_run_keys(text, {{"dump_trajectories", "true"}}));
  const RunResult res2 = run_experiment(dump_cfg, dir2);
  CHECK(std::find(res2.artifacts.begin(), res2.artifacts.end(), "trajectories.csv") !=
        res2.artifacts.end());
  const std::string traj = read_file(dir2 + "/trajectories.csv");
  CHECK(traj.rfind("replica,walker,t,x,y,z,decoupled\n", 0) == 0);
  CHECK(traj.find("\n3,0,") != std::string::npos);  // four dumped replicas: 0..3
  CHECK(traj.find("\n4,0,") == std::string::npos);
}

TEST_CASE("a walker frame decay run reports the split and its identities") {
  const std::string dir = fresh_dir("ep");
  const std::string text =
      "[experiment]\n"
      "name = ep-decay\n"
      "\n"
      "[lattice]\n"
      "d = 1\n"
      "L = 4\n"
      "\n"
      "[engine]\n"
      "kind = resampling\n"
      "\n"
      "[rates]\n"
      "family = site_biased\n"
      "eps = 1.0\n"
      "\n"
      "[observable]\n"
      "kind = site_bit\n"
      "\n"
      "[time]\n"
      "grid = 0.5 1 2\n"
      "\n"
      "[run]\n"
      "replicas = 800\n"
      "seed = 19\n";
  const RunResult res = run_experiment(parse_config(text), dir);
  CHECK_FALSE(res.bound_violated);
  const json s = read_json(dir + "/ep-decay.summary.json");
  for (const char* block : {"total", "coupled_term", "decoupled_term", "survival"}) {
    CHECK(s[block]["times"].size() == 3);
  }
  CHECK(s["checks"]["triangle"] == true);
  CHECK(s["checks"]["survival_nonincreasing"] == true);
  CHECK(s["checks"]["coupled_le_osc_times_survival"] == true);
  CHECK(s["observable_oscillation"]["value"].get<double>() == doctest::Approx(1.0));

  const std::string dir2 = fresh_dir("ep_dump");
  auto dump_cfg = parse_config(override_run_keys(text, {{"dump_trajectories", "true"}}));
  run_experiment(dump_cfg, dir2);
  const std::string traj = read_file(dir2 + "/trajectories.csv");
  CHECK(traj.find("\n0,1,") != std::string::npos);  // both walkers of the pair appear
}

TEST_CASE("environment-independent rates never decouple and say so") {
  const std::string dir = fresh_dir("dec");
  const std::string text =
      "[experiment]\n"
      "name = decoupling\n"
      "\n"
      "[lattice]\n"
      "d = 1\n"
      "L = 8\n"
      "\n"
      "[engine]\n"
      "kind = resampling\n"
      "\n"
      "[rates]\n"
      "jumps = 1 -1\n"
      "rate.0 = 1.5\n"
      "rate.1 = 0.5\n"
      "\n"
      "[time]\n"
      "grid = 1:1:5\n"
      "\n"
      "[run]\n"
      "replicas = 50\n"
      "seed = 5\n";
  const RunResult res = run_experiment(parse_config(text), dir);
  CHECK_FALSE(res.bound_violated);
  const json s = read_json(dir + "/decoupling.summary.json");
  CHECK(s["p_hat"]["value"].get<double>() == doctest::Approx(1.0));
  CHECK(s["p_hat"]["se"].get<double>() == doctest::Approx(0.0));
  CHECK(s["verdict"] == true);
  CHECK(s["notes"] == "p_hat = 1 (no decoupling events)");
  CHECK(s["p_floor"]["exact"] == true);
}

TEST_CASE("a continuity run with identical-law stationary marginals verifies its bound") {
  const std::string dir = fresh_dir("cont");
  const std::string text =
      "[experiment]\n"
      "name = continuity\n"
      "\n"
      "[lattice]\n"
      "d = 1\n"
      "L = 5\n"
      "\n"
      "[engine]\n"
      "kind = resampling\n"
      "\n"
      "[rates]\n"
      "jumps = 1 -1\n"
      "rate.0 = 2.0\n"
      "rate.1 = 1.0\n"
      "\n"
      "[rates_b]\n"
      "jumps = 1 -1\n"
      "rate.0 = 2.05\n"
      "rate.1 = 1.0\n"
      "\n"
      "[observable]\n"
      "kind = site_bit\n"
      "\n"
      "[time]\n"
      "horizon = 80\n"
      "burn_in = 10\n"
      "tau_horizon = 30\n"
      "\n"
      "[run]\n"
      "replicas = 50\n"
      "seed = 9\n"
      "tau_replicas = 150\n";
  const RunResult res = run_experiment(parse_config(text), dir);
  CHECK_FALSE(res.bound_violated);
  const json s = read_json(dir + "/continuity.summary.json");
  CHECK(s["verdict"] == true);
  CHECK(s["notes"].get<std::string>().find("p = 1 exactly") != std::string::npos);
  CHECK(s["left"]["se"].is_number());
  CHECK(s["right"]["se"].is_number());
  CHECK(s["beta"]["value"].get<double>() == doctest::Approx(0.05));
  CHECK(s["beta"]["exact"] == true);
}

TEST_CASE("the small-system cross check matches the exact generator solve") {
  const std::string dir = fresh_dir("oracle");
  const std::string text =
      "[experiment]\n"
      "name = oracle-crosscheck\n"
      "\n"
      "[lattice]\n"
      "d = 1\n"
      "L = 3\n"
      "\n"
      "[engine]\n"
      "kind = resampling\n"
      "\n"
      "[rates]\n"
      "family = site_biased\n"
      "eps = 1.0\n"
      "\n"
      "[time]\n"
      "horizon = 1000\n"
      "burn_in = 50\n"
      "\n"
      "[run]\n"
      "replicas = 8\n"
      "seed = 21\n"
      "export_generator = true\n";
  const RunResult res = run_experiment(parse_config(text), dir);
  CHECK_FALSE(res.bound_violated);
  const json s = read_json(dir + "/oracle-crosscheck.summary.json");
  CHECK(s["states"] == 8);
  CHECK(s["stationary_residual"]["value"].get<double>() < 1e-10);
  CHECK(s["speed"]["exact"][0]["value"].get<double>() == doctest::Approx(0.4450017001).epsilon(1e-6));
  CHECK(s["speed"]["within_3se"] == true);
  CHECK(s["speed"]["mc"][0]["se"].get<double>() > 0.0);

  const std::string mtx = read_file(dir + "/generator.mtx");
  CHECK(mtx.rfind("%%MatrixMarket", 0) == 0);
}

TEST_CASE("a transference run reports one verdict per scale") {
  const std::string dir = fresh_dir("transfer");
  const std::string text =
      "[experiment]\n"
      "name = transference\n"
      "\n"
      "[lattice]\n"
      "d = 1\n"
      "L = 4\n"
      "\n"
      "[engine]\n"
      "kind = resampling\n"
      "\n"
      "[rates]\n"
      "family = site_biased\n"
      "eps = 0.5\n"
      "\n"
      "[observable]\n"
      "kind = site_bit\n"
      "\n"
      "[time]\n"
      "grid = 0.5:0.5:4\n"
      "\n"
      "[phi]\n"
      "kind = exp_pow\n"
      "beta = 1.0\n"
      "a = 1.0\n"
      "k_grid = 1 2 4\n"
      "\n"
      "[run]\n"
      "replicas = 1500\n"
      "seed = 13\n";
  run_experiment(parse_config(text), dir);
  const json s = read_json(dir + "/transference.summary.json");
  REQUIRE(s["k_results"].size() == 3);
  for (const auto& row : s["k_results"]) {
    CHECK(row["K"]["exact"] == true);
    REQUIRE(row.contains("converges"));
    if (row["converges"].get<bool>()) {
      CHECK(row["value"]["se"].is_number());
      CHECK(row["tail_bound"]["exact"] == true);
    } else {
      CHECK(row["refusal"].is_string());
    }
  }
  CHECK(s.contains("smallest_converging_k"));
  CHECK(s["phi"].is_string());
}

TEST_CASE("doubling the torus does not move a desk-scale environment curve") {
  const std::string dir = fresh_dir("double");
  const std::string text =
      "[experiment]\n"
      "name = torus-doubling\n"
      "\n"
      "[lattice]\n"
      "d = 1\n"
      "L = 4\n"
      "\n"
      "[engine]\n"
      "kind = resampling\n"
      "\n"
      "[time]\n"
      "grid = 0.5:0.5:1.5\n"
      "\n"
      "[run]\n"
      "replicas = 300\n"
      "seed = 17\n";
  const RunResult res = run_experiment(parse_config(text), dir);
  CHECK_FALSE(res.bound_violated);
  CHECK(std::find(res.artifacts.begin(), res.artifacts.end(),
                  "torus-doubling.doubled.curve.csv") != res.artifacts.end());
  const json s = read_json(dir + "/torus-doubling.summary.json");
  CHECK(s["env_shift_within_3se"] == true);
  CHECK_FALSE(s.contains("speed_L"));  // no walker without a [rates] section
}

#ifdef RWDRE_CLI_PATH

namespace {

std::pair<int, std::string> run_cli(const std::string& args) {
  const std::string cmd = std::string(RWDRE_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

}  // namespace

TEST_CASE("the command line lists, validates and runs") {
  const auto [list_code, list_out] = run_cli("list");
  CHECK(list_code == 0);
  CHECK(list_out.find("env-decay") != std::string::npos);
  CHECK(list_out.find("oracle-crosscheck") != std::string::npos);

  fs::create_directories("runner_out");
  write_file_atomic("runner_out/cli_good.ini", kEnv);
  const auto [ok_code, ok_out] = run_cli("validate --config runner_out/cli_good.ini");
  CHECK(ok_code == 0);
  CHECK(ok_out.find("ok") != std::string::npos);

  std::string bad = kEnv;
  bad.replace(bad.find("replicas = 400"), 14, "replicas = 0");
  write_file_atomic("runner_out/cli_bad.ini", bad);
  const auto [bad_code, bad_out] = run_cli("validate --config runner_out/cli_bad.ini");
  CHECK(bad_code == 1);
  CHECK(bad_out.find("replicas must be >= 1") != std::string::npos);
  CHECK(bad_out.find("line") != std::string::npos);

  const std::string dir = fresh_dir("cli_run");
  const auto [run_code, run_out] =
      run_cli("run --config runner_out/cli_good.ini --out " + dir + " --seed 123 --replicas 25");
  CHECK(run_code == 0);
  CHECK(run_out.find("wrote " + dir + "/manifest.json") != std::string::npos);
  const json m = read_json(dir + "/manifest.json");
  const std::string canon = m["config"].get<std::string>();
  CHECK(canon.find("seed = 123") != std::string::npos);
  CHECK(canon.find("replicas = 25") != std::string::npos);
}

#endif  // RWDRE_CLI_PATH
