#include "rwdre/config.hpp"

#include <string>
#include <vector>

#include "doctest.h"
#include "rwdre/errors.hpp"

using namespace rwdre;

namespace {

std::vector<ConfigIssue> issues_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.issues();
  }
  return {};
}

bool has_issue(const std::vector<ConfigIssue>& v, const std::string& fragment) {
  for (const auto& i : v) {
    if (i.message.find(fragment) != std::string::npos) return true;
  }
  return false;
}

const std::string kEnvDecay =
    "[experiment]\n"
    "name = env-decay\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 8\n"
    "\n"
    "[engine]\n"
    "kind = resampling\n"
    "lambda = 1.0\n"
    "\n"
    "[time]\n"
    "grid = 0.5:0.5:2\n"
    "\n"
    "[run]\n"
    "replicas = 4\n"
    "seed = 7\n";

const std::string kSpeed =
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

}  // namespace

TEST_CASE("minimal config parses with defaults filled in") {
  const auto cfg = parse_config(kEnvDecay);
  CHECK(cfg.experiment == "env-decay");
  CHECK(cfg.d == 1);
  CHECK(cfg.L == 8);
  CHECK(cfg.wrap_allowed);
  CHECK(cfg.engine_kind == "resampling");
  CHECK(cfg.lambda == doctest::Approx(1.0));
  CHECK(cfg.strategy == "extremal");
  REQUIRE(cfg.grid.size() == 4);
  CHECK(cfg.grid[0] == doctest::Approx(0.5));
  CHECK(cfg.grid[3] == doctest::Approx(2.0));
  CHECK(cfg.replicas == 4);
  CHECK(cfg.seed == 7);
  CHECK(cfg.tau_replicas == 400);
  CHECK_FALSE(cfg.dump_trajectories);
  CHECK_FALSE(cfg.has_rates);
}

TEST_CASE("explicit jump rates are read in declaration order") {
  const auto cfg = parse_config(kSpeed);
  REQUIRE(cfg.has_rates);
  REQUIRE(cfg.rates.n_jumps() == 2);
  CHECK(cfg.rates.jumps[0][0] == 1);
  CHECK(cfg.rates.jumps[1][0] == -1);
  CHECK(cfg.has_horizon);
  CHECK(cfg.horizon == doctest::Approx(600.0));
  CHECK(cfg.burn_in == doctest::Approx(5.0));
}

TEST_CASE("canonical text is a fixpoint of the parser") {
  const auto once = parse_config(kEnvDecay);
  const auto twice = parse_config(once.canonical_text);
  CHECK(twice.canonical_text == once.canonical_text);

  const auto s1 = parse_config(kSpeed);
  const auto s2 = parse_config(s1.canonical_text);
  CHECK(s2.canonical_text == s1.canonical_text);
}

TEST_CASE("unknown key reports its line and column") {
  std::string text = kEnvDecay;
  text.insert(text.find("L = 8"), "bogus = 3\n");  // becomes line 5 in [lattice]
  const auto v = issues_of(text);
  REQUIRE(v.size() == 1);
  CHECK(v[0].message == "unknown key 'bogus' in [lattice]");
  CHECK(v[0].line == 6);
  CHECK(v[0].col == 1);
  CHECK(v[0].render() == "line 6, col 1: unknown key 'bogus' in [lattice]");
}

TEST_CASE("unknown section is one issue, its body swallowed") {
  const std::string text = kEnvDecay + "\n[wat]\nstuff = 1\nmore = 2\n";
  const auto v = issues_of(text);
  REQUIRE(v.size() == 1);
  CHECK(has_issue(v, "unknown section [wat]"));
}

TEST_CASE("duplicate key names the first occurrence") {
  std::string text = kEnvDecay;
  text.insert(text.find("\n[engine]"), "L = 16\n");
  const auto v = issues_of(text);
  REQUIRE(v.size() == 1);
  CHECK(has_issue(v, "duplicate key 'L' in [lattice] (first at line 6"));
}

TEST_CASE("zero replicas is rejected by name") {
  std::string text = kEnvDecay;
  text.replace(text.find("replicas = 4"), 12, "replicas = 0");
  const auto v = issues_of(text);
  REQUIRE(v.size() == 1);
  CHECK(has_issue(v, "replicas must be >= 1"));
}

TEST_CASE("a jump with both a rate and a table names the jump") {
  std::string text = kSpeed;
  text.insert(text.find("\n[time]"), "window = 0\ntable.0 = 1 1\n");
  const auto v = issues_of(text);
  CHECK(has_issue(v, "jump 1: both 'rate.0' and 'table.0' given; pick one"));
}

TEST_CASE("family and explicit jumps conflict") {
  std::string text = kSpeed;
  text.insert(text.find("jumps = 1 -1"), "family = site_biased\neps = 0.5\n");
  const auto v = issues_of(text);
  CHECK(has_issue(v, "key 'jumps' conflicts with 'family' in [rates]"));
  CHECK(has_issue(v, "key 'rate.0' conflicts with 'family' in [rates]"));
}

TEST_CASE("rate index beyond the declared jumps is flagged") {
  std::string text = kSpeed;
  text.insert(text.find("\n[time]"), "rate.2 = 1.0\n");
  const auto v = issues_of(text);
  CHECK(has_issue(v, "'rate.2' refers to jump 2 but only 2 jump(s) are declared"));
}

TEST_CASE("a jump with no rate at all is flagged") {
  std::string text = kSpeed;
  text.erase(text.find("rate.1 = 0.8\n"), 13);
  const auto v = issues_of(text);
  CHECK(has_issue(v, "jump -1: no rate given"));
}

TEST_CASE("experiments report every missing section they need") {
  std::string text = kSpeed;
  const auto at = text.find("[rates]");
  text.erase(at, text.find("\n[time]") - at);
  const auto v = issues_of(text);
  REQUIRE(v.size() == 1);
  CHECK(has_issue(v, "missing required section [rates] for experiment 'speed'"));
  CHECK(v[0].line == 0);  // no single line to point at
}

TEST_CASE("missing grid or horizon points at the [time] section") {
  std::string text = kSpeed;
  text.replace(text.find("horizon = 600"), 13, "burn = 600");
  const auto v = issues_of(text);
  CHECK(has_issue(v, "unknown key 'burn' in [time]"));
  CHECK(has_issue(v, "missing required key 'horizon' in [time] for experiment 'speed'"));
}

TEST_CASE("site tuples must match the dimension") {
  std::string text =
      "[experiment]\n"
      "name = ep-decay\n"
      "\n"
      "[lattice]\n"
      "d = 2\n"
      "L = 4\n"
      "\n"
      "[engine]\n"
      "kind = resampling\n"
      "\n"
      "[rates]\n"
      "jumps = (1,0) (-1,0)\n"
      "rate.0 = 1.0\n"
      "rate.1 = 1.0\n"
      "\n"
      "[observable]\n"
      "kind = site_bit\n"
      "site = 3\n"
      "\n"
      "[time]\n"
      "grid = 1 2\n"
      "\n"
      "[run]\n"
      "replicas = 2\n";
  const auto v = issues_of(text);
  CHECK(has_issue(v, "site '3' must be a (..) tuple when d = 2"));

  text.replace(text.find("site = 3"), 8, "site = (1,1)");
  const auto cfg = parse_config(text);
  CHECK(cfg.has_observable);
  CHECK(cfg.d == 2);
}

TEST_CASE("grid accepts a range or an increasing list, nothing else") {
  std::string bad = kEnvDecay;
  bad.replace(bad.find("grid = 0.5:0.5:2"), 16, "grid = 2 1");
  CHECK(has_issue(issues_of(bad), "grid times must be strictly increasing"));

  bad = kEnvDecay;
  bad.replace(bad.find("grid = 0.5:0.5:2"), 16, "grid = 1:0:2");
  CHECK(has_issue(issues_of(bad), "grid range needs start >= 0, step > 0, stop >= start"));

  std::string list = kEnvDecay;
  list.replace(list.find("grid = 0.5:0.5:2"), 16, "grid = 0.25 1 4");
  const auto cfg = parse_config(list);
  REQUIRE(cfg.grid.size() == 3);
  CHECK(cfg.grid[1] == doctest::Approx(1.0));
}

TEST_CASE("several errors are all reported, sorted by line") {
  std::string text = kEnvDecay;
  text.replace(text.find("d = 1"), 5, "d = 9");
  text.replace(text.find("kind = resampling"), 17, "kind = resampling\nbeta = 1");
  text.replace(text.find("replicas = 4"), 12, "replicas = 0");
  const auto v = issues_of(text);
  REQUIRE(v.size() == 3);
  CHECK(v[0].message == "d must be 1, 2, or 3");
  CHECK(has_issue(v, "does not apply to engine kind 'resampling'"));
  CHECK(v[2].message == "replicas must be >= 1");
  CHECK(v[0].line < v[1].line);
  CHECK(v[1].line < v[2].line);
}

TEST_CASE("the error message bundles every issue") {
  std::string text = kEnvDecay;
  text.replace(text.find("replicas = 4"), 12, "replicas = 0");
  text.replace(text.find("seed = 7"), 8, "seed = x");
  try {
    parse_config(text);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("invalid config (2 issues)") != std::string::npos);
    CHECK(what.find("replicas must be >= 1") != std::string::npos);
  }
}

TEST_CASE("glauber needs beta, layered needs order and layers") {
  std::string text = kEnvDecay;
  text.replace(text.find("kind = resampling\nlambda = 1.0"), 30, "kind = glauber");
  CHECK(has_issue(issues_of(text), "glauber engine needs 'beta'"));

  text = kEnvDecay;
  text.replace(text.find("kind = resampling\nlambda = 1.0"), 30, "kind = layered\norder = 3");
  CHECK(has_issue(issues_of(text), "layered engine needs 'layers'"));
}

TEST_CASE("unknown experiment points at the listing") {
  std::string text = kEnvDecay;
  text.replace(text.find("name = env-decay"), 16, "name = env-decayy");
  const auto v = issues_of(text);
  CHECK(has_issue(v, "unknown experiment 'env-decayy' (see 'rwdre list')"));
}

TEST_CASE("continuity requires matching jump sets in both rate sections") {
  std::string text =
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
      "jumps = 1\n"
      "rate.0 = 2.0\n"
      "\n"
      "[observable]\n"
      "kind = site_bit\n"
      "\n"
      "[time]\n"
      "horizon = 80\n"
      "burn_in = 10\n"
      "\n"
      "[run]\n"
      "replicas = 10\n";
  const auto v = issues_of(text);
  CHECK(has_issue(v, "[rates_b] must declare the same jump set as [rates]"));

  std::string good = text;
  good.replace(good.find("jumps = 1\nrate.0 = 2.0"), 22, "jumps = 1 -1\nrate.0 = 2.0\nrate.1 = 1.0");
  const auto cfg = parse_config(good);
  CHECK(cfg.has_rates_b);
  CHECK(cfg.rates_b.jumps == cfg.rates.jumps);
}

TEST_CASE("burn_in must sit below the horizon for continuity") {
  std::string text =
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
      "jumps = 1\n"
      "rate.0 = 2.0\n"
      "\n"
      "[rates_b]\n"
      "jumps = 1\n"
      "rate.0 = 2.1\n"
      "\n"
      "[observable]\n"
      "kind = site_bit\n"
      "\n"
      "[time]\n"
      "horizon = 40\n"
      "burn_in = 40\n"
      "\n"
      "[run]\n"
      "replicas = 10\n";
  CHECK(has_issue(issues_of(text), "burn_in must be smaller than horizon"));
}

TEST_CASE("phi defaults its scale grid when none is given") {
  std::string text =
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
      "grid = 0.5:0.5:3\n"
      "\n"
      "[phi]\n"
      "kind = exp_pow\n"
      "beta = 1.0\n"
      "a = 1.0\n"
      "\n"
      "[run]\n"
      "replicas = 4\n";
  const auto cfg = parse_config(text);
  REQUIRE(cfg.has_phi);
  REQUIRE(cfg.k_grid.size() == 7);
  CHECK(cfg.k_grid.front() == doctest::Approx(1.0));
  CHECK(cfg.k_grid.back() == doctest::Approx(64.0));
  const auto again = parse_config(cfg.canonical_text);
  CHECK(again.canonical_text == cfg.canonical_text);
}

TEST_CASE("empty values and bad headers are caught in the token pass") {
  const std::string text = "[experiment\nname =\n";
  const auto v = issues_of(text);
  CHECK(has_issue(v, "unterminated section header"));
  CHECK(has_issue(v, "key 'name' outside any [section]"));
}

TEST_CASE("override replaces run keys in place") {
  const std::string out = override_run_keys(kEnvDecay, {{"seed", "99"}});
  CHECK(out.find("seed = 99") != std::string::npos);
  CHECK(out.find("seed = 7") == std::string::npos);
  CHECK(out.find("replicas = 4") != std::string::npos);
  const auto cfg = parse_config(out);
  CHECK(cfg.seed == 99);
}

TEST_CASE("override appends keys the run section lacks") {
  const std::string out = override_run_keys(kEnvDecay, {{"dump_trajectories", "true"}});
  const auto cfg = parse_config(out);
  CHECK(cfg.dump_trajectories);
  CHECK(cfg.seed == 7);
}

TEST_CASE("override creates the run section when missing") {
  std::string text = kEnvDecay;
  const auto at = text.find("[run]");
  text.erase(at);
  const std::string out =
      override_run_keys(text, {{"replicas", "2"}, {"seed", "5"}});
  const auto cfg = parse_config(out);
  CHECK(cfg.replicas == 2);
  CHECK(cfg.seed == 5);
}

TEST_CASE("layer_bit observables must fit the engine's layer count") {
  std::string text =
      "[experiment]\n"
      "name = ep-decay\n"
      "\n"
      "[lattice]\n"
      "d = 1\n"
      "L = 4\n"
      "\n"
      "[engine]\n"
      "kind = layered\n"
      "order = 3\n"
      "layers = 4\n"
      "\n"
      "[rates]\n"
      "jumps = 1\n"
      "rate.0 = 1.0\n"
      "\n"
      "[observable]\n"
      "kind = layer_bit\n"
      "layer = 7\n"
      "\n"
      "[time]\n"
      "grid = 1 2\n"
      "\n"
      "[run]\n"
      "replicas = 2\n";
  CHECK(has_issue(issues_of(text), "layer 7 out of range for an engine with 4 layer(s)"));
}
