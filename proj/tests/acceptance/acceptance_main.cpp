// End-to-end acceptance harness: eleven independent checks of the laboratory
// against closed forms, the enumeration oracle, and itself. Prints exactly
// one [PASS]/[FAIL] line per check and exits nonzero when any fail.
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "rwdre/config.hpp"
#include "rwdre/decay.hpp"
#include "rwdre/engine.hpp"
#include "rwdre/errors.hpp"
#include "rwdre/io.hpp"
#include "rwdre/local_function.hpp"
#include "rwdre/oracle.hpp"
#include "rwdre/rates.hpp"
#include "rwdre/rng.hpp"
#include "rwdre/runner.hpp"

using json = nlohmann::json;
using namespace rwdre;
namespace fs = std::filesystem;

namespace {

constexpr const char* kOutRoot = "acceptance_out";

struct Harness {
  int failed = 0;
  // Everything run through the runner, replayed verbatim by the last check.
  std::vector<std::pair<std::string, std::string>> runs;  // config text, out dir

  json run(const std::string& text, const std::string& dir) {
    const ExperimentConfig cfg = parse_config(text);
    const std::string out = std::string(kOutRoot) + "/" + dir;
    run_experiment(cfg, out);
    runs.emplace_back(text, dir);
    return json::parse(read_file(out + "/" + cfg.experiment + ".summary.json"));
  }

  void report(int n, bool ok, const std::string& what) {
    std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", n, what.c_str());
    if (!ok) ++failed;
  }

  void check(int n, const std::string& what, const std::function<bool()>& body) {
    bool ok = false;
    std::string note = what;
    try {
      ok = body();
    } catch (const std::exception& e) {
      note = what + " (" + e.what() + ")";
    }
    report(n, ok, note);
  }
};

// --------------------------------------------------------------------------
// Check 1: the pair evolution's first marginal is the plain evolution.

struct MarginalSample {
  std::array<double, 3> p_single{}, se_single{}, p_pair{}, se_pair{};
};

MarginalSample coupling_marginal(std::uint64_t seed) {
  const TorusLattice lat(1, 8);
  const EnginePtr engine = make_resampling_engine(1.0);
  const CouplingKernel kernel = kernel_of(engine);
  const std::array<double, 3> ts{0.5, 1.0, 2.0};
  const std::size_t R = 10'000;
  const std::uint64_t full = (std::uint64_t{1} << engine->n_layers()) - 1;

  MarginalSample out;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    double hits1 = 0, hits2 = 0;
    for (std::size_t r = 0; r < R; ++r) {
      RngStream rng1(seed, i * R + r, StreamPurpose::environment);
      Configuration c = evolve(*engine, engine->make_config(lat, 0), ts[i], rng1);
      hits1 += double(c.at(0) & 1u);

      RngStream rng2(seed, 500'000 + i * R + r, StreamPurpose::environment);
      auto [a, b] = evolve_pair(kernel, engine->make_config(lat, 0),
                                engine->make_config(lat, full), ts[i], rng2);
      hits2 += double(a.at(0) & 1u);
    }
    const double p1 = hits1 / double(R), p2 = hits2 / double(R);
    out.p_single[i] = p1;
    out.se_single[i] = std::sqrt(p1 * (1 - p1) / double(R));
    out.p_pair[i] = p2;
    out.se_pair[i] = std::sqrt(p2 * (1 - p2) / double(R));
  }
  return out;
}

bool marginals_agree(const MarginalSample& m) {
  for (int i = 0; i < 3; ++i) {
    const double tol = 3 * std::hypot(m.se_single[i], m.se_pair[i]) + 1e-12;
    if (std::abs(m.p_single[i] - m.p_pair[i]) > tol) return false;
  }
  return true;
}

// --------------------------------------------------------------------------
// Shared small helpers.

double loglog_slope(const std::vector<double>& t, const std::vector<double>& y, double lo,
                    double hi) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < lo - 1e-9 || t[i] > hi + 1e-9) continue;
    if (!(y[i] > 0)) return 0.0;  // a nonpositive point sinks the fit
    const double x = std::log(t[i]), v = std::log(y[i]);
    sx += x;
    sy += v;
    sxx += x * x;
    sxy += x * v;
    ++n;
  }
  if (n < 2) return 0.0;
  const double dn = double(n);
  return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

// --------------------------------------------------------------------------
// The experiment configs, one string per run.

const std::string kEnvExactCfg =
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
    "lambda = 1.0\n"
    "\n"
    "[time]\n"
    "grid = 0.5:0.5:4\n"
    "\n"
    "[run]\n"
    "replicas = 10000\n"
    "seed = 101\n";

const std::string kLayeredCfg =
    "[experiment]\n"
    "name = env-decay\n"
    "strategy = single_site\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 4\n"
    "\n"
    "[engine]\n"
    "kind = layered\n"
    "order = 3.0\n"
    "layers = 50\n"
    "\n"
    "[time]\n"
    "grid = 1 2 3 5 7 10 14 20 28 35 42 50\n"
    "\n"
    "[run]\n"
    "replicas = 2000\n"
    "seed = 202\n";

const std::string kSpeedOracleCfg =
    "[experiment]\n"
    "name = oracle-crosscheck\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 3\n"
    "\n"
    "[engine]\n"
    "kind = resampling\n"
    "lambda = 1.0\n"
    "\n"
    "[rates]\n"
    "family = site_biased\n"
    "eps = 1.0\n"
    "\n"
    "[time]\n"
    "horizon = 10000\n"
    "burn_in = 50\n"
    "\n"
    "[run]\n"
    "replicas = 16\n"
    "seed = 404\n";

const std::string kDiffusionOracleCfg =
    "[experiment]\n"
    "name = oracle-crosscheck\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 3\n"
    "\n"
    "[engine]\n"
    "kind = resampling\n"
    "lambda = 1.0\n"
    "\n"
    "[rates]\n"
    "family = site_biased\n"
    "eps = 1.0\n"
    "\n"
    "[time]\n"
    "grid = 10:10:200\n"
    "horizon = 100\n"
    "burn_in = 50\n"
    "\n"
    "[run]\n"
    "replicas = 10000\n"
    "seed = 505\n";

const std::string kDecouplingCfg =
    "[experiment]\n"
    "name = decoupling\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 31\n"
    "\n"
    "[engine]\n"
    "kind = resampling\n"
    "lambda = 1.0\n"
    "\n"
    "[rates]\n"
    "family = site_biased\n"
    "eps = 0.1\n"
    "\n"
    "[time]\n"
    "grid = 10:10:100\n"
    "\n"
    "[run]\n"
    "replicas = 10000\n"
    "seed = 606\n";

const std::string kEpDecayCfg =
    "[experiment]\n"
    "name = ep-decay\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 3\n"
    "\n"
    "[engine]\n"
    "kind = resampling\n"
    "lambda = 1.0\n"
    "\n"
    "[rates]\n"
    "family = site_biased\n"
    "eps = 1.0\n"
    "\n"
    "[observable]\n"
    "kind = site_bit\n"
    "site = 0\n"
    "\n"
    "[time]\n"
    "grid = 0.5 1 2 4\n"
    "\n"
    "[run]\n"
    "replicas = 20000\n"
    "seed = 707\n";

const std::string kTransferBiasedCfg =
    "[experiment]\n"
    "name = transference\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 3\n"
    "\n"
    "[engine]\n"
    "kind = resampling\n"
    "lambda = 1.0\n"
    "\n"
    "[rates]\n"
    "family = site_biased\n"
    "eps = 1.0\n"
    "\n"
    "[observable]\n"
    "kind = site_bit\n"
    "\n"
    "[time]\n"
    "grid = 0.5:0.5:6\n"
    "\n"
    "[phi]\n"
    "kind = exp_pow\n"
    "beta = 1.0\n"
    "a = 1.0\n"
    "\n"
    "[run]\n"
    "replicas = 20000\n"
    "seed = 808\n";

const std::string kTransferControlCfg =
    "[experiment]\n"
    "name = transference\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 9\n"
    "\n"
    "[engine]\n"
    "kind = resampling\n"
    "lambda = 1.0\n"
    "\n"
    "[rates]\n"
    "jumps = 1 -1\n"
    "rate.0 = 1.5\n"
    "rate.1 = 0.5\n"
    "\n"
    "[observable]\n"
    "kind = site_bit\n"
    "\n"
    "[time]\n"
    "grid = 0 0.5 1 1.5 2 2.5 3 4 5.5 7.5\n"
    "\n"
    "[phi]\n"
    "kind = exp_pow\n"
    "beta = 1.0\n"
    "a = 1.0\n"
    "\n"
    "[run]\n"
    "replicas = 400000\n"
    "seed = 809\n";

std::string continuity_cfg(const std::string& rates_a, const std::string& rates_b,
                           std::uint64_t seed) {
  return "[experiment]\n"
         "name = continuity\n"
         "\n"
         "[lattice]\n"
         "d = 1\n"
         "L = 5\n"
         "\n"
         "[engine]\n"
         "kind = resampling\n"
         "lambda = 1.0\n"
         "\n"
         "[rates]\n" +
         rates_a +
         "\n"
         "[rates_b]\n" +
         rates_b +
         "\n"
         "[observable]\n"
         "kind = site_bit\n"
         "\n"
         "[time]\n"
         "horizon = 200\n"
         "burn_in = 50\n"
         "tau_horizon = 60\n"
         "\n"
         "[run]\n"
         "replicas = 100\n"
         "seed = " +
         std::to_string(seed) +
         "\n"
         "tau_replicas = 400\n";
}

const std::string kDoublingEnvCfg =
    "[experiment]\n"
    "name = torus-doubling\n"
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
    "grid = 0.5:0.5:4\n"
    "\n"
    "[run]\n"
    "replicas = 10000\n"
    "seed = 1001\n";

const std::string kDoublingSpeedCfg =
    "[experiment]\n"
    "name = torus-doubling\n"
    "\n"
    "[lattice]\n"
    "d = 1\n"
    "L = 3\n"
    "\n"
    "[engine]\n"
    "kind = resampling\n"
    "lambda = 1.0\n"
    "\n"
    "[rates]\n"
    "family = site_biased\n"
    "eps = 1.0\n"
    "\n"
    "[time]\n"
    "grid = 1 2\n"
    "horizon = 10000\n"
    "burn_in = 50\n"
    "\n"
    "[run]\n"
    "replicas = 16\n"
    "seed = 1002\n";

}  // namespace

int main() {
  fs::remove_all(kOutRoot);
  Harness h;

  // 1. Marginal law of the synchronous pair evolution.
  MarginalSample first_pass;
  h.check(1, "pair evolution marginal matches single evolution within 3 s.e.", [&] {
    first_pass = coupling_marginal(42);
    return marginals_agree(first_pass);
  });

  // 2. Measured environment decay against the closed form e^{-t}.
  h.check(2, "single-site discrepancy decay matches e^{-t} at 8 grid points", [&] {
    const json s = h.run(kEnvExactCfg, "c2_env_exact");
    return s.at("exact_within_3se").get<bool>() && !s.at("bound_violated").get<bool>();
  });

  // 3. Layered stack: curve below twice the weighted bound, polynomial order.
  h.check(3, "layered curve obeys the stack bound with log-log slope near -3", [&] {
    const json s = h.run(kLayeredCfg, "c3_layered");
    const auto exact =
        make_layered_engine(LayerSpec::power_law(3.0, 50))->exact_decay();
    if (!exact) return false;
    const auto t = s.at("curve").at("times").get<std::vector<double>>();
    const auto est = s.at("curve").at("estimates").get<std::vector<double>>();
    const auto se = s.at("curve").at("se").get<std::vector<double>>();
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (est[i] > 2 * exact->eval(t[i]) + 3 * se[i] + 1e-12) return false;
    }
    const double slope = loglog_slope(t, est, 5.0, 50.0);
    return slope >= -3.5 && slope <= -2.5 && !s.at("bound_violated").get<bool>();
  });

  // 4. Trajectory speed against the exact stationary solve, tight s.e.
  h.check(4, "measured speed matches the enumeration oracle with s.e. <= 0.01", [&] {
    const json s = h.run(kSpeedOracleCfg, "c4_speed");
    const json& sp = s.at("speed");
    return sp.at("within_3se").get<bool>() && sp.at("forms_agree").get<bool>() &&
           sp.at("mc").at(0).at("se").get<double>() <= 0.01 &&
           !s.at("bound_violated").get<bool>();
  });

  // 5. Replica diffusion against the moment-ODE solve, nondegenerate.
  h.check(5, "replica diffusion matches the moment ODEs and is nondegenerate", [&] {
    const json s = h.run(kDiffusionOracleCfg, "c5_diffusion");
    const json& d = s.at("diffusion");
    return d.at("within_tolerance").get<bool>() && d.at("clt_condition").get<bool>() &&
           d.at("nondegenerate").get<bool>() && !s.at("bound_violated").get<bool>();
  });

  // 6. Decoupling survival above its certified analytic floor.
  h.check(6, "weakly coupled walkers stay together at least as often as certified", [&] {
    const json s = h.run(kDecouplingCfg, "c6_decoupling");
    return s.at("verdict").get<bool>() && !s.at("bound_violated").get<bool>();
  });

  // 7. Walker-frame decay against the exact semigroup, integrable in time.
  h.check(7, "frame decay matches the exact semigroup; its time integral is finite", [&] {
    const TorusLattice lat(1, 3);
    const StateIndex idx(lat);
    const EnginePtr engine = make_resampling_engine(1.0);
    const GeneratorMatrix env_gen = build_env_generator(*engine, idx);
    const RateFunction rates = RateFunction::site_biased(1.0);
    const GeneratorMatrix ep_gen = build_ep_generator(env_gen, rates, idx);
    const Eigen::VectorXd f = function_vector(LocalFunction::site_bit(kOrigin), idx);
    const std::uint64_t lo = 0, hi = idx.n_states() - 1;
    auto gap = [&](double t) {
      return std::abs(exact_ep_semigroup(ep_gen, f, lo, t) -
                      exact_ep_semigroup(ep_gen, f, hi, t));
    };

    // Quadrature over a window where the semigroup tolerance is negligible
    // next to the gap itself, then an exponential extrapolation for the rest.
    const double head = adaptive_simpson(gap, 0.0, 12.0, 1e-8);
    const double d8 = gap(8.0), d12 = gap(12.0);
    if (!std::isfinite(head) || !(d12 > 0) || !(d8 > d12)) return false;
    const double rate = std::log(d8 / d12) / 4.0;
    if (!(rate > 0)) return false;
    const double integral = head + d12 * (1.0 - std::exp(-rate * 38.0)) / rate;
    const double tail = d12 * std::exp(-rate * 38.0) / rate;  // mass past t = 50
    if (!std::isfinite(integral) || !(tail < 1e-4)) return false;

    const json s = h.run(kEpDecayCfg, "c7_ep_decay");
    const auto t = s.at("total").at("times").get<std::vector<double>>();
    const auto est = s.at("total").at("estimates").get<std::vector<double>>();
    const auto se = s.at("total").at("se").get<std::vector<double>>();
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (std::abs(est[i] - gap(t[i])) > 3 * se[i] + 1e-12) return false;
    }
    return !s.at("bound_violated").get<bool>();
  });

  // 8. Exponentially weighted integrals: a scale that works, and the control
  //    case landing exactly at the second scale with the environment's decay.
  h.check(8, "weighted frame integral converges at a reported scale; control at K = 2", [&] {
    const json a = h.run(kTransferBiasedCfg, "c8_transfer_biased");
    if (a.at("smallest_converging_k").is_null()) return false;

    const json b = h.run(kTransferControlCfg, "c8_transfer_control");
    const json& smallest = b.at("smallest_converging_k");
    if (smallest.is_null() || smallest.at("value").get<double>() != 2.0) return false;
    const auto t = b.at("total").at("times").get<std::vector<double>>();
    const auto est = b.at("total").at("estimates").get<std::vector<double>>();
    const auto se = b.at("total").at("se").get<std::vector<double>>();
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (std::abs(est[i] - std::exp(-t[i])) > 3 * se[i] + 1e-12) return false;
    }
    return true;
  });

  // 9. Stationary-average continuity under small rate perturbations.
  h.check(9, "stationary gap below the decoupling bound for three perturbations", [&] {
    const std::string base = "family = site_biased\neps = 0.5\n";
    const double epss[3] = {0.01, 0.05, 0.1};
    for (int i = 0; i < 3; ++i) {
      char b[64];
      std::snprintf(b, sizeof b, "family = site_biased\neps = %g\n", 0.5 + epss[i]);
      const json s =
          h.run(continuity_cfg(base, b, 901 + std::uint64_t(i)), "c9_eps" + std::to_string(i));
      if (!s.at("verdict").get<bool>() || s.at("bound_violated").get<bool>()) return false;
    }
    const json ctl = h.run(continuity_cfg("jumps = 1 -1\nrate.0 = 2.0\nrate.1 = 1.0\n",
                                          "jumps = 1 -1\nrate.0 = 2.05\nrate.1 = 1.0\n", 904),
                           "c9_control");
    return ctl.at("verdict").get<bool>() &&
           ctl.at("notes").get<std::string>().find("p = 1 exactly") != std::string::npos;
  });

  // 10. Torus doubling: the desk-scale reports move by less than their noise.
  h.check(10, "doubling the torus moves no reported scalar by more than 3 s.e.", [&] {
    const json a = h.run(kDoublingEnvCfg, "c10_env");
    if (!a.at("env_shift_within_3se").get<bool>() || a.at("bound_violated").get<bool>())
      return false;
    const json b = h.run(kDoublingSpeedCfg, "c10_speed");
    return b.at("env_shift_within_3se").get<bool>() &&
           b.at("speed_shift_within_3se").get<bool>() && !b.at("bound_violated").get<bool>();
  });

  // 11. Determinism: every run above replays byte for byte from its config.
  h.check(11, "every run replays byte-identically under its recorded seed", [&] {
    const MarginalSample again = coupling_marginal(42);
    for (int i = 0; i < 3; ++i) {
      if (again.p_single[i] != first_pass.p_single[i]) return false;
      if (again.p_pair[i] != first_pass.p_pair[i]) return false;
    }
    for (const auto& [text, dir] : h.runs) {
      const ExperimentConfig cfg = parse_config(text);
      const std::string d1 = std::string(kOutRoot) + "/" + dir;
      const std::string d2 = d1 + "_replay";
      const RunResult replay = run_experiment(cfg, d2);
      for (const std::string& name : replay.artifacts) {
        const std::string b1 = read_file(d1 + "/" + name);
        const std::string b2 = read_file(d2 + "/" + name);
        if (name == "manifest.json") {
          json m1 = json::parse(b1), m2 = json::parse(b2);
          m1.erase("wall_clock_seconds");
          m2.erase("wall_clock_seconds");
          if (m1.dump() != m2.dump()) return false;
        } else if (b1 != b2) {
          return false;
        }
      }
    }
    return true;
  });

  return h.failed == 0 ? 0 : 1;
}
