#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rwdre/engine.hpp"
#include "rwdre/errors.hpp"
#include "rwdre/estimators.hpp"
#include "rwdre/local_function.hpp"
#include "rwdre/rates.hpp"

namespace rwdre {

struct ConfigIssue {
  int line = 0;  // 1-based; 0 when the problem has no source position
  int col = 0;
  std::string message;

  std::string render() const;  // "line L, col C: message"
};

// Carries every problem found in one parse, not just the first.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<ConfigIssue> issues);
  const std::vector<ConfigIssue>& issues() const { return issues_; }

 private:
  std::vector<ConfigIssue> issues_;
};

// A fully resolved experiment description. Field groups mirror the config
// sections; canonical_text reparses to an identical object, so a manifest
// that embeds it reproduces the run.
struct ExperimentConfig {
  std::string experiment;

  int d = 1;
  std::int64_t L = 0;
  bool wrap_allowed = true;  // torus wrap accepted (desk scale) vs enforced away

  std::string engine_kind;  // resampling | glauber | layered | frozen
  double lambda = 1.0;
  double glauber_beta = 0.0;
  double layer_order = 3.0;
  std::uint32_t layers = 1;

  bool has_rates = false;
  RateFunction rates;
  bool has_rates_b = false;  // perturbed family for the continuity experiment
  RateFunction rates_b;

  bool has_observable = false;
  LocalFunction observable;

  std::vector<double> grid;
  double horizon = 0.0;
  bool has_horizon = false;
  double burn_in = 50.0;
  double tau_horizon = 60.0;

  std::string strategy = "extremal";  // extremal | single_site | random_pairs | supremum | equal
  int random_pairs = 16;

  bool has_phi = false;
  Phi phi;
  std::vector<double> k_grid;

  std::size_t replicas = 1;
  std::uint64_t seed = 0;
  std::size_t tau_replicas = 400;
  bool dump_trajectories = false;
  bool export_generator = false;

  std::string canonical_text;

  TorusLattice lattice() const { return TorusLattice(d, L); }
  EnginePtr make_engine() const;
};

// Strict parse: INI-like sections, typed keys, unknown keys rejected; every
// issue carries a line and column. Throws ConfigError listing all of them.
ExperimentConfig parse_config(const std::string& text);

// Re-serializes `text` with the given [run] keys replaced or appended, so
// command-line overrides flow through the same single parse path.
std::string override_run_keys(const std::string& text,
                              const std::vector<std::pair<std::string, std::string>>& kv);

}  // namespace rwdre
