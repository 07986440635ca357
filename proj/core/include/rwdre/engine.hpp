#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rwdre/decay.hpp"
#include "rwdre/lattice.hpp"
#include "rwdre/rng.hpp"

namespace rwdre {

// Stack of independent binary layers: per-layer resample rate alpha[n] and
// metric weight gamma[n]. Weights are normalized over the kept layers;
// tail_mass records the weight of the discarded infinite tail and
// asymptotic_order the polynomial decay order of the represented family.
struct LayerSpec {
  std::uint32_t n_layers = 1;
  std::vector<double> alpha;
  std::vector<double> gamma;
  double tail_mass = 0.0;
  double asymptotic_order = std::numeric_limits<double>::infinity();

  // alpha_n = 1/n, gamma_n proportional to n^{-(order+1)}.
  static LayerSpec power_law(double order, std::uint32_t n_layers);
  static LayerSpec single(double lambda);

  void validate() const;
  SiteMetric metric() const;
};

struct StackBound {
  double value = 0.0;
  double tail_mass = 0.0;
};

// 2 sum_n gamma_n e^{-alpha_n t} over the kept layers, with the truncation's
// discarded weight reported alongside.
StackBound stack_decay_bound(const LayerSpec& spec, double t);

// A translation-invariant environment: single-chain dynamics plus the
// synchronous pair dynamics (shared clocks, shared values or uniforms). The
// pair law is Markov, so each marginal restarts as the single chain at any
// stopping time by construction. `pair_offset` couples site s of the first
// copy with site s + offset of the second; estimators use 0, the walker
// coupling re-aligns it after a restart.
class EnvironmentEngine {
 public:
  virtual ~EnvironmentEngine() = default;

  const std::string& name() const { return name_; }
  StateKind kind() const { return kind_; }
  std::uint32_t n_layers() const { return n_layers_; }
  const SiteMetric& metric() const { return metric_; }
  // Equal inputs evolve identically under the pair dynamics.
  bool coalescing() const { return true; }

  // Exact-in-law endpoint evolution over an interval.
  virtual void evolve_inplace(Configuration& c, double dt, RngStream& rng) const = 0;
  virtual void evolve_pair_inplace(Configuration& c1, Configuration& c2, double dt,
                                   RngStream& rng, const Site& pair_offset = kOrigin) const = 0;

  // Event view for joint simulation with other clocks: total update rate and
  // one update applied at the current instant.
  virtual double event_rate(const Configuration& c) const = 0;
  virtual void apply_event(Configuration& c, RngStream& rng) const = 0;
  virtual void apply_event_pair(Configuration& c1, Configuration& c2, RngStream& rng,
                                const Site& pair_offset = kOrigin) const = 0;

  // True when sites evolve independently (enables lazy per-site evolution).
  virtual bool independent_sites() const { return false; }
  // Per-layer resample rates for independent-site engines; empty otherwise.
  virtual std::span<const double> layer_rates() const { return {}; }

  // Exact coupling decay of the maximally different pair at one site, when
  // the engine knows it in closed form.
  virtual std::optional<DecayModel> exact_decay() const { return std::nullopt; }

  // Enumerates all single-site transitions out of `c` (new site bits, rate);
  // the exact-solver assembles generators from this.
  virtual void for_each_transition(
      const Configuration& c,
      const std::function<void(std::int64_t site, std::uint64_t new_bits, double rate)>& cb)
      const = 0;

  // One site drawn from the stationary single-site law. Exact for the
  // independent-site engines; interacting engines return their neutral
  // product init and need burn-in.
  virtual std::uint64_t stationary_site_sample(RngStream& rng) const = 0;

  Configuration make_config(const TorusLattice& lat, std::uint64_t fill = 0) const {
    return Configuration(lat, kind_, n_layers_, fill);
  }

  void check_compatible(const Configuration& c) const;

 protected:
  EnvironmentEngine(std::string name, StateKind kind, std::uint32_t layers, SiteMetric metric)
      : name_(std::move(name)), kind_(kind), n_layers_(layers), metric_(std::move(metric)) {}

 private:
  std::string name_;
  StateKind kind_;
  std::uint32_t n_layers_;
  SiteMetric metric_;
};

using EnginePtr = std::shared_ptr<const EnvironmentEngine>;

// The pair view of an engine's synchronous coupling.
struct CouplingKernel {
  EnginePtr engine;

  bool coalescing() const { return engine->coalescing(); }
  void evolve_pair_inplace(Configuration& c1, Configuration& c2, double dt, RngStream& rng,
                           const Site& pair_offset = kOrigin) const {
    engine->evolve_pair_inplace(c1, c2, dt, rng, pair_offset);
  }
};

// Each site resamples to Bernoulli(1/2) at rate lambda; the pair shares the
// clock and the new value per site.
EnginePtr make_resampling_engine(double lambda);

// Heat-bath single-site updates at rate lambda per site with the
// nearest-neighbor conditional at inverse temperature beta; the pair shares
// clocks, site choices, and uniforms (monotone coupling).
EnginePtr make_glauber_engine(double beta, double lambda);

// Independent stack of resampling layers under the spec's weighted metric.
EnginePtr make_layered_engine(LayerSpec spec);

// Degenerate engine with no dynamics; for calibration against closed forms.
EnginePtr make_frozen_engine();

inline CouplingKernel kernel_of(EnginePtr engine) { return CouplingKernel{std::move(engine)}; }

// Value-semantics wrappers over the in-place evolutions.
Configuration evolve(const EnvironmentEngine& engine, Configuration c, double t, RngStream& rng);
std::pair<Configuration, Configuration> evolve_pair(const CouplingKernel& kernel, Configuration c1,
                                                    Configuration c2, double t, RngStream& rng);

}  // namespace rwdre
