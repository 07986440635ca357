#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "rwdre/engine.hpp"
#include "rwdre/rates.hpp"

namespace rwdre {

// Unwrapped lattice displacement; well-defined regardless of torus wrapping.
using Displacement = std::array<std::int64_t, 3>;

// The torus must not alias the range the coupled pair can explore (the
// sandwich walkers bound that range). `enforce` refuses undersized lattices;
// `allow_wrap` builds anyway and leaves the audit trail to the caller.
enum class TorusPolicy { enforce, allow_wrap };

struct WalkerOptions {
  double horizon = 0.0;
  TorusPolicy policy = TorusPolicy::enforce;
};

struct WalkTrajectory {
  std::vector<double> times;
  std::vector<Displacement> positions;  // absolute unwrapped positions
  std::vector<std::uint8_t> decoupled;

  void append(double t, const Displacement& x, bool dec) {
    times.push_back(t);
    positions.push_back(x);
    decoupled.push_back(dec ? 1 : 0);
  }
};

struct DecouplingResult {
  double tau = 0.0;
  bool censored = false;
};

class PairEnvironment;

// Two walkers on one coupled environment pair, driven by shared Poisson
// clocks at the supremum rates and shared uniforms, with the minimal/maximal
// sandwich walkers and decoupling bookkeeping.
//
// Invariants maintained at every event (checked, not assumed):
//   - Y- <= X^i - x0^i <= Y+ coordinatewise;
//   - before the decoupling time both walkers carry identical displacement;
//   - Y+- never read the environments, only the clock stream.
class CoupledWalkSystem {
 public:
  CoupledWalkSystem(CoupledWalkSystem&&) noexcept;
  CoupledWalkSystem& operator=(CoupledWalkSystem&&) noexcept;
  ~CoupledWalkSystem();

  // Runs the joint simulation to absolute time T, optionally recording both
  // walker trajectories.
  void advance(double T, WalkTrajectory* tr1 = nullptr, WalkTrajectory* tr2 = nullptr);

  // Runs until the walkers first diverge, or until T_max.
  void advance_until_decoupled(double T_max);

  double time() const { return t_; }
  std::optional<double> tau() const { return tau_; }

  // Displacements since construction.
  Displacement displacement1() const { return d1_; }
  Displacement displacement2() const { return d2_; }
  // Displacements since the last restart (what the sandwich bounds).
  Displacement epoch_displacement1() const;
  Displacement epoch_displacement2() const;

  Displacement y_plus() const { return yp_; }
  Displacement y_minus() const { return ym_; }

  // Worst max-norm spread of [Y-, Y+] seen so far; the torus aliases the
  // coupled pair's range once this reaches L.
  std::int64_t worst_spread() const { return worst_spread_; }
  bool spread_exceeded_torus() const { return worst_spread_ >= lat_.L; }

  int restarts() const { return restarts_; }
  // Sum of |z| over first-divergence jumps; bounds |X^1 - X^2| under the
  // restart-at-decoupling driving scheme.
  Displacement divergence_jump_abs_sum() const { return div_jump_abs_; }

  // Observables in each walker's frame at the current time.
  double eval_frame1(const LocalFunction& f);
  double eval_frame2(const LocalFunction& f);

  // Materialized environment snapshots (absolute coordinates) plus the
  // wrapped walker positions needed to re-center them.
  std::pair<Configuration, Configuration> materialized_pair();
  Site wrapped_position1() const { return w1_; }
  Site wrapped_position2() const { return w2_; }

  // Re-aligns the environment pairing so each walker sits at the origin of
  // its own frame, resets the sandwich, and opens a fresh coupling epoch.
  // UsageError when the system has not decoupled.
  void restart_after_decoupling();

  const RateNorms& norms() const { return norms_; }
  const TorusLattice& lattice() const { return lat_; }

 private:
  friend CoupledWalkSystem build_coupled_system(const Configuration&, const Site&,
                                                const Configuration&, const Site&,
                                                const RateFunction&, const CouplingKernel&,
                                                RngStream, RngStream, const WalkerOptions&);
  CoupledWalkSystem();

  void advance_impl(double T, bool stop_at_tau, WalkTrajectory* tr1, WalkTrajectory* tr2);
  double frame_rate(std::size_t iz, int which);
  void check_invariants(bool pre_tau_equal) const;

  EnginePtr engine_;
  RateFunction rates_;
  RateNorms norms_;
  TorusLattice lat_;
  std::unique_ptr<PairEnvironment> env_;
  RngStream clocks_{0, 0, StreamPurpose::aux};
  RngStream envrng_{0, 0, StreamPurpose::aux};
  Site w1_ = kOrigin, w2_ = kOrigin;
  Displacement base1_{}, base2_{};
  Displacement d1_{}, d2_{};
  Displacement x01_{}, x02_{};
  Displacement yp_{}, ym_{};
  double t_ = 0.0;
  std::optional<double> tau_;
  int restarts_ = 0;
  std::int64_t worst_spread_ = 0;
  Displacement div_jump_abs_{};
  double total_rate_ = 0.0;
  std::vector<double> cum_lambda_;
};

// Builds the extended coupling: environments eta, xi coupled sitewise by the
// kernel, walkers at x and y, clocks at the supremum rates. Refuses (under
// TorusPolicy::enforce) lattices too small for the declared horizon.
CoupledWalkSystem build_coupled_system(const Configuration& eta, const Site& x,
                                       const Configuration& xi, const Site& y,
                                       const RateFunction& rates, const CouplingKernel& kernel,
                                       RngStream clocks, RngStream env,
                                       const WalkerOptions& opt);

// First-divergence time, censored at T_max. Consumes simulation time on the
// system.
DecouplingResult decoupling_time(CoupledWalkSystem& system, double T_max);

// exp(- W * integral_0^inf (a t + 1)^d g(t) dt) with W the summed site
// weights of the rate family and a its sandwich spread rate: a lower bound
// on the probability the walkers never decouple. Refuses non-integrable g.
double decoupling_lower_bound(const RateNorms& norms, const DecayModel& g, int d);
double decoupling_lower_bound(const RateFunction& rates, const SiteMetric& m, const DecayModel& g,
                              int d);
// Same bound from a measured decay curve with a fitted tail model.
double decoupling_lower_bound(const RateNorms& norms, std::span<const double> t,
                              std::span<const double> v, const DecayModel& tail_model, int d);

// Restart scheme: re-centers the coupling at the decoupled walkers' frames.
inline CoupledWalkSystem& restart_coupling(CoupledWalkSystem& system) {
  system.restart_after_decoupling();
  return system;
}

// One walker on one environment, simulated by exact joint event-driven
// dynamics (environment events and walker clocks superposed), accumulating
// exact path integrals of the local drift and an optional observable.
class SingleWalkSystem {
 public:
  SingleWalkSystem(EnginePtr engine, RateFunction rates, Configuration init, RngStream clocks,
                   RngStream env);

  // Observable accumulated as an exact path integral in the walker frame.
  void set_observable(const LocalFunction& f);

  void advance(double T, WalkTrajectory* tr = nullptr);

  double time() const { return t_; }
  Displacement displacement() const { return d_; }
  // Exact path integral of sum_z z alpha(frame, z) dt since construction.
  std::array<double, 3> drift_integral() const { return drift_int_; }
  // Exact path integral of the observable since it was set.
  double observable_integral() const { return obs_int_; }

  double eval_frame(const LocalFunction& f) const { return f.eval(c_, w_); }
  const Configuration& config() const { return c_; }
  Site wrapped_position() const { return w_; }
  const RateNorms& norms() const { return norms_; }

 private:
  void refresh();

  EnginePtr engine_;
  RateFunction rates_;
  RateNorms norms_;
  TorusLattice lat_;
  Configuration c_;
  RngStream clocks_;
  RngStream envrng_;
  Site w_ = kOrigin;
  Displacement base_{};
  Displacement d_{};
  double t_ = 0.0;
  std::array<double, 3> drift_int_{};
  double obs_int_ = 0.0;
  std::optional<LocalFunction> obs_;
  double obs_val_ = 0.0;
  std::vector<double> alpha_now_;
  std::array<double, 3> u_now_{};
  double total_lambda_ = 0.0;
  std::vector<double> cum_lambda_;
};

}  // namespace rwdre
