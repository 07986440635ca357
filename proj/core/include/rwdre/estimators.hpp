#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rwdre/decay.hpp"
#include "rwdre/engine.hpp"
#include "rwdre/local_function.hpp"
#include "rwdre/rates.hpp"
#include "rwdre/walk.hpp"

namespace rwdre {

// How the initial environment pair is chosen. The supremum over all pairs is
// approximated, never attained, so every curve carries its strategy tag.
enum class PairStrategy {
  extremal,      // all sites minimal vs all sites maximal (all layers differ)
  single_site,   // stationary product draw, second copy flipped at the origin
  random_pairs,  // k fixed i.i.d. stationary pairs, pointwise max of the means
  equal,         // both copies share one draw; coalescing diagnostic
};

std::string pair_strategy_name(PairStrategy s);

struct DecayCurve {
  std::vector<double> times;      // strictly increasing
  std::vector<double> estimates;  // nonnegative
  std::vector<double> se;
  std::size_t replicas = 0;
  std::string strategy;

  void validate() const;
};

struct TailFit {
  DecayModel model;  // exponential or power; amp = 0 when the tail vanished
  double r2 = 1.0;
  bool ok = true;
  std::string kind;  // "exponential" | "power" | "zero"
};

// Fits a decay law to the last third of the grid (log-linear for the
// exponential, log-log for the power law; the better R^2 wins). ok = false
// when neither reaches R^2 = 0.9 or the window lacks positive points to fit.
TailFit fit_decay_tail(const DecayCurve& curve);

// Submultiplicative weight family for the weighted transference integrals:
// phi(0) = 1 and phi(s+t) <= phi(s) phi(t), checked numerically on a grid.
struct Phi {
  enum class Kind { one, exp_pow, poly };

  Kind kind = Kind::one;
  double beta = 0.0;  // exp_pow: exp(beta t^a), 0 < a <= 1, beta >= 0
  double a = 1.0;
  double b = 0.0;  // poly: (1 + t)^b, b >= 0

  static Phi one();
  static Phi exp_pow(double beta, double a);
  static Phi poly(double b);

  double eval(double t) const;
  std::string tag() const;
  void validate() const;
};

struct IntegralEstimate {
  double value = 0.0;  // truncated integral over the measured grid only
  double se = 0.0;     // conservative: weighted sum of the pointwise s.e.
  double horizon = 0.0;
  double tail_bound = 0.0;  // closed-form tail of the fitted law past the grid
  std::string phi_tag;
};

// Speed and diffusion share one report; each estimator fills its part.
struct DriftDiffusionEstimate {
  std::array<double, 3> v{};
  std::array<double, 3> v_se{};
  // Stationary-average form of the speed, after burn-in and at twice the
  // burn-in as a sensitivity check.
  std::array<double, 3> v_stationary{};
  std::array<double, 3> v_stationary_se{};
  std::array<double, 3> v_stationary_2x{};
  double burn_in = 0.0;
  bool forms_agree = true;  // trajectory vs stationary within 3 combined s.e.

  std::array<std::array<double, 3>, 3> D{};
  std::array<std::array<double, 3>, 3> D_se{};  // jackknife over replicas
  std::array<std::array<double, 3>, 3> D_batch{};
  bool batch_consistent = true;
  double smallest_eig = 0.0;  // of the active-dimension block
  double smallest_eig_se = 0.0;
  bool clt_condition = false;  // an elliptic or a.s.-positive jump exists
  bool nondegenerate = false;  // smallest_eig > 3 s.e., when the condition holds

  double horizon = 0.0;
  std::size_t replicas = 0;
  std::string notes;
};

// The walker-frame decay curve split at the first decoupling time, all four
// curves measured from the same runs: total = |E f1 - E f2|,
// coupled_term = |E 1{tau > t}(f1 - f2)|, decoupled_term the complement,
// survival = P(tau > t).
struct EpDecaySplit {
  DecayCurve total;
  DecayCurve coupled_term;
  DecayCurve decoupled_term;
  DecayCurve survival;
};

// Mean discrepancy at the origin of the synchronously coupled pair, per grid
// time. random_pairs draws `k_random` fixed pairs and takes the pointwise max.
DecayCurve estimate_env_decay(const CouplingKernel& kernel, const TorusLattice& lat,
                              std::span<const double> t_grid, std::size_t replicas,
                              PairStrategy strategy, std::uint64_t seed, int k_random = 16);

// Pointwise max of the extremal curve and k_random random-pair curves: the
// standard supremum surrogate, exact for monotone synchronous couplings.
DecayCurve estimate_env_decay_supremum(const CouplingKernel& kernel, const TorusLattice& lat,
                                       std::span<const double> t_grid, std::size_t replicas,
                                       std::uint64_t seed, int k_random = 16);

// Torus-summed discrepancy from a single-site initial difference.
DecayCurve estimate_site_decay_sum(const CouplingKernel& kernel, const TorusLattice& lat,
                                   std::span<const double> t_grid, std::size_t replicas,
                                   std::uint64_t seed);

// |E f(frame 1) - E f(frame 2)| along the coupled walker pair started at
// (eta, 0), (xi, 0); absolute value taken after averaging.
EpDecaySplit estimate_ep_decay_split(const LocalFunction& f, const Configuration& eta,
                                     const Configuration& xi, const RateFunction& rates,
                                     const CouplingKernel& kernel, std::span<const double> t_grid,
                                     std::size_t replicas, std::uint64_t seed,
                                     const WalkerOptions& opt = {});

DecayCurve estimate_ep_decay(const LocalFunction& f, const Configuration& eta,
                             const Configuration& xi, const RateFunction& rates,
                             const CouplingKernel& kernel, std::span<const double> t_grid,
                             std::size_t replicas, std::uint64_t seed,
                             const WalkerOptions& opt = {});

// Trapezoid of phi(t/K) * curve over the grid plus the closed-form tail of
// the fitted decay law. Refuses when the tail fit fails (R^2 < 0.9) or the
// fitted law is too slow for the weight, with the laws named in the message.
IntegralEstimate transference_integral(const DecayCurve& curve, const Phi& phi, double K);

// Smallest K on {1, 2, 4, ..., 64} for which the weighted integral converges.
std::optional<double> smallest_converging_k(const DecayCurve& curve, const Phi& phi);

// v from trajectory slopes X_T / T plus the stationary-average form (exact
// path integral of the local drift after burn-in); the two must agree within
// 3 combined s.e. (forms_agree). Requires T * total clock rate >= 1e3.
DriftDiffusionEstimate estimate_speed(const RateFunction& rates, const EnginePtr& engine,
                                      const TorusLattice& lat, double T, std::size_t replicas,
                                      std::uint64_t seed, double burn_in = 50.0);

// D from the replica covariance of X_T / sqrt(T), jackknife s.e., plus a
// batch-means cross-check from one long run.
DriftDiffusionEstimate estimate_diffusion(const RateFunction& rates, const EnginePtr& engine,
                                          const TorusLattice& lat, double T, std::size_t replicas,
                                          std::uint64_t seed);

struct ContinuityBudget {
  double horizon = 200.0;  // per-replica averaging time for each arm
  double burn_in = 50.0;
  std::size_t replicas = 100;
  double tau_horizon = 60.0;  // censoring horizon for the decoupling runs
  std::size_t tau_replicas = 400;
  // Decay-curve budget when the engine has no closed-form coupling decay.
  double decay_step = 0.5;
  double decay_max = 30.0;
  std::size_t decay_replicas = 400;
};

struct ContinuityReport {
  double left = 0.0;  // |mu_hat_a(f) - mu_hat_b(f)|, independent arms
  double left_se = 0.0;
  double right = 0.0;  // (C / p_hat) * beta * triple_norm(f)
  double right_se = 0.0;
  double mu_a = 0.0, mu_a_se = 0.0;
  double mu_b = 0.0, mu_b_se = 0.0;
  double p_hat = 0.0, p_hat_se = 0.0;
  double p_floor = 0.0;  // certified analytic lower bound on p
  double c_alpha = 0.0, c_alpha_se = 0.0;
  double beta = 0.0;  // sum_z sup |a - b| by window exhaustion
  double f_triple = 0.0;
  bool verdict = false;  // left <= right + 3 combined s.e.
  std::string notes;
};

// Compares the stationary-average gap of f under two rate families against
// the decoupling-based bound (C / p) * beta * triple_norm(f).
ContinuityReport continuity_experiment(const RateFunction& a, const RateFunction& b,
                                       const LocalFunction& f, const EnginePtr& engine,
                                       const TorusLattice& lat, const ContinuityBudget& budget,
                                       std::uint64_t seed);

}  // namespace rwdre
