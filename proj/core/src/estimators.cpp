#include "rwdre/estimators.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "rwdre/errors.hpp"
#include "rwdre/parallel.hpp"
#include "rwdre/rng.hpp"
#include "rwdre/stats.hpp"

namespace rwdre {

namespace {

// Replica-id blocks keep every stream within one estimator call distinct.
constexpr std::uint64_t kInitBlock = 1'000'000;
constexpr std::uint64_t kTauBlock = 2'000'000;
constexpr std::uint64_t kPairBlock = 3'000'000;
constexpr std::uint64_t kArmBBlock = 4'000'000;
constexpr std::uint64_t kBatchId = 9'000'000;

void check_grid(std::span<const double> t_grid) {
  if (t_grid.empty()) throw ParamError("time grid must be nonempty");
  if (t_grid.front() < 0) throw ParamError("time grid must be nonnegative");
  for (std::size_t i = 1; i < t_grid.size(); ++i)
    if (t_grid[i] <= t_grid[i - 1]) throw ParamError("time grid must be strictly increasing");
}

void check_replicas(std::size_t replicas) {
  if (replicas < 2) throw ParamError("need at least two replicas for a standard error");
}

std::uint64_t full_site_mask(const EnvironmentEngine& engine) {
  const std::uint32_t n = engine.n_layers();
  return n >= 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << n) - 1);
}

Configuration stationary_config(const EnvironmentEngine& engine, const TorusLattice& lat,
                                RngStream& rng) {
  Configuration c = engine.make_config(lat);
  for (std::int64_t s = 0; s < lat.n_sites(); ++s) c.at(s) = engine.stationary_site_sample(rng);
  return c;
}

double trapezoid(std::span<const double> t, std::span<const double> v) {
  double sum = 0;
  for (std::size_t i = 1; i < t.size(); ++i)
    sum += 0.5 * (v[i] + v[i - 1]) * (t[i] - t[i - 1]);
  return sum;
}

std::string fmt(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

// One synchronous pair evolved along the grid; visit(i, c1, c2) per point.
template <typename Visit>
void march_pair(const CouplingKernel& kernel, Configuration c1, Configuration c2,
                std::span<const double> t_grid, RngStream& rng, Visit&& visit) {
  double prev = 0;
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    kernel.evolve_pair_inplace(c1, c2, t_grid[i] - prev, rng);
    prev = t_grid[i];
    visit(i, c1, c2);
  }
}

struct PairInit {
  Configuration c1, c2;
};

PairInit make_pair_init(const EnvironmentEngine& engine, const TorusLattice& lat,
                        PairStrategy strategy, RngStream& init_rng) {
  switch (strategy) {
    case PairStrategy::extremal:
      return {engine.make_config(lat, 0), engine.make_config(lat, full_site_mask(engine))};
    case PairStrategy::single_site: {
      Configuration c1 = stationary_config(engine, lat, init_rng);
      Configuration c2 = c1;
      c2.at(lat.index_of(kOrigin)) ^= full_site_mask(engine);
      return {std::move(c1), std::move(c2)};
    }
    case PairStrategy::random_pairs:
      return {stationary_config(engine, lat, init_rng), stationary_config(engine, lat, init_rng)};
    case PairStrategy::equal: {
      Configuration c1 = stationary_config(engine, lat, init_rng);
      Configuration c2 = c1;
      return {std::move(c1), std::move(c2)};
    }
  }
  throw UsageError("unknown pair strategy");
}

// Mean curve of per-replica origin discrepancies for one fixed initial-pair
// recipe; slots per replica keep the reduction order fixed.
DecayCurve mean_curve(const CouplingKernel& kernel, const TorusLattice& lat,
                      std::span<const double> t_grid, std::size_t replicas, std::uint64_t seed,
                      std::uint64_t id0, const std::function<PairInit(RngStream&)>& init,
                      bool sum_over_sites) {
  const SiteMetric& metric = kernel.engine->metric();
  const std::int64_t origin = lat.index_of(kOrigin);
  std::vector<std::vector<double>> slot(replicas);
  parallel_for(replicas, [&](std::size_t r) {
    RngStream init_rng = stream(seed, kInitBlock + id0 + r, StreamPurpose::init);
    RngStream env_rng = stream(seed, id0 + r, StreamPurpose::environment);
    PairInit pair = init(init_rng);
    auto& out = slot[r];
    out.resize(t_grid.size());
    march_pair(kernel, std::move(pair.c1), std::move(pair.c2), t_grid, env_rng,
               [&](std::size_t i, const Configuration& c1, const Configuration& c2) {
                 if (sum_over_sites) {
                   double s = 0;
                   for (std::int64_t x = 0; x < lat.n_sites(); ++x)
                     s += metric.distance_bits(c1.at(x), c2.at(x));
                   out[i] = s;
                 } else {
                   out[i] = metric.distance_bits(c1.at(origin), c2.at(origin));
                 }
               });
  });

  DecayCurve curve;
  curve.times.assign(t_grid.begin(), t_grid.end());
  curve.replicas = replicas;
  std::vector<MeanSE> acc(t_grid.size());
  for (std::size_t r = 0; r < replicas; ++r)
    for (std::size_t i = 0; i < t_grid.size(); ++i) acc[i].add(slot[r][i]);
  for (const auto& a : acc) {
    curve.estimates.push_back(a.mean());
    curve.se.push_back(a.se());
  }
  return curve;
}

std::vector<int> active_dims(const RateFunction& rates) {
  std::vector<int> dims;
  for (int j = 0; j < 3; ++j)
    for (const Site& z : rates.jumps)
      if (z[j] != 0) {
        dims.push_back(j);
        break;
      }
  return dims;
}

}  // namespace

std::string pair_strategy_name(PairStrategy s) {
  switch (s) {
    case PairStrategy::extremal:
      return "extremal";
    case PairStrategy::single_site:
      return "single_site";
    case PairStrategy::random_pairs:
      return "random_pairs";
    case PairStrategy::equal:
      return "equal";
  }
  return "unknown";
}

void DecayCurve::validate() const {
  if (times.size() != estimates.size() || times.size() != se.size())
    throw UsageError("decay curve columns must have equal length");
  check_grid(times);
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!(estimates[i] >= 0)) throw UsageError("decay curve estimates must be nonnegative");
    if (!(se[i] >= 0)) throw UsageError("decay curve standard errors must be nonnegative");
  }
}

DecayCurve estimate_env_decay(const CouplingKernel& kernel, const TorusLattice& lat,
                              std::span<const double> t_grid, std::size_t replicas,
                              PairStrategy strategy, std::uint64_t seed, int k_random) {
  check_grid(t_grid);
  check_replicas(replicas);
  const EnvironmentEngine& engine = *kernel.engine;

  if (strategy != PairStrategy::random_pairs) {
    DecayCurve curve = mean_curve(
        kernel, lat, t_grid, replicas, seed, 0,
        [&](RngStream& rng) { return make_pair_init(engine, lat, strategy, rng); }, false);
    curve.strategy = pair_strategy_name(strategy);
    return curve;
  }

  if (k_random < 1) throw ParamError("random strategy needs at least one pair");
  // Fixed i.i.d. pairs; each gets its own replica block, the curve is the
  // pointwise max of the per-pair means.
  DecayCurve best;
  for (int p = 0; p < k_random; ++p) {
    RngStream pair_rng = stream(seed, kPairBlock + static_cast<std::uint64_t>(p),
                                StreamPurpose::init);
    PairInit fixed = make_pair_init(engine, lat, PairStrategy::random_pairs, pair_rng);
    DecayCurve cur = mean_curve(
        kernel, lat, t_grid, replicas, seed,
        kPairBlock + (static_cast<std::uint64_t>(p) + 1) * replicas,
        [&](RngStream&) { return PairInit{fixed.c1, fixed.c2}; }, false);
    if (p == 0) {
      best = std::move(cur);
    } else {
      for (std::size_t i = 0; i < best.times.size(); ++i)
        if (cur.estimates[i] > best.estimates[i]) {
          best.estimates[i] = cur.estimates[i];
          best.se[i] = cur.se[i];
        }
    }
  }
  best.strategy = "random" + std::to_string(k_random);
  return best;
}

DecayCurve estimate_env_decay_supremum(const CouplingKernel& kernel, const TorusLattice& lat,
                                       std::span<const double> t_grid, std::size_t replicas,
                                       std::uint64_t seed, int k_random) {
  DecayCurve sup =
      estimate_env_decay(kernel, lat, t_grid, replicas, PairStrategy::extremal, seed, k_random);
  const DecayCurve rnd =
      estimate_env_decay(kernel, lat, t_grid, replicas, PairStrategy::random_pairs, seed, k_random);
  for (std::size_t i = 0; i < sup.times.size(); ++i)
    if (rnd.estimates[i] > sup.estimates[i]) {
      sup.estimates[i] = rnd.estimates[i];
      sup.se[i] = rnd.se[i];
    }
  sup.strategy = "extremal+random" + std::to_string(k_random);
  return sup;
}

DecayCurve estimate_site_decay_sum(const CouplingKernel& kernel, const TorusLattice& lat,
                                   std::span<const double> t_grid, std::size_t replicas,
                                   std::uint64_t seed) {
  check_grid(t_grid);
  check_replicas(replicas);
  const EnvironmentEngine& engine = *kernel.engine;
  DecayCurve curve = mean_curve(
      kernel, lat, t_grid, replicas, seed, 0,
      [&](RngStream& rng) { return make_pair_init(engine, lat, PairStrategy::single_site, rng); },
      true);
  curve.strategy = "single_site_sum";
  return curve;
}

EpDecaySplit estimate_ep_decay_split(const LocalFunction& f, const Configuration& eta,
                                     const Configuration& xi, const RateFunction& rates,
                                     const CouplingKernel& kernel, std::span<const double> t_grid,
                                     std::size_t replicas, std::uint64_t seed,
                                     const WalkerOptions& opt) {
  check_grid(t_grid);
  check_replicas(replicas);
  WalkerOptions run_opt = opt;
  run_opt.horizon = std::max(run_opt.horizon, t_grid.back());

  const std::size_t n = t_grid.size();
  struct Row {
    std::vector<double> diff, pre, post, alive;
  };
  std::vector<Row> slot(replicas);
  parallel_for(replicas, [&](std::size_t r) {
    CoupledWalkSystem sys =
        build_coupled_system(eta, kOrigin, xi, kOrigin, rates, kernel,
                             stream(seed, r, StreamPurpose::clocks),
                             stream(seed, r, StreamPurpose::environment), run_opt);
    auto& row = slot[r];
    row.diff.resize(n);
    row.pre.resize(n);
    row.post.resize(n);
    row.alive.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      sys.advance(t_grid[i]);
      const double d = sys.eval_frame1(f) - sys.eval_frame2(f);
      const bool coupled = !(sys.tau() && *sys.tau() <= t_grid[i]);
      row.diff[i] = d;
      row.pre[i] = coupled ? d : 0.0;
      row.post[i] = coupled ? 0.0 : d;
      row.alive[i] = coupled ? 1.0 : 0.0;
    }
  });

  std::vector<MeanSE> diff(n), pre(n), post(n), alive(n);
  for (std::size_t r = 0; r < replicas; ++r)
    for (std::size_t i = 0; i < n; ++i) {
      diff[i].add(slot[r].diff[i]);
      pre[i].add(slot[r].pre[i]);
      post[i].add(slot[r].post[i]);
      alive[i].add(slot[r].alive[i]);
    }

  const auto to_curve = [&](const std::vector<MeanSE>& acc, bool absolute,
                            const std::string& tag) {
    DecayCurve c;
    c.times.assign(t_grid.begin(), t_grid.end());
    c.replicas = replicas;
    c.strategy = tag;
    for (const auto& a : acc) {
      c.estimates.push_back(absolute ? std::abs(a.mean()) : a.mean());
      c.se.push_back(a.se());
    }
    return c;
  };
  EpDecaySplit out;
  out.total = to_curve(diff, true, "explicit_pair");
  out.coupled_term = to_curve(pre, true, "explicit_pair/coupled");
  out.decoupled_term = to_curve(post, true, "explicit_pair/decoupled");
  out.survival = to_curve(alive, false, "explicit_pair/survival");
  return out;
}

DecayCurve estimate_ep_decay(const LocalFunction& f, const Configuration& eta,
                             const Configuration& xi, const RateFunction& rates,
                             const CouplingKernel& kernel, std::span<const double> t_grid,
                             std::size_t replicas, std::uint64_t seed, const WalkerOptions& opt) {
  return estimate_ep_decay_split(f, eta, xi, rates, kernel, t_grid, replicas, seed, opt).total;
}

TailFit fit_decay_tail(const DecayCurve& curve) {
  curve.validate();
  const std::size_t n = curve.times.size();
  TailFit out;
  if (n < 4) {
    out.ok = false;
    out.kind = "short";
    out.r2 = 0;
    return out;
  }
  const std::size_t window = std::max<std::size_t>(4, n / 3);
  const std::size_t start = n - window;

  std::vector<double> t, v;
  bool any_positive = false;
  for (std::size_t i = start; i < n; ++i) {
    if (curve.estimates[i] > 0) {
      any_positive = true;
      if (curve.times[i] > 0) {
        t.push_back(curve.times[i]);
        v.push_back(curve.estimates[i]);
      }
    }
  }
  if (!any_positive) {
    out.model = DecayModel::exponential_model(0.0, 1.0);
    out.kind = "zero";
    return out;
  }
  if (t.size() < 4) {
    out.ok = false;
    out.kind = "sparse";
    out.r2 = 0;
    return out;
  }

  std::vector<double> log_v(v.size()), log_t(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    log_v[i] = std::log(v[i]);
    log_t[i] = std::log(t[i]);
  }
  const LinearFit ef = linear_fit(t, log_v);
  const LinearFit pf = linear_fit(log_t, log_v);

  double best = -1;
  if (ef.slope < 0 && ef.r2 > best) {
    best = ef.r2;
    out.model = DecayModel::exponential_model(std::exp(ef.intercept), -ef.slope);
    out.kind = "exponential";
  }
  if (pf.slope < 0 && pf.r2 > best) {
    best = pf.r2;
    out.model = DecayModel::power_model(std::exp(pf.intercept), -pf.slope, t.front());
    out.kind = "power";
  }
  if (best < 0) {
    out.ok = false;
    out.kind = "nondecaying";
    out.r2 = std::max(ef.r2, pf.r2);
    return out;
  }
  out.r2 = best;
  out.ok = best >= 0.9;
  return out;
}

Phi Phi::one() { return Phi{}; }

Phi Phi::exp_pow(double beta, double a) {
  Phi p;
  p.kind = Kind::exp_pow;
  p.beta = beta;
  p.a = a;
  return p;
}

Phi Phi::poly(double b) {
  Phi p;
  p.kind = Kind::poly;
  p.b = b;
  return p;
}

double Phi::eval(double t) const {
  switch (kind) {
    case Kind::one:
      return 1.0;
    case Kind::exp_pow:
      return std::exp(beta * std::pow(t, a));
    case Kind::poly:
      return std::pow(1.0 + t, b);
  }
  return 1.0;
}

std::string Phi::tag() const {
  switch (kind) {
    case Kind::one:
      return "1";
    case Kind::exp_pow:
      return "exp(" + fmt(beta) + " t^" + fmt(a) + ")";
    case Kind::poly:
      return "(1+t)^" + fmt(b);
  }
  return "?";
}

void Phi::validate() const {
  if (kind == Kind::exp_pow && !(a > 0 && a <= 1))
    throw ParamError("exponential weight needs 0 < a <= 1");
  static const double grid[] = {0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 25.0};
  for (double s : grid)
    for (double t : grid)
      if (eval(s + t) > eval(s) * eval(t) * (1 + 1e-9) + 1e-300)
        throw ParamError("weight is not submultiplicative on the check grid");
}

namespace {

// Fitted exponents carry estimation error, so convergence is only certified
// with a margin away from the critical order.
constexpr double kOrderMargin = 0.05;

// Closed-form or certified-remainder integral of phi(t/K) g(t) over [T, inf).
double weighted_tail_bound(const DecayModel& g, const Phi& phi, double K, double T) {
  const auto diverges = [&](const std::string& why) {
    throw RefusalError("weighted tail cannot be certified: " + why + " against weight " +
                       phi.tag() + " at K=" + fmt(K));
  };

  // Slowest exponential rate, or 0 for power decay.
  double r_min = 0;
  double total_amp = 0;
  switch (g.kind) {
    case DecayModel::Kind::exponential:
      r_min = g.rate;
      total_amp = g.amp;
      break;
    case DecayModel::Kind::stack: {
      total_amp = 0;
      r_min = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < g.rates.size(); ++i) {
        total_amp += g.amp * g.weights[i];
        r_min = std::min(r_min, g.rates[i]);
      }
      break;
    }
    case DecayModel::Kind::power:
      total_amp = g.c;
      break;
  }
  if (total_amp == 0) return 0.0;

  const bool is_power = g.kind == DecayModel::Kind::power;
  Phi eff = phi;
  if (eff.kind == Phi::Kind::exp_pow && eff.beta == 0) eff = Phi::one();

  switch (eff.kind) {
    case Phi::Kind::one: {
      if (is_power) {
        if (g.s <= 1 + kOrderMargin)
          diverges("power decay with exponent " + fmt(g.s) + " within the margin of 1");
        const double head = T < g.t0 ? g.c * std::pow(g.t0, -g.s) * (g.t0 - T) : 0.0;
        const double from = std::max(T, g.t0);
        return head + g.c * std::pow(from, 1 - g.s) / (g.s - 1);
      }
      if (g.kind == DecayModel::Kind::exponential) return g.amp * std::exp(-g.rate * T) / g.rate;
      double sum = 0;
      for (std::size_t i = 0; i < g.rates.size(); ++i)
        sum += g.amp * g.weights[i] * std::exp(-g.rates[i] * T) / g.rates[i];
      return sum;
    }
    case Phi::Kind::exp_pow: {
      if (is_power) diverges("polynomial decay under an exponential weight");
      if (eff.a == 1.0) {
        const double shift = eff.beta / K;
        if (r_min <= shift * (1 + kOrderMargin))
          diverges("exponential decay rate " + fmt(r_min) + " within the margin of the weight " +
                   "growth rate " + fmt(shift));
        if (g.kind == DecayModel::Kind::exponential)
          return g.amp * std::exp(-(g.rate - shift) * T) / (g.rate - shift);
        double sum = 0;
        for (std::size_t i = 0; i < g.rates.size(); ++i)
          sum += g.amp * g.weights[i] * std::exp(-(g.rates[i] - shift) * T) / (g.rates[i] - shift);
        return sum;
      }
      // a < 1: subexponential weight; integrate to where the integrand's
      // log-derivative is at most -r_min/2, then bound the remainder.
      const double guard =
          std::pow(2 * eff.beta * eff.a / (r_min * std::pow(K, eff.a)), 1.0 / (1.0 - eff.a));
      const double t_far = std::max(T, guard) + 60.0 / r_min;
      const auto h = [&](double t) { return eff.eval(t / K) * g.eval(t); };
      return adaptive_simpson(h, T, t_far, 1e-8) + h(t_far) * 2.0 / r_min;
    }
    case Phi::Kind::poly: {
      if (is_power) {
        if (g.s - eff.b <= 1 + kOrderMargin)
          diverges("power decay with exponent " + fmt(g.s) + " within the margin of weight order " +
                   fmt(eff.b) + " + 1");
        const double t_far = 4 * std::max({T, g.t0, K, 1.0});
        const auto h = [&](double t) { return eff.eval(t / K) * g.eval(t); };
        const double rem = g.c * std::pow((1 + K / t_far) / K, eff.b) *
                           std::pow(t_far, eff.b - g.s + 1) / (g.s - eff.b - 1);
        return adaptive_simpson(h, T, t_far, 1e-8) + rem;
      }
      const double t_far = std::max(T, 2 * eff.b / r_min) + 60.0 / r_min;
      const auto h = [&](double t) { return eff.eval(t / K) * g.eval(t); };
      return adaptive_simpson(h, T, t_far, 1e-8) + h(t_far) * 2.0 / r_min;
    }
  }
  return 0.0;
}

}  // namespace

IntegralEstimate transference_integral(const DecayCurve& curve, const Phi& phi, double K) {
  curve.validate();
  phi.validate();
  if (!(K > 0)) throw ParamError("K must be positive");
  if (curve.times.size() < 2) throw ParamError("integral needs at least two grid points");

  std::vector<double> weighted(curve.times.size()), weighted_se(curve.times.size());
  for (std::size_t i = 0; i < curve.times.size(); ++i) {
    const double w = phi.eval(curve.times[i] / K);
    weighted[i] = w * curve.estimates[i];
    weighted_se[i] = w * curve.se[i];
  }

  const TailFit fit = fit_decay_tail(curve);
  if (!fit.ok)
    throw RefusalError("decay tail unfit (" + fit.kind + ", R^2 = " + fmt(fit.r2) +
                       "): refusing to extrapolate the integral");

  IntegralEstimate out;
  out.value = trapezoid(curve.times, weighted);
  out.se = trapezoid(curve.times, weighted_se);
  out.horizon = curve.times.back();
  out.tail_bound = weighted_tail_bound(fit.model, phi, K, curve.times.back());
  out.phi_tag = phi.tag() + " @ K=" + fmt(K);
  return out;
}

std::optional<double> smallest_converging_k(const DecayCurve& curve, const Phi& phi) {
  for (double k = 1; k <= 64; k *= 2) {
    try {
      transference_integral(curve, phi, k);
      return k;
    } catch (const RefusalError&) {
      continue;
    }
  }
  return std::nullopt;
}

DriftDiffusionEstimate estimate_speed(const RateFunction& rates, const EnginePtr& engine,
                                      const TorusLattice& lat, double T, std::size_t replicas,
                                      std::uint64_t seed, double burn_in) {
  rates.validate();
  check_replicas(replicas);
  if (!(T > 0)) throw ParamError("horizon must be positive");
  if (burn_in < 0) throw ParamError("burn-in must be nonnegative");
  const RateNorms norms = rate_norms(rates, engine->metric());
  if (T * norms.total_clock_rate < 1e3)
    throw ParamError("horizon too short: need T * total clock rate >= 1e3 events");

  const double burn1 = std::min(burn_in, T / 4);
  const double burn2 = 2 * burn1;

  struct Row {
    std::array<double, 3> traj, stat1, stat2;
  };
  std::vector<Row> slot(replicas);
  parallel_for(replicas, [&](std::size_t r) {
    RngStream init_rng = stream(seed, kInitBlock + r, StreamPurpose::init);
    SingleWalkSystem sys(engine, rates, stationary_config(*engine, lat, init_rng),
                         stream(seed, r, StreamPurpose::clocks),
                         stream(seed, r, StreamPurpose::environment));
    sys.advance(burn1);
    const auto d1 = sys.drift_integral();
    sys.advance(burn2);
    const auto d2 = sys.drift_integral();
    sys.advance(T);
    const auto dT = sys.drift_integral();
    const auto disp = sys.displacement();
    for (int j = 0; j < 3; ++j) {
      slot[r].traj[j] = static_cast<double>(disp[j]) / T;
      slot[r].stat1[j] = (dT[j] - d1[j]) / (T - burn1);
      slot[r].stat2[j] = (dT[j] - d2[j]) / (T - burn2);
    }
  });

  DriftDiffusionEstimate out;
  out.horizon = T;
  out.replicas = replicas;
  out.burn_in = burn1;
  std::array<MeanSE, 3> traj, stat1, stat2;
  for (std::size_t r = 0; r < replicas; ++r)
    for (int j = 0; j < 3; ++j) {
      traj[j].add(slot[r].traj[j]);
      stat1[j].add(slot[r].stat1[j]);
      stat2[j].add(slot[r].stat2[j]);
    }
  for (int j = 0; j < 3; ++j) {
    out.v[j] = traj[j].mean();
    out.v_se[j] = traj[j].se();
    out.v_stationary[j] = stat1[j].mean();
    out.v_stationary_se[j] = stat1[j].se();
    out.v_stationary_2x[j] = stat2[j].mean();
  }
  for (int j : active_dims(rates)) {
    const double tol = 3 * std::hypot(out.v_se[j], out.v_stationary_se[j]);
    if (std::abs(out.v[j] - out.v_stationary[j]) > tol) out.forms_agree = false;
  }
  return out;
}

DriftDiffusionEstimate estimate_diffusion(const RateFunction& rates, const EnginePtr& engine,
                                          const TorusLattice& lat, double T, std::size_t replicas,
                                          std::uint64_t seed) {
  rates.validate();
  if (!(T > 0)) throw ParamError("horizon must be positive");
  if (replicas < 8) throw ParamError("diffusion estimate needs at least eight replicas");
  const RateNorms norms = rate_norms(rates, engine->metric());  // also pins l2 < inf

  std::vector<std::array<double, 3>> x(replicas);
  parallel_for(replicas, [&](std::size_t r) {
    RngStream init_rng = stream(seed, kInitBlock + r, StreamPurpose::init);
    SingleWalkSystem sys(engine, rates, stationary_config(*engine, lat, init_rng),
                         stream(seed, r, StreamPurpose::clocks),
                         stream(seed, r, StreamPurpose::environment));
    sys.advance(T);
    const auto d = sys.displacement();
    for (int j = 0; j < 3; ++j) x[r][j] = static_cast<double>(d[j]);
  });

  const auto n = static_cast<double>(replicas);
  std::array<double, 3> s{};
  std::array<std::array<double, 3>, 3> q{};
  for (const auto& row : x)
    for (int j = 0; j < 3; ++j) {
      s[j] += row[j];
      for (int k = 0; k < 3; ++k) q[j][k] += row[j] * row[k];
    }

  const auto cov_of = [T](const std::array<double, 3>& sums,
                          const std::array<std::array<double, 3>, 3>& sq, double m) {
    std::array<std::array<double, 3>, 3> c{};
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        c[j][k] = (sq[j][k] - sums[j] * sums[k] / m) / ((m - 1) * T);
    return c;
  };

  DriftDiffusionEstimate out;
  out.horizon = T;
  out.replicas = replicas;
  out.D = cov_of(s, q, n);
  for (int j = 0; j < 3; ++j) {
    out.v[j] = s[j] / (n * T);
    MeanSE acc;
    for (const auto& row : x) acc.add(row[j] / T);
    out.v_se[j] = acc.se();
  }

  const std::vector<int> dims = active_dims(rates);
  const auto block_min_eig = [&](const std::array<std::array<double, 3>, 3>& m) {
    if (dims.empty()) return 0.0;
    Eigen::MatrixXd b(dims.size(), dims.size());
    for (std::size_t a = 0; a < dims.size(); ++a)
      for (std::size_t c = 0; c < dims.size(); ++c) b(a, c) = m[dims[a]][dims[c]];
    return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(b).eigenvalues().minCoeff();
  };
  out.smallest_eig = block_min_eig(out.D);

  // Jackknife over replicas, for the matrix entries and the smallest
  // eigenvalue alike.
  std::array<std::array<MeanSE, 3>, 3> jack_entry;
  MeanSE jack_eig;
  for (std::size_t r = 0; r < replicas; ++r) {
    std::array<double, 3> s1 = s;
    auto q1 = q;
    for (int j = 0; j < 3; ++j) {
      s1[j] -= x[r][j];
      for (int k = 0; k < 3; ++k) q1[j][k] -= x[r][j] * x[r][k];
    }
    const auto loo = cov_of(s1, q1, n - 1);
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) jack_entry[j][k].add(loo[j][k]);
    jack_eig.add(block_min_eig(loo));
  }
  const double jk = (n - 1) / n;
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k)
      out.D_se[j][k] = std::sqrt(jk * jack_entry[j][k].variance() * (n - 1));
  out.smallest_eig_se = std::sqrt(jk * jack_eig.variance() * (n - 1));

  // Batch means from one long run: drift-corrected increments over windows
  // of length T are near-independent cross-checks, not primary estimates.
  const std::size_t n_batch = std::min<std::size_t>(replicas, 32);
  if (n_batch >= 2) {
    RngStream init_rng = stream(seed, kBatchId, StreamPurpose::init);
    SingleWalkSystem sys(engine, rates, stationary_config(*engine, lat, init_rng),
                         stream(seed, kBatchId, StreamPurpose::clocks),
                         stream(seed, kBatchId, StreamPurpose::environment));
    std::vector<std::array<double, 3>> inc(n_batch);
    std::array<double, 3> prev{};
    for (std::size_t b = 0; b < n_batch; ++b) {
      sys.advance(static_cast<double>(b + 1) * T);
      const auto d = sys.displacement();
      for (int j = 0; j < 3; ++j) {
        inc[b][j] = static_cast<double>(d[j]) - prev[j];
        prev[j] = static_cast<double>(d[j]);
      }
    }
    std::array<double, 3> bs{};
    std::array<std::array<double, 3>, 3> bq{};
    for (const auto& row : inc)
      for (int j = 0; j < 3; ++j) {
        bs[j] += row[j];
        for (int k = 0; k < 3; ++k) bq[j][k] += row[j] * row[k];
      }
    out.D_batch = cov_of(bs, bq, static_cast<double>(n_batch));
    for (int a : dims)
      for (int c : dims) {
        const double se_batch =
            std::sqrt((out.D_batch[a][a] * out.D_batch[c][c] + out.D_batch[a][c] * out.D_batch[a][c]) /
                      static_cast<double>(n_batch - 1));
        const double tol = 3 * std::hypot(out.D_se[a][c], se_batch) + 1e-12;
        if (std::abs(out.D[a][c] - out.D_batch[a][c]) > tol) out.batch_consistent = false;
      }
  }

  // CLT nondegeneracy gate: an everywhere-positive jump rate (condition a),
  // else any active jump under a full-support stationary law (condition b).
  bool elliptic = false, active_jump = false;
  for (std::size_t iz = 0; iz < rates.n_jumps(); ++iz) {
    const Site& z = rates.jumps[iz];
    if (z == kOrigin) continue;
    if (norms.lambda_min[iz] > 0) elliptic = true;
    if (norms.lambda[iz] > 0) active_jump = true;
  }
  out.clt_condition = elliptic || active_jump;
  out.notes = elliptic ? "elliptic jump present"
                       : (active_jump ? "active jump under full-support stationary law"
                                      : "no active jumps");
  out.nondegenerate =
      out.clt_condition && !dims.empty() && out.smallest_eig > 3 * out.smallest_eig_se;
  return out;
}

ContinuityReport continuity_experiment(const RateFunction& a, const RateFunction& b,
                                       const LocalFunction& f, const EnginePtr& engine,
                                       const TorusLattice& lat, const ContinuityBudget& budget,
                                       std::uint64_t seed) {
  a.validate();
  b.validate();
  if (!(budget.horizon > 0) || budget.burn_in < 0 || budget.burn_in >= budget.horizon)
    throw ParamError("continuity budget needs 0 <= burn_in < horizon");
  check_replicas(budget.replicas);
  const SiteMetric& metric = engine->metric();
  const RateNorms norms_a = rate_norms(a, metric);
  const int d = lat.d;

  ContinuityReport rep;
  rep.f_triple = triple_norm(f, metric);
  rep.beta = rate_distance(a, b);

  // Two independent stationary time-averages, one per rate family.
  const auto arm = [&](const RateFunction& rates, std::uint64_t id0) {
    std::vector<double> slot(budget.replicas);
    parallel_for(budget.replicas, [&](std::size_t r) {
      RngStream init_rng = stream(seed, kInitBlock + id0 + r, StreamPurpose::init);
      SingleWalkSystem sys(engine, rates, stationary_config(*engine, lat, init_rng),
                           stream(seed, id0 + r, StreamPurpose::clocks),
                           stream(seed, id0 + r, StreamPurpose::environment));
      sys.advance(budget.burn_in);
      sys.set_observable(f);
      sys.advance(budget.horizon);
      slot[r] = sys.observable_integral() / (budget.horizon - budget.burn_in);
    });
    MeanSE acc;
    for (double v : slot) acc.add(v);
    return acc;
  };
  const MeanSE mu_a = arm(a, 0);
  const MeanSE mu_b = arm(b, kArmBBlock);
  rep.mu_a = mu_a.mean();
  rep.mu_a_se = mu_a.se();
  rep.mu_b = mu_b.mean();
  rep.mu_b_se = mu_b.se();
  rep.left = std::abs(rep.mu_a - rep.mu_b);
  rep.left_se = std::hypot(rep.mu_a_se, rep.mu_b_se);

  const bool env_independent = norms_a.site_weight_sum() == 0;
  const std::optional<DecayModel> exact = engine->exact_decay();

  // The decoupling probability and the range-weighted decay constant. When
  // the rates ignore the environment the coupled walkers never split: p = 1
  // and the walker pair carries zero relative spread.
  const double spread = env_independent ? 0.0 : norms_a.spread_rate;
  DecayCurve measured;
  TailFit measured_tail;
  if (!exact) {
    std::vector<double> grid;
    const auto steps = static_cast<std::size_t>(std::llround(budget.decay_max / budget.decay_step));
    for (std::size_t i = 0; i <= steps; ++i) grid.push_back(static_cast<double>(i) * budget.decay_step);
    measured = estimate_env_decay(kernel_of(engine), lat, grid, budget.decay_replicas,
                                  PairStrategy::extremal, seed ^ 0xC0FFEEull);
    measured_tail = fit_decay_tail(measured);
    if (!measured_tail.ok)
      throw RefusalError("environment decay tail unfit (" + measured_tail.kind +
                         ", R^2 = " + fmt(measured_tail.r2) + "): cannot certify the constant");
  }

  if (exact) {
    rep.c_alpha = range_weighted_integral(*exact, spread, d);
    rep.c_alpha_se = 0;
  } else {
    const CurveIntegral ci = range_weighted_integral_curve(measured.times, measured.estimates,
                                                           measured_tail.model, spread, d);
    rep.c_alpha = ci.value + ci.tail;
    std::vector<double> wse(measured.times.size());
    for (std::size_t i = 0; i < measured.times.size(); ++i)
      wse[i] = std::pow(spread * measured.times[i] + 1, d) * measured.se[i];
    rep.c_alpha_se = trapezoid(measured.times, wse);
  }

  if (env_independent) {
    rep.p_hat = 1.0;
    rep.p_hat_se = 0.0;
    rep.p_floor = 1.0;
    rep.notes = "environment-independent rates: coupled walkers never split, p = 1 exactly";
  } else {
    std::vector<double> slot(budget.tau_replicas);
    const Configuration low = engine->make_config(lat, 0);
    const Configuration high = engine->make_config(lat, full_site_mask(*engine));
    // The censored survival frequency is a surrogate on the given desk-scale
    // torus, so walker wrap-around is accepted here rather than enforced away.
    WalkerOptions opt;
    opt.horizon = budget.tau_horizon;
    opt.policy = TorusPolicy::allow_wrap;
    parallel_for(budget.tau_replicas, [&](std::size_t r) {
      CoupledWalkSystem sys =
          build_coupled_system(low, kOrigin, high, kOrigin, a, kernel_of(engine),
                               stream(seed, kTauBlock + r, StreamPurpose::clocks),
                               stream(seed, kTauBlock + r, StreamPurpose::environment), opt);
      slot[r] = decoupling_time(sys, budget.tau_horizon).censored ? 1.0 : 0.0;
    });
    MeanSE acc;
    for (double v : slot) acc.add(v);
    rep.p_hat = acc.mean();
    rep.p_hat_se = acc.se();
    rep.p_floor = exact ? decoupling_lower_bound(norms_a, *exact, d)
                        : decoupling_lower_bound(norms_a, measured.times, measured.estimates,
                                                 measured_tail.model, d);
    rep.notes = "p censored at t = " + fmt(budget.tau_horizon) + ", torus wrap allowed";
  }

  if (rep.p_hat <= 0)
    throw RefusalError("decoupling probability estimate is zero: the bound is vacuous here");
  rep.right = rep.c_alpha / rep.p_hat * rep.beta * rep.f_triple;
  const double rel_c = rep.c_alpha > 0 ? rep.c_alpha_se / rep.c_alpha : 0;
  const double rel_p = rep.p_hat_se / rep.p_hat;
  rep.right_se = rep.right * std::hypot(rel_c, rel_p);
  rep.verdict = rep.left <= rep.right + 3 * std::hypot(rep.left_se, rep.right_se);
  return rep;
}

}  // namespace rwdre
