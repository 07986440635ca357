#include "rwdre/walk.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>

#include "rwdre/errors.hpp"

namespace rwdre {

// The environment pair as seen by the walkers: advance both chains over an
// interval, read site values at the current instant, and re-key the pairing
// at a restart. Implementations must keep the two marginals exact.
class PairEnvironment {
 public:
  virtual ~PairEnvironment() = default;
  virtual void advance_interval(double dt, RngStream& rng) = 0;
  virtual std::uint64_t read1(std::int64_t idx, RngStream& rng) = 0;
  virtual std::uint64_t read2(std::int64_t idx, RngStream& rng) = 0;
  virtual void rekey(const Site& delta, RngStream& rng) = 0;
  virtual void materialize(RngStream& rng) = 0;
  virtual const Configuration& config1() const = 0;
  virtual const Configuration& config2() const = 0;
};

namespace {

// Dense pair: the engine's own synchronous pair dynamics over every site.
// Needed for interacting engines where sites cannot evolve lazily.
class FullPairEnv final : public PairEnvironment {
 public:
  FullPairEnv(EnginePtr engine, Configuration c1, Configuration c2)
      : engine_(std::move(engine)), c1_(std::move(c1)), c2_(std::move(c2)) {}

  void advance_interval(double dt, RngStream& rng) override {
    if (dt > 0) engine_->evolve_pair_inplace(c1_, c2_, dt, rng, delta_);
  }
  std::uint64_t read1(std::int64_t idx, RngStream&) override { return c1_.at(idx); }
  std::uint64_t read2(std::int64_t idx, RngStream&) override { return c2_.at(idx); }
  void rekey(const Site& delta, RngStream&) override { delta_ = delta; }
  void materialize(RngStream&) override {}
  const Configuration& config1() const override { return c1_; }
  const Configuration& config2() const override { return c2_; }

 private:
  EnginePtr engine_;
  Configuration c1_, c2_;
  Site delta_ = kOrigin;
};

// Lazy pair for independent-site engines: each coupled site pair is brought
// forward only when read, by exact interval sampling of its shared per-layer
// clocks. Deferring the randomness to read time leaves the joint law
// unchanged because distinct sites never interact.
class LazyPairEnv final : public PairEnvironment {
 public:
  LazyPairEnv(EnginePtr engine, Configuration c1, Configuration c2)
      : engine_(std::move(engine)),
        c1_(std::move(c1)),
        c2_(std::move(c2)),
        last_t_(static_cast<std::size_t>(c1_.lattice.n_sites()), 0.0) {}

  void advance_interval(double dt, RngStream&) override { now_ += dt; }

  std::uint64_t read1(std::int64_t idx, RngStream& rng) override {
    catch_up(idx, rng);
    return c1_.at(idx);
  }

  std::uint64_t read2(std::int64_t idx, RngStream& rng) override {
    catch_up(c1_.lattice.add(idx, negate_site(delta_)), rng);
    return c2_.at(idx);
  }

  void rekey(const Site& delta, RngStream& rng) override {
    materialize(rng);
    delta_ = delta;
  }

  void materialize(RngStream& rng) override {
    const std::int64_t n = c1_.lattice.n_sites();
    for (std::int64_t s = 0; s < n; ++s) catch_up(s, rng);
  }

  const Configuration& config1() const override { return c1_; }
  const Configuration& config2() const override { return c2_; }

 private:
  void catch_up(std::int64_t s1, RngStream& rng) {
    const double dt = now_ - last_t_[static_cast<std::size_t>(s1)];
    if (dt <= 0) return;
    last_t_[static_cast<std::size_t>(s1)] = now_;
    const std::int64_t s2 = c2_.lattice.add(s1, delta_);
    const auto rates = engine_->layer_rates();
    for (std::size_t l = 0; l < rates.size(); ++l) {
      if (rates[l] <= 0) continue;
      const double p = -std::expm1(-rates[l] * dt);
      if (rng.uniform() < p) {
        const std::uint64_t bit = rng.bits64() & 1u;
        const std::uint64_t mask = std::uint64_t{1} << l;
        c1_.at(s1) = (c1_.at(s1) & ~mask) | (bit << l);
        c2_.at(s2) = (c2_.at(s2) & ~mask) | (bit << l);
      }
    }
  }

  EnginePtr engine_;
  Configuration c1_, c2_;
  Site delta_ = kOrigin;
  std::vector<double> last_t_;
  double now_ = 0.0;
};

std::size_t pick_index(const std::vector<double>& cum, double u) {
  const auto it = std::upper_bound(cum.begin(), cum.end(), u);
  return std::min(static_cast<std::size_t>(it - cum.begin()), cum.size() - 1);
}

std::int64_t spread_of(const Displacement& yp, const Displacement& ym) {
  std::int64_t s = 0;
  for (int j = 0; j < 3; ++j) s = std::max(s, yp[j] - ym[j]);
  return s;
}

}  // namespace

CoupledWalkSystem::CoupledWalkSystem() = default;
CoupledWalkSystem::CoupledWalkSystem(CoupledWalkSystem&&) noexcept = default;
CoupledWalkSystem& CoupledWalkSystem::operator=(CoupledWalkSystem&&) noexcept = default;
CoupledWalkSystem::~CoupledWalkSystem() = default;

Displacement CoupledWalkSystem::epoch_displacement1() const {
  Displacement r{};
  for (int j = 0; j < 3; ++j) r[j] = d1_[j] - x01_[j];
  return r;
}

Displacement CoupledWalkSystem::epoch_displacement2() const {
  Displacement r{};
  for (int j = 0; j < 3; ++j) r[j] = d2_[j] - x02_[j];
  return r;
}

double CoupledWalkSystem::frame_rate(std::size_t iz, int which) {
  const LocalFunction& f = rates_.alpha[iz];
  const Site& w = which == 1 ? w1_ : w2_;
  std::uint64_t buf[16];
  std::vector<std::uint64_t> heap;
  std::uint64_t* st = buf;
  if (f.window().size() > 16) {
    heap.resize(f.window().size());
    st = heap.data();
  }
  for (std::size_t i = 0; i < f.window().size(); ++i) {
    const std::int64_t idx = lat_.index_of(add_sites(w, f.window()[i]));
    st[i] = which == 1 ? env_->read1(idx, envrng_) : env_->read2(idx, envrng_);
  }
  const double a = f.eval_window({st, f.window().size()});
  if (a > norms_.lambda[iz] + 1e-9)
    throw Error("rate exceeded its exhaustively computed supremum");
  return a;
}

void CoupledWalkSystem::check_invariants(bool pre_tau_equal) const {
  for (int j = 0; j < 3; ++j) {
    const std::int64_t e1 = d1_[j] - x01_[j];
    const std::int64_t e2 = d2_[j] - x02_[j];
    if (e1 < ym_[j] || e1 > yp_[j] || e2 < ym_[j] || e2 > yp_[j])
      throw Error("sandwich invariant violated");
    if (pre_tau_equal && e1 != e2) throw Error("walkers diverged before the recorded time");
  }
}

void CoupledWalkSystem::advance_impl(double T, bool stop_at_tau, WalkTrajectory* tr1,
                                     WalkTrajectory* tr2) {
  if (T < t_) throw UsageError("cannot advance into the past");
  if (tr1 && tr1->times.empty()) {
    Displacement p{};
    for (int j = 0; j < 3; ++j) p[j] = base1_[j] + d1_[j];
    tr1->append(t_, p, tau_.has_value());
  }
  if (tr2 && tr2->times.empty()) {
    Displacement p{};
    for (int j = 0; j < 3; ++j) p[j] = base2_[j] + d2_[j];
    tr2->append(t_, p, tau_.has_value());
  }
  while (t_ < T) {
    if (total_rate_ <= 0) {
      env_->advance_interval(T - t_, envrng_);
      t_ = T;
      break;
    }
    const double dt = clocks_.exponential(total_rate_);
    if (t_ + dt > T) {
      env_->advance_interval(T - t_, envrng_);
      t_ = T;
      break;
    }
    env_->advance_interval(dt, envrng_);
    t_ += dt;

    const std::size_t iz = pick_index(cum_lambda_, clocks_.uniform() * total_rate_);
    const Site& z = rates_.jumps[iz];
    const double u = clocks_.uniform();

    // sandwich walkers move on every ring, before any environment read
    for (int j = 0; j < 3; ++j) {
      yp_[j] += std::max(z[j], 0);
      ym_[j] += std::min(z[j], 0);
    }
    worst_spread_ = std::max(worst_spread_, spread_of(yp_, ym_));

    const double a1 = frame_rate(iz, 1);
    const double a2 = frame_rate(iz, 2);
    const bool jump1 = u * norms_.lambda[iz] < a1;
    const bool jump2 = u * norms_.lambda[iz] < a2;

    if (jump1) {
      for (int j = 0; j < 3; ++j) d1_[j] += z[j];
      w1_ = lat_.wrap(add_sites(w1_, z));
    }
    if (jump2) {
      for (int j = 0; j < 3; ++j) d2_[j] += z[j];
      w2_ = lat_.wrap(add_sites(w2_, z));
    }
    if (jump1 != jump2 && !tau_) {
      tau_ = t_;
      for (int j = 0; j < 3; ++j) div_jump_abs_[j] += std::abs(z[j]);
    }
    check_invariants(!tau_.has_value());

    if (tr1 && jump1) {
      Displacement p{};
      for (int j = 0; j < 3; ++j) p[j] = base1_[j] + d1_[j];
      tr1->append(t_, p, tau_.has_value());
    }
    if (tr2 && jump2) {
      Displacement p{};
      for (int j = 0; j < 3; ++j) p[j] = base2_[j] + d2_[j];
      tr2->append(t_, p, tau_.has_value());
    }
    if (stop_at_tau && tau_) return;
  }
}

void CoupledWalkSystem::advance(double T, WalkTrajectory* tr1, WalkTrajectory* tr2) {
  advance_impl(T, false, tr1, tr2);
}

void CoupledWalkSystem::advance_until_decoupled(double T_max) {
  if (!tau_) advance_impl(T_max, true, nullptr, nullptr);
}

double CoupledWalkSystem::eval_frame1(const LocalFunction& f) {
  std::uint64_t buf[16];
  std::vector<std::uint64_t> heap;
  std::uint64_t* st = buf;
  if (f.window().size() > 16) {
    heap.resize(f.window().size());
    st = heap.data();
  }
  for (std::size_t i = 0; i < f.window().size(); ++i)
    st[i] = env_->read1(lat_.index_of(add_sites(w1_, f.window()[i])), envrng_);
  return f.eval_window({st, f.window().size()});
}

double CoupledWalkSystem::eval_frame2(const LocalFunction& f) {
  std::uint64_t buf[16];
  std::vector<std::uint64_t> heap;
  std::uint64_t* st = buf;
  if (f.window().size() > 16) {
    heap.resize(f.window().size());
    st = heap.data();
  }
  for (std::size_t i = 0; i < f.window().size(); ++i)
    st[i] = env_->read2(lat_.index_of(add_sites(w2_, f.window()[i])), envrng_);
  return f.eval_window({st, f.window().size()});
}

std::pair<Configuration, Configuration> CoupledWalkSystem::materialized_pair() {
  env_->materialize(envrng_);
  return {env_->config1(), env_->config2()};
}

void CoupledWalkSystem::restart_after_decoupling() {
  if (!tau_) throw UsageError("restart requires a decoupled system");
  env_->rekey(lat_.wrap(add_sites(w2_, negate_site(w1_))), envrng_);
  x01_ = d1_;
  x02_ = d2_;
  yp_ = Displacement{};
  ym_ = Displacement{};
  tau_.reset();
  ++restarts_;
}

CoupledWalkSystem build_coupled_system(const Configuration& eta, const Site& x,
                                       const Configuration& xi, const Site& y,
                                       const RateFunction& rates, const CouplingKernel& kernel,
                                       RngStream clocks, RngStream env, const WalkerOptions& opt) {
  const EnvironmentEngine& engine = *kernel.engine;
  engine.check_compatible(eta);
  engine.check_compatible(xi);
  if (eta.lattice != xi.lattice) throw UsageError("environment pair must share one lattice");
  rates.validate();

  CoupledWalkSystem sys;
  sys.engine_ = kernel.engine;
  sys.rates_ = rates;
  sys.norms_ = rate_norms(rates, engine.metric());
  sys.lat_ = eta.lattice;

  double r_max = 0;
  for (const auto& z : rates.jumps)
    for (int j = 0; j < 3; ++j) r_max = std::max(r_max, static_cast<double>(std::abs(z[j])));
  const double needed = 2.0 * r_max * sys.norms_.total_clock_rate * opt.horizon * 4.0;
  if (opt.policy == TorusPolicy::enforce && static_cast<double>(sys.lat_.L) <= needed) {
    const auto required = static_cast<long long>(std::floor(needed)) + 1;
    throw RefusalError("torus side " + std::to_string(sys.lat_.L) +
                       " can alias the coupled range over horizon " + std::to_string(opt.horizon) +
                       "; need L >= " + std::to_string(required) +
                       " or an explicit wrap waiver");
  }

  const bool lazy = engine.independent_sites() &&
                    engine.layer_rates().size() == engine.n_layers();
  if (lazy)
    sys.env_ = std::make_unique<LazyPairEnv>(kernel.engine, eta, xi);
  else
    sys.env_ = std::make_unique<FullPairEnv>(kernel.engine, eta, xi);

  sys.clocks_ = clocks;
  sys.envrng_ = env;
  sys.w1_ = sys.lat_.wrap(x);
  sys.w2_ = sys.lat_.wrap(y);
  for (int j = 0; j < 3; ++j) {
    sys.base1_[j] = x[j];
    sys.base2_[j] = y[j];
  }

  double cum = 0;
  for (double l : sys.norms_.lambda) {
    cum += l;
    sys.cum_lambda_.push_back(cum);
  }
  sys.total_rate_ = cum;
  return sys;
}

DecouplingResult decoupling_time(CoupledWalkSystem& system, double T_max) {
  system.advance_until_decoupled(T_max);
  if (system.tau()) return {*system.tau(), false};
  return {T_max, true};
}

double decoupling_lower_bound(const RateNorms& norms, const DecayModel& g, int d) {
  const double w = norms.site_weight_sum();
  if (w == 0) return 1.0;
  return std::exp(-w * range_weighted_integral(g, norms.spread_rate, d));
}

double decoupling_lower_bound(const RateFunction& rates, const SiteMetric& m, const DecayModel& g,
                              int d) {
  return decoupling_lower_bound(rate_norms(rates, m), g, d);
}

double decoupling_lower_bound(const RateNorms& norms, std::span<const double> t,
                              std::span<const double> v, const DecayModel& tail_model, int d) {
  const double w = norms.site_weight_sum();
  if (w == 0) return 1.0;
  const CurveIntegral ci = range_weighted_integral_curve(t, v, tail_model, norms.spread_rate, d);
  return std::exp(-w * (ci.value + ci.tail));
}

SingleWalkSystem::SingleWalkSystem(EnginePtr engine, RateFunction rates, Configuration init,
                                   RngStream clocks, RngStream env)
    : engine_(std::move(engine)),
      rates_(std::move(rates)),
      norms_(rate_norms(rates_, engine_->metric())),
      lat_(init.lattice),
      c_(std::move(init)),
      clocks_(clocks),
      envrng_(env) {
  engine_->check_compatible(c_);
  rates_.validate();
  double cum = 0;
  for (double l : norms_.lambda) {
    cum += l;
    cum_lambda_.push_back(cum);
  }
  total_lambda_ = cum;
  alpha_now_.resize(rates_.n_jumps(), 0.0);
  refresh();
}

void SingleWalkSystem::set_observable(const LocalFunction& f) {
  obs_ = f;
  obs_int_ = 0.0;
  obs_val_ = f.eval(c_, w_);
}

void SingleWalkSystem::refresh() {
  u_now_ = {0.0, 0.0, 0.0};
  for (std::size_t iz = 0; iz < rates_.n_jumps(); ++iz) {
    const double a = rates_.eval(iz, c_, w_);
    if (a > norms_.lambda[iz] + 1e-9)
      throw Error("rate exceeded its exhaustively computed supremum");
    alpha_now_[iz] = a;
    for (int j = 0; j < 3; ++j) u_now_[j] += static_cast<double>(rates_.jumps[iz][j]) * a;
  }
  if (obs_) obs_val_ = obs_->eval(c_, w_);
}

void SingleWalkSystem::advance(double T, WalkTrajectory* tr) {
  if (T < t_) throw UsageError("cannot advance into the past");
  if (tr && tr->times.empty()) {
    Displacement p{};
    for (int j = 0; j < 3; ++j) p[j] = base_[j] + d_[j];
    tr->append(t_, p, false);
  }
  while (t_ < T) {
    const double env_rate = engine_->event_rate(c_);
    const double total = env_rate + total_lambda_;
    double dt;
    if (total <= 0) {
      dt = T - t_;
    } else {
      dt = clocks_.exponential(total);
      if (t_ + dt > T) dt = T - t_;
    }
    for (int j = 0; j < 3; ++j) drift_int_[j] += u_now_[j] * dt;
    if (obs_) obs_int_ += obs_val_ * dt;
    t_ += dt;
    if (t_ >= T || total <= 0) {
      t_ = T;
      break;
    }

    const double sel = clocks_.uniform() * total;
    if (sel < env_rate) {
      engine_->apply_event(c_, envrng_);
      refresh();
    } else {
      const std::size_t iz = pick_index(cum_lambda_, sel - env_rate);
      const double u = clocks_.uniform();
      if (u * norms_.lambda[iz] < alpha_now_[iz]) {
        const Site& z = rates_.jumps[iz];
        for (int j = 0; j < 3; ++j) d_[j] += z[j];
        w_ = lat_.wrap(add_sites(w_, z));
        refresh();
        if (tr) {
          Displacement p{};
          for (int j = 0; j < 3; ++j) p[j] = base_[j] + d_[j];
          tr->append(t_, p, false);
        }
      }
    }
  }
}

}  // namespace rwdre
