#include "rwdre/engine.hpp"

#include <cmath>

#include "rwdre/errors.hpp"

namespace rwdre {

namespace {

// GCC's C++17 special math provides the zeta normalization for the infinite
// power-law family.
double zeta(double s) { return std::riemann_zeta(s); }

}  // namespace

LayerSpec LayerSpec::power_law(double order, std::uint32_t n_layers) {
  if (order <= 0) throw ParamError("layer order must be positive");
  if (n_layers < 1 || n_layers > 64) throw ParamError("layer count must be in [1,64]");
  LayerSpec spec;
  spec.n_layers = n_layers;
  double partial = 0.0;
  for (std::uint32_t n = 1; n <= n_layers; ++n) {
    spec.alpha.push_back(1.0 / n);
    const double raw = std::pow(static_cast<double>(n), -(order + 1.0));
    spec.gamma.push_back(raw);
    partial += raw;
  }
  for (auto& g : spec.gamma) g /= partial;
  spec.tail_mass = 1.0 - partial / zeta(order + 1.0);
  spec.asymptotic_order = order;
  spec.validate();
  return spec;
}

LayerSpec LayerSpec::single(double lambda) {
  if (lambda <= 0) throw ParamError("layer rate must be positive");
  LayerSpec spec;
  spec.n_layers = 1;
  spec.alpha = {lambda};
  spec.gamma = {1.0};
  spec.tail_mass = 0.0;
  spec.validate();
  return spec;
}

void LayerSpec::validate() const {
  if (n_layers < 1 || n_layers > 64) throw ParamError("layer count must be in [1,64]");
  if (alpha.size() != n_layers || gamma.size() != n_layers)
    throw ParamError("layer spec lists must match the layer count");
  for (double a : alpha)
    if (a <= 0) throw ParamError("layer rates must be positive");
  metric();  // validates the weights
}

SiteMetric LayerSpec::metric() const {
  if (n_layers == 1) return SiteMetric::binary();
  return SiteMetric::weighted(gamma, tail_mass);
}

StackBound stack_decay_bound(const LayerSpec& spec, double t) {
  if (t < 0) throw ParamError("time must be nonnegative");
  StackBound b;
  for (std::uint32_t n = 0; n < spec.n_layers; ++n)
    b.value += spec.gamma[n] * std::exp(-spec.alpha[n] * t);
  b.value *= 2.0;
  b.tail_mass = spec.tail_mass;
  return b;
}

void EnvironmentEngine::check_compatible(const Configuration& c) const {
  if (c.kind != kind_ || c.n_layers != n_layers_)
    throw UsageError("configuration kind does not match engine " + name_);
}

namespace {

class ResamplingEngine final : public EnvironmentEngine {
 public:
  explicit ResamplingEngine(double lambda)
      : EnvironmentEngine("resampling", StateKind::binary, 1, SiteMetric::binary()),
        lambda_(lambda),
        layer_rates_{lambda} {
    if (lambda <= 0) throw ParamError("resampling rate must be positive");
  }

  void evolve_inplace(Configuration& c, double dt, RngStream& rng) const override {
    check_compatible(c);
    if (dt <= 0) return;
    const double p = -std::expm1(-lambda_ * dt);
    for (auto& s : c.states)
      if (rng.uniform() < p) s = rng.bits64() & 1u;
  }

  void evolve_pair_inplace(Configuration& c1, Configuration& c2, double dt, RngStream& rng,
                           const Site& off) const override {
    check_compatible(c1);
    check_compatible(c2);
    if (dt <= 0) return;
    const double p = -std::expm1(-lambda_ * dt);
    const std::int64_t n = c1.lattice.n_sites();
    for (std::int64_t s = 0; s < n; ++s) {
      if (rng.uniform() < p) {
        const std::uint64_t v = rng.bits64() & 1u;
        c1.at(s) = v;
        c2.at(c2.lattice.add(s, off)) = v;
      }
    }
  }

  double event_rate(const Configuration& c) const override {
    return lambda_ * static_cast<double>(c.lattice.n_sites());
  }

  void apply_event(Configuration& c, RngStream& rng) const override {
    const auto s = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c.lattice.n_sites())));
    c.at(s) = rng.bits64() & 1u;
  }

  void apply_event_pair(Configuration& c1, Configuration& c2, RngStream& rng,
                        const Site& off) const override {
    const auto s = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c1.lattice.n_sites())));
    const std::uint64_t v = rng.bits64() & 1u;
    c1.at(s) = v;
    c2.at(c2.lattice.add(s, off)) = v;
  }

  bool independent_sites() const override { return true; }
  std::span<const double> layer_rates() const override { return layer_rates_; }

  std::optional<DecayModel> exact_decay() const override {
    // a differing site keeps rho = 1 exactly until its first shared resample
    return DecayModel::exponential_model(1.0, lambda_);
  }

  void for_each_transition(
      const Configuration& c,
      const std::function<void(std::int64_t, std::uint64_t, double)>& cb) const override {
    check_compatible(c);
    const std::int64_t n = c.lattice.n_sites();
    for (std::int64_t s = 0; s < n; ++s) cb(s, c.at(s) ^ 1u, lambda_ / 2.0);
  }

  std::uint64_t stationary_site_sample(RngStream& rng) const override {
    return rng.bits64() & 1u;
  }

 private:
  double lambda_;
  std::array<double, 1> layer_rates_;
};

class GlauberEngine final : public EnvironmentEngine {
 public:
  GlauberEngine(double beta, double lambda)
      : EnvironmentEngine("glauber", StateKind::binary, 1, SiteMetric::binary()),
        beta_(beta),
        lambda_(lambda) {
    if (beta < 0) throw ParamError("inverse temperature must be nonnegative");
    if (lambda <= 0) throw ParamError("update rate must be positive");
  }

  void evolve_inplace(Configuration& c, double dt, RngStream& rng) const override {
    check_compatible(c);
    const double total = event_rate(c);
    double t = rng.exponential(total);
    while (t <= dt) {
      apply_event(c, rng);
      t += rng.exponential(total);
    }
  }

  void evolve_pair_inplace(Configuration& c1, Configuration& c2, double dt, RngStream& rng,
                           const Site& off) const override {
    check_compatible(c1);
    check_compatible(c2);
    const double total = event_rate(c1);
    double t = rng.exponential(total);
    while (t <= dt) {
      apply_event_pair(c1, c2, rng, off);
      t += rng.exponential(total);
    }
  }

  double event_rate(const Configuration& c) const override {
    return lambda_ * static_cast<double>(c.lattice.n_sites());
  }

  void apply_event(Configuration& c, RngStream& rng) const override {
    const auto s = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c.lattice.n_sites())));
    const double u = rng.uniform();
    c.at(s) = (u < plus_probability(c, s)) ? 1u : 0u;
  }

  void apply_event_pair(Configuration& c1, Configuration& c2, RngStream& rng,
                        const Site& off) const override {
    const auto s = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c1.lattice.n_sites())));
    const std::int64_t s2 = c2.lattice.add(s, off);
    const double u = rng.uniform();
    c1.at(s) = (u < plus_probability(c1, s)) ? 1u : 0u;
    c2.at(s2) = (u < plus_probability(c2, s2)) ? 1u : 0u;
  }

  std::optional<DecayModel> exact_decay() const override {
    if (beta_ == 0.0) return DecayModel::exponential_model(1.0, lambda_);
    return std::nullopt;
  }

  void for_each_transition(
      const Configuration& c,
      const std::function<void(std::int64_t, std::uint64_t, double)>& cb) const override {
    check_compatible(c);
    const std::int64_t n = c.lattice.n_sites();
    for (std::int64_t s = 0; s < n; ++s) {
      const double p_plus = plus_probability(c, s);
      const double p_flip = c.at(s) & 1u ? 1.0 - p_plus : p_plus;
      if (p_flip > 0) cb(s, c.at(s) ^ 1u, lambda_ * p_flip);
    }
  }

  std::uint64_t stationary_site_sample(RngStream& rng) const override {
    // product init; exact only at beta = 0, interacting case needs burn-in
    return rng.bits64() & 1u;
  }

 private:
  // Heat bath: P(spin -> +1 | neighbors) with spins sigma = 2 eta - 1.
  double plus_probability(const Configuration& c, std::int64_t s) const {
    int h = 0;
    const auto& lat = c.lattice;
    for (int j = 0; j < lat.d; ++j) {
      Site e = kOrigin;
      e[j] = 1;
      h += 2 * static_cast<int>(c.at(lat.add(s, e)) & 1u) - 1;
      e[j] = -1;
      h += 2 * static_cast<int>(c.at(lat.add(s, e)) & 1u) - 1;
    }
    return 1.0 / (1.0 + std::exp(-2.0 * beta_ * h));
  }

  double beta_;
  double lambda_;
};

class LayeredEngine final : public EnvironmentEngine {
 public:
  explicit LayeredEngine(LayerSpec spec)
      : EnvironmentEngine("layered",
                          spec.n_layers == 1 ? StateKind::binary : StateKind::layer_stack,
                          spec.n_layers, spec.metric()),
        spec_(std::move(spec)) {
    spec_.validate();
    total_layer_rate_ = 0.0;
    for (double a : spec_.alpha) {
      total_layer_rate_ += a;
      cum_.push_back(total_layer_rate_);
    }
  }

  void evolve_inplace(Configuration& c, double dt, RngStream& rng) const override {
    check_compatible(c);
    if (dt <= 0) return;
    for (auto& s : c.states) {
      for (std::uint32_t l = 0; l < spec_.n_layers; ++l) {
        const double p = -std::expm1(-spec_.alpha[l] * dt);
        if (rng.uniform() < p) {
          const std::uint64_t bit = rng.bits64() & 1u;
          s = (s & ~(std::uint64_t{1} << l)) | (bit << l);
        }
      }
    }
  }

  void evolve_pair_inplace(Configuration& c1, Configuration& c2, double dt, RngStream& rng,
                           const Site& off) const override {
    check_compatible(c1);
    check_compatible(c2);
    if (dt <= 0) return;
    const std::int64_t n = c1.lattice.n_sites();
    for (std::int64_t s = 0; s < n; ++s) {
      const std::int64_t s2 = c2.lattice.add(s, off);
      for (std::uint32_t l = 0; l < spec_.n_layers; ++l) {
        const double p = -std::expm1(-spec_.alpha[l] * dt);
        if (rng.uniform() < p) {
          const std::uint64_t bit = rng.bits64() & 1u;
          c1.at(s) = (c1.at(s) & ~(std::uint64_t{1} << l)) | (bit << l);
          c2.at(s2) = (c2.at(s2) & ~(std::uint64_t{1} << l)) | (bit << l);
        }
      }
    }
  }

  double event_rate(const Configuration& c) const override {
    return total_layer_rate_ * static_cast<double>(c.lattice.n_sites());
  }

  void apply_event(Configuration& c, RngStream& rng) const override {
    const auto s = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c.lattice.n_sites())));
    const std::uint32_t l = pick_layer(rng);
    const std::uint64_t bit = rng.bits64() & 1u;
    c.at(s) = (c.at(s) & ~(std::uint64_t{1} << l)) | (bit << l);
  }

  void apply_event_pair(Configuration& c1, Configuration& c2, RngStream& rng,
                        const Site& off) const override {
    const auto s = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c1.lattice.n_sites())));
    const std::int64_t s2 = c2.lattice.add(s, off);
    const std::uint32_t l = pick_layer(rng);
    const std::uint64_t bit = rng.bits64() & 1u;
    c1.at(s) = (c1.at(s) & ~(std::uint64_t{1} << l)) | (bit << l);
    c2.at(s2) = (c2.at(s2) & ~(std::uint64_t{1} << l)) | (bit << l);
  }

  bool independent_sites() const override { return true; }
  std::span<const double> layer_rates() const override { return spec_.alpha; }

  std::optional<DecayModel> exact_decay() const override {
    // maximally different pair: every layer keeps rho-weight gamma_n until
    // its first shared resample, so the exact curve is sum gamma_n e^{-a_n t}
    return DecayModel::stack_model(spec_.gamma, spec_.alpha, spec_.asymptotic_order, 1.0);
  }

  void for_each_transition(
      const Configuration& c,
      const std::function<void(std::int64_t, std::uint64_t, double)>& cb) const override {
    check_compatible(c);
    const std::int64_t n = c.lattice.n_sites();
    for (std::int64_t s = 0; s < n; ++s)
      for (std::uint32_t l = 0; l < spec_.n_layers; ++l)
        cb(s, c.at(s) ^ (std::uint64_t{1} << l), spec_.alpha[l] / 2.0);
  }

  std::uint64_t stationary_site_sample(RngStream& rng) const override {
    return rng.bits64() & ((spec_.n_layers >= 64) ? ~std::uint64_t{0}
                                                  : ((std::uint64_t{1} << spec_.n_layers) - 1));
  }

  const LayerSpec& spec() const { return spec_; }

 private:
  std::uint32_t pick_layer(RngStream& rng) const {
    const double u = rng.uniform() * total_layer_rate_;
    std::uint32_t lo = 0, hi = spec_.n_layers - 1;
    while (lo < hi) {
      const std::uint32_t mid = (lo + hi) / 2;
      if (u < cum_[mid])
        hi = mid;
      else
        lo = mid + 1;
    }
    return lo;
  }

  LayerSpec spec_;
  double total_layer_rate_ = 0.0;
  std::vector<double> cum_;
};

class FrozenEngine final : public EnvironmentEngine {
 public:
  FrozenEngine() : EnvironmentEngine("frozen", StateKind::binary, 1, SiteMetric::binary()) {}

  void evolve_inplace(Configuration& c, double, RngStream&) const override {
    check_compatible(c);
  }
  void evolve_pair_inplace(Configuration& c1, Configuration& c2, double, RngStream&,
                           const Site&) const override {
    check_compatible(c1);
    check_compatible(c2);
  }
  double event_rate(const Configuration&) const override { return 0.0; }
  void apply_event(Configuration&, RngStream&) const override {
    throw UsageError("frozen engine has no events");
  }
  void apply_event_pair(Configuration&, Configuration&, RngStream&, const Site&) const override {
    throw UsageError("frozen engine has no events");
  }
  bool independent_sites() const override { return true; }
  void for_each_transition(
      const Configuration&,
      const std::function<void(std::int64_t, std::uint64_t, double)>&) const override {}
  std::uint64_t stationary_site_sample(RngStream& rng) const override {
    return rng.bits64() & 1u;
  }
};

}  // namespace

EnginePtr make_resampling_engine(double lambda) {
  return std::make_shared<ResamplingEngine>(lambda);
}

EnginePtr make_glauber_engine(double beta, double lambda) {
  return std::make_shared<GlauberEngine>(beta, lambda);
}

EnginePtr make_layered_engine(LayerSpec spec) {
  return std::make_shared<LayeredEngine>(std::move(spec));
}

EnginePtr make_frozen_engine() { return std::make_shared<FrozenEngine>(); }

Configuration evolve(const EnvironmentEngine& engine, Configuration c, double t, RngStream& rng) {
  if (t < 0) throw ParamError("duration must be nonnegative");
  engine.evolve_inplace(c, t, rng);
  return c;
}

std::pair<Configuration, Configuration> evolve_pair(const CouplingKernel& kernel, Configuration c1,
                                                    Configuration c2, double t, RngStream& rng) {
  if (t < 0) throw ParamError("duration must be nonnegative");
  kernel.engine->evolve_pair_inplace(c1, c2, t, rng);
  return {std::move(c1), std::move(c2)};
}

}  // namespace rwdre
