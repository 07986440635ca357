#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rwdre/errors.hpp"

namespace rwdre {

// A site offset or coordinate; axes beyond the lattice dimension stay zero.
using Site = std::array<std::int32_t, 3>;

inline constexpr Site kOrigin{0, 0, 0};

inline Site make_site(std::int32_t x, std::int32_t y = 0, std::int32_t z = 0) {
  return Site{x, y, z};
}

inline Site add_sites(const Site& a, const Site& b) {
  return Site{a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

inline Site negate_site(const Site& a) { return Site{-a[0], -a[1], -a[2]}; }

// Periodic lattice {0,...,L-1}^d with row-major site indexing. All site
// arithmetic wraps; shifting by L along any axis is the identity.
struct TorusLattice {
  int d = 1;
  int L = 1;

  TorusLattice() = default;
  TorusLattice(int dim, int side) : d(dim), L(side) {
    if (d < 1 || d > 3) throw ParamError("lattice dimension must be 1, 2, or 3");
    if (L < 1) throw ParamError("lattice side must be positive");
  }

  std::int64_t n_sites() const {
    std::int64_t n = 1;
    for (int j = 0; j < d; ++j) n *= L;
    return n;
  }

  int wrap1(std::int64_t c) const {
    std::int64_t r = c % L;
    return static_cast<int>(r < 0 ? r + L : r);
  }

  Site wrap(const Site& s) const {
    Site out = kOrigin;
    for (int j = 0; j < d; ++j) out[j] = wrap1(s[j]);
    return out;
  }

  std::int64_t index_of(const Site& s) const {
    std::int64_t idx = 0;
    for (int j = d - 1; j >= 0; --j) idx = idx * L + wrap1(s[j]);
    return idx;
  }

  Site site_at(std::int64_t idx) const {
    Site s = kOrigin;
    for (int j = 0; j < d; ++j) {
      s[j] = static_cast<std::int32_t>(idx % L);
      idx /= L;
    }
    return s;
  }

  // Index of site + offset, wrapped.
  std::int64_t add(std::int64_t idx, const Site& off) const {
    Site s = site_at(idx);
    for (int j = 0; j < d; ++j) s[j] = wrap1(std::int64_t{s[j]} + off[j]);
    return index_of(s);
  }

  bool operator==(const TorusLattice&) const = default;
};

enum class StateKind { binary, layer_stack };

// One site's state: binary uses bit 0, a layer stack uses bits 0..n_layers-1.
struct SiteState {
  StateKind kind = StateKind::binary;
  std::uint64_t bits = 0;
};

// Distance on single-site states, bounded by 1. Binary states carry the
// discrete metric; layer stacks a weighted l1 with strictly decreasing
// weights summing to one.
struct SiteMetric {
  StateKind kind = StateKind::binary;
  std::vector<double> gamma;  // layer weights; empty for binary
  double tail_mass = 0.0;     // weight of layers discarded by truncation

  static SiteMetric binary() { return SiteMetric{}; }

  static SiteMetric weighted(std::vector<double> weights, double tail = 0.0) {
    SiteMetric m;
    m.kind = StateKind::layer_stack;
    m.gamma = std::move(weights);
    m.tail_mass = tail;
    m.validate();
    return m;
  }

  void validate() const {
    if (kind == StateKind::binary) {
      if (!gamma.empty()) throw ParamError("binary metric carries no layer weights");
      return;
    }
    if (gamma.empty()) throw ParamError("layer metric needs at least one weight");
    double sum = 0.0;
    for (std::size_t n = 0; n < gamma.size(); ++n) {
      if (gamma[n] <= 0.0) throw ParamError("layer weights must be positive");
      if (n > 0 && gamma[n] >= gamma[n - 1])
        throw ParamError("layer weights must be strictly decreasing");
      sum += gamma[n];
    }
    if (sum > 1.0 + 1e-12 || sum < 1.0 - 1e-12)
      throw ParamError("layer weights must sum to 1 within 1e-12");
  }

  std::uint32_t n_layers() const {
    return kind == StateKind::binary ? 1u : static_cast<std::uint32_t>(gamma.size());
  }

  // Distance between raw site bits; callers guarantee matching kinds.
  double distance_bits(std::uint64_t a, std::uint64_t b) const {
    if (kind == StateKind::binary) return ((a ^ b) & 1u) ? 1.0 : 0.0;
    std::uint64_t x = a ^ b;
    double dist = 0.0;
    while (x != 0) {
      const int n = __builtin_ctzll(x);
      dist += gamma[static_cast<std::size_t>(n)];
      x &= x - 1;
    }
    return dist;
  }
};

inline double site_distance(const SiteState& a, const SiteState& b, const SiteMetric& m) {
  if (a.kind != b.kind || a.kind != m.kind)
    throw UsageError("site_distance: state kinds and metric kind must match");
  return m.distance_bits(a.bits, b.bits);
}

// Dense assignment of site states on a torus.
struct Configuration {
  TorusLattice lattice;
  StateKind kind = StateKind::binary;
  std::uint32_t n_layers = 1;
  std::vector<std::uint64_t> states;

  Configuration() = default;
  Configuration(const TorusLattice& lat, StateKind k, std::uint32_t layers, std::uint64_t fill = 0)
      : lattice(lat), kind(k), n_layers(layers),
        states(static_cast<std::size_t>(lat.n_sites()), fill) {
    if (kind == StateKind::binary && n_layers != 1)
      throw ParamError("binary configurations have exactly one layer");
    if (n_layers < 1 || n_layers > 64) throw ParamError("layer count must be in [1,64]");
  }

  std::uint64_t layer_mask() const {
    return n_layers >= 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << n_layers) - 1);
  }

  std::uint64_t at(std::int64_t idx) const { return states[static_cast<std::size_t>(idx)]; }
  std::uint64_t& at(std::int64_t idx) { return states[static_cast<std::size_t>(idx)]; }

  std::uint64_t at_site(const Site& s) const { return states[static_cast<std::size_t>(lattice.index_of(s))]; }

  bool operator==(const Configuration&) const = default;
};

// theta_x: result(y) = config(y - x).
Configuration shift(const Configuration& config, const Site& x);

}  // namespace rwdre
