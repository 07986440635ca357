#include "rwdre/local_function.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rwdre/errors.hpp"

namespace rwdre {
namespace {

std::vector<std::uint32_t> mask_layers(std::uint64_t mask) {
  std::vector<std::uint32_t> layers;
  while (mask != 0) {
    layers.push_back(static_cast<std::uint32_t>(__builtin_ctzll(mask)));
    mask &= mask - 1;
  }
  return layers;
}

// Enumerates every assignment of the relevant layer bits over `n_sites`
// window sites and hands the assembled per-site states to `visit`. The
// assignment's bit (site * n_layers + k) is layer layers[k] at that site.
template <typename Visit>
void enumerate_states(std::size_t n_sites, const std::vector<std::uint32_t>& layers,
                      int budget_log2, Visit&& visit) {
  const std::size_t bits = n_sites * layers.size();
  if (bits > static_cast<std::size_t>(budget_log2))
    throw BudgetError("window exhaustion needs 2^" + std::to_string(bits) +
                      " states, budget is 2^" + std::to_string(budget_log2));
  std::vector<std::uint64_t> st(n_sites, 0);
  const std::uint64_t total = std::uint64_t{1} << bits;
  for (std::uint64_t a = 0; a < total; ++a) {
    for (std::size_t i = 0; i < n_sites; ++i) {
      std::uint64_t s = 0;
      for (std::size_t k = 0; k < layers.size(); ++k)
        if ((a >> (i * layers.size() + k)) & 1u) s |= std::uint64_t{1} << layers[k];
      st[i] = s;
    }
    visit(a, st);
  }
}

}  // namespace

LocalFunction LocalFunction::constant(double c) {
  LocalFunction f;
  f.window_ = {};
  f.layer_mask_ = 1;
  f.fn_ = [c](std::span<const std::uint64_t>) { return c; };
  f.name_ = "constant";
  return f;
}

LocalFunction LocalFunction::site_bit(const Site& x) {
  LocalFunction f;
  f.window_ = {x};
  f.layer_mask_ = 1;
  f.fn_ = [](std::span<const std::uint64_t> s) { return static_cast<double>(s[0] & 1u); };
  f.name_ = "site_bit";
  return f;
}

LocalFunction LocalFunction::product_bits(const Site& x, const Site& y) {
  if (x == y) throw UsageError("product_bits needs two distinct sites");
  LocalFunction f;
  f.window_ = {x, y};
  f.layer_mask_ = 1;
  f.fn_ = [](std::span<const std::uint64_t> s) {
    return static_cast<double>((s[0] & 1u) & (s[1] & 1u));
  };
  f.name_ = "product_bits";
  return f;
}

LocalFunction LocalFunction::layer_bit(const Site& x, std::uint32_t layer) {
  if (layer >= 64) throw ParamError("layer index out of range");
  LocalFunction f;
  f.window_ = {x};
  f.layer_mask_ = std::uint64_t{1} << layer;
  f.fn_ = [layer](std::span<const std::uint64_t> s) {
    return static_cast<double>((s[0] >> layer) & 1u);
  };
  f.name_ = "layer_bit";
  return f;
}

LocalFunction LocalFunction::from_table(std::vector<Site> window, std::vector<double> table) {
  const std::size_t w = window.size();
  if (w > 20) throw BudgetError("table window too large");
  if (table.size() != (std::size_t{1} << w))
    throw ParamError("table must hold one value per binary window state");
  LocalFunction f;
  f.window_ = std::move(window);
  f.layer_mask_ = 1;
  f.fn_ = [tab = std::move(table)](std::span<const std::uint64_t> s) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < s.size(); ++i) idx |= (s[i] & 1u) << i;
    return tab[idx];
  };
  f.name_ = "table";
  return f;
}

LocalFunction LocalFunction::from_fn(std::vector<Site> window, std::uint64_t layer_mask,
                                     std::function<double(std::span<const std::uint64_t>)> fn,
                                     std::string name) {
  if (layer_mask == 0) throw ParamError("layer mask must be nonempty");
  LocalFunction f;
  f.window_ = std::move(window);
  f.layer_mask_ = layer_mask;
  f.fn_ = std::move(fn);
  f.name_ = std::move(name);
  return f;
}

double LocalFunction::eval(const Configuration& c, const Site& origin) const {
  std::uint64_t local[16];
  std::vector<std::uint64_t> heap;
  std::uint64_t* buf = local;
  if (window_.size() > 16) {
    heap.resize(window_.size());
    buf = heap.data();
  }
  for (std::size_t i = 0; i < window_.size(); ++i)
    buf[i] = c.at(c.lattice.index_of(add_sites(origin, window_[i])));
  return fn_({buf, window_.size()});
}

LocalFunction LocalFunction::translated(const Site& x) const {
  LocalFunction f = *this;
  for (auto& w : f.window_) w = add_sites(w, x);
  return f;
}

std::vector<double> LocalFunction::lipschitz(const SiteMetric& m, int budget_log2) const {
  const auto layers = mask_layers(layer_mask_);
  if (m.kind == StateKind::binary && layer_mask_ != 1)
    throw UsageError("binary metric with a layered function");
  std::vector<double> delta(window_.size(), 0.0);
  enumerate_states(window_.size(), layers, budget_log2,
                   [&](std::uint64_t a, std::vector<std::uint64_t>& st) {
                     const double base = fn_(st);
                     for (std::size_t i = 0; i < window_.size(); ++i) {
                       for (std::size_t k = 0; k < layers.size(); ++k) {
                         // flip one layer at one site; rho of that pair is the
                         // layer weight (1 in the binary case)
                         if ((a >> (i * layers.size() + k)) & 1u) continue;  // count each pair once
                         const std::uint64_t saved = st[i];
                         st[i] ^= std::uint64_t{1} << layers[k];
                         const double flipped = fn_(st);
                         st[i] = saved;
                         const double rho =
                             m.kind == StateKind::binary ? 1.0 : m.gamma[layers[k]];
                         delta[i] = std::max(delta[i], std::abs(flipped - base) / rho);
                       }
                     }
                   });
  return delta;
}

double LocalFunction::oscillation(int budget_log2) const {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  const auto layers = mask_layers(layer_mask_);
  enumerate_states(window_.size(), layers, budget_log2,
                   [&](std::uint64_t, std::vector<std::uint64_t>& st) {
                     const double v = fn_(st);
                     lo = std::min(lo, v);
                     hi = std::max(hi, v);
                   });
  return hi - lo;
}

double triple_norm(const LocalFunction& f, const SiteMetric& m, int budget_log2) {
  double sum = 0.0;
  for (double d : f.lipschitz(m, budget_log2)) sum += d;
  return sum;
}

}  // namespace rwdre
