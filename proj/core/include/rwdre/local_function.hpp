#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rwdre/lattice.hpp"

namespace rwdre {

// Real observable depending on finitely many sites. The window lists the
// offsets (relative to the evaluation frame's origin) the function may read;
// layer_mask lists the layers it may read at each of them. Everything the
// norm machinery does is exact exhaustion over that finite dependence set.
class LocalFunction {
 public:
  LocalFunction() = default;

  static LocalFunction constant(double c);
  // Binary eta(x).
  static LocalFunction site_bit(const Site& x);
  // Binary eta(x) * eta(y); x != y.
  static LocalFunction product_bits(const Site& x, const Site& y);
  // Layer-n indicator at x on stacked states.
  static LocalFunction layer_bit(const Site& x, std::uint32_t layer);
  // Dense table over binary window states; bit i of the table index is the
  // state at window[i].
  static LocalFunction from_table(std::vector<Site> window, std::vector<double> table);
  // General rule over window states (window order), reading only the layers
  // in layer_mask.
  static LocalFunction from_fn(std::vector<Site> window, std::uint64_t layer_mask,
                               std::function<double(std::span<const std::uint64_t>)> fn,
                               std::string name = "fn");

  double eval_window(std::span<const std::uint64_t> window_states) const { return fn_(window_states); }

  // Gathers the window around `origin` (the walker frame) and evaluates.
  double eval(const Configuration& c, const Site& origin) const;

  // Same function read through offset window + x (composition with a shift).
  LocalFunction translated(const Site& x) const;

  const std::vector<Site>& window() const { return window_; }
  std::uint64_t layer_mask() const { return layer_mask_; }
  const std::string& name() const { return name_; }

  // Exact per-site Lipschitz constants delta_f: for each window site, the
  // maximum of |f(eta) - f(xi)| / rho(eta(x), xi(x)) over all single-site,
  // single-layer flips, with every assignment of the remaining dependence
  // bits enumerated. Throws BudgetError when the assignment count exceeds
  // 2^budget_log2.
  std::vector<double> lipschitz(const SiteMetric& m, int budget_log2 = 12) const;

  // sup f - inf f over all window states, by the same exhaustion.
  double oscillation(int budget_log2 = 12) const;

 private:
  std::vector<Site> window_;
  std::uint64_t layer_mask_ = 1;
  std::function<double(std::span<const std::uint64_t>)> fn_ =
      [](std::span<const std::uint64_t>) { return 0.0; };
  std::string name_ = "constant";
};

// Triple seminorm: sum of the per-site Lipschitz constants.
double triple_norm(const LocalFunction& f, const SiteMetric& m, int budget_log2 = 12);

}  // namespace rwdre
