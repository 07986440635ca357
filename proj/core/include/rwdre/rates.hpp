#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "rwdre/local_function.hpp"

namespace rwdre {

// The walker's jump-rate family: a finite jump set and one nonnegative local
// function per jump, evaluated in the frame centered on the walker.
struct RateFunction {
  std::vector<Site> jumps;
  std::vector<LocalFunction> alpha;

  // Environment-independent rates.
  static RateFunction constant(std::vector<Site> jumps, std::vector<double> rates);
  // d=1 family: rate 1 + eps * eta(walker site) to jump +1, rate 1 to jump -1.
  static RateFunction site_biased(double eps);

  std::size_t n_jumps() const { return jumps.size(); }

  double eval(std::size_t iz, const Configuration& c, const Site& origin) const {
    return alpha[iz].eval(c, origin);
  }

  void validate() const;
};

struct RateNorms {
  std::vector<double> lambda;      // per-jump supremum of the rate
  std::vector<double> lambda_min;  // per-jump infimum (uniform ellipticity when > 0)
  double l1 = 0;               // sum over jumps of max-norm(z) * lambda_z
  double l2 = 0;               // sum over jumps of |z|^2 * lambda_z
  double triple = 0;           // sum over jumps of the rate's triple seminorm
  double triple_l1 = 0;        // as above, weighted by max-norm(z)
  // Site weights: for each site in the dependence window union, the supremum
  // over pairs differing only there of sum_z |alpha(eta,z) - alpha(xi,z)|.
  std::vector<std::pair<Site, double>> site_weights;
  std::array<double, 3> gamma_plus{0, 0, 0};   // sum_z lambda_z * max(z_j, 0)
  std::array<double, 3> gamma_minus{0, 0, 0};  // sum_z lambda_z * min(z_j, 0)
  double spread_rate = 0;       // max_j (gamma_plus - gamma_minus)_j
  double total_clock_rate = 0;  // sum_z lambda_z

  double site_weight_sum() const {
    double s = 0;
    for (const auto& [x, w] : site_weights) s += w;
    return s;
  }
};

// All norms by exact window exhaustion (suprema are attained on the finite
// dependence window, never sampled).
RateNorms rate_norms(const RateFunction& a, const SiteMetric& m, int budget_log2 = 12);

// sum_z sup |alpha(.,z) - alpha'(.,z)|, by exhaustion over the union window.
// The two families must share their jump sets.
double rate_distance(const RateFunction& a, const RateFunction& b, int budget_log2 = 12);

}  // namespace rwdre
