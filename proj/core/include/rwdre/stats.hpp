#pragma once

#include <cstddef>
#include <vector>

namespace rwdre {

// Streaming mean and standard error over independent replicas.
class MeanSE {
 public:
  void add(double x) {
    ++n_;
    const double d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d * (x - mean_);
  }

  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  // Unbiased sample variance; 0 until two samples exist.
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double sd() const;
  // Standard error of the mean.
  double se() const;

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 1.0;
};

// Least squares y ~ intercept + slope * x; r2 = 1 for a perfect fit (and for
// degenerate inputs with < 3 points, where the fit is exact anyway).
LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y);

struct KsResult {
  double statistic = 0.0;  // sup |F1 - F2|
  double p_value = 1.0;    // asymptotic two-sample p
  std::size_t n1 = 0, n2 = 0;
};

// Two-sample Kolmogorov-Smirnov with the asymptotic p-value. Ties (including
// censoring atoms) are handled by evaluating both empirical CDFs at every
// observed value; the asymptotic p is then conservative.
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);

}  // namespace rwdre
