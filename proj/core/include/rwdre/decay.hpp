#pragma once

#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace rwdre {

// Analytic description of a coupling-decay curve g(t), with the metadata
// needed to decide integrability against the polynomial range weight
// (a t + 1)^d. `asymptotic_order` is the polynomial decay order of the family
// the model represents: a finite stack truncates an infinite family, so it
// carries the family's order rather than the (always integrable) truncation's.
struct DecayModel {
  enum class Kind { exponential, stack, power };

  Kind kind = Kind::exponential;
  double amp = 1.0;
  double rate = 1.0;            // exponential: amp * exp(-rate t)
  std::vector<double> weights;  // stack: amp * sum_i weights[i] exp(-rates[i] t)
  std::vector<double> rates;
  double c = 1.0, s = 2.0, t0 = 1.0;  // power: c * max(t, t0)^{-s}
  double asymptotic_order = std::numeric_limits<double>::infinity();

  static DecayModel exponential_model(double amp, double rate);
  static DecayModel stack_model(std::vector<double> weights, std::vector<double> rates,
                                double asymptotic_order, double amp = 1.0);
  static DecayModel power_model(double c, double s, double t0);

  double eval(double t) const;
};

// integral_0^inf (a t + 1)^d g(t) dt in closed form. Refuses (RefusalError)
// when the represented decay order is <= d + 1, i.e. when the infinite-family
// integral the model stands for diverges.
double range_weighted_integral(const DecayModel& g, double a, int d);

// Same integrand from T to infinity.
double range_weighted_tail(const DecayModel& g, double a, int d, double T);

struct CurveIntegral {
  double value = 0.0;  // trapezoid over the measured grid
  double tail = 0.0;   // closed-form tail of the fitted model beyond the grid
};

// Trapezoid of (a t + 1)^d v(t) over the measured points plus the closed-form
// tail of `tail_model` beyond the last point.
CurveIntegral range_weighted_integral_curve(std::span<const double> t, std::span<const double> v,
                                            const DecayModel& tail_model, double a, int d);

// Adaptive Simpson quadrature to the given relative tolerance.
double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double rel_tol = 1e-6);

}  // namespace rwdre
