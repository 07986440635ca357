#include "rwdre/decay.hpp"

#include <cmath>
#include <cstdlib>

#include "rwdre/errors.hpp"

namespace rwdre {
namespace {

double binom(int n, int k) {
  double b = 1.0;
  for (int i = 1; i <= k; ++i) b = b * (n - k + i) / i;
  return b;
}

double factorial(int k) {
  double f = 1.0;
  for (int i = 2; i <= k; ++i) f *= i;
  return f;
}

// integral_T^inf (a t + 1)^d e^{-r t} dt
//   = e^{-rT} sum_k C(d,k) a^k (aT+1)^{d-k} k! / r^{k+1}
// (repeated integration by parts; T = 0 gives the full integral).
double exp_range_tail(double a, int d, double r, double T) {
  double sum = 0.0;
  for (int k = 0; k <= d; ++k)
    sum += binom(d, k) * std::pow(a, k) * std::pow(a * T + 1.0, d - k) * factorial(k) /
           std::pow(r, k + 1);
  return std::exp(-r * T) * sum;
}

// integral_T^inf (a t + 1)^d c t^{-s} dt for T >= t0; needs s > d + 1.
double power_range_tail(double a, int d, double c, double s, double T) {
  double sum = 0.0;
  for (int k = 0; k <= d; ++k)
    sum += binom(d, k) * std::pow(a, k) * std::pow(T, k - s + 1.0) / (s - k - 1.0);
  return c * sum;
}

void check_order(const DecayModel& g, int d) {
  if (!(g.asymptotic_order > d + 1))
    throw RefusalError("decay order " + std::to_string(g.asymptotic_order) +
                       " is not integrable against t^" + std::to_string(d) +
                       " (order > d + 1 required)");
}

}  // namespace

DecayModel DecayModel::exponential_model(double amp, double rate) {
  if (rate <= 0) throw ParamError("exponential decay needs a positive rate");
  DecayModel g;
  g.kind = Kind::exponential;
  g.amp = amp;
  g.rate = rate;
  return g;
}

DecayModel DecayModel::stack_model(std::vector<double> weights, std::vector<double> rates,
                                   double asymptotic_order, double amp) {
  if (weights.size() != rates.size() || weights.empty())
    throw ParamError("stack model needs matching weight and rate lists");
  for (double r : rates)
    if (r <= 0) throw ParamError("stack rates must be positive");
  DecayModel g;
  g.kind = Kind::stack;
  g.amp = amp;
  g.weights = std::move(weights);
  g.rates = std::move(rates);
  g.asymptotic_order = asymptotic_order;
  return g;
}

DecayModel DecayModel::power_model(double c, double s, double t0) {
  if (c < 0 || t0 <= 0) throw ParamError("power model needs c >= 0 and t0 > 0");
  DecayModel g;
  g.kind = Kind::power;
  g.c = c;
  g.s = s;
  g.t0 = t0;
  g.asymptotic_order = s;
  return g;
}

double DecayModel::eval(double t) const {
  switch (kind) {
    case Kind::exponential:
      return amp * std::exp(-rate * t);
    case Kind::stack: {
      double sum = 0.0;
      for (std::size_t i = 0; i < weights.size(); ++i)
        sum += weights[i] * std::exp(-rates[i] * t);
      return amp * sum;
    }
    case Kind::power:
      return c * std::pow(std::max(t, t0), -s);
  }
  return 0.0;
}

double range_weighted_integral(const DecayModel& g, double a, int d) {
  check_order(g, d);
  switch (g.kind) {
    case DecayModel::Kind::exponential:
      return g.amp * exp_range_tail(a, d, g.rate, 0.0);
    case DecayModel::Kind::stack: {
      double sum = 0.0;
      for (std::size_t i = 0; i < g.weights.size(); ++i)
        sum += g.weights[i] * exp_range_tail(a, d, g.rates[i], 0.0);
      return g.amp * sum;
    }
    case DecayModel::Kind::power: {
      // flat cap on [0, t0], exact polynomial integral there
      const double cap = g.c * std::pow(g.t0, -g.s);
      double head;
      if (a == 0) {
        head = cap * g.t0;
      } else {
        head = cap * (std::pow(a * g.t0 + 1.0, d + 1) - 1.0) / (a * (d + 1));
      }
      return head + power_range_tail(a, d, g.c, g.s, g.t0);
    }
  }
  return 0.0;
}

double range_weighted_tail(const DecayModel& g, double a, int d, double T) {
  check_order(g, d);
  switch (g.kind) {
    case DecayModel::Kind::exponential:
      return g.amp * exp_range_tail(a, d, g.rate, T);
    case DecayModel::Kind::stack: {
      double sum = 0.0;
      for (std::size_t i = 0; i < g.weights.size(); ++i)
        sum += g.weights[i] * exp_range_tail(a, d, g.rates[i], T);
      return g.amp * sum;
    }
    case DecayModel::Kind::power: {
      if (T >= g.t0) return power_range_tail(a, d, g.c, g.s, T);
      // flat cap between T and t0, then the power tail
      const double cap = g.c * std::pow(g.t0, -g.s);
      double head;
      if (a == 0) {
        head = cap * (g.t0 - T);
      } else {
        head = cap * (std::pow(a * g.t0 + 1.0, d + 1) - std::pow(a * T + 1.0, d + 1)) /
               (a * (d + 1));
      }
      return head + power_range_tail(a, d, g.c, g.s, g.t0);
    }
  }
  return 0.0;
}

CurveIntegral range_weighted_integral_curve(std::span<const double> t, std::span<const double> v,
                                            const DecayModel& tail_model, double a, int d) {
  if (t.size() != v.size() || t.size() < 2)
    throw UsageError("curve integral needs at least two grid points");
  CurveIntegral out;
  auto w = [&](std::size_t i) { return std::pow(a * t[i] + 1.0, d) * v[i]; };
  // the grid rarely starts at 0; extend flat to 0 so the head is not dropped
  if (t[0] > 0) out.value += t[0] * std::pow(a * t[0] / 2 + 1.0, d) * v[0];
  for (std::size_t i = 1; i < t.size(); ++i)
    out.value += 0.5 * (w(i - 1) + w(i)) * (t[i] - t[i - 1]);
  out.tail = range_weighted_tail(tail_model, a, d, t[t.size() - 1]);
  return out;
}

namespace {

double simpson(const std::function<double(double)>& f, double a, double m, double b, double fa,
               double fm, double fb) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

double simpson_rec(const std::function<double(double)>& f, double a, double m, double b, double fa,
                   double fm, double fb, double whole, double tol, int depth) {
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(f, a, lm, m, fa, flm, fm);
  const double right = simpson(f, m, rm, b, fm, frm, fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return simpson_rec(f, a, lm, m, fa, flm, fm, left, tol / 2, depth - 1) +
         simpson_rec(f, m, rm, b, fm, frm, fb, right, tol / 2, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double rel_tol) {
  if (b <= a) return 0.0;
  const double m = 0.5 * (a + b);
  const double fa = f(a), fm = f(m), fb = f(b);
  const double whole = simpson(f, a, m, b, fa, fm, fb);
  const double scale = std::max({std::abs(whole), std::abs(fa) * (b - a), 1e-300});
  return simpson_rec(f, a, m, b, fa, fm, fb, whole, rel_tol * scale, 40);
}

}  // namespace rwdre
