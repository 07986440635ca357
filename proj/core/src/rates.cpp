#include "rwdre/rates.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

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

// Evaluates one rate on states assembled over the union window.
double eval_on_union(const LocalFunction& a, const std::vector<Site>& uni,
                     const std::vector<std::uint64_t>& st) {
  std::vector<std::uint64_t> sub(a.window().size());
  for (std::size_t i = 0; i < a.window().size(); ++i) {
    const auto it = std::find(uni.begin(), uni.end(), a.window()[i]);
    sub[i] = st[static_cast<std::size_t>(it - uni.begin())];
  }
  return a.eval_window(sub);
}

std::vector<Site> union_window(const RateFunction& a) {
  std::vector<Site> uni;
  for (const auto& f : a.alpha)
    for (const auto& x : f.window())
      if (std::find(uni.begin(), uni.end(), x) == uni.end()) uni.push_back(x);
  return uni;
}

template <typename Visit>
void enumerate_union(std::size_t n_sites, const std::vector<std::uint32_t>& layers,
                     int budget_log2, Visit&& visit) {
  const std::size_t bits = n_sites * layers.size();
  if (bits > static_cast<std::size_t>(budget_log2))
    throw BudgetError("rate exhaustion needs 2^" + std::to_string(bits) +
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
    visit(st);
  }
}

}  // namespace

RateFunction RateFunction::constant(std::vector<Site> jumps, std::vector<double> rates) {
  if (jumps.size() != rates.size()) throw ParamError("one rate per jump required");
  if (jumps.empty()) throw ParamError("jump set must be nonempty");
  RateFunction rf;
  rf.jumps = std::move(jumps);
  for (double r : rates) {
    if (r < 0) throw ParamError("rates must be nonnegative");
    rf.alpha.push_back(LocalFunction::constant(r));
  }
  rf.validate();
  return rf;
}

RateFunction RateFunction::site_biased(double eps) {
  if (eps < 0) throw ParamError("bias must be nonnegative");
  RateFunction rf;
  rf.jumps = {make_site(1), make_site(-1)};
  rf.alpha.push_back(LocalFunction::from_fn(
      {kOrigin}, 1,
      [eps](std::span<const std::uint64_t> s) { return 1.0 + eps * static_cast<double>(s[0] & 1u); },
      "site_biased"));
  rf.alpha.push_back(LocalFunction::constant(1.0));
  rf.validate();
  return rf;
}

void RateFunction::validate() const {
  if (jumps.size() != alpha.size()) throw ParamError("one rate function per jump required");
  for (std::size_t i = 0; i < jumps.size(); ++i) {
    if (jumps[i] == kOrigin) throw ParamError("the zero jump is not allowed");
    for (std::size_t j = i + 1; j < jumps.size(); ++j)
      if (jumps[i] == jumps[j]) throw ParamError("duplicate jump in jump set");
  }
}

RateNorms rate_norms(const RateFunction& a, const SiteMetric& m, int budget_log2) {
  a.validate();
  RateNorms out;
  const std::vector<Site> uni = union_window(a);

  std::uint64_t all_mask = 0;
  for (const auto& f : a.alpha) all_mask |= f.layer_mask();
  const auto layers = mask_layers(all_mask == 0 ? 1 : all_mask);

  for (std::size_t iz = 0; iz < a.n_jumps(); ++iz) {
    const Site& z = a.jumps[iz];
    double znorm = 0, z2 = 0;
    for (int j = 0; j < 3; ++j) {
      znorm = std::max(znorm, static_cast<double>(std::abs(z[j])));
      z2 += static_cast<double>(z[j]) * z[j];
    }

    // sup and inf of the rate by exhaustion over its own window
    double sup = 0, inf = 0;
    bool first = true;
    const auto& f = a.alpha[iz];
    enumerate_union(f.window().size(), mask_layers(f.layer_mask()), budget_log2,
                    [&](std::vector<std::uint64_t>& st) {
                      const double v = f.eval_window(st);
                      if (first) {
                        sup = inf = v;
                        first = false;
                      } else {
                        sup = std::max(sup, v);
                        inf = std::min(inf, v);
                      }
                    });
    if (inf < 0) throw ParamError("rates must be nonnegative everywhere");

    out.lambda.push_back(sup);
    out.lambda_min.push_back(inf);
    out.l1 += znorm * sup;
    out.l2 += z2 * sup;
    const double tn = triple_norm(f, m, budget_log2);
    out.triple += tn;
    out.triple_l1 += znorm * tn;
    out.total_clock_rate += sup;
    for (int j = 0; j < 3; ++j) {
      out.gamma_plus[j] += sup * std::max(z[j], 0);
      out.gamma_minus[j] += sup * std::min(z[j], 0);
    }
  }
  for (int j = 0; j < 3; ++j)
    out.spread_rate = std::max(out.spread_rate, out.gamma_plus[j] - out.gamma_minus[j]);

  // site weights over the union window: pairs differ at one site, with every
  // assignment of the other sites and every value pair at that site
  for (std::size_t ix = 0; ix < uni.size(); ++ix) {
    const std::size_t bits_other = (uni.size() - 1) * layers.size();
    const std::size_t bits_pair = 2 * layers.size();
    if (bits_other + bits_pair > static_cast<std::size_t>(budget_log2))
      throw BudgetError("site-weight exhaustion exceeds budget 2^" +
                        std::to_string(budget_log2));
    double w = 0.0;
    std::vector<std::uint64_t> st(uni.size(), 0);
    const std::uint64_t n_other = std::uint64_t{1} << bits_other;
    const std::uint64_t n_val = std::uint64_t{1} << layers.size();
    for (std::uint64_t ao = 0; ao < n_other; ++ao) {
      std::size_t bit = 0;
      for (std::size_t i = 0; i < uni.size(); ++i) {
        if (i == ix) continue;
        std::uint64_t s = 0;
        for (std::size_t k = 0; k < layers.size(); ++k, ++bit)
          if ((ao >> bit) & 1u) s |= std::uint64_t{1} << layers[k];
        st[i] = s;
      }
      for (std::uint64_t va = 0; va < n_val; ++va) {
        for (std::uint64_t vb = va + 1; vb < n_val; ++vb) {
          double diff = 0.0;
          for (std::size_t iz = 0; iz < a.n_jumps(); ++iz) {
            std::uint64_t sa = 0, sb = 0;
            for (std::size_t k = 0; k < layers.size(); ++k) {
              if ((va >> k) & 1u) sa |= std::uint64_t{1} << layers[k];
              if ((vb >> k) & 1u) sb |= std::uint64_t{1} << layers[k];
            }
            st[ix] = sa;
            const double ra = eval_on_union(a.alpha[iz], uni, st);
            st[ix] = sb;
            const double rb = eval_on_union(a.alpha[iz], uni, st);
            diff += std::abs(ra - rb);
          }
          w = std::max(w, diff);
        }
      }
    }
    out.site_weights.emplace_back(uni[ix], w);
  }
  return out;
}

double rate_distance(const RateFunction& a, const RateFunction& b, int budget_log2) {
  if (a.jumps.size() != b.jumps.size()) throw UsageError("rate families must share the jump set");
  double total = 0.0;
  for (std::size_t iz = 0; iz < a.jumps.size(); ++iz) {
    std::size_t jz = a.jumps.size();
    for (std::size_t k = 0; k < b.jumps.size(); ++k)
      if (b.jumps[k] == a.jumps[iz]) jz = k;
    if (jz == b.jumps.size()) throw UsageError("rate families must share the jump set");

    // union of the two windows for this jump
    std::vector<Site> uni = a.alpha[iz].window();
    for (const auto& x : b.alpha[jz].window())
      if (std::find(uni.begin(), uni.end(), x) == uni.end()) uni.push_back(x);
    const std::uint64_t mask = a.alpha[iz].layer_mask() | b.alpha[jz].layer_mask();
    double sup = 0.0;
    enumerate_union(uni.size(), mask_layers(mask), budget_log2,
                    [&](std::vector<std::uint64_t>& st) {
                      const double va = eval_on_union(a.alpha[iz], uni, st);
                      const double vb = eval_on_union(b.alpha[jz], uni, st);
                      sup = std::max(sup, std::abs(va - vb));
                    });
    total += sup;
  }
  return total;
}

}  // namespace rwdre
