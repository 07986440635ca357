#include "rwdre/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/SparseLU>

#include "rwdre/errors.hpp"
#include "rwdre/stats.hpp"

namespace rwdre {

namespace {

using Triplet = Eigen::Triplet<double>;
using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

SpMat from_triplets(std::int64_t n, const std::vector<Triplet>& entries) {
  SpMat m(n, n);
  m.setFromTriplets(entries.begin(), entries.end());
  m.makeCompressed();
  return m;
}

// Appends the negated off-diagonal row sums as diagonal entries.
void close_rows(std::int64_t n, std::vector<Triplet>& entries) {
  std::vector<double> row_sum(static_cast<std::size_t>(n), 0.0);
  for (const auto& t : entries) row_sum[static_cast<std::size_t>(t.row())] += t.value();
  for (std::int64_t i = 0; i < n; ++i)
    entries.emplace_back(i, i, -row_sum[static_cast<std::size_t>(i)]);
}

}  // namespace

StateIndex::StateIndex(const TorusLattice& l) : lat(l) {
  if (lat.n_sites() > 20)
    throw RefusalError("state enumeration supports at most 20 sites, got " +
                       std::to_string(lat.n_sites()));
}

std::uint64_t StateIndex::encode(const Configuration& c) const {
  if (c.lattice != lat) throw UsageError("configuration lattice does not match the index");
  if (c.kind != StateKind::binary || c.n_layers != 1)
    throw RefusalError("state enumeration is limited to one-bit site states");
  std::uint64_t s = 0;
  for (std::int64_t i = 0; i < lat.n_sites(); ++i) s |= (c.at(i) & 1u) << i;
  return s;
}

Configuration StateIndex::decode(std::uint64_t s) const {
  Configuration c(lat, StateKind::binary, 1, 0);
  for (std::int64_t i = 0; i < lat.n_sites(); ++i) c.at(i) = (s >> i) & 1u;
  return c;
}

std::uint64_t StateIndex::shifted(std::uint64_t s, const Site& x) const {
  std::uint64_t out = 0;
  for (std::int64_t i = 0; i < lat.n_sites(); ++i) {
    const std::int64_t src = lat.add(i, negate_site(x));
    out |= ((s >> src) & 1u) << i;
  }
  return out;
}

void GeneratorMatrix::validate(double tol) const {
  for (std::int64_t i = 0; i < n(); ++i) {
    double sum = 0, scale = 1;
    for (SpMat::InnerIterator it(mat, i); it; ++it) {
      if (it.col() != i && it.value() < 0)
        throw Error("negative off-diagonal rate at row " + std::to_string(i));
      sum += it.value();
      scale = std::max(scale, std::abs(it.value()));
    }
    if (std::abs(sum) > tol * scale)
      throw Error("row " + std::to_string(i) + " sums to " + std::to_string(sum));
  }
}

GeneratorMatrix build_env_generator(const EnvironmentEngine& engine, const StateIndex& idx) {
  if (engine.n_layers() != 1)
    throw RefusalError("layered state stacks exceed the enumeration budget");
  const std::int64_t n_states = static_cast<std::int64_t>(idx.n_states());
  std::vector<Triplet> entries;
  for (std::int64_t s = 0; s < n_states; ++s) {
    const Configuration c = idx.decode(static_cast<std::uint64_t>(s));
    engine.for_each_transition(c, [&](std::int64_t site, std::uint64_t bits, double rate) {
      const std::uint64_t mask = std::uint64_t{1} << site;
      const std::uint64_t target =
          (static_cast<std::uint64_t>(s) & ~mask) | ((bits & 1u) << site);
      if (target != static_cast<std::uint64_t>(s) && rate > 0)
        entries.emplace_back(s, static_cast<std::int64_t>(target), rate);
    });
  }
  close_rows(n_states, entries);
  return {from_triplets(n_states, entries)};
}

GeneratorMatrix build_ep_generator(const GeneratorMatrix& env_gen, const RateFunction& rates,
                                   const StateIndex& idx) {
  rates.validate();
  for (const auto& z : rates.jumps)
    for (int j = 0; j < idx.lat.d; ++j)
      if (std::abs(z[j]) >= idx.lat.L)
        throw UsageError("jump radius reaches around the torus; enlarge L");
  const std::int64_t n_states = static_cast<std::int64_t>(idx.n_states());
  if (env_gen.n() != n_states) throw UsageError("environment generator size mismatch");

  std::vector<Triplet> entries;
  for (std::int64_t i = 0; i < n_states; ++i)
    for (SpMat::InnerIterator it(env_gen.mat, i); it; ++it)
      if (it.col() != i) entries.emplace_back(i, it.col(), it.value());

  for (std::int64_t s = 0; s < n_states; ++s) {
    const Configuration c = idx.decode(static_cast<std::uint64_t>(s));
    for (std::size_t iz = 0; iz < rates.n_jumps(); ++iz) {
      const double a = rates.eval(iz, c, kOrigin);
      const auto target = static_cast<std::int64_t>(
          idx.shifted(static_cast<std::uint64_t>(s), negate_site(rates.jumps[iz])));
      if (target != s && a > 0) entries.emplace_back(s, target, a);
    }
  }
  close_rows(n_states, entries);
  return {from_triplets(n_states, entries)};
}

StationaryMeasure stationary_distribution(const GeneratorMatrix& g) {
  const std::int64_t n = g.n();
  if (n == 0) throw UsageError("empty generator");

  // strong connectivity over the sparsity pattern, both directions
  const SpMat transpose = SpMat(g.mat.transpose());
  const auto reach = [n](const SpMat& m) {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::deque<std::int64_t> queue{0};
    seen[0] = 1;
    while (!queue.empty()) {
      const std::int64_t i = queue.front();
      queue.pop_front();
      for (SpMat::InnerIterator it(m, i); it; ++it)
        if (it.col() != i && it.value() > 0 && !seen[static_cast<std::size_t>(it.col())]) {
          seen[static_cast<std::size_t>(it.col())] = 1;
          queue.push_back(it.col());
        }
    }
    return seen;
  };
  const auto fwd = reach(g.mat);
  for (std::int64_t i = 0; i < n; ++i)
    if (!fwd[static_cast<std::size_t>(i)])
      throw UsageError("generator is reducible: state " + std::to_string(i) +
                       " unreachable from state 0");
  const auto bwd = reach(transpose);
  for (std::int64_t i = 0; i < n; ++i)
    if (!bwd[static_cast<std::size_t>(i)])
      throw UsageError("generator is reducible: state 0 unreachable from state " +
                       std::to_string(i));

  // G^T pi = 0 with the first balance row replaced by sum(pi) = 1
  std::vector<Triplet> entries;
  for (std::int64_t i = 0; i < n; ++i)
    for (SpMat::InnerIterator it(g.mat, i); it; ++it)
      if (it.col() != 0) entries.emplace_back(it.col(), i, it.value());
  for (std::int64_t i = 0; i < n; ++i) entries.emplace_back(0, i, 1.0);
  Eigen::SparseMatrix<double> a(n, n);
  a.setFromTriplets(entries.begin(), entries.end());
  a.makeCompressed();

  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.analyzePattern(a);
  lu.factorize(a);
  if (lu.info() != Eigen::Success) throw Error("stationary solve failed to factorize");
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  rhs[0] = 1.0;
  Eigen::VectorXd pi = lu.solve(rhs);
  if (lu.info() != Eigen::Success) throw Error("stationary solve failed");

  if (pi.minCoeff() < -1e-10)
    throw Error("stationary solve produced a negative mass " + std::to_string(pi.minCoeff()));
  pi = pi.cwiseMax(0.0);
  pi /= pi.sum();

  StationaryMeasure out;
  out.pi = std::move(pi);
  out.residual = (transpose * out.pi).cwiseAbs().maxCoeff();
  if (out.residual > 1e-8)
    throw Error("stationary residual " + std::to_string(out.residual) + " exceeds 1e-8");
  return out;
}

std::array<double, 3> exact_speed(const StationaryMeasure& pi, const RateFunction& rates,
                                  const StateIndex& idx) {
  const auto n = static_cast<std::int64_t>(idx.n_states());
  if (pi.pi.size() != n) throw UsageError("stationary measure size mismatch");
  std::array<double, 3> v{0, 0, 0};
  for (std::int64_t s = 0; s < n; ++s) {
    const Configuration c = idx.decode(static_cast<std::uint64_t>(s));
    for (std::size_t iz = 0; iz < rates.n_jumps(); ++iz) {
      const double a = pi.pi[s] * rates.eval(iz, c, kOrigin);
      for (int j = 0; j < 3; ++j) v[j] += a * rates.jumps[iz][j];
    }
  }
  return v;
}

Eigen::VectorXd function_vector(const LocalFunction& f, const StateIndex& idx) {
  const auto n = static_cast<std::int64_t>(idx.n_states());
  Eigen::VectorXd v(n);
  for (std::int64_t s = 0; s < n; ++s)
    v[s] = f.eval(idx.decode(static_cast<std::uint64_t>(s)), kOrigin);
  return v;
}

namespace {

// Dormand-Prince 5(4) step on y' = rhs(y); returns the embedded error.
template <typename Rhs>
double dopri_step(const Rhs& rhs, Eigen::VectorXd& y, double h, Eigen::VectorXd& k1,
                  bool& have_k1) {
  static const double a21 = 1.0 / 5;
  static const double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static const double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static const double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                      a54 = -212.0 / 729;
  static const double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                      a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  static const double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                      b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static const double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                      e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

  if (!have_k1) {
    k1 = rhs(y);
    have_k1 = true;
  }
  const Eigen::VectorXd k2 = rhs(y + h * (a21 * k1));
  const Eigen::VectorXd k3 = rhs(y + h * (a31 * k1 + a32 * k2));
  const Eigen::VectorXd k4 = rhs(y + h * (a41 * k1 + a42 * k2 + a43 * k3));
  const Eigen::VectorXd k5 = rhs(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
  const Eigen::VectorXd k6 = rhs(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
  const Eigen::VectorXd ynew = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
  const Eigen::VectorXd k7 = rhs(ynew);
  const Eigen::VectorXd errv =
      h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

  const double tol = 1e-9;
  double err = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double sc = tol + tol * std::max(std::abs(y[i]), std::abs(ynew[i]));
    err = std::max(err, std::abs(errv[i]) / sc);
  }
  if (err <= 1.0) {
    y = ynew;
    k1 = k7;  // first-same-as-last
  }
  return err;
}

template <typename Rhs>
void integrate_to(const Rhs& rhs, Eigen::VectorXd& y, double& t, double t_end, double& h) {
  Eigen::VectorXd k1;
  bool have_k1 = false;
  int rejected_in_a_row = 0;
  while (t < t_end) {
    const double step = std::min(h, t_end - t);
    const double err = dopri_step(rhs, y, step, k1, have_k1);
    if (err <= 1.0) {
      t += step;
      rejected_in_a_row = 0;
    } else {
      have_k1 = true;  // k1 still valid at unchanged y
      if (++rejected_in_a_row > 60) throw Error("moment integration failed to find a step size");
    }
    const double factor = 0.9 * std::pow(std::max(err, 1e-10), -0.2);
    h = step * std::clamp(factor, 0.2, 5.0);
    if (!(h > 0) || !std::isfinite(h)) throw Error("moment integration step size collapsed");
  }
}

}  // namespace

DiffusionOde moment_ode_diffusion(const GeneratorMatrix& ep_gen, const RateFunction& rates,
                                  const StateIndex& idx, std::span<const double> t_grid,
                                  const Eigen::VectorXd& p0) {
  const std::int64_t n = ep_gen.n();
  if (n > (1 << 14)) throw RefusalError("moment system limited to 16384 states");
  if (n != static_cast<std::int64_t>(idx.n_states()))
    throw UsageError("generator size does not match the state index");
  if (t_grid.size() < 4) throw ParamError("need at least 4 grid times");
  for (std::size_t i = 0; i + 1 < t_grid.size(); ++i)
    if (t_grid[i + 1] <= t_grid[i]) throw ParamError("grid times must increase");
  if (t_grid[0] < 0) throw ParamError("grid times must be nonnegative");
  if (p0.size() != n || std::abs(p0.sum() - 1.0) > 1e-9 || p0.minCoeff() < -1e-12)
    throw ParamError("initial law must be a probability vector over the states");

  const int d = idx.lat.d;
  const int npairs = d * (d + 1) / 2;
  const auto pair_slot = [d](int j, int k) {
    if (j > k) std::swap(j, k);
    return j * d - j * (j - 1) / 2 + (k - j);
  };

  const SpMat gt = SpMat(ep_gen.mat.transpose());
  // Deposit matrices transport displacement weight along every walker jump,
  // including jumps whose configuration shift is the identity: the walker
  // still moves even when the shifted state coincides.
  std::vector<std::vector<Triplet>> w_tr(static_cast<std::size_t>(d));
  std::vector<std::vector<Triplet>> v_tr(static_cast<std::size_t>(npairs));
  for (std::int64_t s = 0; s < n; ++s) {
    const Configuration c = idx.decode(static_cast<std::uint64_t>(s));
    for (std::size_t iz = 0; iz < rates.n_jumps(); ++iz) {
      const double a = rates.eval(iz, c, kOrigin);
      if (a <= 0) continue;
      const auto target = static_cast<std::int64_t>(
          idx.shifted(static_cast<std::uint64_t>(s), negate_site(rates.jumps[iz])));
      const Site& z = rates.jumps[iz];
      for (int j = 0; j < d; ++j) {
        if (z[j] != 0) w_tr[static_cast<std::size_t>(j)].emplace_back(target, s, z[j] * a);
        for (int k = j; k < d; ++k)
          if (z[j] * z[k] != 0)
            v_tr[static_cast<std::size_t>(pair_slot(j, k))].emplace_back(target, s,
                                                                         z[j] * z[k] * a);
      }
    }
  }
  std::vector<SpMat> wt, vt;
  for (auto& tr : w_tr) wt.push_back(from_triplets(n, tr));
  for (auto& tr : v_tr) vt.push_back(from_triplets(n, tr));

  const std::int64_t blocks = 1 + d + npairs;
  Eigen::VectorXd y = Eigen::VectorXd::Zero(n * blocks);
  y.segment(0, n) = p0;

  const auto rhs = [&](const Eigen::VectorXd& cur) {
    Eigen::VectorXd out(cur.size());
    const auto p = cur.segment(0, n);
    out.segment(0, n) = gt * p;
    for (int j = 0; j < d; ++j) {
      const auto m = cur.segment(n * (1 + j), n);
      out.segment(n * (1 + j), n) = gt * m + wt[static_cast<std::size_t>(j)] * p;
    }
    for (int j = 0; j < d; ++j)
      for (int k = j; k < d; ++k) {
        const int slot = pair_slot(j, k);
        const auto s2 = cur.segment(n * (1 + d + slot), n);
        const auto mj = cur.segment(n * (1 + j), n);
        const auto mk = cur.segment(n * (1 + k), n);
        out.segment(n * (1 + d + slot), n) = gt * s2 +
                                             wt[static_cast<std::size_t>(j)] * mk +
                                             wt[static_cast<std::size_t>(k)] * mj +
                                             vt[static_cast<std::size_t>(slot)] * p;
      }
    return out;
  };

  std::vector<double> times;
  std::vector<std::array<double, 6>> cov;
  double t = 0.0, h = 1e-3;
  for (const double tg : t_grid) {
    integrate_to(rhs, y, t, tg, h);
    std::array<double, 6> c{};
    std::array<double, 3> mean{};
    for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] = y.segment(n * (1 + j), n).sum();
    for (int j = 0; j < d; ++j)
      for (int k = j; k < d; ++k) {
        const int slot = pair_slot(j, k);
        c[static_cast<std::size_t>(slot)] = y.segment(n * (1 + d + slot), n).sum() -
                                            mean[static_cast<std::size_t>(j)] *
                                                mean[static_cast<std::size_t>(k)];
      }
    times.push_back(tg);
    cov.push_back(c);
  }

  const double t_mid = (times.front() + times.back()) / 2;
  std::vector<double> tw;
  for (double tv : times)
    if (tv >= t_mid) tw.push_back(tv);
  if (tw.size() < 4) throw ParamError("slope window needs at least 4 grid times");

  DiffusionOde out;
  for (int j = 0; j < d; ++j)
    for (int k = j; k < d; ++k) {
      const int slot = pair_slot(j, k);
      // D comes from the late window; convergence is judged by comparing the
      // early and late halves of the whole grid, which sees the transient the
      // late window alone would hide.
      std::vector<double> cw, c1, t1, c2, t2;
      for (std::size_t i = 0; i < times.size(); ++i) {
        const double cv = cov[i][static_cast<std::size_t>(slot)];
        if (times[i] >= t_mid) {
          cw.push_back(cv);
          t2.push_back(times[i]);
          c2.push_back(cv);
        } else {
          t1.push_back(times[i]);
          c1.push_back(cv);
        }
      }
      const LinearFit full = linear_fit(tw, cw);
      out.D(j, k) = out.D(k, j) = full.slope;
      if (std::abs(full.slope) > 1e-12) out.fit_r2 = std::min(out.fit_r2, full.r2);
      if (t1.size() >= 2 && t2.size() >= 2) {
        const double s1 = linear_fit(t1, c1).slope;
        const double s2 = linear_fit(t2, c2).slope;
        const double drift = std::abs(s1 - s2) / std::max(std::abs(full.slope), 1e-12);
        out.slope_drift = std::max(out.slope_drift, drift);
        if (drift > 0.01)
          throw RefusalError("covariance slope (" + std::to_string(j) + "," +
                             std::to_string(k) + ") still drifts: " + std::to_string(s1) +
                             " vs " + std::to_string(s2) + "; extend the time grid");
      }
    }
  return out;
}

Eigen::VectorXd ep_semigroup_apply(const GeneratorMatrix& g, Eigen::VectorXd f, double t,
                                   double rel_tol) {
  if (t < 0) throw ParamError("time must be nonnegative");
  if (f.size() != g.n()) throw UsageError("function vector size mismatch");
  // The truncation certificate is itself computed in double arithmetic, so a
  // tolerance below its rounding floor could only be met vacuously.
  if (rel_tol < 1e-13)
    throw RefusalError("semigroup tolerance cannot be certified in double arithmetic");
  if (t == 0 || f.size() == 0) return f;

  double q = 0;
  for (std::int64_t i = 0; i < g.n(); ++i) q = std::max(q, -g.mat.coeff(i, i));
  if (q == 0) return f;

  const double fscale = f.cwiseAbs().maxCoeff();
  if (fscale == 0) return f;

  const auto n_steps = static_cast<long>(std::ceil(q * t / 64.0));
  const double dt = t / static_cast<double>(n_steps);
  const double a = q * dt;
  const double budget = rel_tol * fscale / static_cast<double>(n_steps);

  for (long step = 0; step < n_steps; ++step) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(f.size());
    Eigen::VectorXd term = f;
    double w = std::exp(-a);
    double covered = w;
    acc = w * term;
    const long cap = 200 + static_cast<long>(2 * a + 40 * std::sqrt(a + 1));
    long k = 1;
    for (; k <= cap; ++k) {
      term = term + (g.mat * term) / q;  // P = I + G/q applied in place of powers
      w *= a / static_cast<double>(k);
      acc += w * term;
      covered += w;
      if ((1.0 - covered) * fscale <= budget) break;
    }
    if (k > cap)
      throw RefusalError("semigroup tolerance not met within the uniformization budget");
    f = std::move(acc);
  }
  return f;
}

double exact_ep_semigroup(const GeneratorMatrix& g, const Eigen::VectorXd& f,
                          std::uint64_t state, double t) {
  if (static_cast<std::int64_t>(state) >= g.n()) throw UsageError("state out of range");
  const Eigen::VectorXd v = ep_semigroup_apply(g, f, t);
  return v[static_cast<std::int64_t>(state)];
}

void write_matrix_market(const GeneratorMatrix& g, std::ostream& out) {
  out << "%%MatrixMarket matrix coordinate real general\n";
  out << g.n() << " " << g.n() << " " << g.mat.nonZeros() << "\n";
  const auto prec = out.precision(17);
  for (std::int64_t i = 0; i < g.n(); ++i)
    for (SpMat::InnerIterator it(g.mat, i); it; ++it)
      out << (i + 1) << " " << (it.col() + 1) << " " << it.value() << "\n";
  out.precision(prec);
}

}  // namespace rwdre
