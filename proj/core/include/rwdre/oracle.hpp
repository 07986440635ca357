#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "rwdre/engine.hpp"
#include "rwdre/rates.hpp"

namespace rwdre {

// Bijection between binary configurations on a tiny torus and the integers
// 0..2^sites - 1; bit i of the integer is the value at lattice index i.
struct StateIndex {
  TorusLattice lat;

  explicit StateIndex(const TorusLattice& l);  // refuses more than 20 sites

  std::uint64_t n_states() const { return std::uint64_t{1} << lat.n_sites(); }
  std::uint64_t encode(const Configuration& c) const;
  Configuration decode(std::uint64_t s) const;
  // State of the configuration translated by x (decode, shift, encode).
  std::uint64_t shifted(std::uint64_t s, const Site& x) const;
  std::uint64_t site_bit(std::uint64_t s, std::int64_t site) const {
    return (s >> static_cast<unsigned>(site)) & 1u;
  }
};

// Transition-rate matrix: entry (i, j) is the rate from state i to state j,
// diagonal the negated off-diagonal row sum.
struct GeneratorMatrix {
  Eigen::SparseMatrix<double, Eigen::RowMajor> mat;

  std::int64_t n() const { return mat.rows(); }
  // Off-diagonals nonnegative, row sums zero within tol * (row scale).
  void validate(double tol = 1e-12) const;
};

struct StationaryMeasure {
  Eigen::VectorXd pi;
  double residual = 0.0;  // max |pi G| after normalization
};

// Exact single-site update rates of the environment alone. Refuses engines
// whose per-site state exceeds one bit.
GeneratorMatrix build_env_generator(const EnvironmentEngine& engine, const StateIndex& idx);

// Adds the walker terms to an environment generator: for each state and jump
// z, rate alpha(eta, z) into the state of the configuration translated by -z.
// Jumps whose translation is the identity shift contribute nothing here (the
// state does not change); the moment ODEs account for those walker moves
// separately.
GeneratorMatrix build_ep_generator(const GeneratorMatrix& env_gen, const RateFunction& rates,
                                   const StateIndex& idx);

// Solves pi G = 0, sum(pi) = 1 by sparse LU with the first balance equation
// replaced by the normalization. Requires strong connectivity over the
// sparsity pattern; the error names an unreachable state pair.
StationaryMeasure stationary_distribution(const GeneratorMatrix& g);

// v = sum_eta pi(eta) sum_z z alpha(eta, z).
std::array<double, 3> exact_speed(const StationaryMeasure& pi, const RateFunction& rates,
                                  const StateIndex& idx);

struct DiffusionOde {
  Eigen::Matrix3d D = Eigen::Matrix3d::Zero();
  double fit_r2 = 1.0;       // linear fit quality over the slope window
  double slope_drift = 0.0;  // relative slope change between window halves
};

// Integrates the closed moment system for the environment-process law p(t),
// the displacement-weighted law m(t), and the second-moment-weighted law
// s(t); D is the fitted limit slope of Cov(X_t) over the last half of the
// grid. Refuses when the slope still drifts more than 1% between halves of
// the fit window.
DiffusionOde moment_ode_diffusion(const GeneratorMatrix& ep_gen, const RateFunction& rates,
                                  const StateIndex& idx, std::span<const double> t_grid,
                                  const Eigen::VectorXd& p0);

// f evaluated at the frame origin of every state.
Eigen::VectorXd function_vector(const LocalFunction& f, const StateIndex& idx);

// exp(t G) applied to f by uniformization with a certified Poisson tail
// bound at relative tolerance rel_tol (relative to max |f|).
Eigen::VectorXd ep_semigroup_apply(const GeneratorMatrix& g, Eigen::VectorXd f, double t,
                                   double rel_tol = 1e-8);

// (exp(t G) f)(state).
double exact_ep_semigroup(const GeneratorMatrix& g, const Eigen::VectorXd& f,
                          std::uint64_t state, double t);

// Coordinate-format Matrix Market text, one-based indices, row-major order.
void write_matrix_market(const GeneratorMatrix& g, std::ostream& out);

}  // namespace rwdre
