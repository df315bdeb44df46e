#pragma once

// Finite spectral truncation of the state space: diagonal (or wave-block)
// generator, its semigroup, time grids and counter-based Brownian increments.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmpdp {

/// Largest supported truncation dimension (state and noise).  Small vectors
/// and matrices live on the stack so hot simulation loops never allocate.
inline constexpr int kMaxDim = 16;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

/// Coefficients of a state against the retained eigenbasis.
using StateVector = Vec;
/// Truncated Hilbert-Schmidt operator from the m-dimensional noise space into H.
using HSMatrix = Mat;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Generator A on the truncation.  The first `decay.size()` coordinates are
/// eigen-modes with A e_k = -lambda_k e_k; the remaining coordinates come in
/// pairs (z1, z2) evolving under the skew block [[0, w], [-w, 0]] (first-order
/// form of a wave mode in energy-scaled coordinates).
class SpectralOperator {
 public:
  SpectralOperator() = default;

  static SpectralOperator diagonal(std::vector<double> eigenvalues);
  static SpectralOperator zero(int dim);
  static SpectralOperator wave(std::vector<double> frequencies);

  int dim() const { return static_cast<int>(decay_.size() + 2 * frequency_.size()); }
  bool is_diagonal() const { return frequency_.empty(); }
  bool is_zero() const;
  std::span<const double> eigenvalues() const { return decay_; }
  std::span<const double> frequencies() const { return frequency_; }

  /// A v.
  Vec apply(const Vec& v) const;
  /// A^* v.
  Vec apply_adjoint(const Vec& v) const;
  /// S(t) v.  Requires t >= 0.
  Vec semigroup(double t, const Vec& v) const;
  /// Matrix of S(t).
  Mat semigroup_matrix(double t) const;

 private:
  std::vector<double> decay_;
  std::vector<double> frequency_;
};

/// S(t)v with w_k = exp(-lambda_k t) v_k on eigen-modes.  Rejects t < 0.
StateVector semigroup_apply(const SpectralOperator& op, double t, const StateVector& v);

/// Uniform grid t_i = t0 + i dt on [t0, T].
class TimeGrid {
 public:
  TimeGrid() = default;
  TimeGrid(double t0, double T, int steps);

  double t0() const { return t0_; }
  double T() const { return T_; }
  int steps() const { return steps_; }
  double dt() const { return (T_ - t0_) / steps_; }
  /// Node t_i; the last node is T exactly.
  double node(int i) const { return i == steps_ ? T_ : t0_ + i * dt(); }
  /// Index of the node at time t, if t is a node up to rounding.
  std::optional<int> index_of(double t) const;
  /// Same nodes restricted to [t_i, T].
  TimeGrid tail(int i) const;

 private:
  double t0_ = 0.0;
  double T_ = 1.0;
  int steps_ = 1;
};

/// Truncated cylindrical Brownian motion.  Increments are a pure function of
/// (seed, path, fine step, coordinate), so any subset of paths can be generated
/// in any order.  `refinement` r > 1 makes each grid increment the sum of r
/// finer increments, which lets grids of different resolution share one
/// Brownian path.
struct NoiseModel {
  int dim = 1;
  std::uint64_t seed = 0;
  int refinement = 1;

  /// Derived, statistically independent stream (e.g. for branching).
  NoiseModel derive(std::uint64_t tag) const;
};

/// Standard normal draw for a (seed, stream, counter) triple.
double counter_normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter);

/// Brownian increment of coordinate k over [t_step, t_step+1] of `grid`, where
/// `step` counts from the grid origin.
double brownian_increment(const NoiseModel& noise, const TimeGrid& grid, std::uint64_t path,
                          int step, int k);

/// Full increment ensemble, laid out [path][step][coordinate].
struct IncrementEnsemble {
  int paths = 0;
  int steps = 0;
  int dim = 0;
  std::vector<double> data;

  double operator()(int path, int step, int k) const {
    return data[(static_cast<std::size_t>(path) * steps + step) * dim + k];
  }
};

IncrementEnsemble sample_increments(const NoiseModel& noise, const TimeGrid& grid, int paths);

/// Frobenius norm, the L_2^0 norm on the truncation.
inline double hs_norm(const HSMatrix& b) { return b.norm(); }

}  // namespace pmpdp
