#pragma once

// Exponential-Euler Monte Carlo for the controlled state, the linear test
// processes of the duality identity and first/second-order variations.

#include "pmpdp/problem.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <vector>

namespace pmpdp {

/// Adapted control: feedback of the current state, or a per-path sequence.
/// Policies return indices into the problem's ControlSet.  `step` is the
/// node index on the problem horizon, `path` the global path id.
class ControlPolicy {
 public:
  using Feedback = std::function<std::size_t(int step, double t, const Vec& x)>;
  using OpenLoop = std::function<std::size_t(std::uint64_t path, int step)>;

  static ControlPolicy feedback(Feedback fn);
  static ControlPolicy open_loop(OpenLoop fn);
  static ControlPolicy constant(std::size_t index);
  /// Mixing over a partition of the sample space: path -> label j selects
  /// policies[j].
  static ControlPolicy partition(std::function<int(std::uint64_t path)> label, std::vector<ControlPolicy> policies);

  std::size_t operator()(std::uint64_t path, int step, double t, const Vec& x) const;

 private:
  std::function<std::size_t(std::uint64_t, int, double, const Vec&)> fn_;
};

/// Simulated ensemble.  States are stored step-major; increments are not
/// stored but regenerated from the counter-based noise on demand.
struct PathBundle {
  TimeGrid grid;           ///< grid.t0() is the start time
  int offset = 0;          ///< index of grid.t0() on the problem horizon
  NoiseModel noise;
  std::uint64_t first_path = 0;
  int paths = 0;
  int dim = 0;
  int noise_dim = 0;
  std::vector<double> states;           ///< [(step * paths + path) * dim + k]
  std::vector<std::uint16_t> controls;  ///< [step * paths + path]

  int steps() const { return grid.steps(); }
  double time(int step) const { return grid.node(step); }
  const double* state_ptr(int path, int step) const {
    return states.data() + (static_cast<std::size_t>(step) * paths + path) * dim;
  }
  Vec state(int path, int step) const;
  std::size_t control(int path, int step) const { return controls[static_cast<std::size_t>(step) * paths + path]; }
  double dW(int path, int step, int k) const {
    return brownian_increment(noise, grid, first_path + static_cast<std::uint64_t>(path), step, k);
  }
  /// All increments of one step, laid out [path * noise_dim + k].
  void increments(int step, std::vector<double>& out) const;
};

struct SimulationOptions {
  std::uint64_t first_path = 0;
  /// Replaces the problem's noise model (e.g. derived streams, refinement).
  std::optional<NoiseModel> noise;
};

/// X_{i+1} = S(dt)[X_i + a dt + b dW_i] from (t, eta), t a horizon node.
PathBundle simulate_state(const SpectralProblem& p, double t, const Vec& eta, const ControlPolicy& policy, int M,
                          const SimulationOptions& opt = {});
/// Same with one initial state per path (size M), or a single shared one.
PathBundle simulate_state(const SpectralProblem& p, double t, const std::vector<Vec>& eta, const ControlPolicy& policy,
                          int M, const SimulationOptions& opt = {});

/// Replays the stored controls of `bundle` (open loop, per path).
ControlPolicy replay_policy(const PathBundle& bundle);

/// Coefficients and data of the linear test equation
///   d phi = ((A + J) phi + u) ds + sum_k (K_k phi + v_k) dW_k,  phi(t) = xi.
/// Callbacks receive local (path, step) indices of the carrying bundle.
struct TestEquation {
  std::function<Mat(int path, int step)> J;
  std::function<Mat(int path, int step, int k)> K;
  std::function<Vec(int path)> xi;
  std::function<Vec(int path, int step)> u;
  std::function<Mat(int path, int step)> v;  ///< N x m
};

/// Linearization along the bundle: J = a_x, K_k = b_x^{(k)} at (X, u).
TestEquation linearized_test_equation(const SpectralProblem& p, const PathBundle& bundle);

struct TestPaths {
  int paths = 0;
  int steps = 0;
  int dim = 0;
  std::vector<double> states;  ///< [(step * paths + path) * dim + k]
  Vec state(int path, int step) const;
};

/// One exponential-Euler step of the test process on the bundle's noise, and
/// its initial value (zero when xi is unset).
Vec test_process_step(const SpectralProblem& p, const PathBundle& bundle, const TestEquation& eq, int path, int step,
                      const Vec& phi);
Vec test_process_start(const PathBundle& bundle, const TestEquation& eq, int path);

/// Simulates the test process on the bundle's noise from bundle step `start`.
TestPaths simulate_test_process(const SpectralProblem& p, const PathBundle& bundle, const TestEquation& eq,
                                int start = 0);

/// x^z started at bundle step `start` from z(path) under the bundle's
/// controls on the bundle's noise, with xi = x^z - X and the expansion
/// remainders of the drift and diffusion:
///   eps  = c(X + xi) - c(X) - c_x xi,
///   eps2 = eps - 1/2 c_xx(xi, xi).
struct VariationBundle {
  int paths = 0;
  int steps = 0;  ///< steps after `start`
  int dim = 0;
  int start = 0;
  std::vector<double> xi;          ///< [(step * paths + path) * dim + k], step from `start`
  std::vector<double> sup_xi_sq;   ///< sup_s |xi(s)|^2 per path
  std::vector<double> int_eps_a;   ///< int |eps_a|^2 ds per path
  std::vector<double> int_eps_b;   ///< int |eps_b|_HS^2 ds per path
  std::vector<double> int_eps2_a;  ///< int |eps2_a|^2 ds per path
  std::vector<double> int_eps2_b;  ///< int |eps2_b|_HS^2 ds per path
  bool outside_box = false;        ///< some z lies outside the validation box

  Vec xi_at(int path, int step) const;
};

VariationBundle simulate_variation(const SpectralProblem& p, const PathBundle& base, int start,
                                   const std::function<Vec(int path)>& z);

/// Conditional moments E(. | F_t) of the variation at a frozen state, by
/// branching fresh sub-paths from (t, x) for each radius of the ladder along
/// a fixed unit direction.
struct VariationRung {
  double radius = 0.0;
  double sup_xi_sq = 0.0;
  double eps_a = 0.0;
  double eps_b = 0.0;
  double eps2_a = 0.0;
  double eps2_b = 0.0;
};

struct VariationLadder {
  std::vector<VariationRung> rungs;
  bool outside_box = false;
  /// Least-squares slope of log(metric) against log(radius).
  static double slope(const std::vector<VariationRung>& rungs, double VariationRung::*metric);
};

VariationLadder variation_ladder(const SpectralProblem& p, const ControlPolicy& policy, double t, const Vec& x,
                                 const Vec& direction, const std::vector<double>& radii, int branches = 256,
                                 std::uint64_t tag = 0);

/// CSV: path,step,time,x0..x{N-1},control.  At most `max_paths` paths.
void write_trajectory_csv(std::ostream& os, const PathBundle& bundle, int max_paths = -1);

// ---------------------------------------------------------------------------
// Deterministic reductions

/// Pairwise (cascade) sum, fixed order.
double pairwise_sum(const double* x, std::size_t n);
inline double pairwise_sum(const std::vector<double>& x) { return pairwise_sum(x.data(), x.size()); }

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  double sd = 0.0;
};
MeanSe mean_se(const std::vector<double>& x);

}  // namespace pmpdp
