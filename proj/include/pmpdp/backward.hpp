#pragma once

// Regression-based backward solvers on a simulated bundle: cost functional,
// recursive-cost BSDE, the backward evaluator on a window, the first-order
// adjoint and the comparison check.

#include "pmpdp/forward.hpp"
#include "pmpdp/regression.hpp"

#include <functional>
#include <iosfwd>
#include <vector>

namespace pmpdp {

using Driver = std::function<double(double t, const Vec& x, double y, const Vec& z, const ControlPoint& u)>;
using TerminalFn = std::function<double(const Vec& x)>;

struct BackwardOptions {
  RegressionBasis basis = RegressionBasis::quadratic();
  int batches = 10;
};

/// Monte Carlo estimate of E[ sum f(t_i, X_i, u_i) dt + h(X_L) ] with the
/// bundle's recorded controls.
MeanSe cost_functional(const SpectralProblem& p, const PathBundle& bundle);

/// (Y, Z) on the window [s0, s1] of a bundle, held as fitted regressions.
/// Step i stores E[Y_{i+1} | X_i] and Z_i (martingale targets 0..m-1);
/// Y_i = E[Y_{i+1} | X_i] + g(t_i, X_i, E[Y_{i+1} | X_i], Z_i, u_i) dt.
struct BackwardPair {
  int s0 = 0;
  int s1 = 0;
  int noise_dim = 1;
  double dt = 0.0;
  Driver g;
  std::vector<StepFit> fits;  ///< index i - s0
  std::vector<double> start_values;  ///< Y_{s0} per path
  MeanSe y0;                         ///< mean of Y_{s0}; se from the path-wise recursion
  double y0_regression_se = 0.0;     ///< batch-means error of the start fit
  std::vector<double> mean_y;        ///< E Y_i, i = s0..s1
  std::vector<double> mean_abs_z;    ///< E |Z_i|, i = s0..s1-1
  std::vector<double> condition;     ///< regression condition numbers, i = s0..s1-1

  /// Y at (path, step) reconstructed from the fits (step < s1).
  double Y(const SpectralProblem& p, const PathBundle& b, int path, int step) const;
  Vec Z(const PathBundle& b, int path, int step) const;
  double Y_stderr(const PathBundle& b, int path, int step) const;
};

/// Solves the BSDE on bundle steps [s0, s1] with terminal values per path at s1.
BackwardPair solve_bsde_window(const SpectralProblem& p, const PathBundle& bundle, const Driver& g,
                               const std::vector<double>& terminal, int s0, int s1, const BackwardOptions& opt = {});
BackwardPair solve_bsde(const SpectralProblem& p, const PathBundle& bundle, const Driver& g, const TerminalFn& phi,
                        const BackwardOptions& opt = {});
/// With the problem's own driver g and terminal Phi.
BackwardPair solve_bsde(const SpectralProblem& p, const PathBundle& bundle, const BackwardOptions& opt = {});

/// G_{t, t_end}[zeta]: the window BSDE value at t for terminal zeta at t_end
/// (per path).  t and t_end must be bundle nodes.
std::vector<double> backward_evaluator(const SpectralProblem& p, const PathBundle& bundle,
                                       const std::vector<double>& zeta, double t, double t_end, const Driver& g,
                                       const BackwardOptions& opt = {});

/// First-order adjoint (p, q) along an optimal bundle.  Step i stores
/// E[p_{i+1} | X_i] (value targets 0..N-1) and q_i (martingale targets k N + r).
struct AdjointFirst {
  int dim = 1;
  int noise_dim = 1;
  int steps = 0;
  double dt = 0.0;
  Mat St;  ///< transposed one-step semigroup
  std::vector<StepFit> fits;
  /// Regression of the pathwise (unnested) adjoint on X_i.  Its batch-means
  /// error reflects the sampling error accumulated from the terminal time.
  std::vector<FittedStep> pathwise;
  std::vector<double> condition;

  /// p at (path, step); the terminal node returns -h_x(X_T) exactly.
  Vec p(const SpectralProblem& pr, const PathBundle& b, int path, int step) const;
  /// q at (path, step), step < steps.  The dW-regression of the last step
  /// only sees terminal data and is noise dominated, so q there is the
  /// penultimate step's fit evaluated at the current state.
  Mat q(const PathBundle& b, int path, int step) const;
  /// Batch-means errors: p's is the accumulated error from the pathwise
  /// regression, q's that of the step's own fit.
  Vec p_stderr(const PathBundle& b, int path, int step) const;
  Mat q_stderr(const PathBundle& b, int path, int step) const;

  int q_step(int step) const { return (step == steps - 1 && steps >= 2) ? step - 1 : step; }
};

AdjointFirst solve_first_adjoint(const SpectralProblem& p, const PathBundle& bundle, const BackwardOptions& opt = {});

struct ComparisonReport {
  bool passed = true;
  double worst = 0.0;      ///< largest Y1 - Y2 - tolerance seen
  double tolerance = 0.0;  ///< at the witness
  int witness_path = -1;
  int witness_step = -1;
  double y0_gap = 0.0;     ///< mean Y2(s0) - mean Y1(s0)
};

/// Checks Y1 <= Y2 + 3 regression standard errors path-wise on all steps.
/// Throws if (g1, Phi1) <= (g2, Phi2) fails at a sampled argument.
ComparisonReport comparison_check(const SpectralProblem& p, const PathBundle& bundle, const Driver& g1,
                                  const Driver& g2, const TerminalFn& phi1, const TerminalFn& phi2,
                                  const BackwardOptions& opt = {});

/// CSV: step,time,mean_y,mean_abs_z,condition.
void write_bsde_csv(std::ostream& os, const BackwardPair& pair, const PathBundle& bundle);

}  // namespace pmpdp
