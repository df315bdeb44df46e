#pragma once

// Second-order adjoint as a matrix BSDE on the truncation, the Hessian of the
// Hamiltonian and the a-posteriori duality (transposition) check.

#include "pmpdp/backward.hpp"

#include <functional>
#include <iosfwd>
#include <vector>

namespace pmpdp {

/// H(t, x, u, p, q) = <p, a> + <q, b>_HS - f.
double hamiltonian_H(const SpectralProblem& pr, double t, const Vec& x, const ControlPoint& u, const Vec& p,
                     const Mat& q);
/// H_xx = a_xx(p) + b_xx(q) - f_xx, symmetrized.
Mat hessian_H(const SpectralProblem& pr, double t, const Vec& x, const ControlPoint& u, const Vec& p, const Mat& q);

/// Data of the linear matrix BSDE
///   dP = -[(A+J)^T P + P (A+J) + sum_k K_k^T P K_k + sum_k (K_k^T Q_k + Q_k K_k) - F] dt + sum_k Q_k dW_k,
///   P(T) = P_T.
/// Callbacks take local (path, step) indices of the carrying bundle and may
/// reference it; they must outlive any solution built from them.
struct MatrixBsdeData {
  std::function<Mat(int path, int step)> J;
  std::function<Mat(int path, int step, int k)> K;
  std::function<Mat(int path, int step)> F;
  std::function<Mat(int path)> P_T;
};

/// Data of the second-order adjoint along an optimal bundle:
/// J = a_x, K_k = b_x^{(k)}, F = -H_xx(X, u, p, q), P_T = -h_xx(X_T).
MatrixBsdeData second_adjoint_data(const SpectralProblem& pr, const PathBundle& bundle, const AdjointFirst& adjoint);

/// Solution (P, Q).  Step i holds E[P_{i+1} | X_i] (value targets, upper
/// triangle) and Q_i (martingale targets k S + e, S = N(N+1)/2).
struct AdjointSecond {
  int dim = 1;
  int noise_dim = 1;
  int steps = 0;
  double dt = 0.0;
  Mat S;  ///< semigroup over one step
  const PathBundle* bundle = nullptr;  ///< carrying bundle, not owned
  MatrixBsdeData data;
  std::vector<StepFit> fits;
  std::vector<double> condition;
  std::vector<Mat> mean_P;  ///< E P_i, i = 0..steps
  std::vector<Mat> mean_Q;  ///< E Q_i^{(0)}, i = 0..steps-1 (first noise component)

  // Norms entering the well-posedness ratio.
  double norm_P = 0.0;   ///< max_i sqrt(E |P_i|^2)
  double norm_Q = 0.0;   ///< sqrt(E sum_i |Q_i|^2 dt)
  double norm_F = 0.0;   ///< sum_i sqrt(E |F_i|^2) dt
  double norm_PT = 0.0;  ///< sqrt(E |P_T|^2)

  /// Everything one backward step uses at (path, step < steps).
  struct StepTerms {
    Mat P, P_hat, J, F;
    std::vector<Mat> Q, K;  ///< per noise component; Q from the step's own fit
  };
  void terms(int path, int step, StepTerms& out) const;

  /// P at (path, step); the terminal node is P_T exactly.  Symmetric.
  Mat P(int path, int step) const;
  /// E[P_{i+1} | X_i] at (path, step).
  Mat P_hat(int path, int step) const;
  /// Q_k at (path, step); the last step reuses the penultimate fit.
  Mat Q(int path, int step, int k) const;
  /// Largest batch-means error over the entries of E[P_{i+1} | X_i].
  double P_stderr(int path, int step) const;

  int q_step(int step) const { return (step == steps - 1 && steps >= 2) ? step - 1 : step; }
};

/// Solves the matrix BSDE on the whole bundle.  `bundle` must outlive the result.
AdjointSecond solve_matrix_bsde(const PathBundle& bundle, const Mat& semigroup, MatrixBsdeData data,
                                const BackwardOptions& opt = {});
AdjointSecond solve_second_adjoint(const SpectralProblem& pr, const PathBundle& bundle, const AdjointFirst& adjoint,
                                   const BackwardOptions& opt = {});

/// Two test equations sharing J and K (usually the linearization along the
/// bundle) with their own (xi, u, v).
struct TranspositionData {
  TestEquation first;
  TestEquation second;
};

struct TranspositionResult {
  double lhs = 0.0;       ///< E<P_T phi1(T), phi2(T)> - E int <F phi1, phi2>
  double rhs = 0.0;       ///< E<P(t) xi1, xi2> + E int (pairing terms)
  double residual = 0.0;  ///< |lhs - rhs|
  double se = 0.0;        ///< Monte Carlo error of lhs - rhs (path-wise, after the control variate)
  double raw_se = 0.0;    ///< same without the control variate
  double magnitude = 0.0; ///< max(|lhs|, |rhs|)
};

/// Evaluates both sides of the duality identity on the window [t_start, T]
/// (bundle step `start`) with test processes on the bundle's own noise.  The
/// residual's estimator subtracts the mean-zero stochastic integral of the
/// product's martingale part unless `control_variate` is false.
TranspositionResult transposition_residual(const SpectralProblem& pr, const PathBundle& bundle,
                                           const TranspositionData& data, const AdjointSecond& solution,
                                           int start = 0, bool control_variate = true);

/// (|P| + |Q|) / (|F| + |P_T|) with the norms recorded by the solver; 0 for
/// zero data.
double wellposedness_bound(const AdjointSecond& solution);

/// CSV: step,time,mean_P_norm,mean_Q_norm,condition.
void write_second_adjoint_csv(std::ostream& os, const AdjointSecond& solution, const PathBundle& bundle);

}  // namespace pmpdp
