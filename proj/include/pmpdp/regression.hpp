#pragma once

// Least-squares Monte Carlo projection: conditional expectations E[Y | X_i]
// approximated by polynomial regression on the simulated cloud at step i.

#include "pmpdp/spectral.hpp"

#include <string>
#include <vector>

namespace pmpdp {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Polynomials up to total degree `degree` (0, 1 or 2) in the standardized
/// state coordinates.  Always contains the constant.
struct RegressionBasis {
  int degree = 2;

  static RegressionBasis quadratic() { return {2}; }
  static RegressionBasis affine() { return {1}; }
  static RegressionBasis constant() { return {0}; }

  int size(int active_dims) const;
  /// Feature vector of standardized coordinates z[0..d).
  void features(const double* z, int d, double* out) const;
};

/// One fitted conditional expectation: x -> coef^T phi((x - mean) / scale).
struct FittedStep {
  RegressionBasis basis;
  std::vector<int> active;       ///< coordinates with non-zero spread
  std::vector<double> mean;      ///< per active coordinate
  std::vector<double> scale;
  Eigen::MatrixXd coef;          ///< K x T
  std::vector<Eigen::MatrixXd> batch_coef;  ///< empty when batches were not fitted
  double condition = 1.0;        ///< of the normalized Gram matrix

  int targets() const { return static_cast<int>(coef.cols()); }
  Eigen::VectorXd features(const double* x) const;
  /// All targets at x.
  Eigen::VectorXd eval(const double* x) const;
  double eval(const double* x, int target) const;
  /// All targets at x into out[0..targets()), without allocating.
  void eval(const double* x, double* out) const;
  /// Batch-means standard error of the fitted value; NaN without batches.
  double stderr_at(const double* x, int target) const;
};

/// Design matrix for one step.  Throws when the normalized Gram matrix is
/// numerically singular (smallest/largest eigenvalue below 1e-12).
class Regression {
 public:
  /// X: M x N samples (row-major, one row per path).  `where` names the
  /// time step in error messages.  `batches` > 1 also fits per-batch
  /// coefficients for standard errors when every batch has at least four
  /// samples per basis function.
  Regression(RegressionBasis basis, const double* X, int M, int N, std::string where, int batches = 10);

  int samples() const { return M_; }
  int features() const { return static_cast<int>(phi_.cols()); }
  double condition() const { return condition_; }

  /// Fits the columns of Y (M x T).
  FittedStep fit(const Eigen::MatrixXd& Y) const;
  /// In-sample fitted values of a fit produced by this design (M x T).
  Eigen::MatrixXd fitted(const FittedStep& f) const { return phi_ * f.coef; }

 private:
  FittedStep proto_;
  int M_ = 0;
  int batches_ = 0;
  Eigen::MatrixXd phi_;  // M x K
  Eigen::VectorXd dinv_;
  Eigen::LDLT<Eigen::MatrixXd> gram_;
  std::vector<Eigen::LDLT<Eigen::MatrixXd>> batch_gram_;
  double condition_ = 1.0;
};

/// Conditional mean of targets Y and their martingale increments:
///   value = E[Y | X],  mart(k * T + c) = E[(Y_c - E[Y_c | X]) dW_k | X] / dt.
/// Centering before multiplying by dW removes the O(1/sqrt(M dt)) noise a
/// direct regression of Y dW would carry, without changing the estimand.
struct StepFit {
  FittedStep value;
  FittedStep mart;
};

/// dw: M x m increments, row-major.
StepFit fit_with_increments(const Regression& reg, const Eigen::MatrixXd& Y, const std::vector<double>& dw, int m,
                            double dt);

/// Sequence of fitted steps on a time grid (index = grid step).
struct FittedField {
  std::vector<FittedStep> steps;

  int size() const { return static_cast<int>(steps.size()); }
  const FittedStep& at(int step) const { return steps.at(static_cast<std::size_t>(step)); }
  double max_condition() const;
};

}  // namespace pmpdp
