#pragma once

// Value function by backward induction over Markov feedback policies, the
// dynamic-programming gap, HJB residuals, finite-difference differentials and
// super/subdifferential membership tests.

#include "pmpdp/forward.hpp"
#include "pmpdp/regression.hpp"

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <vector>

namespace pmpdp {

enum class ValueMode {
  automatic,  ///< grid for N <= 2, regression otherwise
  grid,       ///< tensor anchors with multilinear interpolation
  regression  ///< quadratic fit on a uniform state cloud
};

struct ValueOptions {
  ValueMode mode = ValueMode::automatic;
  int anchors = 481;  ///< per axis (grid mode)
  /// Anchor / cloud box per axis; NaN means [-box, box] of the problem.
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
  int samples = 10000;  ///< normal draws per step for the one-step expectation (grid mode)
  int cloud = 2000;     ///< fitting states per step (regression mode)
  std::uint64_t tag = 0x76616c7565ULL;
};

/// V^(t_i, x) on the nodes of the problem horizon from the start time to T.
class ValueField {
 public:
  ValueField() = default;

  ValueMode mode() const { return mode_; }
  const SpectralProblem& problem() const { return problem_; }
  const TimeGrid& grid() const { return grid_; }
  int offset() const { return offset_; }  ///< horizon index of the first node
  int steps() const { return grid_.steps(); }
  int dim() const { return dim_; }
  double time(int step) const { return grid_.node(step); }
  std::optional<int> step_of(double t) const { return grid_.index_of(t); }

  double value(int step, const Vec& x) const;
  /// Propagated Monte Carlo error (grid mode) or RMS fit residual (regression mode).
  double stderr_at(int step, const Vec& x) const;
  /// Propagated Monte Carlo error of the spatial gradient (grid mode; 0 otherwise).
  /// Errors at nearby states share samples, so V(y) - V(x) carries about
  /// gradient_stderr * |y - x| rather than the sum of the pointwise errors.
  double gradient_stderr_at(int step, const Vec& x) const;
  /// Minimizing control index at x (nearest anchor in grid mode).  step < steps().
  std::size_t policy_at(int step, const Vec& x) const;
  /// Feedback policy on the problem horizon.
  ControlPolicy policy() const;

  /// Largest spacing of the interpolation (0 in regression mode).
  double spacing() const { return axis_.size() > 1 ? axis_[1] - axis_[0] : 0.0; }
  bool in_hull(const Vec& x) const;
  /// (step, anchor) pairs whose one-step expectation extrapolated beyond the anchors.
  long extrapolations() const { return extrapolations_; }

  /// Anchors (grid mode) or cloud states (regression mode) at a step.
  int point_count(int step) const;
  Vec point(int step, int index) const;

  /// Grid-mode field from a closed-form function (tests, oracles).
  static ValueField from_function(const SpectralProblem& p, double t, const std::vector<double>& axis,
                                  const std::function<double(double t, const Vec& x)>& fn);

 private:
  friend ValueField compute_value(const SpectralProblem& p, double t, const ValueOptions& opt);

  double interpolate(const std::vector<double>& data, const Vec& x) const;
  Vec interpolate_gradient(const std::vector<double>& data, const Vec& x) const;

  ValueMode mode_ = ValueMode::grid;
  SpectralProblem problem_;
  TimeGrid grid_;
  int offset_ = 0;
  int dim_ = 1;
  double lo_ = 0.0;
  double hi_ = 0.0;
  // Grid mode.
  std::vector<double> axis_;
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<double>> stderr_;    // variances
  std::vector<std::vector<double>> grad_var_;  // summed gradient variances
  std::vector<std::vector<std::uint16_t>> policy_;
  long extrapolations_ = 0;
  // Regression mode.
  std::vector<FittedStep> fits_;
  std::vector<double> fit_rms_;
  std::vector<std::vector<double>> cloud_;  // [step][index * dim + k]
};

/// Backward induction from T to t: at each node and anchor, the control
/// minimizing the one-step cost plus the expected interpolated continuation
/// value (recursive drivers use the one-step martingale term as Z).
ValueField compute_value(const SpectralProblem& p, double t, const ValueOptions& opt = {});

struct DppReport {
  double lhs = 0.0;     ///< V^(t, eta)
  double rhs = 0.0;     ///< E[ int_t^that f ds + V^(that, X(that)) ] under the field's policy
  double lhs_se = 0.0;
  double rhs_se = 0.0;
  double gap = 0.0;     ///< |lhs - rhs|
  double combined_se = 0.0;
};

/// Compares V^(t, eta) with the two-stage expression on [t, that].  For a
/// recursive cost the inner value is the backward evaluator on the window.
DppReport dpp_consistency(const ValueField& field, double t, double t_hat, const Vec& eta, int paths = 100000,
                          std::uint64_t tag = 0x647070ULL);

/// G(t, x, rho, p, P) = 1/2 <P b, b>_HS + <p, a> - f.
double hamiltonian_G(const SpectralProblem& pr, double t, const Vec& x, const ControlPoint& rho, const Vec& p,
                     const Mat& P);

struct DifferentialEstimate {
  double Vt = 0.0;  ///< right difference quotient in time
  Vec Vx;
  Mat Vxx;
  double err_t = 0.0;
  Vec err_x;
  Mat err_xx;
  double h = 0.0;   ///< spatial step
  int time_steps = 1;
  bool noisy = false;  ///< some error bar exceeds its estimate
};

/// Central differences in x with step h (error bars from the h / 2h
/// comparison) and the right quotient over `time_steps` nodes (error bar from
/// the k / 2k comparison).
DifferentialEstimate numeric_differentials(const ValueField& field, int step, const Vec& x, double h,
                                           int time_steps = 1);

struct HjbResidual {
  double residual = 0.0;   ///< V_t + <A* V_x, x> + min_rho [1/2 <V_xx b, b> + <V_x, a> + f]
  double error_bar = 0.0;  ///< propagated from the derivative error bars
  bool inconclusive = false;
  DifferentialEstimate diff;
};

HjbResidual hjb_residual(const ValueField& field, int step, const Vec& x, double h, int time_steps = 1);

enum class ProbeKind {
  spatial,  ///< s = t, y = x + r d
  time,     ///< y = x, s = t + r (r a multiple of the field step)
  joint     ///< s - t = r^2 (rounded to nodes), y = x + r d
};

struct DifferentialTriple {
  double r = 0.0;
  Vec p;
  Mat P;
  /// Standard errors of an estimated candidate (norms); they widen the
  /// tolerance by their effect on the probe residual.
  double r_se = 0.0;
  double p_se = 0.0;
  double P_se = 0.0;
};

struct MembershipReport {
  bool accepted = false;
  double margin = 0.0;     ///< worst normalized residual at the finest rung
  double tolerance = 0.0;  ///< 3 propagated errors, normalized, at the witness
  std::vector<double> rung_margins;  ///< worst normalized residual per rung
  double trend = 0.0;      ///< log-log slope of the positive residual part over the ladder
  int witness_direction = -1;
};

/// Tests v(s,y) - v(t,x) - r(s-t) - <p, y-x> - 1/2 <P(y-x), y-x> <= o(|s-t| + |y-x|^2)
/// (super = true) or >= -o(.) (super = false) on a probe ladder.  Radii must
/// be decreasing; the decision uses the finest rung.
MembershipReport superdiff_membership(const ValueField& field, int step, const Vec& x, const DifferentialTriple& triple,
                                      const std::vector<double>& radii, ProbeKind kind = ProbeKind::spatial,
                                      bool super = true);

/// CSV: time,x0..x{N-1},value,stderr,control.
void write_value_csv(std::ostream& os, const ValueField& field, int time_stride = 1);

}  // namespace pmpdp
