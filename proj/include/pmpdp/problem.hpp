#pragma once

// Declarative control problems on the spectral truncation: coefficients,
// control set, assumption validation and the built-in scenarios.

#include "pmpdp/spectral.hpp"

#include <json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace pmpdp {

using ControlPoint = Vec;

/// Finite control set {rho_1, ..., rho_K} with the Euclidean metric.
class ControlSet {
 public:
  ControlSet() = default;
  explicit ControlSet(std::vector<ControlPoint> points);

  /// Scalar grid lo, lo + step, ..., hi (hi included up to rounding).
  static ControlSet grid(double lo, double hi, double step);

  std::size_t size() const { return points_.size(); }
  const ControlPoint& operator[](std::size_t i) const { return points_[i]; }
  const std::vector<ControlPoint>& points() const { return points_; }
  int dim() const { return points_.empty() ? 0 : static_cast<int>(points_.front().size()); }

  double distance(std::size_t i, std::size_t j) const { return (points_[i] - points_[j]).norm(); }
  /// Closest point to `value`, lowest index on ties.
  std::size_t nearest(const ControlPoint& value) const;

 private:
  std::vector<ControlPoint> points_;
};

/// Coefficient callbacks.  Derivative callbacks are optional; when absent the
/// accessor methods fall back to central finite differences.
///
/// Conventions: a_x(i, j) = d a_i / d x_j; b_x(k) is the Jacobian of the k-th
/// noise column of b; a_xx(w) and b_xx(W) are Hessians of the contractions
/// <w, a> and <W, b>_HS.
struct CoefficientSet {
  using DriftFn = std::function<Vec(double, const Vec&, const ControlPoint&)>;
  using DiffusionFn = std::function<Mat(double, const Vec&, const ControlPoint&)>;
  using RunningFn = std::function<double(double, const Vec&, const ControlPoint&)>;
  using TerminalFn = std::function<double(const Vec&)>;
  using DriverFn = std::function<double(double, const Vec&, double, const Vec&, const ControlPoint&)>;

  int state_dim = 1;
  int noise_dim = 1;

  DriftFn drift;
  DiffusionFn diffusion;
  RunningFn running_cost;
  TerminalFn terminal_cost;
  /// Recursive driver g(t, x, y, z, u); defaults to the running cost f(t, x, u).
  DriverFn driver;
  /// Terminal value Phi of the recursive cost; defaults to h.
  TerminalFn terminal_value;

  std::function<Mat(double, const Vec&, const ControlPoint&)> drift_x;
  std::function<Mat(double, const Vec&, const ControlPoint&, int)> diffusion_x;
  std::function<Vec(double, const Vec&, const ControlPoint&)> running_cost_x;
  std::function<Vec(const Vec&)> terminal_cost_x;
  std::function<Mat(double, const Vec&, const ControlPoint&, const Vec&)> drift_xx;
  std::function<Mat(double, const Vec&, const ControlPoint&, const Mat&)> diffusion_xx;
  std::function<Mat(double, const Vec&, const ControlPoint&)> running_cost_xx;
  std::function<Mat(const Vec&)> terminal_cost_xx;

  double fd_step = 1e-5;
  double fd_step2 = 1e-4;

  Vec a(double t, const Vec& x, const ControlPoint& u) const { return drift(t, x, u); }
  Mat b(double t, const Vec& x, const ControlPoint& u) const { return diffusion(t, x, u); }
  double f(double t, const Vec& x, const ControlPoint& u) const { return running_cost(t, x, u); }
  double h(const Vec& x) const { return terminal_cost(x); }
  double g(double t, const Vec& x, double y, const Vec& z, const ControlPoint& u) const;
  double phi(const Vec& x) const;

  Mat a_x(double t, const Vec& x, const ControlPoint& u) const;
  Mat b_x(double t, const Vec& x, const ControlPoint& u, int k) const;
  Vec f_x(double t, const Vec& x, const ControlPoint& u) const;
  Vec h_x(const Vec& x) const;
  Mat a_xx(double t, const Vec& x, const ControlPoint& u, const Vec& w) const;
  Mat b_xx(double t, const Vec& x, const ControlPoint& u, const Mat& w) const;
  Mat f_xx(double t, const Vec& x, const ControlPoint& u) const;
  Mat h_xx(const Vec& x) const;

  /// b_x^* q: the adjoint of x -> (b_x(k) x)_k applied to an N x m matrix.
  Vec b_x_adjoint(double t, const Vec& x, const ControlPoint& u, const Mat& q) const;

  bool has_closed_form_derivatives() const {
    return drift_x && diffusion_x && running_cost_x && terminal_cost_x && drift_xx && diffusion_xx &&
           running_cost_xx && terminal_cost_xx;
  }
};

/// Parameters of the scalar linear-quadratic benchmark:
/// dX = (alpha X + beta u) dt + sigma dW, f = m x^2 + n u^2, h = gamma x^2.
struct LqParams {
  double alpha = 0.0;
  double beta = 1.0;
  double sigma = 0.5;
  double m_cost = 1.0;
  double n_cost = 1.0;
  double gamma = 1.0;
  double T = 1.0;
};

/// Discretization knobs shared by scenario constructors.
struct ProblemOptions {
  int steps = 1000;
  double control_lo = -3.0;
  double control_hi = 3.0;
  double control_step = 0.05;
  std::uint64_t seed = 20240601;
  /// Half-width of the validation box (per coordinate).
  double box = 3.0;
};

struct SpectralProblem {
  std::string name;
  SpectralOperator op;
  CoefficientSet coeff;
  ControlSet controls;
  TimeGrid horizon;
  NoiseModel noise;
  double box = 3.0;
  std::optional<LqParams> lq;
  /// Scenario parameters as given (echoed into experiment configs).
  nlohmann::json params;

  int dim() const { return op.dim(); }
  int noise_dim() const { return noise.dim; }
  /// Same problem on a grid with `steps` steps.
  SpectralProblem with_steps(int steps) const;
};

// ---------------------------------------------------------------------------
// Assumption validation

enum class ValidationMode { bounded_box, global };

struct AssumptionCheck {
  std::string name;
  bool passed = true;
  double worst = 0.0;        ///< worst sampled constant on the base box
  double worst_scaled = 0.0; ///< worst constant at the largest probe scale
  std::string witness;       ///< point realizing the worst constant
};

struct AssumptionReport {
  ValidationMode mode = ValidationMode::bounded_box;
  std::vector<AssumptionCheck> checks;

  bool passed() const;
  const AssumptionCheck& get(const std::string& name) const;
};

/// Samples Lipschitz ratios, growth and second-derivative bounds of all
/// coefficients over random points in the box, and cross-checks closed-form
/// derivatives against central differences.  Throws on non-finite output.
AssumptionReport validate_assumptions(const SpectralProblem& p, int samples,
                                      ValidationMode mode = ValidationMode::bounded_box);

// ---------------------------------------------------------------------------
// Scenarios

SpectralProblem make_lq(const LqParams& lq, const ProblemOptions& opt = {});
SpectralProblem make_lq(double alpha, double beta, double sigma, double m_cost, double n_cost, double gamma,
                        double T, const ProblemOptions& opt = {});
/// The reference instance make_lq(0, 1, 0.5, 1, 1, 1, 1).
SpectralProblem make_lq1(const ProblemOptions& opt = {});

/// Deterministic scalar problem dX = u dt, U = {-1, 1}, f = 0, h = x^2.
SpectralProblem make_bang_bang(double T = 1.0, const ProblemOptions& opt = {});

/// Scalar problem with control in both drift and diffusion: dX = u dt + u dW,
/// f = x^2 + u^2, h = x^2.
SpectralProblem make_control_diffusion(const ProblemOptions& opt = {});

/// Scalar profile phi(r, u) with its first two r-derivatives.
struct ScalarProfile {
  std::string name;
  std::function<double(double, double)> value;
  std::function<double(double, double)> d1;
  std::function<double(double, double)> d2;
};

/// Built-in profiles: zero, tanh, cos, ou_drift, const_noise, quad_cost,
/// quad_terminal, quad_clipped, quad_clipped_cost, cubic.
ScalarProfile named_profile(const std::string& name);

struct FieldProfiles {
  ScalarProfile drift;
  ScalarProfile diffusion;
  ScalarProfile running;
  ScalarProfile terminal;
  /// Bound C on |phi(0,u)| and |phi_r| + |phi_rr| for drift and diffusion.
  double bound = 2.0;
};

FieldProfiles heat_default_profiles();
FieldProfiles zero_profiles();
/// Profiles under which a single heat mode is a scalar OU-type LQ problem.
FieldProfiles linear_profiles();

/// Defaults for the field scenarios: 100 steps, control grid [-1, 1] step 0.25,
/// validation box 2.
ProblemOptions heat_options();

/// Stochastic heat equation on (0,1) with Dirichlet modes lambda_k = k^2 pi^2,
/// Nemytskii coefficients projected on the first N sine modes, scalar control
/// acting uniformly in space.  Rejects profiles violating the drift/diffusion
/// bound.  Control grid defaults to [-1, 1] step 0.25.
SpectralProblem make_heat(int N, const FieldProfiles& profiles, ProblemOptions opt = heat_options());
/// Stochastic wave equation in first-order form, 2N coordinates
/// (k pi y_k, v_k) per mode.
SpectralProblem make_wave(int N, const FieldProfiles& profiles, ProblemOptions opt = heat_options());

/// Scenario registry for config-driven construction.
struct ScenarioInfo {
  std::string name;
  std::string description;
  nlohmann::json defaults;
};

std::vector<ScenarioInfo> list_scenarios();
/// Builds a scenario from {"name": ..., "params": {...}}.  Unknown names or
/// parameter keys throw.
SpectralProblem make_scenario(const nlohmann::json& scenario);

}  // namespace pmpdp
