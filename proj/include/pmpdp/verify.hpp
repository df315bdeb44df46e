#pragma once

// Theorem-level checks: the linear-quadratic Riccati oracle, the second-order
// maximum principle, the smooth-case identities, super/subdifferential
// inclusions, the time-variable inclusion and value-function regularity.

#include "pmpdp/second_adjoint.hpp"
#include "pmpdp/value.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace pmpdp {

// ---------------------------------------------------------------------------
// Riccati oracle

/// Raised when the Riccati solution escapes to infinity inside the horizon.
class FiniteEscape : public Error {
 public:
  FiniteEscape(const std::string& what, double time) : Error(what), escape_time(time) {}
  double escape_time;
};

/// pi' = -2 alpha pi + beta^2 pi^2 / n - m, pi(T) = gamma;
/// c'  = -sigma^2 pi, c(T) = 0;
/// P'  = -2 alpha P + 2 m, P(T) = -2 gamma  (second-order adjoint).
/// V = pi x^2 + c, feedback u = -(beta / n) pi x, p = -2 pi x, q = -2 pi sigma.
struct RiccatiSolution {
  LqParams lq;
  TimeGrid grid;
  std::vector<double> pi;  ///< at grid nodes
  std::vector<double> c;
  std::vector<double> P2;  ///< second-order adjoint at grid nodes

  double pi_at(double t) const;
  double c_at(double t) const;
  double P_at(double t) const;

  double V(double t, double x) const { return pi_at(t) * x * x + c_at(t); }
  double V_x(double t, double x) const { return 2.0 * pi_at(t) * x; }
  double V_xx(double t) const { return 2.0 * pi_at(t); }
  double V_t(double t, double x) const;
  double gain(double t) const { return -lq.beta / lq.n_cost * pi_at(t); }
  double feedback(double t, double x) const { return gain(t) * x; }
  double p(double t, double x) const { return -V_x(t, x); }
  double q(double t) const { return -V_xx(t) * lq.sigma; }

 private:
  double interp(const std::vector<double>& v, double t) const;
};

/// RK4 backward on `grid` with `substeps` per grid step.  Throws
/// FiniteEscape (with the escape time) when pi blows up before grid.t0().
RiccatiSolution solve_riccati(const LqParams& lq, const TimeGrid& grid, int substeps = 8);

/// Feedback policy snapping the Riccati control to the nearest grid point.
ControlPolicy riccati_policy(const SpectralProblem& p, const RiccatiSolution& r);

// ---------------------------------------------------------------------------
// Optimal septuple (X, u, p, q, P, Q, Q^) on one bundle

struct SeptupleOptions {
  int paths = 20000;
  std::uint64_t tag = 0;  ///< noise stream; 0 uses the problem's own noise
  BackwardOptions backward;
};

/// Carries the full record.  Q^ is Q transposed, which is Q itself for the
/// symmetric field, so it is not stored separately.  Non-copyable: the
/// adjoints reference the bundle.
class Septuple {
 public:
  Septuple(const SpectralProblem& p, const ControlPolicy& policy, double t, const Vec& eta,
           const SeptupleOptions& opt = {});
  Septuple(const Septuple&) = delete;
  Septuple& operator=(const Septuple&) = delete;

  const SpectralProblem& problem() const { return problem_; }
  const PathBundle& bundle() const { return bundle_; }
  const AdjointFirst& first() const { return first_; }
  const AdjointSecond& second() const { return second_; }

  Vec X(int path, int step) const { return bundle_.state(path, step); }
  const ControlPoint& u(int path, int step) const { return problem_.controls[bundle_.control(path, step)]; }
  Vec p(int path, int step) const { return first_.p(problem_, bundle_, path, step); }
  Mat q(int path, int step) const { return first_.q(bundle_, path, step); }
  Mat P(int path, int step) const { return second_.P(path, step); }
  Mat Q(int path, int step, int k) const { return second_.Q(path, step, k); }
  Mat Q_hat(int path, int step, int k) const { return Q(path, step, k).transpose(); }

  double build_seconds() const { return seconds_; }

 private:
  SpectralProblem problem_;
  PathBundle bundle_;
  AdjointFirst first_;
  AdjointSecond second_;
  double seconds_ = 0.0;
};

// ---------------------------------------------------------------------------
// Reports

enum class CheckStatus { pass, fail, inconclusive };
std::string to_string(CheckStatus s);

/// One check.  The check passes when `margin <= tolerance`: margin is the
/// worst violation statistic found, tolerance the bound it must respect.
struct CheckResult {
  std::string name;
  CheckStatus status = CheckStatus::pass;
  double margin = 0.0;
  double tolerance = 0.0;
  double runtime = 0.0;  ///< seconds
  std::uint64_t seed = 0;
  std::string witness;   ///< where the margin was attained
  nlohmann::json details = nlohmann::json::object();
};

struct VerificationReport {
  std::vector<CheckResult> checks;

  bool passed() const;  ///< no check failed (inconclusive allowed)
  const CheckResult& get(const std::string& name) const;
  nlohmann::json to_json() const;
  /// Sorted by check name, for deterministic merging.
  void sort();
};

nlohmann::json to_json(const CheckResult& r);

// ---------------------------------------------------------------------------
// Checks

struct SampleOptions {
  int times = 20;       ///< sampled grid steps in [t0, T)
  int paths = 64;       ///< sampled paths per time
  std::uint64_t seed = 0x5eed;
};

/// Evenly spread steps in [1, steps - 2], de-duplicated.
std::vector<int> sample_steps(int steps, int count);
/// `count` distinct path indices drawn with the seed.
std::vector<int> sample_paths(int paths, int count, std::uint64_t seed);

/// H(u) - H(rho) - 1/2 <P (b(u) - b(rho)), b(u) - b(rho)> >= 0 over sampled
/// (t, omega) and the whole control grid; tolerance 3 propagated errors.
CheckResult check_pmp(const Septuple& s, const SampleOptions& opt = {});

struct SmoothOptions {
  SampleOptions sample;
  double relative_tolerance = 0.05;
  double h = 0.05;  ///< finite-difference step on the field
};

/// V_x = -p, V_xx b = -q and u attains max_u G(., -V_x, -V_xx), along the
/// trajectory.  The septuple and the field must share the problem horizon.
CheckResult check_smooth_relations(const Septuple& s, const ValueField& field, const SmoothOptions& opt = {});

struct InclusionOptions {
  int times = 10;
  std::uint64_t seed = 0x5eed;
  std::vector<double> radii{0.2, 0.1, 0.05};
  std::vector<double> kappas{0.5, 1.0};
  double h = 0.05;  ///< step for the detected subdifferential candidate
  /// Power probe: (-p + shift, -P) should be rejected; counted in details,
  /// it does not decide the status.
  double power_shift = 0.5;
};

/// (i) (-p, -P) and (-p, -P + kappa I) lie in the spatial superdifferential;
/// (ii) a detected subdifferential element (p~, P~) has p~ = -p and
///      P~ <= -P + tolerance.
CheckResult check_superdiff_inclusions(const Septuple& s, const ValueField& field, const InclusionOptions& opt = {});

struct TimeInclusionOptions {
  int times = 10;
  std::uint64_t seed = 0x5eed;
  std::vector<double> radii{0.1, 0.05, 0.02};
  double relative_tolerance = 0.05;  ///< for the smooth-case comparison with V_t
};

/// Time-variable inclusion: <A X, p> + calH in the right superdifferential in
/// t, with calH = G(t, X, u, p, P) + <b, q - P b>.  Also confirms
/// <A X, p> = <X, A^* p> on the truncation.
CheckResult check_time_inclusion(const Septuple& s, const ValueField& field, const TimeInclusionOptions& opt = {});

/// calH(t, X, u) along one path.
double time_hamiltonian(const Septuple& s, int path, int step);

struct RegularityOptions {
  double probe = 0.1;       ///< spatial probe scale (halved for stability)
  int time_probe = 8;       ///< time probe in field steps (halved)
  int anchors = 21;         ///< probe points per axis inside the box
  double stability = 0.2;   ///< allowed relative growth under halving
};

struct RegularityConstants {
  double lipschitz = 0.0;       ///< sup |V(t,x) - V(t,y)| / |x - y|
  double holder = 0.0;          ///< sup |V(s,x) - V(t,x)| / |s - t|^(1/2)
  double growth = 0.0;          ///< sup |V(t,x)| / (1 + |x|)
};

RegularityConstants regularity_constants(const ValueField& field, double probe, int time_probe, int anchors);

/// Fits the spatial Lipschitz, time Hoelder-1/2 and linear-growth constants
/// at two probe scales; fails when a constant grows under halving.
CheckResult check_value_regularity(const ValueField& field, const RegularityOptions& opt = {});

/// sup_s E|X(s)|^2 / (1 + |zeta|^2) and (sup_s E|Y(s)|^2 + E int |Z|^2) /
/// (1 + |zeta|^2) over the given initial states.
struct MomentConstants {
  double state = 0.0;
  double bsde = 0.0;
};
MomentConstants moment_constants(const SpectralProblem& p, const ControlPolicy& policy,
                                 const std::vector<Vec>& etas, int paths, std::uint64_t tag = 0x6d6f6d);

/// Runs the five checks of the smooth suite on an LQ scenario (Riccati
/// policy, grid value field) and returns the merged report.
struct SuiteOptions {
  double eta = 1.0;
  SeptupleOptions septuple;
  ValueOptions value;
  SampleOptions pmp;
  SmoothOptions smooth;
  InclusionOptions inclusion;
  TimeInclusionOptions time_inclusion;
  RegularityOptions regularity;
  std::vector<std::string> checks{"pmp", "smooth", "superdiff", "time", "regularity"};
};

VerificationReport run_lq_suite(const SpectralProblem& p, const SuiteOptions& opt = {});

}  // namespace pmpdp
