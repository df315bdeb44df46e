#include "pmpdp/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

namespace pmpdp {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

// Field step matching a bundle step; both live on the same horizon.
int field_step(const ValueField& field, const PathBundle& b, int step) {
  const int s = b.offset + step - field.offset();
  if (s < 0 || s > field.steps()) throw Error("verification: bundle time outside the value field");
  return s;
}

void require_same_horizon(const Septuple& s, const ValueField& field) {
  const auto& a = s.problem().horizon;
  const auto& b = field.problem().horizon;
  if (a.steps() != b.steps() || std::abs(a.T() - b.T()) > 1e-12 || std::abs(a.t0() - b.t0()) > 1e-12)
    throw Error("verification: septuple and value field use different horizons");
}

double nan_to_zero(double v) { return std::isfinite(v) ? v : 0.0; }

// Smallest distance between distinct control points (the grid step).
double control_resolution(const ControlSet& U) {
  double r = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < U.size(); ++i)
    for (std::size_t j = i + 1; j < U.size(); ++j) r = std::min(r, U.distance(i, j));
  return std::isfinite(r) ? r : 0.0;
}

// Interior of the field's box leaving room for probes of radius `room`.
bool room_for(const ValueField& field, const Vec& x, double room) {
  for (int a = 0; a < x.size(); ++a) {
    Vec lo = x, hi = x;
    lo[a] -= room;
    hi[a] += room;
    if (!field.in_hull(lo) || !field.in_hull(hi)) return false;
  }
  return true;
}

// First sampled path whose state leaves room for the probes, starting from a
// seeded position.
int pick_path(const Septuple& s, const ValueField& field, int step, double room, std::uint64_t seed) {
  const int M = s.bundle().paths;
  const int first = static_cast<int>(sample_paths(M, 1, seed)[0]);
  for (int k = 0; k < M; ++k) {
    const int j = (first + k) % M;
    if (room_for(field, s.X(j, step), room)) return j;
  }
  return -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Riccati

double RiccatiSolution::interp(const std::vector<double>& v, double t) const {
  if (t < grid.t0() - 1e-12 || t > grid.T() + 1e-12) throw Error("RiccatiSolution: time outside the grid");
  const double r = (t - grid.t0()) / grid.dt();
  const int i = std::clamp(static_cast<int>(std::floor(r)), 0, grid.steps() - 1);
  const double w = std::clamp(r - i, 0.0, 1.0);
  return (1.0 - w) * v[static_cast<std::size_t>(i)] + w * v[static_cast<std::size_t>(i + 1)];
}

double RiccatiSolution::pi_at(double t) const { return interp(pi, t); }
double RiccatiSolution::c_at(double t) const { return interp(c, t); }
double RiccatiSolution::P_at(double t) const { return interp(P2, t); }

double RiccatiSolution::V_t(double t, double x) const {
  const double p = pi_at(t);
  const double dpi = -2.0 * lq.alpha * p + lq.beta * lq.beta * p * p / lq.n_cost - lq.m_cost;
  return dpi * x * x - lq.sigma * lq.sigma * p;
}

RiccatiSolution solve_riccati(const LqParams& lq, const TimeGrid& grid, int substeps) {
  if (!(lq.n_cost > 0.0)) throw Error("solve_riccati: n_cost must be positive");
  if (substeps < 1) throw Error("solve_riccati: substeps must be positive");
  RiccatiSolution r;
  r.lq = lq;
  r.grid = grid;
  const int L = grid.steps();
  r.pi.assign(static_cast<std::size_t>(L + 1), 0.0);
  r.c.assign(static_cast<std::size_t>(L + 1), 0.0);
  r.P2.assign(static_cast<std::size_t>(L + 1), 0.0);
  // State (pi, c, P) integrated backward in time: d/ds of the reversed flow.
  auto rhs = [&lq](const std::array<double, 3>& y) {
    const double pi = y[0];
    const double dpi = -2.0 * lq.alpha * pi + lq.beta * lq.beta * pi * pi / lq.n_cost - lq.m_cost;
    const double dc = -lq.sigma * lq.sigma * pi;
    const double dP = -2.0 * lq.alpha * y[2] + 2.0 * lq.m_cost;
    return std::array<double, 3>{-dpi, -dc, -dP};
  };
  std::array<double, 3> y{lq.gamma, 0.0, -2.0 * lq.gamma};
  r.pi[static_cast<std::size_t>(L)] = y[0];
  r.c[static_cast<std::size_t>(L)] = y[1];
  r.P2[static_cast<std::size_t>(L)] = y[2];
  const double h = grid.dt() / substeps;
  for (int i = L - 1; i >= 0; --i) {
    for (int s = 0; s < substeps; ++s) {
      auto add = [](const std::array<double, 3>& a, const std::array<double, 3>& b, double w) {
        return std::array<double, 3>{a[0] + w * b[0], a[1] + w * b[1], a[2] + w * b[2]};
      };
      const auto k1 = rhs(y);
      const auto k2 = rhs(add(y, k1, h / 2));
      const auto k3 = rhs(add(y, k2, h / 2));
      const auto k4 = rhs(add(y, k3, h));
      for (int c = 0; c < 3; ++c) y[c] += h / 6.0 * (k1[c] + 2 * k2[c] + 2 * k3[c] + k4[c]);
      if (!std::isfinite(y[0]) || std::abs(y[0]) > 1e12) {
        const double te = grid.node(i + 1) - (s + 1) * h;
        throw FiniteEscape("solve_riccati: finite escape at t = " + fmt("%.6g", te), te);
      }
    }
    r.pi[static_cast<std::size_t>(i)] = y[0];
    r.c[static_cast<std::size_t>(i)] = y[1];
    r.P2[static_cast<std::size_t>(i)] = y[2];
  }
  return r;
}

ControlPolicy riccati_policy(const SpectralProblem& p, const RiccatiSolution& r) {
  if (p.dim() != 1 || p.controls.dim() != 1) throw Error("riccati_policy: scalar problems only");
  const ControlSet U = p.controls;
  return ControlPolicy::feedback([r, U](int, double t, const Vec& x) {
    Vec u(1);
    u[0] = r.feedback(t, x[0]);
    return U.nearest(u);
  });
}

// ---------------------------------------------------------------------------
// Septuple

Septuple::Septuple(const SpectralProblem& p, const ControlPolicy& policy, double t, const Vec& eta,
                   const SeptupleOptions& opt)
    : problem_(p) {
  const auto t0 = Clock::now();
  SimulationOptions so;
  if (opt.tag != 0) so.noise = p.noise.derive(opt.tag);
  bundle_ = simulate_state(problem_, t, eta, policy, opt.paths, so);
  first_ = solve_first_adjoint(problem_, bundle_, opt.backward);
  second_ = solve_second_adjoint(problem_, bundle_, first_, opt.backward);
  seconds_ = seconds_since(t0);
}

// ---------------------------------------------------------------------------
// Reports

std::string to_string(CheckStatus s) {
  switch (s) {
    case CheckStatus::pass:
      return "pass";
    case CheckStatus::fail:
      return "fail";
    case CheckStatus::inconclusive:
      return "inconclusive";
  }
  return "?";
}

bool VerificationReport::passed() const {
  return std::none_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.status == CheckStatus::fail; });
}

const CheckResult& VerificationReport::get(const std::string& name) const {
  for (const auto& c : checks)
    if (c.name == name) return c;
  throw Error("VerificationReport: no check named '" + name + "'");
}

void VerificationReport::sort() {
  std::stable_sort(checks.begin(), checks.end(), [](const CheckResult& a, const CheckResult& b) { return a.name < b.name; });
}

nlohmann::json to_json(const CheckResult& r) {
  nlohmann::json j;
  j["name"] = r.name;
  j["status"] = to_string(r.status);
  j["margin"] = r.margin;
  j["tolerance"] = r.tolerance;
  j["runtime_s"] = r.runtime;
  j["seed"] = r.seed;
  j["witness"] = r.witness;
  j["details"] = r.details;
  return j;
}

nlohmann::json VerificationReport::to_json() const {
  nlohmann::json j;
  j["passed"] = passed();
  j["checks"] = nlohmann::json::array();
  for (const auto& c : checks) j["checks"].push_back(pmpdp::to_json(c));
  return j;
}

// ---------------------------------------------------------------------------
// Sampling

std::vector<int> sample_steps(int steps, int count) {
  if (steps < 3) throw Error("sample_steps: need at least three steps");
  if (count < 1) throw Error("sample_steps: count must be positive");
  const int lo = 1, hi = steps - 2;
  std::vector<int> out;
  for (int k = 0; k < count; ++k) {
    const int s = count == 1 ? lo : lo + static_cast<int>(std::lround(static_cast<double>(hi - lo) * k / (count - 1)));
    if (out.empty() || out.back() != s) out.push_back(s);
  }
  return out;
}

std::vector<int> sample_paths(int paths, int count, std::uint64_t seed) {
  if (paths < 1) throw Error("sample_paths: no paths");
  count = std::min(count, paths);
  // Partial Fisher-Yates with counter-based uniforms.
  std::vector<int> idx(static_cast<std::size_t>(paths));
  std::iota(idx.begin(), idx.end(), 0);
  for (int k = 0; k < count; ++k) {
    const double u = 0.5 * std::erfc(-counter_normal(seed, 0x7061746873ULL, static_cast<std::uint64_t>(k)) / std::sqrt(2.0));
    const int j = k + std::min(paths - k - 1, static_cast<int>(u * (paths - k)));
    std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

// ---------------------------------------------------------------------------
// Maximum principle

CheckResult check_pmp(const Septuple& s, const SampleOptions& opt) {
  const auto t0 = Clock::now();
  const auto& pr = s.problem();
  const auto& b = s.bundle();
  CheckResult r;
  r.name = "pmp";
  r.seed = opt.seed;
  const auto steps = sample_steps(b.steps(), opt.times);
  const auto paths = sample_paths(b.paths, opt.paths, opt.seed);
  double worst = -std::numeric_limits<double>::infinity();
  double min_expr = std::numeric_limits<double>::infinity();
  long evaluations = 0, violations = 0;
  for (int i : steps) {
    const double t = b.time(i);
    for (int j : paths) {
      const Vec x = s.X(j, i);
      const auto& ub = s.u(j, i);
      const Vec p = s.p(j, i);
      const Mat q = s.q(j, i);
      const Mat P = s.P(j, i);
      const double se_p = nan_to_zero(s.first().p_stderr(b, j, i).norm());
      const double se_q = nan_to_zero(s.first().q_stderr(b, j, i).norm());
      const double se_P = nan_to_zero(s.second().P_stderr(j, i));
      const double Hb = hamiltonian_H(pr, t, x, ub, p, q);
      const Vec ab = pr.coeff.a(t, x, ub);
      const Mat bb = pr.coeff.b(t, x, ub);
      for (std::size_t k = 0; k < pr.controls.size(); ++k) {
        const auto& rho = pr.controls[k];
        const Mat db = bb - pr.coeff.b(t, x, rho);
        const Vec da = ab - pr.coeff.a(t, x, rho);
        const double expr = Hb - hamiltonian_H(pr, t, x, rho, p, q) - 0.5 * (db.transpose() * P * db).trace();
        if (da.norm() + db.norm() == 0.0) continue;  // rho indistinguishable from u
        const double se = da.norm() * se_p + db.norm() * se_q + 0.5 * db.squaredNorm() * se_P;
        ++evaluations;
        min_expr = std::min(min_expr, expr);
        if (-expr > 3.0 * se) ++violations;
        if (-expr - 3.0 * se > worst) {
          worst = -expr - 3.0 * se;
          r.margin = -expr;
          r.tolerance = 3.0 * se;
          r.witness = fmt("t=%.6g path=%.0f", t, j) + fmt(" rho_index=%.0f", static_cast<double>(k));
        }
      }
    }
  }
  r.status = violations == 0 ? CheckStatus::pass : CheckStatus::fail;
  r.details = {{"times", steps.size()},        {"paths", paths.size()},   {"controls", pr.controls.size()},
               {"evaluations", evaluations}, {"violations", violations}, {"min_expression", min_expr}};
  r.runtime = seconds_since(t0);
  return r;
}

// ---------------------------------------------------------------------------
// Smooth case

CheckResult check_smooth_relations(const Septuple& s, const ValueField& field, const SmoothOptions& opt) {
  const auto t0 = Clock::now();
  require_same_horizon(s, field);
  const auto& pr = s.problem();
  const auto& b = s.bundle();
  CheckResult r;
  r.name = "smooth";
  r.seed = opt.sample.seed;
  r.tolerance = opt.relative_tolerance;
  const auto steps = sample_steps(b.steps(), opt.sample.times);
  const auto paths = sample_paths(b.paths, opt.sample.paths, opt.sample.seed);
  const double du = control_resolution(pr.controls);
  double worst_x = 0.0, worst_q = 0.0, worst_se = 0.0;
  long argmax_checked = 0, argmax_failed = 0, skipped = 0;
  std::string w_x, w_q, w_u;
  nlohmann::json per_time = nlohmann::json::array();
  for (int i : steps) {
    const int fs = field_step(field, b, i);
    if (fs + 2 > field.steps()) continue;
    const double t = b.time(i);
    double nx = 0.0, dx = 0.0, nq = 0.0, dq = 0.0, sx = 0.0, sq = 0.0;
    for (int j : paths) {
      const Vec x = s.X(j, i);
      if (field.mode() == ValueMode::grid && !room_for(field, x, 2.0 * opt.h)) {
        ++skipped;
        continue;
      }
      const auto d = numeric_differentials(field, fs, x, opt.h);
      const Vec p = s.p(j, i);
      const Mat q = s.q(j, i);
      const auto& ub = s.u(j, i);
      const Mat bq = pr.coeff.b(t, x, ub);
      nx += (d.Vx + p).squaredNorm();
      dx += p.squaredNorm();
      nq += (d.Vxx * bq + q).squaredNorm();
      dq += q.squaredNorm();
      const double gse = field.gradient_stderr_at(fs, x);
      sx += d.err_x.squaredNorm() + gse * gse + s.first().p_stderr(b, j, i).squaredNorm();
      sq += (d.err_xx * bq.cwiseAbs()).squaredNorm() + s.first().q_stderr(b, j, i).squaredNorm();

      // u attains max_u G(t, X, u, -V_x, -V_xx) up to derivative errors or one grid step.
      double gmax = -std::numeric_limits<double>::infinity(), gerr = 0.0;
      std::size_t arg = 0;
      for (std::size_t k = 0; k < pr.controls.size(); ++k) {
        const double g = hamiltonian_G(pr, t, x, pr.controls[k], -d.Vx, -d.Vxx);
        if (g > gmax) {
          gmax = g;
          arg = k;
          const Mat bk = pr.coeff.b(t, x, pr.controls[k]);
          gerr = 0.5 * ((bk * bk.transpose()).cwiseAbs().cwiseProduct(d.err_xx).sum()) +
                 pr.coeff.a(t, x, pr.controls[k]).cwiseAbs().dot(d.err_x);
        }
      }
      const double gu = hamiltonian_G(pr, t, x, ub, -d.Vx, -d.Vxx);
      ++argmax_checked;
      const bool near = (pr.controls[arg] - ub).norm() <= du * (1.0 + 1e-9);
      if (!(near || gu >= gmax - 3.0 * gerr)) {
        ++argmax_failed;
        w_u = fmt("t=%.6g x0=%.6g gap=%.3g", t, x[0], gmax - gu);
      }
    }
    if (dx <= 0.0 || dq <= 0.0) continue;
    const double rx = std::sqrt(nx / dx), rq = std::sqrt(nq / dq);
    const double se = std::max(std::sqrt(sx / dx), std::sqrt(sq / dq));
    per_time.push_back({{"t", t}, {"rel_Vx_p", rx}, {"rel_Vxxb_q", rq}, {"rel_se", se}});
    if (rx > worst_x) {
      worst_x = rx;
      w_x = fmt("t=%.6g rel=%.4g", t, rx);
    }
    if (rq > worst_q) {
      worst_q = rq;
      w_q = fmt("t=%.6g rel=%.4g", t, rq);
    }
    worst_se = std::max(worst_se, se);
  }
  r.margin = std::max(worst_x, worst_q);
  r.witness = worst_x >= worst_q ? "V_x=-p at " + w_x : "V_xx b=-q at " + w_q;
  if (argmax_failed > 0) r.witness += "; argmax at " + w_u;
  if (per_time.empty())
    r.status = CheckStatus::inconclusive;
  else if (r.margin <= r.tolerance && argmax_failed == 0)
    r.status = CheckStatus::pass;
  else if (3.0 * worst_se > r.tolerance)
    r.status = CheckStatus::inconclusive;
  else
    r.status = CheckStatus::fail;
  r.details = {{"max_rel_Vx_plus_p", worst_x},   {"max_rel_Vxxb_plus_q", worst_q}, {"max_rel_se", worst_se},
               {"argmax_checked", argmax_checked}, {"argmax_failed", argmax_failed}, {"skipped_paths", skipped},
               {"per_time", per_time}};
  r.runtime = seconds_since(t0);
  return r;
}

// ---------------------------------------------------------------------------
// Superdifferential inclusions

CheckResult check_superdiff_inclusions(const Septuple& s, const ValueField& field, const InclusionOptions& opt) {
  const auto t0 = Clock::now();
  require_same_horizon(s, field);
  if (opt.radii.empty()) throw Error("check_superdiff_inclusions: empty radius ladder");
  const auto& b = s.bundle();
  const int N = b.dim;
  CheckResult r;
  r.name = "superdiff";
  r.seed = opt.seed;
  const auto steps = sample_steps(b.steps(), opt.times);
  const double room = std::max(opt.radii.front(), 2.0 * opt.h);
  double worst = -std::numeric_limits<double>::infinity();
  long tested = 0, rejected = 0, sub_failed = 0, skipped = 0, power_rejected = 0;
  nlohmann::json per_time = nlohmann::json::array();
  for (int i : steps) {
    const int fs = field_step(field, b, i);
    if (fs + 1 > field.steps()) continue;
    const int j = pick_path(s, field, i, room, opt.seed + static_cast<std::uint64_t>(i));
    if (j < 0) {
      ++skipped;
      continue;
    }
    const double t = b.time(i);
    const Vec x = s.X(j, i);
    const Vec p = s.p(j, i);
    const Mat P = s.P(j, i);
    const double se_p = nan_to_zero(s.first().p_stderr(b, j, i).norm());
    const double se_P = nan_to_zero(s.second().P_stderr(j, i));
    nlohmann::json jt = {{"t", t}, {"path", j}, {"p_se", se_p}};

    // (i) memberships.
    std::vector<double> shifts{0.0};
    shifts.insert(shifts.end(), opt.kappas.begin(), opt.kappas.end());
    for (double kappa : shifts) {
      DifferentialTriple tr{0.0, -p, Mat(-P + kappa * Mat::Identity(N, N)), 0.0, se_p, se_P};
      const auto m = superdiff_membership(field, fs, x, tr, opt.radii, ProbeKind::spatial, true);
      ++tested;
      if (!m.accepted) ++rejected;
      jt["kappa_" + fmt("%.3g", kappa)] = {{"accepted", m.accepted}, {"margin", m.margin}, {"tolerance", m.tolerance}};
      if (m.margin - m.tolerance > worst) {
        worst = m.margin - m.tolerance;
        r.margin = m.margin;
        r.tolerance = m.tolerance;
        r.witness = fmt("t=%.6g path=%.0f kappa=%.3g", t, j, kappa);
      }
    }

    {
      DifferentialTriple tr{0.0, Vec(-p + Vec::Constant(N, opt.power_shift)), Mat(-P), 0.0, se_p, se_P};
      const auto m = superdiff_membership(field, fs, x, tr, opt.radii, ProbeKind::spatial, true);
      if (!m.accepted) ++power_rejected;
      jt["power"] = {{"rejected", !m.accepted}, {"margin", m.margin}, {"tolerance", m.tolerance}};
    }

    // (ii) detected subdifferential element: p~ from central differences, P~
    // the largest V_xx + s I accepted by the subdifferential ladder.
    const auto d = numeric_differentials(field, fs, x, opt.h);
    const double gse = field.gradient_stderr_at(fs, x);
    const double p_tol = 3.0 * std::sqrt(d.err_x.squaredNorm() + gse * gse + se_p * se_p);
    const double p_gap = (d.Vx + p).norm();
    double best_shift = -std::numeric_limits<double>::infinity(), resolution = 0.0;
    const double scan = 0.125;
    for (int k = -16; k <= 16; ++k) {
      const double sh = k * scan;
      DifferentialTriple tr{0.0, d.Vx, Mat(d.Vxx + sh * Mat::Identity(N, N))};
      const auto m = superdiff_membership(field, fs, x, tr, opt.radii, ProbeKind::spatial, false);
      if (m.accepted) {
        best_shift = sh;
        resolution = 2.0 * m.tolerance;  // normalized residual -> P units
      }
    }
    bool ok = p_gap <= p_tol;
    double excess = 0.0, P_tol = 0.0;
    if (std::isfinite(best_shift)) {
      const Mat Pt = d.Vxx + best_shift * Mat::Identity(N, N);
      const Mat diff = Pt - (-P);
      excess = Eigen::SelfAdjointEigenSolver<Mat>(0.5 * (diff + diff.transpose())).eigenvalues().maxCoeff();
      P_tol = resolution + scan + 3.0 * (d.err_xx.norm() + se_P);
      ok = ok && excess <= P_tol;
    }
    if (!ok) ++sub_failed;
    jt["sub"] = {{"p_gap", p_gap}, {"p_tol", p_tol}, {"detected_shift", std::isfinite(best_shift) ? best_shift : -1e300},
                 {"excess_over_minus_P", excess}, {"P_tol", P_tol}, {"ok", ok}};
    per_time.push_back(jt);
  }
  if (tested == 0)
    r.status = CheckStatus::inconclusive;
  else
    r.status = rejected == 0 && sub_failed == 0 ? CheckStatus::pass : CheckStatus::fail;
  if (sub_failed > 0 && rejected == 0) r.witness = "subdifferential comparison failed";
  r.details = {{"memberships", tested}, {"rejected", rejected}, {"sub_failed", sub_failed},
               {"power_rejected", power_rejected}, {"power_probes", static_cast<long>(per_time.size())},
               {"skipped_times", skipped}, {"per_time", per_time}};
  r.runtime = seconds_since(t0);
  return r;
}

// ---------------------------------------------------------------------------
// Time inclusion

double time_hamiltonian(const Septuple& s, int path, int step) {
  const auto& pr = s.problem();
  const double t = s.bundle().time(step);
  const Vec x = s.X(path, step);
  const auto& u = s.u(path, step);
  const Vec p = s.p(path, step);
  const Mat q = s.q(path, step);
  const Mat P = s.P(path, step);
  const Mat b = pr.coeff.b(t, x, u);
  return hamiltonian_G(pr, t, x, u, p, P) + b.cwiseProduct(Mat(q - P * b)).sum();
}

CheckResult check_time_inclusion(const Septuple& s, const ValueField& field, const TimeInclusionOptions& opt) {
  const auto t0 = Clock::now();
  require_same_horizon(s, field);
  if (opt.radii.empty()) throw Error("check_time_inclusion: empty radius ladder");
  const auto& pr = s.problem();
  const auto& b = s.bundle();
  CheckResult r;
  r.name = "time";
  r.seed = opt.seed;
  const double dt = b.grid.dt();
  const int reach = static_cast<int>(std::lround(opt.radii.front() / dt));
  auto steps = sample_steps(b.steps() - reach, opt.times);
  double worst = -std::numeric_limits<double>::infinity(), worst_pair = 0.0, worst_rel = 0.0;
  long tested = 0, rejected = 0;
  nlohmann::json per_time = nlohmann::json::array();
  for (int i : steps) {
    const int fs = field_step(field, b, i);
    if (fs + reach > field.steps() - 1) continue;
    const int j = pick_path(s, field, i, 0.0, opt.seed + static_cast<std::uint64_t>(i));
    if (j < 0) continue;
    const double t = b.time(i);
    const Vec x = s.X(j, i);
    const Vec p = s.p(j, i);
    const double ax_p = pr.op.apply(x).dot(p);
    const double x_asp = x.dot(pr.op.apply_adjoint(p));
    worst_pair = std::max(worst_pair, std::abs(ax_p - x_asp) / (1.0 + std::abs(ax_p)));
    const double calH = time_hamiltonian(s, j, i);
    DifferentialTriple tr;
    tr.r = ax_p + calH;
    tr.p = Vec::Zero(b.dim);
    tr.P = Mat::Zero(b.dim, b.dim);
    {
      const auto& u = s.u(j, i);
      const Vec drift = pr.op.apply(x) + pr.coeff.a(t, x, u);
      const Mat bb = pr.coeff.b(t, x, u);
      tr.r_se = drift.norm() * nan_to_zero(s.first().p_stderr(b, j, i).norm()) +
                bb.norm() * nan_to_zero(s.first().q_stderr(b, j, i).norm()) +
                0.5 * bb.squaredNorm() * nan_to_zero(s.second().P_stderr(j, i));
    }
    const auto m = superdiff_membership(field, fs, x, tr, opt.radii, ProbeKind::time, true);
    ++tested;
    if (!m.accepted) ++rejected;
    const auto d = numeric_differentials(field, fs, x, field.spacing() > 0.0 ? 4.0 * field.spacing() : 0.05);
    const double rel = std::abs(tr.r - d.Vt) / std::max(std::abs(d.Vt), 1e-12);
    worst_rel = std::max(worst_rel, rel);
    per_time.push_back({{"t", t},           {"path", j},          {"A_pairing", ax_p}, {"calH", calH},
                        {"r", tr.r},        {"Vt_right", d.Vt},   {"rel_vs_Vt", rel},  {"accepted", m.accepted},
                        {"margin", m.margin}, {"tolerance", m.tolerance}, {"trend", m.trend}});
    if (m.margin - m.tolerance > worst) {
      worst = m.margin - m.tolerance;
      r.margin = m.margin;
      r.tolerance = m.tolerance;
      r.witness = fmt("t=%.6g path=%.0f r=%.6g", t, j, tr.r);
    }
  }
  const bool pairing_ok = worst_pair <= 1e-12;
  if (tested == 0)
    r.status = CheckStatus::inconclusive;
  else
    r.status = rejected == 0 && pairing_ok ? CheckStatus::pass : CheckStatus::fail;
  r.details = {{"memberships", tested},
               {"rejected", rejected},
               {"pairing_max_rel_diff", worst_pair},
               {"max_rel_vs_Vt", worst_rel},
               {"smooth_match_within_tolerance", worst_rel <= opt.relative_tolerance},
               {"per_time", per_time}};
  r.runtime = seconds_since(t0);
  return r;
}

// ---------------------------------------------------------------------------
// Regularity

RegularityConstants regularity_constants(const ValueField& field, double probe, int time_probe, int anchors) {
  if (!(probe > 0.0) || time_probe < 1 || anchors < 2) throw Error("regularity_constants: invalid probe");
  const int N = field.dim();
  const auto& pr = field.problem();
  double lo = -pr.box, hi = pr.box;
  if (field.mode() == ValueMode::grid) {
    lo = field.point(0, 0)[0];
    hi = field.point(0, field.point_count(0) - 1)[0];
  }
  hi -= probe;  // forward differences stay inside
  std::vector<Vec> pts;
  if (N <= 2) {
    const int total = N == 1 ? anchors : anchors * anchors;
    for (int k = 0; k < total; ++k) {
      Vec x(N);
      int idx = k;
      for (int a = 0; a < N; ++a) {
        x[a] = lo + (hi - lo) * (idx % anchors) / (anchors - 1);
        idx /= anchors;
      }
      pts.push_back(x);
    }
  } else {
    for (int a = 0; a < N; ++a)
      for (int k = 0; k < anchors; ++k) {
        Vec x = Vec::Zero(N);
        x[a] = lo + (hi - lo) * k / (anchors - 1);
        pts.push_back(x);
      }
  }
  RegularityConstants c;
  const int L = field.steps();
  const int stride = std::max(1, L / 10);
  for (int i = 0; i + time_probe <= L; i += stride) {
    const double ds = field.time(i + time_probe) - field.time(i);
    for (const Vec& x : pts) {
      const double v = field.value(i, x);
      c.growth = std::max(c.growth, std::abs(v) / (1.0 + x.norm()));
      for (int a = 0; a < N; ++a) {
        Vec y = x;
        y[a] += probe;
        c.lipschitz = std::max(c.lipschitz, std::abs(field.value(i, y) - v) / probe);
      }
      c.holder = std::max(c.holder, std::abs(field.value(i + time_probe, x) - v) / std::sqrt(ds));
    }
  }
  return c;
}

CheckResult check_value_regularity(const ValueField& field, const RegularityOptions& opt) {
  const auto t0 = Clock::now();
  if (field.steps() < 2) throw Error("check_value_regularity: field needs at least two times");
  CheckResult r;
  r.name = "regularity";
  const int tp = std::min(opt.time_probe, field.steps());
  const auto full = regularity_constants(field, opt.probe, tp, opt.anchors);
  const auto half = regularity_constants(field, opt.probe / 2, std::max(1, tp / 2), opt.anchors);
  auto growth = [&](double a, double b) { return b <= a * (1.0 + opt.stability) + 1e-12 ? 0.0 : (b - a) / std::max(a, 1e-300); };
  const double gl = growth(full.lipschitz, half.lipschitz);
  const double gh = growth(full.holder, half.holder);
  const double gg = growth(full.growth, half.growth);
  r.margin = std::max({gl, gh, gg});
  r.tolerance = opt.stability;
  r.status = r.margin <= r.tolerance ? CheckStatus::pass : CheckStatus::fail;
  r.witness = gl >= gh && gl >= gg ? "lipschitz" : (gh >= gg ? "holder" : "growth");
  r.details = {{"lipschitz", {full.lipschitz, half.lipschitz}},
               {"holder", {full.holder, half.holder}},
               {"growth", {full.growth, half.growth}},
               {"probe", {opt.probe, opt.probe / 2}},
               {"time_probe", {tp, std::max(1, tp / 2)}}};
  r.runtime = seconds_since(t0);
  return r;
}

MomentConstants moment_constants(const SpectralProblem& p, const ControlPolicy& policy, const std::vector<Vec>& etas,
                                 int paths, std::uint64_t tag) {
  MomentConstants c;
  SimulationOptions so;
  so.noise = p.noise.derive(tag);
  for (const Vec& eta : etas) {
    const auto b = simulate_state(p, p.horizon.t0(), eta, policy, paths, so);
    const double w = 1.0 + eta.squaredNorm();
    double sup_x = 0.0;
    for (int i = 0; i <= b.steps(); ++i) {
      double s = 0.0;
      for (int j = 0; j < b.paths; ++j) s += b.state(j, i).squaredNorm();
      sup_x = std::max(sup_x, s / b.paths);
    }
    c.state = std::max(c.state, sup_x / w);
    const auto pair = solve_bsde(p, b);
    const int L = b.steps();
    const int stride = std::max(1, L / 20);
    double sup_y = 0.0, int_z = 0.0;
    for (int i = 0; i < L; i += stride) {
      double sy = 0.0, sz = 0.0;
      for (int j = 0; j < b.paths; ++j) {
        const double y = pair.Y(p, b, j, i);
        sy += y * y;
        sz += pair.Z(b, j, i).squaredNorm();
      }
      sup_y = std::max(sup_y, sy / b.paths);
      int_z += sz / b.paths * b.grid.dt() * std::min(stride, L - i);
    }
    double sT = 0.0;
    for (int j = 0; j < b.paths; ++j) sT += std::pow(p.coeff.phi(b.state(j, L)), 2);
    sup_y = std::max(sup_y, sT / b.paths);
    c.bsde = std::max(c.bsde, (sup_y + int_z) / w);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Suite

VerificationReport run_lq_suite(const SpectralProblem& p, const SuiteOptions& opt) {
  if (!p.lq) throw Error("run_lq_suite: scenario has no linear-quadratic parameters");
  const auto known = {"pmp", "smooth", "superdiff", "time", "regularity"};
  for (const auto& c : opt.checks)
    if (std::find(known.begin(), known.end(), c) == known.end()) throw Error("run_lq_suite: unknown check '" + c + "'");
  auto want = [&](const char* n) { return std::find(opt.checks.begin(), opt.checks.end(), n) != opt.checks.end(); };
  const auto ric = solve_riccati(*p.lq, p.horizon);
  const auto policy = riccati_policy(p, ric);
  Vec eta(1);
  eta[0] = opt.eta;
  VerificationReport rep;
  const bool need_septuple = want("pmp") || want("smooth") || want("superdiff") || want("time");
  const bool need_field = want("smooth") || want("superdiff") || want("time") || want("regularity");
  std::unique_ptr<Septuple> sep;
  if (need_septuple) sep = std::make_unique<Septuple>(p, policy, p.horizon.t0(), eta, opt.septuple);
  ValueField field;
  double field_seconds = 0.0;
  if (need_field) {
    const auto t0 = Clock::now();
    field = compute_value(p, p.horizon.t0(), opt.value);
    field_seconds = seconds_since(t0);
  }
  if (want("pmp")) rep.checks.push_back(check_pmp(*sep, opt.pmp));
  if (want("smooth")) rep.checks.push_back(check_smooth_relations(*sep, field, opt.smooth));
  if (want("superdiff")) rep.checks.push_back(check_superdiff_inclusions(*sep, field, opt.inclusion));
  if (want("time")) rep.checks.push_back(check_time_inclusion(*sep, field, opt.time_inclusion));
  if (want("regularity")) rep.checks.push_back(check_value_regularity(field, opt.regularity));
  for (auto& c : rep.checks) {
    c.details["septuple_seconds"] = sep ? sep->build_seconds() : 0.0;
    c.details["field_seconds"] = field_seconds;
    c.details["problem_seed"] = p.noise.seed;
  }
  rep.sort();
  return rep;
}

}  // namespace pmpdp
