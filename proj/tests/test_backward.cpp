#include "pmpdp/verify.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace pmpdp;

namespace {

Vec s(double x) {
  Vec v(1);
  v[0] = x;
  return v;
}

SpectralProblem lq1(int steps = 100) {
  ProblemOptions o;
  o.steps = steps;
  return make_lq1(o);
}

ControlPolicy zero_control(const SpectralProblem& p) { return ControlPolicy::constant(p.controls.nearest(s(0.0))); }

ControlPolicy optimal(const SpectralProblem& p) {
  return riccati_policy(p, solve_riccati(*p.lq, p.horizon));
}

const Driver zero_driver = [](double, const Vec&, double, const Vec&, const ControlPoint&) { return 0.0; };

// Least-squares slope and R^2 of y on x.
std::pair<double, double> fit_line(const std::vector<double>& x, const std::vector<double>& y, double* intercept) {
  const double n = double(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
    syy += y[i] * y[i];
  }
  const double cxx = sxx - sx * sx / n, cxy = sxy - sx * sy / n, cyy = syy - sy * sy / n;
  const double slope = cxy / cxx;
  *intercept = (sy - slope * sx) / n;
  return {slope, cxy * cxy / (cxx * cyy)};
}

}  // namespace

TEST_CASE("cost functional: constant data and the uncontrolled LQ oracle") {
  auto p = lq1();
  auto unit = p;
  unit.coeff.running_cost = [](double, const Vec&, const ControlPoint&) { return 0.0; };
  unit.coeff.terminal_cost = [](const Vec&) { return 1.0; };
  const auto b = simulate_state(unit, 0.0, s(1.0), zero_control(p), 200);
  const auto c1 = cost_functional(unit, b);
  CHECK(c1.mean == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(c1.se == doctest::Approx(0.0));

  // u = 0: X = 1 + W/2, E X_i^2 = 1 + t_i / 4; discrete cost sum (1 + t_i/4) dt + 1.25.
  const int M = 20000;
  const auto b0 = simulate_state(p, 0.0, s(1.0), zero_control(p), M);
  const auto c0 = cost_functional(p, b0);
  double exact = 1.25;
  for (int i = 0; i < p.horizon.steps(); ++i) exact += (1 + 0.25 * p.horizon.node(i)) * p.horizon.dt();
  CHECK(std::abs(c0.mean - exact) < 4 * c0.se);

  // Optimal feedback: V(0, 1) = pi(0) + c(0) = 1.25.
  const auto bo = simulate_state(p, 0.0, s(1.0), optimal(p), M);
  const auto co = cost_functional(p, bo);
  CHECK(std::abs(co.mean - 1.25) < 4 * co.se + 0.02);
  CHECK(co.mean < c0.mean);
}

TEST_CASE("BSDE: martingale, constant driver and the LQ cost") {
  const auto p = lq1();
  const int M = 4000;
  const auto b = simulate_state(p, 0.0, s(1.0), zero_control(p), M);

  // Y = E[X_T | F_t] = X_t, Z = 1/2.
  const auto mart = solve_bsde(p, b, zero_driver, [](const Vec& x) { return x[0]; });
  for (int i : {0, 37, 99})
    for (int path : {0, 1234}) {
      CHECK(mart.Y(p, b, path, i) == doctest::Approx(b.state(path, i)[0]).epsilon(1e-2));
      CHECK(mart.Z(b, path, i)[0] == doctest::Approx(0.5).epsilon(0.1));
    }
  CHECK(mart.y0.mean == doctest::Approx(1.0).epsilon(1e-2));

  // g = c, Phi = 0: Y_t = c (T - t).
  const Driver c3 = [](double, const Vec&, double, const Vec&, const ControlPoint&) { return 3.0; };
  const auto lin = solve_bsde(p, b, c3, [](const Vec&) { return 0.0; });
  CHECK(lin.y0.mean == doctest::Approx(3.0).epsilon(1e-10));
  CHECK(lin.Y(p, b, 5, 50) == doctest::Approx(1.5).epsilon(1e-9));

  // Problem driver under the optimal policy.
  const auto bo = simulate_state(p, 0.0, s(1.0), optimal(p), M);
  const auto y = solve_bsde(p, bo);
  CHECK(y.y0.mean == doctest::Approx(1.25).epsilon(0.03));
  std::ostringstream os;
  write_bsde_csv(os, y, bo);
  CHECK(os.str().rfind("step,time,mean_y,mean_abs_z,condition\n", 0) == 0);
}

TEST_CASE("backward evaluator: identity, projection and splicing") {
  const auto p = lq1();
  const int M = 4000;
  const auto b = simulate_state(p, 0.0, s(1.0), zero_control(p), M);
  std::vector<double> zeta(M);
  for (int j = 0; j < M; ++j) zeta[j] = b.state(j, 60)[0];

  CHECK(backward_evaluator(p, b, zeta, 0.6, 0.6, zero_driver) == zeta);
  CHECK_THROWS_AS(backward_evaluator(p, b, zeta, 0.7, 0.6, zero_driver), Error);
  CHECK_THROWS_AS(backward_evaluator(p, b, zeta, 0.3, 0.6005, zero_driver), Error);

  // E[X_0.6 | F_0.3] = X_0.3.
  const auto proj = backward_evaluator(p, b, zeta, 0.3, 0.6, zero_driver);
  for (int j : {0, 10, M - 1}) CHECK(proj[j] == doctest::Approx(b.state(j, 30)[0]).epsilon(1e-2));

  // G_{0,T} = G_{0,s} G_{s,T}.
  const Driver g = [&](double t, const Vec& x, double, const Vec&, const ControlPoint& u) { return p.coeff.f(t, x, u); };
  std::vector<double> term(M);
  for (int j = 0; j < M; ++j) term[j] = p.coeff.h(b.state(j, 100));
  const auto whole = solve_bsde_window(p, b, g, term, 0, 100);
  const auto inner = backward_evaluator(p, b, term, 0.5, 1.0, g);
  const auto spliced = backward_evaluator(p, b, inner, 0.0, 0.5, g);
  const double mean_spliced = mean_se(spliced).mean;
  CAPTURE(whole.y0_regression_se);
  CHECK(std::abs(mean_spliced - whole.y0.mean) <= 2 * whole.y0_regression_se);
}

TEST_CASE("first-order adjoint") {
  auto p = lq1();
  const int M = 8000;

  auto free = p;
  free.coeff.running_cost = [](double, const Vec&, const ControlPoint&) { return 0.0; };
  free.coeff.terminal_cost = [](const Vec&) { return 0.0; };
  free.coeff.running_cost_x = [](double, const Vec&, const ControlPoint&) { return Vec(Vec::Zero(1)); };
  free.coeff.terminal_cost_x = [](const Vec&) { return Vec(Vec::Zero(1)); };
  const auto bz = simulate_state(free, 0.0, s(1.0), zero_control(p), 500);
  const auto az = solve_first_adjoint(free, bz);
  for (int i : {0, 50, 99}) {
    CHECK(az.p(free, bz, 3, i)[0] == doctest::Approx(0.0));
    CHECK(az.q(bz, 3, i)(0, 0) == doctest::Approx(0.0));
  }

  // LQ1 along the optimal bundle: p = -2 pi X with pi = 1, q = -2 pi sigma = -1.
  const auto b = simulate_state(p, 0.0, s(1.0), optimal(p), M);
  const auto a = solve_first_adjoint(p, b);
  for (int i : {10, 50, 90}) {
    std::vector<double> xs, ps;
    double qsum = 0;
    for (int j = 0; j < M; j += 8) {
      xs.push_back(b.state(j, i)[0]);
      ps.push_back(a.p(p, b, j, i)[0]);
      qsum += a.q(b, j, i)(0, 0);
    }
    double icpt = 0;
    const auto [slope, r2] = fit_line(xs, ps, &icpt);
    CAPTURE(i);
    CHECK(slope == doctest::Approx(-2.0).epsilon(0.03));
    CHECK(r2 > 0.98);
    CHECK(qsum / double(xs.size()) == doctest::Approx(-1.0).epsilon(0.05));
    CHECK(std::isfinite(a.p_stderr(b, 0, i)[0]));
  }
  CHECK(a.p(p, b, 7, 100)[0] == doctest::Approx(-2.0 * b.state(7, 100)[0]));
}

TEST_CASE("comparison check") {
  const auto p = lq1();
  const auto b = simulate_state(p, 0.0, s(1.0), optimal(p), 4000);
  const Driver g1 = [&](double t, const Vec& x, double, const Vec&, const ControlPoint& u) { return p.coeff.f(t, x, u); };
  const Driver g2 = [&](double t, const Vec& x, double y, const Vec& z, const ControlPoint& u) {
    return g1(t, x, y, z, u) + 1.0;
  };
  const TerminalFn h = [&](const Vec& x) { return p.coeff.h(x); };
  const auto shift = comparison_check(p, b, g1, g2, h, h);
  CHECK(shift.passed);
  CHECK(shift.y0_gap == doctest::Approx(1.0).epsilon(1e-6));

  // A larger pair built from different data.
  const Driver g3 = [&](double t, const Vec& x, double y, const Vec& z, const ControlPoint& u) {
    return g1(t, x, y, z, u) + 0.5 * x[0] * x[0] + std::abs(std::sin(3 * x[0]));
  };
  const TerminalFn h3 = [&](const Vec& x) { return h(x) + 0.1 + std::abs(x[0]); };
  const auto r = comparison_check(p, b, g1, g3, h, h3);
  CHECK(r.passed);
  CHECK(r.y0_gap > 0.1);

  CHECK_THROWS_AS(comparison_check(p, b, g2, g1, h, h), Error);
}

TEST_CASE("sampling error decays at the Monte Carlo rate") {
  const auto p = lq1(50);
  const auto pol = optimal(p);
  std::vector<double> lm, lsd;
  for (int M : {250, 1000, 4000}) {
    std::vector<double> y0;
    for (std::uint64_t tag = 1; tag <= 12; ++tag) {
      SimulationOptions o;
      o.noise = p.noise.derive(tag);
      const auto b = simulate_state(p, 0.0, s(1.0), pol, M, o);
      y0.push_back(solve_bsde(p, b).y0.mean);
    }
    lm.push_back(std::log(double(M)));
    lsd.push_back(std::log(mean_se(y0).sd));
  }
  double icpt = 0;
  const double slope = fit_line(lm, lsd, &icpt).first;
  CAPTURE(slope);
  CHECK(slope == doctest::Approx(-0.5).epsilon(0.4));
}
