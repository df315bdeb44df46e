#include "pmpdp/problem.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace pmpdp;

namespace {

Vec s(double x) {
  Vec v(1);
  v[0] = x;
  return v;
}

// dX = sin(X) dt + 0.5 dW, f = h = 0; optionally with a wrong closed-form drift_x.
SpectralProblem sine_problem(bool wrong_derivative) {
  SpectralProblem p = make_lq1();
  p.name = "sine";
  p.lq.reset();
  auto& c = p.coeff;
  c.drift = [](double, const Vec& x, const ControlPoint& u) { return Vec(s(std::sin(x[0]) + u[0])); };
  c.drift_x = [wrong_derivative](double, const Vec& x, const ControlPoint&) {
    Mat m(1, 1);
    m(0, 0) = wrong_derivative ? std::cos(x[0]) + 0.1 : std::cos(x[0]);
    return m;
  };
  c.drift_xx = [](double, const Vec& x, const ControlPoint&, const Vec& w) {
    Mat m(1, 1);
    m(0, 0) = -std::sin(x[0]) * w[0];
    return m;
  };
  return p;
}

}  // namespace

TEST_CASE("control grid, nearest point and ties") {
  const auto U = ControlSet::grid(-1.0, 1.0, 0.25);
  REQUIRE(U.size() == 9);
  CHECK(U[0][0] == -1.0);
  CHECK(U[8][0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(U.distance(0, 8) == doctest::Approx(2.0));
  CHECK(U.nearest(s(0.3)) == 5);
  CHECK(U.nearest(s(10.0)) == 8);
  // exactly half-way between -0.25 (index 3) and 0 (index 4): lowest index wins
  CHECK(U.nearest(s(-0.125)) == 3);

  const ControlSet bb({s(-1.0), s(1.0)});
  CHECK(bb.nearest(s(0.0)) == 0);
  CHECK(bb.dim() == 1);
}

TEST_CASE("reference LQ problem satisfies the standing assumptions on the box") {
  const auto p = make_lq1();
  CHECK(p.dim() == 1);
  CHECK(p.controls[0][0] == doctest::Approx(-3.0));
  const auto r = validate_assumptions(p, 200);
  CHECK(r.passed());
  // a = u: Lipschitz constant in u is exactly one, zero in x
  CHECK(r.get("S1.a_lipschitz_u").worst == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(r.get("S1.a_lipschitz_x").worst == 0.0);
  CHECK(r.get("S3.f_xx_bound").worst == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(r.get("S1.b_growth").worst == doctest::Approx(0.5));
  CHECK_THROWS(r.get("no-such-check"));
}

TEST_CASE("global mode flags the quadratic costs as non-Lipschitz") {
  const auto r = validate_assumptions(make_lq1(), 200, ValidationMode::global);
  CHECK_FALSE(r.passed());
  CHECK_FALSE(r.get("S2.h_lipschitz_x").passed);
  CHECK(r.get("S2.h_lipschitz_x").worst_scaled > 1.5 * r.get("S2.h_lipschitz_x").worst);
  // the linear drift is fine globally
  CHECK(r.get("S1.a_lipschitz_u").passed);
}

TEST_CASE("closed-form derivatives are cross-checked against differences") {
  CHECK(validate_assumptions(sine_problem(false), 100).get("derivatives").passed);
  const auto bad = validate_assumptions(sine_problem(true), 100);
  CHECK_FALSE(bad.get("derivatives").passed);
  CHECK_FALSE(bad.passed());
}

TEST_CASE("finite-difference fallback is second order") {
  CoefficientSet c;
  c.drift = [](double, const Vec& x, const ControlPoint&) { return Vec(s(std::sin(x[0]))); };
  const Vec x = s(0.7), u = s(0.0);
  auto err = [&](double h) {
    c.fd_step = h;
    return std::abs(c.a_x(0.0, x, u)(0, 0) - std::cos(0.7));
  };
  const double e1 = err(2e-2), e2 = err(1e-2);
  CHECK(std::log2(e1 / e2) >= 1.9);
}

TEST_CASE("parameter validation") {
  CHECK_THROWS_AS(make_lq(0, 1, 0.5, 1, 0.0, 1, 1), Error);
  CHECK_THROWS_AS(make_scenario({{"name", "lq1"}, {"params", {{"bogus", 1}}}}), Error);
  CHECK_THROWS_AS(make_scenario({{"name", "nope"}}), Error);
  CHECK_THROWS_AS(make_scenario({{"name", "lq1"}, {"extra", 1}}), Error);
  CHECK_THROWS_AS(make_scenario({{"name", "heat-x"}}), Error);
  FieldProfiles wild = heat_default_profiles();
  wild.drift = named_profile("cubic");
  CHECK_THROWS_AS(make_heat(2, wild), Error);
  CHECK_THROWS_AS(named_profile("nope"), Error);
}

TEST_CASE("recursive driver and terminal value default to the plain costs") {
  const auto p = make_lq1();
  const Vec x = s(0.8), z = s(0.3), u = s(-0.5);
  CHECK(p.coeff.g(0.2, x, 1.7, z, u) == doctest::Approx(p.coeff.f(0.2, x, u)));
  CHECK(p.coeff.phi(x) == doctest::Approx(p.coeff.h(x)));
  CHECK(p.coeff.f(0.2, x, u) == doctest::Approx(0.64 + 0.25));
}

TEST_CASE("heat equation instances") {
  const auto h8 = make_heat(8, heat_default_profiles());
  CHECK(h8.dim() == 8);
  CHECK(h8.op.eigenvalues()[2] == doctest::Approx(9 * std::numbers::pi * std::numbers::pi));
  CHECK(validate_assumptions(h8, 100).passed());

  // Under linear profiles one mode is an OU problem: a = -y + u * int sqrt2 sin(pi r) dr.
  const auto h1 = make_heat(1, linear_profiles());
  const double c = 2 * std::sqrt(2.0) / std::numbers::pi;
  for (double y : {-1.0, 0.3, 1.5})
    for (double u : {-1.0, 0.5})
      CHECK(h1.coeff.a(0.0, s(y), s(u))[0] == doctest::Approx(-y + c * u).epsilon(1e-3));
  CHECK(h1.coeff.a_x(0.0, s(0.2), s(0.0))(0, 0) == doctest::Approx(-1.0).epsilon(1e-3));
}

TEST_CASE("wave equation: orthogonal free flow conserves energy") {
  const auto w = make_wave(2, zero_profiles());
  CHECK(w.dim() == 4);
  Vec v(4);
  v << 1.0, -0.5, 0.25, 2.0;
  for (double t : {0.1, 0.5, 1.0}) CHECK(w.op.semigroup(t, v).norm() == doctest::Approx(v.norm()).epsilon(1e-13));
  CHECK(validate_assumptions(w, 100).passed());
}

TEST_CASE("every registered scenario builds and validates") {
  const auto all = list_scenarios();
  CHECK(all.size() >= 5);
  for (const auto& info : all) {
    CAPTURE(info.name);
    const auto p = make_scenario({{"name", info.name}});
    CHECK(validate_assumptions(p, 100).passed());
    CHECK(p.params == info.defaults);
  }
  CHECK(make_scenario({{"name", "heat-3"}}).dim() == 3);
  CHECK(make_scenario({{"name", "lq1"}, {"params", {{"steps", 50}}}}).horizon.steps() == 50);
}

TEST_CASE("with_steps keeps the problem and changes the grid") {
  const auto p = make_lq1().with_steps(64);
  CHECK(p.horizon.steps() == 64);
  CHECK(p.horizon.T() == 1.0);
  CHECK(p.lq.has_value());
}
