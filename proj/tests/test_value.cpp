#include "pmpdp/value.hpp"

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

Mat m1(double x) {
  Mat m(1, 1);
  m(0, 0) = x;
  return m;
}

SpectralProblem lq1(int steps = 100) {
  ProblemOptions o;
  o.steps = steps;
  return make_lq1(o);
}

ValueOptions fast() {
  ValueOptions o;
  o.anchors = 241;
  o.samples = 2000;
  return o;
}

std::vector<double> axis(double lo, double hi, int n) {
  std::vector<double> a(n);
  for (int i = 0; i < n; ++i) a[i] = lo + (hi - lo) * i / (n - 1);
  return a;
}

// Exact LQ1 value: pi = 1, c = (1 - t) / 4.
double lq1_value(double t, const Vec& x) { return x[0] * x[0] + 0.25 * (1.0 - t); }

}  // namespace

TEST_CASE("value field of the LQ problem") {
  const auto p = lq1();
  const auto f = compute_value(p, 0.0, fast());
  CHECK(f.mode() == ValueMode::grid);
  for (double x : {-1.3, 0.0, 0.4, 2.2}) CHECK(f.value(f.steps(), s(x)) == doctest::Approx(x * x).epsilon(1e-3));
  CHECK(f.value(0, s(1.0)) == doctest::Approx(1.25).epsilon(0.03));
  CHECK(f.value(50, s(-0.5)) == doctest::Approx(lq1_value(0.5, s(-0.5))).epsilon(0.03));
  CHECK(f.stderr_at(0, s(1.0)) > 0.0);
  CHECK(f.in_hull(s(2.9)));
  CHECK_FALSE(f.in_hull(s(3.5)));
  // feedback close to -x
  CHECK(p.controls[f.policy_at(10, s(1.0))][0] == doctest::Approx(-1.0).epsilon(0.1));

  std::ostringstream os;
  write_value_csv(os, f, 50);
  CHECK(os.str().rfind("time,x0,value,stderr,control\n", 0) == 0);
}

TEST_CASE("bang-bang value") {
  ProblemOptions o;
  o.steps = 100;
  const auto p = make_bang_bang(1.0, o);
  ValueOptions v;
  v.anchors = 601;  // spacing equals dt, so moves stay on anchors
  const auto f = compute_value(p, 0.0, v);
  CHECK(f.value(0, s(1.5)) == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(f.value(0, s(-2.0)) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(f.value(0, s(0.5)) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(f.value(50, s(1.5)) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("dynamic programming principle") {
  const auto p = lq1();
  const auto f = compute_value(p, 0.0, fast());
  const auto same = dpp_consistency(f, 0.3, 0.3, s(1.0), 2000);
  CHECK(same.gap == doctest::Approx(0.0));
  const auto r = dpp_consistency(f, 0.0, 0.5, s(1.0), 20000);
  CAPTURE(r.gap);
  CAPTURE(r.combined_se);
  CHECK(r.gap <= 3 * r.combined_se);
  CHECK(r.lhs == doctest::Approx(1.25).epsilon(0.03));
  CHECK_THROWS_AS(dpp_consistency(f, 0.5, 0.2, s(1.0), 100), Error);
}

TEST_CASE("enlarging the control set cannot raise the value") {
  ProblemOptions coarse;
  coarse.steps = 50;
  coarse.control_step = 0.5;
  ProblemOptions fine = coarse;
  fine.control_step = 0.05;
  const auto fc = compute_value(make_lq1(coarse), 0.0, fast());
  const auto ff = compute_value(make_lq1(fine), 0.0, fast());
  for (int i : {0, 25, 49})
    for (double x : {-2.0, -0.3, 0.0, 1.0, 2.5}) CHECK(ff.value(i, s(x)) <= fc.value(i, s(x)) + 1e-9);
}

TEST_CASE("scaling the costs keeps the optimal control") {
  auto p = lq1(50);
  auto q = p;
  q.coeff.running_cost = [p](double t, const Vec& x, const ControlPoint& u) { return 2 * p.coeff.f(t, x, u); };
  q.coeff.terminal_cost = [p](const Vec& x) { return 2 * p.coeff.h(x); };
  const auto fp = compute_value(p, 0.0, fast());
  const auto fq = compute_value(q, 0.0, fast());
  for (int i : {0, 20, 49})
    for (double x : {-1.5, 0.2, 1.0}) {
      CHECK(fq.policy_at(i, s(x)) == fp.policy_at(i, s(x)));
      CHECK(fq.value(i, s(x)) == doctest::Approx(2 * fp.value(i, s(x))).epsilon(1e-10));
    }
}

TEST_CASE("G and the HJB residual") {
  const auto p = lq1();
  // G = P b^2 / 2 + p rho - x^2 - rho^2 with b = 1/2
  CHECK(hamiltonian_G(p, 0.0, s(0.0), s(0.0), s(0.0), m1(64.0)) == doctest::Approx(8.0));
  CHECK(hamiltonian_G(p, 0.0, s(0.5), s(0.0), s(0.0), m1(0.0)) == doctest::Approx(-0.25));
  CHECK(hamiltonian_G(p, 0.0, s(0.0), s(1.0), s(3.0), m1(0.0)) == doctest::Approx(2.0));

  const auto exact = ValueField::from_function(p, 0.0, axis(-3, 3, 241), lq1_value);
  for (double x : {-1.0, 0.5, 1.5}) {
    const auto d = numeric_differentials(exact, 20, s(x), 0.05);
    CHECK(d.Vx[0] == doctest::Approx(2 * x).epsilon(1e-9));
    CHECK(d.Vxx(0, 0) == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(d.Vt == doctest::Approx(-0.25).epsilon(1e-9));
    const auto h = hjb_residual(exact, 20, s(x), 0.05);
    CHECK(std::abs(h.residual) < 1e-9);
  }

  const auto f = compute_value(p, 0.0, fast());
  const auto r = hjb_residual(f, 30, s(0.5), 0.1, 4);
  CAPTURE(r.residual);
  CAPTURE(r.error_bar);
  CHECK(std::abs(r.residual) <= std::max(3 * r.error_bar, 0.05));
}

TEST_CASE("superdifferential membership on an exact field") {
  const auto p = lq1();
  const auto f = ValueField::from_function(p, 0.0, axis(-3, 3, 601), lq1_value);
  const int step = 40;
  const double x = 0.7;
  const std::vector<double> radii{0.2, 0.1, 0.05};
  DifferentialTriple tr;
  tr.r = -0.25;
  tr.p = s(2 * x);
  tr.P = m1(2.0);
  CHECK(superdiff_membership(f, step, s(x), tr, radii).accepted);
  CHECK(superdiff_membership(f, step, s(x), tr, radii, ProbeKind::spatial, false).accepted);
  CHECK(superdiff_membership(f, step, s(x), tr, {0.05, 0.03, 0.01}, ProbeKind::time).accepted);

  auto bigger = tr;
  bigger.P = m1(3.0);
  CHECK(superdiff_membership(f, step, s(x), bigger, radii).accepted);
  CHECK_FALSE(superdiff_membership(f, step, s(x), bigger, radii, ProbeKind::spatial, false).accepted);

  auto tilted = tr;
  tilted.p = s(2 * x + 0.5);
  const auto rej = superdiff_membership(f, step, s(x), tilted, radii);
  CHECK_FALSE(rej.accepted);
  CHECK(rej.margin > rej.tolerance);
  CHECK(rej.rung_margins.size() == radii.size());
}

TEST_CASE("from_function rejects bad input") {
  const auto p = lq1();
  CHECK_THROWS_AS(ValueField::from_function(p, 0.0, {0.0}, lq1_value), Error);
  CHECK_THROWS_AS(ValueField::from_function(p, 0.0015, axis(-1, 1, 3), lq1_value), Error);
  CHECK_THROWS_AS(ValueField::from_function(make_heat(3, zero_profiles()), 0.0, axis(-1, 1, 3), lq1_value), Error);
}
