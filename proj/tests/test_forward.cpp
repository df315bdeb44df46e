#include "pmpdp/forward.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace pmpdp;

namespace {

Vec s(double x) {
  Vec v(1);
  v[0] = x;
  return v;
}

ControlPolicy zero_control(const SpectralProblem& p) { return ControlPolicy::constant(p.controls.nearest(s(0.0))); }

// dX = 0.5 X dW: geometric Brownian motion, exact X(1) = eta exp(-1/8 + W(1)/2).
SpectralProblem gbm(int steps) {
  ProblemOptions o;
  o.steps = steps;
  auto p = make_lq1(o);
  p.lq.reset();
  p.coeff.drift = [](double, const Vec&, const ControlPoint&) { return Vec(Vec::Zero(1)); };
  p.coeff.diffusion = [](double, const Vec& x, const ControlPoint&) {
    Mat m(1, 1);
    m(0, 0) = 0.5 * x[0];
    return m;
  };
  p.coeff.drift_x = nullptr;
  p.coeff.diffusion_x = nullptr;
  return p;
}

}  // namespace

TEST_CASE("zero coefficients reproduce the semigroup flow exactly") {
  const auto p = make_heat(3, zero_profiles());
  Vec eta(3);
  eta << 1.0, -0.5, 0.2;
  const auto b = simulate_state(p, 0.0, eta, ControlPolicy::constant(0), 4);
  for (int i : {0, 10, 50, 100}) {
    const Vec exact = p.op.semigroup(b.time(i), eta);
    for (int path = 0; path < 4; ++path) CHECK((b.state(path, i) - exact).norm() <= 1e-12 * (1 + exact.norm()));
  }
}

TEST_CASE("Ornstein-Uhlenbeck second moment") {
  // dX = -X dt + 0.5 dW, X0 = 1: E X(1)^2 = e^-2 + sigma^2 (1 - e^-2) / 2.
  const auto p = make_lq(-1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0);
  const int M = 20000;
  const auto b = simulate_state(p, 0.0, s(1.0), zero_control(p), M);
  std::vector<double> sq(M), x(M);
  for (int i = 0; i < M; ++i) {
    x[i] = b.state(i, b.steps())[0];
    sq[i] = x[i] * x[i];
  }
  const auto ms = mean_se(sq);
  const double exact = std::exp(-2.0) + 0.25 * (1 - std::exp(-2.0)) / 2;
  CHECK(std::abs(ms.mean - exact) <= 4 * ms.se + 2e-3);
  const auto m1 = mean_se(x);
  CHECK(std::abs(m1.mean - std::exp(-1.0)) <= 4 * m1.se + 1e-3);
}

TEST_CASE("strong order one half with multiplicative noise") {
  // All grids share the Brownian path of a 512-step grid through refinement.
  const int fine = 512, M = 4000;
  std::vector<double> dts, errs;
  for (int steps : {16, 32, 64, 128}) {
    const auto p = gbm(steps);
    SimulationOptions o;
    o.noise = NoiseModel{1, p.noise.seed, fine / steps};
    const auto b = simulate_state(p, 0.0, s(1.0), ControlPolicy::constant(0), M, o);
    double err = 0;
    for (int i = 0; i < M; ++i) {
      double W = 0;
      for (int k = 0; k < steps; ++k) W += b.dW(i, k, 0);
      err += std::abs(b.state(i, steps)[0] - std::exp(-0.125 + 0.5 * W));
    }
    dts.push_back(1.0 / steps);
    errs.push_back(err / M);
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const int n = static_cast<int>(dts.size());
  for (int i = 0; i < n; ++i) {
    const double lx = std::log(dts[i]), ly = std::log(errs[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  CAPTURE(slope);
  CHECK(slope == doctest::Approx(0.5).epsilon(0.3));  // 0.5 +- 0.15
}

TEST_CASE("test process: free flow, zero mean and linearity") {
  const auto p = make_heat(2, heat_default_profiles());
  Vec eta(2);
  eta << 0.5, -0.2;
  const int M = 4000;
  const auto b = simulate_state(p, 0.0, eta, ControlPolicy::constant(4), M);

  Vec xi(2);
  xi << 1.0, 2.0;
  TestEquation free;
  free.xi = [&](int) { return xi; };
  const auto tp = simulate_test_process(p, b, free);
  for (int i : {0, 30, 100}) CHECK((tp.state(7, i) - p.op.semigroup(b.time(i), xi)).norm() < 1e-12);

  // Driven only by noise: mean zero.
  TestEquation noisy;
  const int m = p.noise_dim();
  noisy.v = [m](int, int) { return Mat(Mat::Constant(2, m, 0.5)); };
  const auto tn = simulate_test_process(p, b, noisy);
  std::vector<double> last(M);
  for (int i = 0; i < M; ++i) last[i] = tn.state(i, tn.steps)[0];
  const auto ms = mean_se(last);
  CHECK(std::abs(ms.mean) < 4 * ms.se);

  // Linear in the data.
  auto eq = linearized_test_equation(p, b);
  Vec x1(2), x2(2);
  x1 << 1.0, 0.0;
  x2 << 0.3, -1.0;
  auto with = [&](Vec x, double scale) {
    auto e = eq;
    e.xi = [x](int) { return x; };
    e.u = [scale](int, int) { return Vec(Vec::Constant(2, scale)); };
    return simulate_test_process(p, b, e);
  };
  const auto a = with(x1, 1.0), c = with(x2, -0.5), sum = with(x1 + 2 * x2, 0.0);
  for (int path : {0, 99, M - 1})
    for (int i : {1, 50, 100})
      CHECK((sum.state(path, i) - (a.state(path, i) + 2 * c.state(path, i))).norm() < 1e-10);
}

TEST_CASE("variations") {
  const auto lq = make_lq1();
  const int M = 500;
  const auto b = simulate_state(lq, 0.0, s(1.0), zero_control(lq), M);

  // Starting from the path itself gives no variation.
  const auto same = simulate_variation(lq, b, 100, [&](int path) { return b.state(path, 100); });
  for (int path : {0, M - 1}) CHECK(same.sup_xi_sq[path] == 0.0);

  // Linear drift, constant noise: the expansion remainders vanish.
  const auto shifted = simulate_variation(lq, b, 100, [&](int path) { return Vec(b.state(path, 100) + s(0.3)); });
  for (int path = 0; path < M; ++path) {
    CHECK(shifted.int_eps_a[path] < 1e-20);
    CHECK(shifted.int_eps2_b[path] < 1e-20);
  }
  CHECK(shifted.xi_at(3, shifted.steps)[0] == doctest::Approx(0.3));

  // Nonlinear field problem: remainders shrink faster than the variation.
  const auto h = make_heat(2, heat_default_profiles());
  Vec x(2), dir(2);
  x << 0.4, -0.1;
  dir << 1.0, 1.0;
  dir /= dir.norm();
  const auto ladder = variation_ladder(h, ControlPolicy::constant(4), 0.2, x, dir, {0.4, 0.2, 0.1, 0.05}, 128);
  REQUIRE(ladder.rungs.size() == 4);
  const double s_xi = VariationLadder::slope(ladder.rungs, &VariationRung::sup_xi_sq);
  const double s_eps = VariationLadder::slope(ladder.rungs, &VariationRung::eps_a);
  CAPTURE(s_xi);
  CAPTURE(s_eps);
  CHECK(s_xi == doctest::Approx(2.0).epsilon(0.1));
  CHECK(s_eps > 2.0);
}

TEST_CASE("partition mixing is bit-exact and simulation deterministic") {
  const auto p = make_lq1();
  const int M = 200;
  const std::size_t lo = p.controls.nearest(s(-1.0)), hi = p.controls.nearest(s(1.0));
  const auto mixed = ControlPolicy::partition([](std::uint64_t path) { return int(path % 3 == 0); },
                                              {ControlPolicy::constant(lo), ControlPolicy::constant(hi)});
  const auto bm = simulate_state(p, 0.0, s(1.0), mixed, M);
  const auto b0 = simulate_state(p, 0.0, s(1.0), ControlPolicy::constant(lo), M);
  const auto b1 = simulate_state(p, 0.0, s(1.0), ControlPolicy::constant(hi), M);
  for (int path = 0; path < M; ++path) {
    const auto& ref = path % 3 == 0 ? b1 : b0;
    for (int i : {0, 1, 500, 1000}) REQUIRE(bm.state(path, i)[0] == ref.state(path, i)[0]);
  }

  const auto again = simulate_state(p, 0.0, s(1.0), mixed, M);
  CHECK(again.states == bm.states);
  CHECK(again.controls == bm.controls);

  // A window of paths reproduces the same rows.
  SimulationOptions o;
  o.first_path = 50;
  const auto window = simulate_state(p, 0.0, s(1.0), mixed, 20, o);
  for (int j = 0; j < 20; ++j) CHECK(window.state(j, 1000)[0] == bm.state(50 + j, 1000)[0]);

  // Replaying the stored controls reproduces the feedback run.
  const auto fb = ControlPolicy::feedback([&](int, double, const Vec& x) { return p.controls.nearest(-x); });
  const auto bf = simulate_state(p, 0.0, s(1.0), fb, 50);
  const auto br = simulate_state(p, 0.0, s(1.0), replay_policy(bf), 50);
  CHECK(br.states == bf.states);
}

TEST_CASE("deterministic reductions and csv") {
  std::vector<double> x(1001);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = double(i);
  CHECK(pairwise_sum(x) == 500500.0);
  const auto ms = mean_se({1.0, 2.0, 3.0, 4.0});
  CHECK(ms.mean == 2.5);
  CHECK(ms.sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(ms.se == doctest::Approx(std::sqrt(5.0 / 3.0) / 2.0));

  const auto p = make_lq1();
  const auto b = simulate_state(p, 0.0, s(1.0), zero_control(p), 5);
  std::ostringstream os;
  write_trajectory_csv(os, b, 2);
  const auto text = os.str();
  CHECK(text.rfind("path,step,time,x0,control", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 2 * 1001);
}
