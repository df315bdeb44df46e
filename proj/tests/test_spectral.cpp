#include "pmpdp/spectral.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace pmpdp;

namespace {

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<int>(xs.size()));
  int i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

// Classical RK4 on v' = A v; independent of the closed-form semigroup.
Vec rk4_flow(const SpectralOperator& op, double t, Vec v, int n = 2000) {
  const double h = t / n;
  for (int i = 0; i < n; ++i) {
    const Vec k1 = op.apply(v);
    const Vec k2 = op.apply(v + 0.5 * h * k1);
    const Vec k3 = op.apply(v + 0.5 * h * k2);
    const Vec k4 = op.apply(v + h * k3);
    v += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  return v;
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("semigroup on eigen-modes matches exponential decay and an RK4 oracle") {
  const auto op = SpectralOperator::diagonal({1.0, 4.0});
  const Vec v = vec({1.0, 1.0});
  const Vec w = semigroup_apply(op, 0.5, v);
  CHECK(w[0] == doctest::Approx(std::exp(-0.5)).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(std::exp(-2.0)).epsilon(1e-14));
  const Vec r = rk4_flow(op, 0.5, v);
  CHECK((w - r).norm() < 1e-12);

  const Vec z = semigroup_apply(op, 0.0, vec({3.0, -2.0}));
  CHECK(z[0] == 3.0);
  CHECK(z[1] == -2.0);
}

TEST_CASE("negative time is rejected") {
  const auto op = SpectralOperator::diagonal({1.0});
  CHECK_THROWS_AS(semigroup_apply(op, -0.1, vec({1.0})), std::exception);
  CHECK_THROWS_AS(op.semigroup_matrix(-1e-3), std::exception);
}

TEST_CASE("semigroup property and contraction") {
  const auto op = SpectralOperator::diagonal({0.3, 1.0, 2.5, 9.0});
  const Vec v = vec({1.0, -0.5, 2.0, 0.25});
  for (double s : {0.0, 0.1, 0.7}) {
    for (double t : {0.0, 0.2, 1.3}) {
      const Vec a = op.semigroup(t + s, v);
      const Vec b = op.semigroup(t, op.semigroup(s, v));
      CHECK((a - b).norm() <= 1e-12);
      CHECK(a.norm() <= v.norm() + 1e-15);
    }
  }
  const Mat S = op.semigroup_matrix(0.4);
  CHECK((S * v - op.semigroup(0.4, v)).norm() < 1e-14);
}

TEST_CASE("wave block is orthogonal and agrees with RK4") {
  const auto op = SpectralOperator::wave({1.0, 3.0});
  CHECK(op.dim() == 4);
  CHECK_FALSE(op.is_diagonal());
  for (double t : {0.1, 0.9, 2.0}) {
    const Mat S = op.semigroup_matrix(t);
    CHECK((S.transpose() * S - Mat::Identity(4, 4)).norm() < 1e-13);
  }
  const Vec v = vec({1.0, 0.0, 0.5, -0.5});
  CHECK((op.semigroup(0.7, v) - rk4_flow(op, 0.7, v)).norm() < 1e-10);
  // skew generator: adjoint is the negative
  CHECK((op.apply_adjoint(v) + op.apply(v)).norm() < 1e-15);
}

TEST_CASE("zero operator is the identity flow") {
  const auto op = SpectralOperator::zero(3);
  CHECK(op.is_zero());
  const Vec v = vec({1.0, 2.0, 3.0});
  CHECK(op.semigroup(5.0, v) == v);
}

TEST_CASE("time grid nodes") {
  const TimeGrid g(0.0, 1.0, 1000);
  CHECK(g.node(1000) == 1.0);
  CHECK(g.node(0) == 0.0);
  CHECK(g.dt() == doctest::Approx(1e-3));
  CHECK(g.index_of(0.5).value() == 500);
  CHECK_FALSE(g.index_of(0.5004).has_value());
  const TimeGrid t = g.tail(500);
  CHECK(t.t0() == doctest::Approx(0.5));
  CHECK(t.steps() == 500);
  CHECK(t.node(500) == 1.0);
  CHECK_THROWS(TimeGrid(0.0, 1.0, 0));
}

TEST_CASE("increments are deterministic and independent of generation order") {
  const NoiseModel n{2, 42, 1};
  const TimeGrid g(0.0, 1.0, 50);
  const auto e = sample_increments(n, g, 64);
  const auto e2 = sample_increments(n, g, 64);
  CHECK(e.data == e2.data);
  // A later path computed alone equals its slot in the ensemble.
  for (int s : {0, 17, 49})
    for (int k : {0, 1}) CHECK(brownian_increment(n, g, 63, s, k) == e(63, s, k));
  // Smaller ensemble is a prefix.
  const auto e3 = sample_increments(n, g, 10);
  CHECK(std::equal(e3.data.begin(), e3.data.end(), e.data.begin()));
  // Different seed gives different numbers.
  CHECK(brownian_increment({2, 43, 1}, g, 0, 0, 0) != e(0, 0, 0));
}

TEST_CASE("increment moments and normality") {
  const NoiseModel n{1, 7, 1};
  const TimeGrid g(0.0, 1.0, 100);
  const int M = 20000;
  double mean = 0, sq = 0;
  for (int p = 0; p < M; ++p) {
    const double d = brownian_increment(n, g, p, 3, 0);
    mean += d;
    sq += d * d;
  }
  mean /= M;
  sq /= M;
  CHECK(std::abs(mean) < 4 * std::sqrt(g.dt() / M));
  CHECK(std::abs(sq / g.dt() - 1.0) < 0.05);
}

TEST_CASE("normal draws are calibrated across seeds") {
  // KS statistic per seed at the 5% level; exceedances ~ Binomial(60, 0.05),
  // and P(count > 9) < 1e-3.
  const int M = 4000, seeds = 60;
  int exceed = 0;
  std::vector<double> z(M);
  for (int seed = 0; seed < seeds; ++seed) {
    for (int p = 0; p < M; ++p) z[p] = counter_normal(seed, p, 3);
    std::sort(z.begin(), z.end());
    double ks = 0;
    for (int i = 0; i < M; ++i) {
      const double F = std_normal_cdf(z[i]);
      ks = std::max({ks, F - double(i) / M, double(i + 1) / M - F});
    }
    exceed += ks > 1.358 / std::sqrt(double(M));
  }
  CAPTURE(exceed);
  CHECK(exceed <= 9);
}

TEST_CASE("refined increments sum the finer path") {
  const NoiseModel coarse{1, 11, 4};
  const NoiseModel fine{1, 11, 1};
  const TimeGrid gc(0.0, 1.0, 25);
  const TimeGrid gf(0.0, 1.0, 100);
  for (int p : {0, 5}) {
    for (int s : {0, 7, 24}) {
      double sum = 0;
      for (int j = 0; j < 4; ++j) sum += brownian_increment(fine, gf, p, 4 * s + j, 0);
      CHECK(brownian_increment(coarse, gc, p, s, 0) == doctest::Approx(sum).epsilon(1e-13));
    }
  }
  // Variance of the refined increment is still dt.
  double sq = 0;
  const int M = 20000;
  for (int p = 0; p < M; ++p) {
    const double d = brownian_increment(coarse, gc, p, 2, 0);
    sq += d * d;
  }
  CHECK(std::abs(sq / M / gc.dt() - 1.0) < 0.05);
}

TEST_CASE("derived streams are uncorrelated with the parent") {
  const NoiseModel n{1, 5, 1};
  const NoiseModel d = n.derive(99);
  const TimeGrid g(0.0, 1.0, 10);
  const int M = 20000;
  double c = 0;
  for (int p = 0; p < M; ++p) c += brownian_increment(n, g, p, 0, 0) * brownian_increment(d, g, p, 0, 0);
  c /= M * g.dt();
  CHECK(std::abs(c) < 4.0 / std::sqrt(double(M)));
}

TEST_CASE("Hilbert-Schmidt norm is Frobenius") {
  HSMatrix b(2, 2);
  b << 1, 2, 3, 4;
  CHECK(hs_norm(b) == doctest::Approx(std::sqrt(30.0)));
}
