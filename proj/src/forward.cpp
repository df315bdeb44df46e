#include "pmpdp/forward.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

namespace pmpdp {

// ---------------------------------------------------------------------------
// Policies

ControlPolicy ControlPolicy::feedback(Feedback fn) {
  ControlPolicy p;
  p.fn_ = [f = std::move(fn)](std::uint64_t, int step, double t, const Vec& x) { return f(step, t, x); };
  return p;
}

ControlPolicy ControlPolicy::open_loop(OpenLoop fn) {
  ControlPolicy p;
  p.fn_ = [f = std::move(fn)](std::uint64_t path, int step, double, const Vec&) { return f(path, step); };
  return p;
}

ControlPolicy ControlPolicy::constant(std::size_t index) {
  ControlPolicy p;
  p.fn_ = [index](std::uint64_t, int, double, const Vec&) { return index; };
  return p;
}

ControlPolicy ControlPolicy::partition(std::function<int(std::uint64_t)> label, std::vector<ControlPolicy> policies) {
  if (policies.empty()) throw Error("ControlPolicy::partition: no policies");
  ControlPolicy p;
  p.fn_ = [label = std::move(label), pol = std::move(policies)](std::uint64_t path, int step, double t,
                                                                 const Vec& x) {
    const int j = label(path);
    if (j < 0 || j >= static_cast<int>(pol.size())) throw Error("ControlPolicy::partition: label out of range");
    return pol[static_cast<std::size_t>(j)](path, step, t, x);
  };
  return p;
}

std::size_t ControlPolicy::operator()(std::uint64_t path, int step, double t, const Vec& x) const {
  if (!fn_) throw Error("ControlPolicy: empty policy");
  return fn_(path, step, t, x);
}

// ---------------------------------------------------------------------------
// Bundles

Vec PathBundle::state(int path, int step) const {
  Vec x(dim);
  const double* s = state_ptr(path, step);
  for (int k = 0; k < dim; ++k) x[k] = s[k];
  return x;
}

void PathBundle::increments(int step, std::vector<double>& out) const {
  out.resize(static_cast<std::size_t>(paths) * noise_dim);
  for (int j = 0; j < paths; ++j)
    for (int k = 0; k < noise_dim; ++k) out[static_cast<std::size_t>(j) * noise_dim + k] = dW(j, step, k);
}

PathBundle simulate_state(const SpectralProblem& p, double t, const Vec& eta, const ControlPolicy& policy, int M,
                          const SimulationOptions& opt) {
  return simulate_state(p, t, std::vector<Vec>{eta}, policy, M, opt);
}

PathBundle simulate_state(const SpectralProblem& p, double t, const std::vector<Vec>& eta, const ControlPolicy& policy,
                          int M, const SimulationOptions& opt) {
  if (M < 1) throw Error("simulate_state: need at least one path");
  if (eta.size() != 1 && eta.size() != static_cast<std::size_t>(M))
    throw Error("simulate_state: need one initial state or one per path");
  const auto i0 = p.horizon.index_of(t);
  if (!i0 || *i0 >= p.horizon.steps()) throw Error("simulate_state: start time " + std::to_string(t) + " is not a grid node before T");
  if (p.controls.size() > std::numeric_limits<std::uint16_t>::max()) throw Error("simulate_state: control set too large");

  PathBundle b;
  b.grid = p.horizon.tail(*i0);
  b.offset = *i0;
  b.noise = opt.noise.value_or(p.noise);
  if (b.noise.dim != p.noise_dim()) throw Error("simulate_state: noise dimension mismatch");
  b.first_path = opt.first_path;
  b.paths = M;
  b.dim = p.dim();
  b.noise_dim = p.noise_dim();
  const int L = b.grid.steps();
  const int N = b.dim, m = b.noise_dim;
  const double dt = b.grid.dt();
  b.states.resize(static_cast<std::size_t>(L + 1) * M * N);
  b.controls.resize(static_cast<std::size_t>(L) * M);

  const auto K = p.controls.size();
  Vec dw(m);
  for (int j = 0; j < M; ++j) {
    Vec x = eta.size() == 1 ? eta[0] : eta[static_cast<std::size_t>(j)];
    if (x.size() != N) throw Error("simulate_state: initial state has wrong dimension");
    const std::uint64_t gid = b.first_path + static_cast<std::uint64_t>(j);
    double* s0 = b.states.data() + static_cast<std::size_t>(j) * N;
    for (int k = 0; k < N; ++k) s0[k] = x[k];
    for (int i = 0; i < L; ++i) {
      const double ti = b.grid.node(i);
      const std::size_t ui = policy(gid, *i0 + i, ti, x);
      if (ui >= K) throw Error("simulate_state: policy returned an invalid control index");
      b.controls[static_cast<std::size_t>(i) * M + j] = static_cast<std::uint16_t>(ui);
      const auto& u = p.controls[ui];
      for (int k = 0; k < m; ++k) dw[k] = brownian_increment(b.noise, b.grid, gid, i, k);
      Vec y = x + p.coeff.a(ti, x, u) * dt + p.coeff.b(ti, x, u) * dw;
      x = p.op.semigroup(dt, y);
      if (!x.allFinite())
        throw Error("simulate_state: non-finite state at path " + std::to_string(j) + ", step " + std::to_string(i + 1));
      double* s = b.states.data() + (static_cast<std::size_t>(i + 1) * M + j) * N;
      for (int k = 0; k < N; ++k) s[k] = x[k];
    }
  }
  return b;
}

ControlPolicy replay_policy(const PathBundle& bundle) {
  // Shared ownership keeps the policy valid if the bundle goes away.
  auto ctl = std::make_shared<std::vector<std::uint16_t>>(bundle.controls);
  const int M = bundle.paths, off = bundle.offset, L = bundle.steps();
  const std::uint64_t first = bundle.first_path;
  return ControlPolicy::open_loop([ctl, M, off, L, first](std::uint64_t path, int step) -> std::size_t {
    const auto j = static_cast<std::int64_t>(path) - static_cast<std::int64_t>(first);
    const int i = step - off;
    if (j < 0 || j >= M || i < 0 || i >= L) throw Error("replay_policy: (path, step) outside the recorded bundle");
    return (*ctl)[static_cast<std::size_t>(i) * M + static_cast<std::size_t>(j)];
  });
}

// ---------------------------------------------------------------------------
// Test processes

TestEquation linearized_test_equation(const SpectralProblem& p, const PathBundle& bundle) {
  TestEquation eq;
  const SpectralProblem* pp = &p;
  const PathBundle* bb = &bundle;
  eq.J = [pp, bb](int path, int step) {
    return pp->coeff.a_x(bb->time(step), bb->state(path, step), pp->controls[bb->control(path, step)]);
  };
  eq.K = [pp, bb](int path, int step, int k) {
    return pp->coeff.b_x(bb->time(step), bb->state(path, step), pp->controls[bb->control(path, step)], k);
  };
  return eq;
}

Vec TestPaths::state(int path, int step) const {
  Vec x(dim);
  const double* s = states.data() + (static_cast<std::size_t>(step) * paths + path) * dim;
  for (int k = 0; k < dim; ++k) x[k] = s[k];
  return x;
}

Vec test_process_step(const SpectralProblem& p, const PathBundle& bundle, const TestEquation& eq, int path, int step,
                      const Vec& phi) {
  const int N = bundle.dim, m = bundle.noise_dim;
  const double dt = bundle.grid.dt();
  Vec y = phi;
  if (eq.J) {
    const Mat J = eq.J(path, step);
    if (J.rows() != N || J.cols() != N) throw Error("simulate_test_process: J has wrong dimension");
    y.noalias() += (J * phi) * dt;
  }
  if (eq.u) y += eq.u(path, step) * dt;
  Mat v;
  if (eq.v) {
    v = eq.v(path, step);
    if (v.rows() != N || v.cols() != m) throw Error("simulate_test_process: v has wrong dimension");
  }
  for (int k = 0; k < m; ++k) {
    const double dw = bundle.dW(path, step, k);
    if (eq.K) {
      const Mat Kk = eq.K(path, step, k);
      if (Kk.rows() != N || Kk.cols() != N) throw Error("simulate_test_process: K has wrong dimension");
      y.noalias() += (Kk * phi) * dw;
    }
    if (eq.v) y += v.col(k) * dw;
  }
  return p.op.semigroup(dt, y);
}

Vec test_process_start(const PathBundle& bundle, const TestEquation& eq, int path) {
  Vec phi = eq.xi ? eq.xi(path) : Vec(Vec::Zero(bundle.dim));
  if (phi.size() != bundle.dim) throw Error("simulate_test_process: xi has wrong dimension");
  return phi;
}

TestPaths simulate_test_process(const SpectralProblem& p, const PathBundle& bundle, const TestEquation& eq,
                                int start) {
  const int N = bundle.dim, M = bundle.paths;
  if (N != p.dim() || bundle.noise_dim != p.noise_dim())
    throw Error("simulate_test_process: bundle does not match the problem");
  if (start < 0 || start >= bundle.steps()) throw Error("simulate_test_process: start step out of range");
  TestPaths out;
  out.paths = M;
  out.steps = bundle.steps();
  out.dim = N;
  out.states.assign(static_cast<std::size_t>(out.steps + 1) * M * N, 0.0);
  for (int j = 0; j < M; ++j) {
    Vec phi = test_process_start(bundle, eq, j);
    for (int i = start; i <= out.steps; ++i) {
      double* s = out.states.data() + (static_cast<std::size_t>(i) * M + j) * N;
      for (int k = 0; k < N; ++k) s[k] = phi[k];
      if (i < out.steps) phi = test_process_step(p, bundle, eq, j, i, phi);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variations

Vec VariationBundle::xi_at(int path, int step) const {
  Vec x(dim);
  const double* s = xi.data() + (static_cast<std::size_t>(step) * paths + path) * dim;
  for (int k = 0; k < dim; ++k) x[k] = s[k];
  return x;
}

VariationBundle simulate_variation(const SpectralProblem& p, const PathBundle& base, int start,
                                   const std::function<Vec(int)>& z) {
  const int N = base.dim, m = base.noise_dim, M = base.paths;
  if (start < 0 || start >= base.steps()) throw Error("simulate_variation: start step out of range");
  VariationBundle vb;
  vb.paths = M;
  vb.steps = base.steps() - start;
  vb.dim = N;
  vb.start = start;
  vb.xi.resize(static_cast<std::size_t>(vb.steps + 1) * M * N);
  vb.sup_xi_sq.assign(M, 0.0);
  vb.int_eps_a.assign(M, 0.0);
  vb.int_eps_b.assign(M, 0.0);
  vb.int_eps2_a.assign(M, 0.0);
  vb.int_eps2_b.assign(M, 0.0);
  const double dt = base.grid.dt();
  const auto& c = p.coeff;
  Vec dw(m);
  for (int j = 0; j < M; ++j) {
    Vec xz = z(j);
    if (xz.size() != N) throw Error("simulate_variation: z has wrong dimension");
    if (xz.cwiseAbs().maxCoeff() > p.box) vb.outside_box = true;
    for (int i = start; i <= base.steps(); ++i) {
      const Vec X = base.state(j, i);
      const Vec xi = xz - X;
      double* s = vb.xi.data() + (static_cast<std::size_t>(i - start) * M + j) * N;
      for (int k = 0; k < N; ++k) s[k] = xi[k];
      vb.sup_xi_sq[j] = std::max(vb.sup_xi_sq[j], xi.squaredNorm());
      if (i == base.steps()) break;

      const double t = base.time(i);
      const auto& u = p.controls[base.control(j, i)];
      const Vec az = c.a(t, xz, u);
      const Mat bz = c.b(t, xz, u);
      const Vec eps_a = az - c.a(t, X, u) - c.a_x(t, X, u) * xi;
      Mat eps_b = bz - c.b(t, X, u);
      for (int k = 0; k < m; ++k) eps_b.col(k) -= c.b_x(t, X, u, k) * xi;
      Vec eps2_a = eps_a;
      Mat eps2_b = eps_b;
      for (int r = 0; r < N; ++r) {
        Vec e = Vec::Zero(N);
        e[r] = 1.0;
        eps2_a[r] -= 0.5 * xi.dot(c.a_xx(t, X, u, e) * xi);
        for (int k = 0; k < m; ++k) {
          Mat E = Mat::Zero(N, m);
          E(r, k) = 1.0;
          eps2_b(r, k) -= 0.5 * xi.dot(c.b_xx(t, X, u, E) * xi);
        }
      }
      vb.int_eps_a[j] += eps_a.squaredNorm() * dt;
      vb.int_eps_b[j] += eps_b.squaredNorm() * dt;
      vb.int_eps2_a[j] += eps2_a.squaredNorm() * dt;
      vb.int_eps2_b[j] += eps2_b.squaredNorm() * dt;

      for (int k = 0; k < m; ++k) dw[k] = base.dW(j, i, k);
      xz = p.op.semigroup(dt, Vec(xz + az * dt + bz * dw));
      if (!xz.allFinite())
        throw Error("simulate_variation: non-finite state at path " + std::to_string(j) + ", step " + std::to_string(i + 1));
    }
  }
  return vb;
}

double VariationLadder::slope(const std::vector<VariationRung>& rungs, double VariationRung::*metric) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (const auto& r : rungs) {
    const double v = r.*metric;
    if (!(v > 0.0) || !(r.radius > 0.0)) continue;
    const double lx = std::log(r.radius), ly = std::log(v);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  if (n == 0) return std::numeric_limits<double>::infinity();  // identically zero: faster than any power
  if (n == 1) return std::numeric_limits<double>::quiet_NaN();
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

VariationLadder variation_ladder(const SpectralProblem& p, const ControlPolicy& policy, double t, const Vec& x,
                                 const Vec& direction, const std::vector<double>& radii, int branches,
                                 std::uint64_t tag) {
  if (branches < 2) throw Error("variation_ladder: need at least two branches");
  if (!(direction.norm() > 0.0)) throw Error("variation_ladder: zero direction");
  const Vec d = direction / direction.norm();
  SimulationOptions opt;
  opt.noise = p.noise.derive(0x7a11ULL ^ (tag * 0x9e3779b97f4a7c15ULL) ^ static_cast<std::uint64_t>(std::llround(t * 1e9)));
  const PathBundle base = simulate_state(p, t, x, policy, branches, opt);
  VariationLadder out;
  for (double r : radii) {
    const Vec z = x + r * d;
    const auto vb = simulate_variation(p, base, 0, [&](int) { return z; });
    out.outside_box = out.outside_box || vb.outside_box;
    VariationRung rung;
    rung.radius = r;
    rung.sup_xi_sq = mean_se(vb.sup_xi_sq).mean;
    rung.eps_a = mean_se(vb.int_eps_a).mean;
    rung.eps_b = mean_se(vb.int_eps_b).mean;
    rung.eps2_a = mean_se(vb.int_eps2_a).mean;
    rung.eps2_b = mean_se(vb.int_eps2_b).mean;
    out.rungs.push_back(rung);
  }
  return out;
}

void write_trajectory_csv(std::ostream& os, const PathBundle& b, int max_paths) {
  const int P = max_paths < 0 ? b.paths : std::min(max_paths, b.paths);
  os << "path,step,time";
  for (int k = 0; k < b.dim; ++k) os << ",x" << k;
  os << ",control\n";
  char buf[64];
  for (int j = 0; j < P; ++j)
    for (int i = 0; i <= b.steps(); ++i) {
      os << j << ',' << i;
      std::snprintf(buf, sizeof buf, ",%.12g", b.time(i));
      os << buf;
      const double* s = b.state_ptr(j, i);
      for (int k = 0; k < b.dim; ++k) {
        std::snprintf(buf, sizeof buf, ",%.12g", s[k]);
        os << buf;
      }
      // the terminal node carries no control
      if (i < b.steps())
        os << ',' << b.control(j, i) << '\n';
      else
        os << ",\n";
    }
}

// ---------------------------------------------------------------------------
// Reductions

double pairwise_sum(const double* x, std::size_t n) {
  if (n <= 16) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

MeanSe mean_se(const std::vector<double>& x) {
  MeanSe r;
  if (x.empty()) return r;
  const auto n = x.size();
  r.mean = pairwise_sum(x) / static_cast<double>(n);
  if (n < 2) return r;
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = (x[i] - r.mean) * (x[i] - r.mean);
  r.sd = std::sqrt(pairwise_sum(d) / static_cast<double>(n - 1));
  r.se = r.sd / std::sqrt(static_cast<double>(n));
  return r;
}

}  // namespace pmpdp
