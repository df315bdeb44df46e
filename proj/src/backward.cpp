#include "pmpdp/backward.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace pmpdp {

namespace {

std::string step_name(const PathBundle& b, int i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "step %d (t=%.6g)", b.offset + i, b.time(i));
  return buf;
}

}  // namespace

MeanSe cost_functional(const SpectralProblem& p, const PathBundle& b) {
  std::vector<double> cost(static_cast<std::size_t>(b.paths));
  const double dt = b.grid.dt();
  for (int j = 0; j < b.paths; ++j) {
    double s = 0.0;
    for (int i = 0; i < b.steps(); ++i) s += p.coeff.f(b.time(i), b.state(j, i), p.controls[b.control(j, i)]) * dt;
    cost[j] = s + p.coeff.h(b.state(j, b.steps()));
  }
  return mean_se(cost);
}

// ---------------------------------------------------------------------------
// Scalar BSDE

double BackwardPair::Y(const SpectralProblem& p, const PathBundle& b, int path, int step) const {
  if (step < s0 || step >= s1) throw Error("BackwardPair::Y: step outside the solved window");
  const auto& f = fits[static_cast<std::size_t>(step - s0)];
  const double yh = f.value.eval(b.state_ptr(path, step), 0);
  const Vec z = Z(b, path, step);
  return yh + g(b.time(step), b.state(path, step), yh, z, p.controls[b.control(path, step)]) * dt;
}

Vec BackwardPair::Z(const PathBundle& b, int path, int step) const {
  if (step < s0 || step >= s1) throw Error("BackwardPair::Z: step outside the solved window");
  const auto v = fits[static_cast<std::size_t>(step - s0)].mart.eval(b.state_ptr(path, step));
  Vec z(noise_dim);
  for (int k = 0; k < noise_dim; ++k) z[k] = v[k];
  return z;
}

double BackwardPair::Y_stderr(const PathBundle& b, int path, int step) const {
  if (step < s0 || step >= s1) throw Error("BackwardPair::Y_stderr: step outside the solved window");
  return fits[static_cast<std::size_t>(step - s0)].value.stderr_at(b.state_ptr(path, step), 0);
}

BackwardPair solve_bsde_window(const SpectralProblem& p, const PathBundle& b, const Driver& g,
                               const std::vector<double>& terminal, int s0, int s1, const BackwardOptions& opt) {
  if (s0 < 0 || s1 > b.steps() || s0 > s1) throw Error("solve_bsde: window outside the bundle");
  if (terminal.size() != static_cast<std::size_t>(b.paths)) throw Error("solve_bsde: one terminal value per path required");
  const int M = b.paths, N = b.dim, m = b.noise_dim;
  const double dt = b.grid.dt();
  BackwardPair out;
  out.s0 = s0;
  out.s1 = s1;
  out.noise_dim = m;
  out.dt = dt;
  out.g = g;
  out.fits.resize(static_cast<std::size_t>(s1 - s0));
  out.mean_y.assign(static_cast<std::size_t>(s1 - s0 + 1), 0.0);
  out.mean_abs_z.assign(static_cast<std::size_t>(s1 - s0), 0.0);
  out.condition.assign(static_cast<std::size_t>(s1 - s0), 1.0);

  std::vector<double> y = terminal, realized = terminal;
  out.mean_y.back() = mean_se(y).mean;
  std::vector<double> dw;
  Eigen::MatrixXd T(M, 1);
  std::vector<double> absz(static_cast<std::size_t>(M));
  for (int i = s1 - 1; i >= s0; --i) {
    Regression reg(opt.basis, b.state_ptr(0, i), M, N, step_name(b, i), opt.batches);
    b.increments(i, dw);
    for (int j = 0; j < M; ++j) T(j, 0) = y[j];
    auto fit = fit_with_increments(reg, T, dw, m, dt);
    const double t = b.time(i);
    for (int j = 0; j < M; ++j) {
      const double yh = fit.value.eval(b.state_ptr(j, i), 0);
      const auto zv = fit.mart.eval(b.state_ptr(j, i));
      Vec z(m);
      for (int k = 0; k < m; ++k) z[k] = zv[k];
      const double gv = g(t, b.state(j, i), yh, z, p.controls[b.control(j, i)]) * dt;
      y[j] = yh + gv;
      realized[j] += gv;
      absz[j] = z.norm();
    }
    out.condition[i - s0] = reg.condition();
    out.mean_y[i - s0] = mean_se(y).mean;
    out.mean_abs_z[i - s0] = mean_se(absz).mean;
    out.fits[static_cast<std::size_t>(i - s0)] = std::move(fit);
  }
  out.start_values = y;
  out.y0 = mean_se(y);
  // The projected values are smoothed; the path-wise recursion carries the
  // Monte Carlo fluctuation of the estimator.
  out.y0.se = mean_se(realized).se;
  out.y0.sd = mean_se(realized).sd;
  if (s1 > s0) {
    const double e = out.fits.front().value.stderr_at(b.state_ptr(0, s0), 0);
    out.y0_regression_se = std::isfinite(e) ? e : out.y0.se;
  }
  return out;
}

BackwardPair solve_bsde(const SpectralProblem& p, const PathBundle& b, const Driver& g, const TerminalFn& phi,
                        const BackwardOptions& opt) {
  std::vector<double> terminal(static_cast<std::size_t>(b.paths));
  for (int j = 0; j < b.paths; ++j) terminal[j] = phi(b.state(j, b.steps()));
  return solve_bsde_window(p, b, g, terminal, 0, b.steps(), opt);
}

BackwardPair solve_bsde(const SpectralProblem& p, const PathBundle& b, const BackwardOptions& opt) {
  const auto* c = &p.coeff;
  return solve_bsde(
      p, b, [c](double t, const Vec& x, double y, const Vec& z, const ControlPoint& u) { return c->g(t, x, y, z, u); },
      [c](const Vec& x) { return c->phi(x); }, opt);
}

std::vector<double> backward_evaluator(const SpectralProblem& p, const PathBundle& b, const std::vector<double>& zeta,
                                       double t, double t_end, const Driver& g, const BackwardOptions& opt) {
  const auto s0 = b.grid.index_of(t), s1 = b.grid.index_of(t_end);
  if (!s0 || !s1) throw Error("backward_evaluator: window endpoints must be bundle nodes");
  if (*s0 > *s1) throw Error("backward_evaluator: window end before start");
  if (*s0 == *s1) {
    if (zeta.size() != static_cast<std::size_t>(b.paths)) throw Error("backward_evaluator: one value per path required");
    return zeta;
  }
  return solve_bsde_window(p, b, g, zeta, *s0, *s1, opt).start_values;
}

// ---------------------------------------------------------------------------
// First-order adjoint

Vec AdjointFirst::p(const SpectralProblem& pr, const PathBundle& b, int path, int step) const {
  if (step == steps) return -pr.coeff.h_x(b.state(path, step));
  if (step < 0 || step > steps) throw Error("AdjointFirst::p: step out of range");
  const Vec x = b.state(path, step);
  Vec ph(dim);
  fits[static_cast<std::size_t>(step)].value.eval(x.data(), ph.data());
  const Mat qm = q(b, path, step);
  const double t = b.time(step);
  const auto& u = pr.controls[b.control(path, step)];
  const Vec drift = pr.coeff.a_x(t, x, u).transpose() * ph + pr.coeff.b_x_adjoint(t, x, u, qm) - pr.coeff.f_x(t, x, u);
  const Vec inner = ph + drift * dt;
  return St.rows() == dim ? Vec(St * inner) : Vec(pr.op.semigroup_matrix(dt).transpose() * inner);
}

Mat AdjointFirst::q(const PathBundle& b, int path, int step) const {
  if (step < 0 || step >= steps) throw Error("AdjointFirst::q: step out of range");
  double v[kMaxDim * kMaxDim];
  fits[static_cast<std::size_t>(q_step(step))].mart.eval(b.state_ptr(path, step), v);
  Mat qm(dim, noise_dim);
  for (int k = 0; k < noise_dim; ++k)
    for (int r = 0; r < dim; ++r) qm(r, k) = v[k * dim + r];
  return qm;
}

Vec AdjointFirst::p_stderr(const PathBundle& b, int path, int step) const {
  Vec s = Vec::Zero(dim);
  if (step >= steps) return s;
  const auto& f = pathwise.empty() ? fits[static_cast<std::size_t>(step)].value
                                   : pathwise[static_cast<std::size_t>(step)];
  for (int r = 0; r < dim; ++r) s[r] = f.stderr_at(b.state_ptr(path, step), r);
  return s;
}

Mat AdjointFirst::q_stderr(const PathBundle& b, int path, int step) const {
  Mat s = Mat::Zero(dim, noise_dim);
  const auto& f = fits[static_cast<std::size_t>(q_step(step))].mart;
  for (int k = 0; k < noise_dim; ++k)
    for (int r = 0; r < dim; ++r) s(r, k) = f.stderr_at(b.state_ptr(path, step), k * dim + r);
  return s;
}

AdjointFirst solve_first_adjoint(const SpectralProblem& p, const PathBundle& b, const BackwardOptions& opt) {
  const int M = b.paths, N = b.dim, m = b.noise_dim, L = b.steps();
  const double dt = b.grid.dt();
  AdjointFirst out;
  out.dim = N;
  out.noise_dim = m;
  out.steps = L;
  out.dt = dt;
  out.fits.resize(static_cast<std::size_t>(L));
  out.pathwise.resize(static_cast<std::size_t>(L));
  out.condition.assign(static_cast<std::size_t>(L), 1.0);
  const Mat St = p.op.semigroup_matrix(dt).transpose();
  out.St = St;

  // Current p_{i+1} per path, row-major M x N, and its unnested twin.
  std::vector<double> pn(static_cast<std::size_t>(M) * N);
  for (int j = 0; j < M; ++j) {
    const Vec v = -p.coeff.h_x(b.state(j, L));
    for (int r = 0; r < N; ++r) pn[static_cast<std::size_t>(j) * N + r] = v[r];
  }
  std::vector<double> xi = pn;
  std::vector<double> dw;
  Eigen::MatrixXd T(M, N), Xi(M, N);
  for (int i = L - 1; i >= 0; --i) {
    Regression reg(opt.basis, b.state_ptr(0, i), M, N, step_name(b, i), opt.batches);
    b.increments(i, dw);
    for (int j = 0; j < M; ++j)
      for (int r = 0; r < N; ++r) {
        T(j, r) = pn[static_cast<std::size_t>(j) * N + r];
        Xi(j, r) = xi[static_cast<std::size_t>(j) * N + r];
      }
    out.fits[static_cast<std::size_t>(i)] = fit_with_increments(reg, T, dw, m, dt);
    out.pathwise[static_cast<std::size_t>(i)] = reg.fit(Xi);
    out.condition[static_cast<std::size_t>(i)] = reg.condition();
    const auto& fit = out.fits[static_cast<std::size_t>(i)];
    const double t = b.time(i);
    for (int j = 0; j < M; ++j) {
      const Vec x = b.state(j, i);
      const auto v = fit.value.eval(x.data());
      const auto w = fit.mart.eval(x.data());
      Vec ph(N);
      Mat qm(N, m);
      for (int r = 0; r < N; ++r) ph[r] = v[r];
      for (int k = 0; k < m; ++k)
        for (int r = 0; r < N; ++r) qm(r, k) = w[k * N + r];
      const auto& u = p.controls[b.control(j, i)];
      const Mat ax = p.coeff.a_x(t, x, u);
      const Vec rest = p.coeff.b_x_adjoint(t, x, u, qm) - p.coeff.f_x(t, x, u);
      const Vec pi = St * Vec(ph + (ax.transpose() * ph + rest) * dt);
      const Vec xo = Eigen::Map<const Vec>(&xi[static_cast<std::size_t>(j) * N], N);
      const Vec xn = St * Vec(xo + (ax.transpose() * xo + rest) * dt);
      for (int r = 0; r < N; ++r) {
        pn[static_cast<std::size_t>(j) * N + r] = pi[r];
        xi[static_cast<std::size_t>(j) * N + r] = xn[r];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison

ComparisonReport comparison_check(const SpectralProblem& p, const PathBundle& b, const Driver& g1, const Driver& g2,
                                  const TerminalFn& phi1, const TerminalFn& phi2, const BackwardOptions& opt) {
  // Precondition on sampled arguments along the bundle.
  const int stride = std::max(1, b.paths / 64);
  for (int j = 0; j < b.paths; j += stride) {
    const Vec xT = b.state(j, b.steps());
    if (phi1(xT) > phi2(xT) + 1e-12) throw Error("comparison_check: Phi1 <= Phi2 violated on path " + std::to_string(j));
    for (int i = 0; i < b.steps(); i += std::max(1, b.steps() / 8)) {
      const Vec x = b.state(j, i);
      const auto& u = p.controls[b.control(j, i)];
      const double y = x.size() ? x[0] : 0.0;
      const Vec z = Vec::Zero(b.noise_dim);
      if (g1(b.time(i), x, y, z, u) > g2(b.time(i), x, y, z, u) + 1e-12)
        throw Error("comparison_check: g1 <= g2 violated on path " + std::to_string(j) + ", step " + std::to_string(i));
    }
  }
  const auto s1 = solve_bsde(p, b, g1, phi1, opt);
  const auto s2 = solve_bsde(p, b, g2, phi2, opt);
  ComparisonReport rep;
  rep.y0_gap = s2.y0.mean - s1.y0.mean;
  rep.worst = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < b.steps(); ++i)
    for (int j = 0; j < b.paths; ++j) {
      const double e1 = s1.Y_stderr(b, j, i), e2 = s2.Y_stderr(b, j, i);
      double tol = 3.0 * std::sqrt((std::isfinite(e1) ? e1 * e1 : 0.0) + (std::isfinite(e2) ? e2 * e2 : 0.0));
      const double d = s1.Y(p, b, j, i) - s2.Y(p, b, j, i) - tol;
      if (d > rep.worst) {
        rep.worst = d;
        rep.tolerance = tol;
        rep.witness_path = j;
        rep.witness_step = i;
      }
    }
  rep.passed = rep.worst <= 1e-12;
  return rep;
}

void write_bsde_csv(std::ostream& os, const BackwardPair& pair, const PathBundle& b) {
  os << "step,time,mean_y,mean_abs_z,condition\n";
  char buf[160];
  for (int i = pair.s0; i <= pair.s1; ++i) {
    const auto k = static_cast<std::size_t>(i - pair.s0);
    const bool last = i == pair.s1;
    std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,%.12g,%.12g\n", i, b.time(i), pair.mean_y[k],
                  last ? 0.0 : pair.mean_abs_z[k], last ? 1.0 : pair.condition[k]);
    os << buf;
  }
}

}  // namespace pmpdp
