#include "pmpdp/second_adjoint.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace pmpdp {

namespace {

int tri_size(int n) { return n * (n + 1) / 2; }

constexpr int kMaxTri = kMaxDim * (kMaxDim + 1) / 2;

Mat unpack_sym(const double* v, int offset, int n) {
  Mat P(n, n);
  int e = offset;
  for (int r = 0; r < n; ++r)
    for (int c = r; c < n; ++c) {
      P(r, c) = v[e];
      P(c, r) = v[e];
      ++e;
    }
  return P;
}

Mat symmetrize(const Mat& A) { return 0.5 * (A + A.transpose()); }

// P_i = S^T [P^ + ((J^T P^ + P^ J) + sum K^T P^ K + sum (K^T Q + Q K) - F) dt] S.
Mat backward_step(const Mat& S, double dt, const Mat& Ph, const Mat* Q, const Mat& J, const Mat* K, int m,
                  const Mat& F) {
  Mat drift = J.transpose() * Ph + Ph * J - F;
  for (int k = 0; k < m; ++k) {
    drift.noalias() += K[k].transpose() * Ph * K[k];
    drift.noalias() += K[k].transpose() * Q[k] + Q[k] * K[k];
  }
  return symmetrize(S.transpose() * (Ph + drift * dt) * S);
}

}  // namespace

double hamiltonian_H(const SpectralProblem& pr, double t, const Vec& x, const ControlPoint& u, const Vec& p,
                     const Mat& q) {
  const auto& c = pr.coeff;
  return p.dot(c.a(t, x, u)) + q.cwiseProduct(c.b(t, x, u)).sum() - c.f(t, x, u);
}

Mat hessian_H(const SpectralProblem& pr, double t, const Vec& x, const ControlPoint& u, const Vec& p, const Mat& q) {
  const auto& c = pr.coeff;
  return symmetrize(c.a_xx(t, x, u, p) + c.b_xx(t, x, u, q) - c.f_xx(t, x, u));
}

MatrixBsdeData second_adjoint_data(const SpectralProblem& pr, const PathBundle& bundle, const AdjointFirst& adjoint) {
  if (adjoint.steps != bundle.steps() || adjoint.dim != bundle.dim)
    throw Error("second_adjoint_data: first adjoint was solved on a different bundle");
  const auto lin = linearized_test_equation(pr, bundle);
  MatrixBsdeData d;
  d.J = lin.J;
  d.K = lin.K;
  const SpectralProblem* pp = &pr;
  const PathBundle* bb = &bundle;
  const AdjointFirst* aa = &adjoint;
  d.F = [pp, bb, aa](int path, int step) -> Mat {
    const auto& u = pp->controls[bb->control(path, step)];
    return -hessian_H(*pp, bb->time(step), bb->state(path, step), u, aa->p(*pp, *bb, path, step),
                      aa->q(*bb, path, step));
  };
  d.P_T = [pp, bb](int path) -> Mat { return -symmetrize(pp->coeff.h_xx(bb->state(path, bb->steps()))); };
  return d;
}

// ---------------------------------------------------------------------------

Mat AdjointSecond::P_hat(int path, int step) const {
  if (step < 0 || step >= steps) throw Error("AdjointSecond::P_hat: step out of range");
  double v[kMaxTri];
  fits[static_cast<std::size_t>(step)].value.eval(bundle->state_ptr(path, step), v);
  return unpack_sym(v, 0, dim);
}

Mat AdjointSecond::Q(int path, int step, int k) const {
  if (step < 0 || step >= steps) throw Error("AdjointSecond::Q: step out of range");
  if (k < 0 || k >= noise_dim) throw Error("AdjointSecond::Q: noise component out of range");
  return unpack_sym(fits[static_cast<std::size_t>(q_step(step))].mart.eval(bundle->state_ptr(path, step)).data(),
                    k * tri_size(dim), dim);
}

void AdjointSecond::terms(int path, int step, StepTerms& out) const {
  if (step < 0 || step >= steps) throw Error("AdjointSecond::terms: step out of range");
  // Same Q as the solver used at this step (its own fit, also at the last step).
  const double* x = bundle->state_ptr(path, step);
  const auto& fit = fits[static_cast<std::size_t>(step)];
  double v[kMaxTri];
  fit.value.eval(x, v);
  out.P_hat = unpack_sym(v, 0, dim);
  std::array<double, kMaxTri * kMaxDim> qv;
  fit.mart.eval(x, qv.data());
  out.Q.resize(static_cast<std::size_t>(noise_dim));
  out.K.resize(static_cast<std::size_t>(noise_dim));
  for (int k = 0; k < noise_dim; ++k) {
    out.Q[k] = unpack_sym(qv.data(), k * tri_size(dim), dim);
    out.K[k] = data.K ? data.K(path, step, k) : Mat(Mat::Zero(dim, dim));
  }
  out.J = data.J ? data.J(path, step) : Mat(Mat::Zero(dim, dim));
  out.F = data.F ? data.F(path, step) : Mat(Mat::Zero(dim, dim));
  out.P = backward_step(S, dt, out.P_hat, out.Q.data(), out.J, out.K.data(), noise_dim, out.F);
}

Mat AdjointSecond::P(int path, int step) const {
  if (step == steps) return data.P_T(path);
  StepTerms t;
  terms(path, step, t);
  return t.P;
}

double AdjointSecond::P_stderr(int path, int step) const {
  if (step >= steps) return 0.0;
  const auto& f = fits[static_cast<std::size_t>(step)].value;
  double s = 0.0;
  for (int e = 0; e < tri_size(dim); ++e) s = std::max(s, f.stderr_at(bundle->state_ptr(path, step), e));
  return s;
}

AdjointSecond solve_matrix_bsde(const PathBundle& b, const Mat& semigroup, MatrixBsdeData data,
                                const BackwardOptions& opt) {
  const int M = b.paths, N = b.dim, m = b.noise_dim, L = b.steps();
  const int E = tri_size(N);
  if (!data.P_T) throw Error("solve_matrix_bsde: terminal value missing");
  if (semigroup.rows() != N || semigroup.cols() != N) throw Error("solve_matrix_bsde: semigroup has wrong dimension");
  AdjointSecond out;
  out.dim = N;
  out.noise_dim = m;
  out.steps = L;
  out.dt = b.grid.dt();
  out.S = semigroup;
  out.bundle = &b;
  out.data = std::move(data);
  out.fits.resize(static_cast<std::size_t>(L));
  out.condition.assign(static_cast<std::size_t>(L), 1.0);
  out.mean_P.assign(static_cast<std::size_t>(L + 1), Mat::Zero(N, N));
  out.mean_Q.assign(static_cast<std::size_t>(L), Mat::Zero(N, N));
  const auto& d = out.data;
  const Mat zero = Mat::Zero(N, N);

  std::vector<double> pn(static_cast<std::size_t>(M) * E);
  auto store = [&](int j, const Mat& P) {
    int e = 0;
    for (int r = 0; r < N; ++r)
      for (int c = r; c < N; ++c) pn[static_cast<std::size_t>(j) * E + e++] = P(r, c);
  };
  double sq = 0.0;
  for (int j = 0; j < M; ++j) {
    const Mat PT = d.P_T(j);
    if (PT.rows() != N || PT.cols() != N) throw Error("solve_matrix_bsde: terminal value has wrong dimension");
    store(j, PT);
    out.mean_P[L] += PT / M;
    sq += PT.squaredNorm();
  }
  out.norm_PT = std::sqrt(sq / M);
  out.norm_P = out.norm_PT;

  std::vector<double> dw;
  Eigen::MatrixXd T(M, E);
  std::vector<Mat> Qs(static_cast<std::size_t>(m)), Ks(static_cast<std::size_t>(m));
  double q_sq = 0.0;
  std::vector<double> vbuf(static_cast<std::size_t>(E)), qbuf(static_cast<std::size_t>(E) * m);
  for (int i = L - 1; i >= 0; --i) {
    char where[64];
    std::snprintf(where, sizeof where, "step %d (t=%.6g)", b.offset + i, b.time(i));
    Regression reg(opt.basis, b.state_ptr(0, i), M, N, where, opt.batches);
    b.increments(i, dw);
    for (int j = 0; j < M; ++j)
      for (int e = 0; e < E; ++e) T(j, e) = pn[static_cast<std::size_t>(j) * E + e];
    out.fits[static_cast<std::size_t>(i)] = fit_with_increments(reg, T, dw, m, out.dt);
    out.condition[static_cast<std::size_t>(i)] = reg.condition();
    const auto& fit = out.fits[static_cast<std::size_t>(i)];
    double p_sq = 0.0, f_sq = 0.0;
    for (int j = 0; j < M; ++j) {
      const double* x = b.state_ptr(j, i);
      fit.value.eval(x, vbuf.data());
      fit.mart.eval(x, qbuf.data());
      const Mat Ph = unpack_sym(vbuf.data(), 0, N);
      for (int k = 0; k < m; ++k) {
        Qs[k] = unpack_sym(qbuf.data(), k * E, N);
        Ks[k] = d.K ? d.K(j, i, k) : zero;
        q_sq += Qs[k].squaredNorm() * out.dt / M;
      }
      const Mat J = d.J ? d.J(j, i) : zero;
      const Mat F = d.F ? d.F(j, i) : zero;
      const Mat P = backward_step(out.S, out.dt, Ph, Qs.data(), J, Ks.data(), m, F);
      store(j, P);
      out.mean_P[i] += P / M;
      out.mean_Q[i] += Qs[0] / M;
      p_sq += P.squaredNorm();
      f_sq += F.squaredNorm();
    }
    out.norm_P = std::max(out.norm_P, std::sqrt(p_sq / M));
    out.norm_F += std::sqrt(f_sq / M) * out.dt;
  }
  out.norm_Q = std::sqrt(q_sq);
  return out;
}

AdjointSecond solve_second_adjoint(const SpectralProblem& pr, const PathBundle& bundle, const AdjointFirst& adjoint,
                                   const BackwardOptions& opt) {
  return solve_matrix_bsde(bundle, pr.op.semigroup_matrix(bundle.grid.dt()), second_adjoint_data(pr, bundle, adjoint),
                           opt);
}

// ---------------------------------------------------------------------------
// Duality identity

TranspositionResult transposition_residual(const SpectralProblem& pr, const PathBundle& b,
                                           const TranspositionData& data, const AdjointSecond& sol, int start,
                                           bool control_variate) {
  if (sol.bundle != &b) throw Error("transposition_residual: solution was computed on a different bundle");
  if (start < 0 || start >= b.steps()) throw Error("transposition_residual: start step out of range");
  const int M = b.paths, m = b.noise_dim, L = b.steps();
  const double dt = b.grid.dt();
  std::vector<double> lhs(static_cast<std::size_t>(M)), rhs(static_cast<std::size_t>(M)),
      diff(static_cast<std::size_t>(M)), raw(static_cast<std::size_t>(M));
  const auto& e1 = data.first;
  const auto& e2 = data.second;
  AdjointSecond::StepTerms st;
  for (int j = 0; j < M; ++j) {
    Vec phi1 = test_process_start(b, e1, j), phi2 = test_process_start(b, e2, j);
    double r = phi2.dot(sol.P(j, start) * phi1);
    double lsum = 0.0, rsum = 0.0, cv = 0.0;
    for (int i = start; i < L; ++i) {
      sol.terms(j, i, st);
      const Mat& P = st.P;
      const Mat& F = st.F;
      lsum += phi2.dot(F * phi1);
      const Vec u1 = e1.u ? e1.u(j, i) : Vec(Vec::Zero(b.dim));
      const Vec u2 = e2.u ? e2.u(j, i) : Vec(Vec::Zero(b.dim));
      double s = phi2.dot(P * u1) + u2.dot(P * phi1);
      if (e1.v || e2.v) {
        const Mat v1 = e1.v ? e1.v(j, i) : Mat(Mat::Zero(b.dim, m));
        const Mat v2 = e2.v ? e2.v(j, i) : Mat(Mat::Zero(b.dim, m));
        for (int k = 0; k < m; ++k) {
          const Mat& Kk = st.K[k];
          const Mat Qk = sol.Q(j, i, k);
          const Vec w1 = v1.col(k), w2 = v2.col(k);
          s += w2.dot(P * (Kk * phi1)) + (Kk * phi2 + w2).dot(P * w1) + w2.dot(Qk * phi1) + phi2.dot(Qk * w1);
        }
      }
      rsum += s;
      if (control_variate) {
        // Adapted coefficient of dW in d<P phi1, phi2>; sum_i h_i dW_i has
        // mean zero, so subtracting it leaves the estimand unchanged.
        const Mat& Ph = st.P_hat;
        const Vec s1 = sol.S * phi1, s2 = sol.S * phi2;
        for (int k = 0; k < m; ++k) {
          const Mat& Kk = st.K[k];
          Vec g1 = Kk * phi1, g2 = Kk * phi2;
          if (e1.v) g1 += e1.v(j, i).col(k);
          if (e2.v) g2 += e2.v(j, i).col(k);
          const Vec sg1 = sol.S * g1, sg2 = sol.S * g2;
          const double h = sg2.dot(Ph * s1) + s2.dot(Ph * sg1) + s2.dot(st.Q[k] * s1);
          cv += h * b.dW(j, i, k);
        }
      }
      phi1 = test_process_step(pr, b, e1, j, i, phi1);
      phi2 = test_process_step(pr, b, e2, j, i, phi2);
    }
    const double l = phi2.dot(sol.P(j, L) * phi1) - lsum * dt;
    r += rsum * dt;
    lhs[j] = l;
    rhs[j] = r;
    raw[j] = l - r;
    diff[j] = l - r - cv;
  }
  TranspositionResult out;
  out.lhs = mean_se(lhs).mean;
  out.rhs = mean_se(rhs).mean;
  const auto d = mean_se(diff);
  out.residual = std::abs(d.mean);
  out.se = d.se;
  out.raw_se = mean_se(raw).se;
  out.magnitude = std::max(std::abs(out.lhs), std::abs(out.rhs));
  return out;
}

double wellposedness_bound(const AdjointSecond& s) {
  const double den = s.norm_F + s.norm_PT;
  if (den == 0.0) return 0.0;
  return (s.norm_P + s.norm_Q) / den;
}

void write_second_adjoint_csv(std::ostream& os, const AdjointSecond& s, const PathBundle& b) {
  os << "step,time,mean_P_norm,mean_Q_norm,condition\n";
  char line[160];
  for (int i = 0; i <= s.steps; ++i) {
    const double qn = i < s.steps ? s.mean_Q[static_cast<std::size_t>(i)].norm() : 0.0;
    const double c = i < s.steps ? s.condition[static_cast<std::size_t>(i)] : 1.0;
    std::snprintf(line, sizeof line, "%d,%.10g,%.12g,%.12g,%.6g\n", b.offset + i, b.time(i),
                  s.mean_P[static_cast<std::size_t>(i)].norm(), qn, c);
    os << line;
  }
}

}  // namespace pmpdp
