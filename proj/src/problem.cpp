#include "pmpdp/problem.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

namespace pmpdp {

// ---------------------------------------------------------------------------
// ControlSet

ControlSet::ControlSet(std::vector<ControlPoint> points) : points_(std::move(points)) {
  if (points_.empty()) throw Error("ControlSet: need at least one control point");
  const auto d = points_.front().size();
  for (const auto& p : points_) {
    if (p.size() != d) throw Error("ControlSet: inconsistent control dimension");
    if (!p.allFinite()) throw Error("ControlSet: non-finite control point");
  }
}

ControlSet ControlSet::grid(double lo, double hi, double step) {
  if (!(step > 0.0) || !(hi >= lo)) throw Error("ControlSet::grid: need lo <= hi and step > 0");
  const int n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
  std::vector<ControlPoint> pts;
  pts.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    ControlPoint u(1);
    u[0] = lo + i * step;
    if (std::abs(u[0]) < 1e-14 * step) u[0] = 0.0;  // keep the zero control exact
    pts.push_back(u);
  }
  return ControlSet(std::move(pts));
}

std::size_t ControlSet::nearest(const ControlPoint& value) const {
  std::size_t best = 0;
  double bd = (points_[0] - value).squaredNorm();
  for (std::size_t i = 1; i < points_.size(); ++i) {
    const double d = (points_[i] - value).squaredNorm();
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// CoefficientSet: closed forms when present, central differences otherwise

namespace {

double step_for(double base, double x) { return base * std::max(1.0, std::abs(x)); }

template <class F>
Mat hessian_fd(const F& phi, const Vec& x, double base) {
  const int n = static_cast<int>(x.size());
  Mat H(n, n);
  const double f0 = phi(x);
  for (int j = 0; j < n; ++j) {
    const double hj = step_for(base, x[j]);
    Vec xp = x, xm = x;
    xp[j] += hj;
    xm[j] -= hj;
    H(j, j) = (phi(xp) - 2.0 * f0 + phi(xm)) / (hj * hj);
    for (int l = 0; l < j; ++l) {
      const double hl = step_for(base, x[l]);
      Vec pp = x, pm = x, mp = x, mm = x;
      pp[j] += hj; pp[l] += hl;
      pm[j] += hj; pm[l] -= hl;
      mp[j] -= hj; mp[l] += hl;
      mm[j] -= hj; mm[l] -= hl;
      H(j, l) = H(l, j) = (phi(pp) - phi(pm) - phi(mp) + phi(mm)) / (4.0 * hj * hl);
    }
  }
  return H;
}

}  // namespace

double CoefficientSet::g(double t, const Vec& x, double y, const Vec& z, const ControlPoint& u) const {
  return driver ? driver(t, x, y, z, u) : running_cost(t, x, u);
}

double CoefficientSet::phi(const Vec& x) const { return terminal_value ? terminal_value(x) : terminal_cost(x); }

Mat CoefficientSet::a_x(double t, const Vec& x, const ControlPoint& u) const {
  if (drift_x) return drift_x(t, x, u);
  const int n = static_cast<int>(x.size());
  Mat J(n, n);
  for (int j = 0; j < n; ++j) {
    const double hj = step_for(fd_step, x[j]);
    Vec xp = x, xm = x;
    xp[j] += hj;
    xm[j] -= hj;
    J.col(j) = (drift(t, xp, u) - drift(t, xm, u)) / (2.0 * hj);
  }
  return J;
}

Mat CoefficientSet::b_x(double t, const Vec& x, const ControlPoint& u, int k) const {
  if (diffusion_x) return diffusion_x(t, x, u, k);
  const int n = static_cast<int>(x.size());
  Mat J(n, n);
  for (int j = 0; j < n; ++j) {
    const double hj = step_for(fd_step, x[j]);
    Vec xp = x, xm = x;
    xp[j] += hj;
    xm[j] -= hj;
    J.col(j) = (diffusion(t, xp, u).col(k) - diffusion(t, xm, u).col(k)) / (2.0 * hj);
  }
  return J;
}

Vec CoefficientSet::f_x(double t, const Vec& x, const ControlPoint& u) const {
  if (running_cost_x) return running_cost_x(t, x, u);
  Vec g(x.size());
  for (int j = 0; j < x.size(); ++j) {
    const double hj = step_for(fd_step, x[j]);
    Vec xp = x, xm = x;
    xp[j] += hj;
    xm[j] -= hj;
    g[j] = (running_cost(t, xp, u) - running_cost(t, xm, u)) / (2.0 * hj);
  }
  return g;
}

Vec CoefficientSet::h_x(const Vec& x) const {
  if (terminal_cost_x) return terminal_cost_x(x);
  Vec g(x.size());
  for (int j = 0; j < x.size(); ++j) {
    const double hj = step_for(fd_step, x[j]);
    Vec xp = x, xm = x;
    xp[j] += hj;
    xm[j] -= hj;
    g[j] = (terminal_cost(xp) - terminal_cost(xm)) / (2.0 * hj);
  }
  return g;
}

Mat CoefficientSet::a_xx(double t, const Vec& x, const ControlPoint& u, const Vec& w) const {
  if (drift_xx) return drift_xx(t, x, u, w);
  return hessian_fd([&](const Vec& y) { return w.dot(drift(t, y, u)); }, x, fd_step2);
}

Mat CoefficientSet::b_xx(double t, const Vec& x, const ControlPoint& u, const Mat& w) const {
  if (diffusion_xx) return diffusion_xx(t, x, u, w);
  return hessian_fd([&](const Vec& y) { return (w.array() * diffusion(t, y, u).array()).sum(); }, x, fd_step2);
}

Mat CoefficientSet::f_xx(double t, const Vec& x, const ControlPoint& u) const {
  if (running_cost_xx) return running_cost_xx(t, x, u);
  return hessian_fd([&](const Vec& y) { return running_cost(t, y, u); }, x, fd_step2);
}

Mat CoefficientSet::h_xx(const Vec& x) const {
  if (terminal_cost_xx) return terminal_cost_xx(x);
  return hessian_fd([&](const Vec& y) { return terminal_cost(y); }, x, fd_step2);
}

Vec CoefficientSet::b_x_adjoint(double t, const Vec& x, const ControlPoint& u, const Mat& q) const {
  Vec out = Vec::Zero(x.size());
  for (int k = 0; k < noise_dim; ++k) out.noalias() += b_x(t, x, u, k).transpose() * q.col(k);
  return out;
}

SpectralProblem SpectralProblem::with_steps(int steps) const {
  SpectralProblem p = *this;
  p.horizon = TimeGrid(horizon.t0(), horizon.T(), steps);
  if (p.params.is_object()) p.params["steps"] = steps;
  return p;
}

// ---------------------------------------------------------------------------
// Assumption validation

bool AssumptionReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const AssumptionCheck& c) { return c.passed; });
}

const AssumptionCheck& AssumptionReport::get(const std::string& name) const {
  for (const auto& c : checks)
    if (c.name == name) return c;
  throw Error("AssumptionReport: no check named " + name);
}

namespace {

std::string fmt_point(double t, const Vec& x, const ControlPoint& u) {
  std::ostringstream os;
  os.precision(6);
  os << "t=" << t << " x=(";
  for (int i = 0; i < x.size(); ++i) os << (i ? "," : "") << x[i];
  os << ") u=(";
  for (int i = 0; i < u.size(); ++i) os << (i ? "," : "") << u[i];
  os << ")";
  return os.str();
}

struct Tracker {
  std::string name;
  double worst = 0.0;
  std::string witness;
  void offer(double v, const std::string& where) {
    if (v > worst || witness.empty()) {
      worst = std::max(worst, v);
      witness = where;
    }
  }
};

template <class T>
void require_finite(const T& v, const char* what, double t, const Vec& x, const ControlPoint& u) {
  bool ok;
  if constexpr (std::is_arithmetic_v<T>)
    ok = std::isfinite(v);
  else
    ok = v.allFinite();
  if (!ok) throw Error(std::string("validate_assumptions: non-finite ") + what + " at " + fmt_point(t, x, u));
}

}  // namespace

AssumptionReport validate_assumptions(const SpectralProblem& p, int samples, ValidationMode mode) {
  if (samples < 100) throw Error("validate_assumptions: need at least 100 samples");
  const auto& c = p.coeff;
  const int n = p.dim();
  const int m = p.noise_dim();
  const auto& U = p.controls;
  std::mt19937_64 rng(p.noise.seed ^ 0x5bd1e995ULL);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> tdist(p.horizon.t0(), p.horizon.T());
  std::uniform_int_distribution<std::size_t> udist(0, U.size() - 1);

  const std::vector<double> scales =
      mode == ValidationMode::global ? std::vector<double>{1.0, 2.0, 4.0, 8.0} : std::vector<double>{1.0};

  // Names of the scalar sampled constants; index order matters below.
  const std::vector<std::string> names = {
      "S1.a_lipschitz_x", "S1.b_lipschitz_x", "S1.a_growth",      "S1.b_growth",      "S1.a_lipschitz_u",
      "S1.b_lipschitz_u", "S2.f_lipschitz_x", "S2.h_lipschitz_x", "S2.f_growth",      "S2.h_growth",
      "S3.a_xx_bound",    "S3.b_xx_bound",    "S3.f_xx_bound",    "S3.h_xx_bound",    "S4.g_lipschitz",
      "S4.phi_lipschitz", "S4.growth"};
  std::vector<std::vector<Tracker>> per_scale(scales.size());

  auto rand_vec = [&](int d, double s) {
    Vec v(d);
    for (int i = 0; i < d; ++i) v[i] = s * p.box * unit(rng);
    return v;
  };

  for (std::size_t si = 0; si < scales.size(); ++si) {
    auto& tr = per_scale[si];
    tr.resize(names.size());
    for (std::size_t k = 0; k < names.size(); ++k) tr[k].name = names[k];
    const double s = scales[si];
    for (int it = 0; it < samples; ++it) {
      const double t = tdist(rng);
      const Vec x = rand_vec(n, s);
      Vec x2 = rand_vec(n, s);
      if ((x - x2).norm() < 1e-9) x2[0] += 1e-3;
      const auto iu = udist(rng);
      auto iu2 = udist(rng);
      const auto& u = U[iu];
      const auto& u2 = U[iu2];
      const Vec zero = Vec::Zero(n);
      const std::string where = fmt_point(t, x, u);

      const Vec a1 = c.a(t, x, u), a2 = c.a(t, x2, u), a0 = c.a(t, zero, u), au = c.a(t, x, u2);
      const Mat b1 = c.b(t, x, u), b2 = c.b(t, x2, u), b0 = c.b(t, zero, u), bu = c.b(t, x, u2);
      const double f1 = c.f(t, x, u), f2 = c.f(t, x2, u), f0 = c.f(t, zero, u);
      const double h1 = c.h(x), h2 = c.h(x2), h0 = c.h(zero);
      require_finite(a1, "drift", t, x, u);
      require_finite(a2, "drift", t, x2, u);
      require_finite(au, "drift", t, x, u2);
      require_finite(b1, "diffusion", t, x, u);
      require_finite(b2, "diffusion", t, x2, u);
      require_finite(f1, "running cost", t, x, u);
      require_finite(f2, "running cost", t, x2, u);
      require_finite(h1, "terminal cost", t, x, u);
      require_finite(h2, "terminal cost", t, x2, u);
      if (a1.size() != n || b1.rows() != n || b1.cols() != m)
        throw Error("validate_assumptions: coefficient dimensions inconsistent with (N, m)");

      const double dx = (x - x2).norm();
      tr[0].offer((a1 - a2).norm() / dx, where);
      tr[1].offer((b1 - b2).norm() / dx, where);
      tr[2].offer(a0.norm(), where);
      tr[3].offer(b0.norm(), where);
      if (iu != iu2) {
        tr[4].offer((a1 - au).norm() / U.distance(iu, iu2), where);
        tr[5].offer((b1 - bu).norm() / U.distance(iu, iu2), where);
      }
      tr[6].offer(std::abs(f1 - f2) / dx, where);
      tr[7].offer(std::abs(h1 - h2) / dx, where);
      tr[8].offer(std::abs(f0), where);
      tr[9].offer(std::abs(h0), where);

      // Second derivatives: operator norms of the contracted Hessians over
      // random unit directions of the contraction.
      Vec w = rand_vec(n, 1.0);
      w /= std::max(w.norm(), 1e-12);
      Mat W = Mat::Zero(n, m);
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < m; ++k) W(i, k) = unit(rng);
      W /= std::max(W.norm(), 1e-12);
      const Mat axx = c.a_xx(t, x, u, w), bxx = c.b_xx(t, x, u, W), fxx = c.f_xx(t, x, u), hxx = c.h_xx(x);
      require_finite(axx, "drift Hessian", t, x, u);
      require_finite(bxx, "diffusion Hessian", t, x, u);
      require_finite(fxx, "running-cost Hessian", t, x, u);
      require_finite(hxx, "terminal-cost Hessian", t, x, u);
      tr[10].offer(axx.norm(), where);
      tr[11].offer(bxx.norm(), where);
      tr[12].offer(fxx.norm(), where);
      tr[13].offer(hxx.norm(), where);

      // Recursive cost data.
      Vec z1(m), z2(m);
      for (int k = 0; k < m; ++k) {
        z1[k] = s * unit(rng);
        z2[k] = s * unit(rng);
      }
      const double y1 = s * p.box * unit(rng), y2 = s * p.box * unit(rng);
      const double g1 = c.g(t, x, y1, z1, u), g2 = c.g(t, x2, y2, z2, u);
      require_finite(g1, "driver", t, x, u);
      const double gd = dx + std::abs(y1 - y2) + (z1 - z2).norm();
      tr[14].offer(std::abs(g1 - g2) / gd, where);
      tr[15].offer(std::abs(c.phi(x) - c.phi(x2)) / dx, where);
      tr[16].offer((std::abs(c.g(t, x, 0.0, Vec::Zero(m), u)) + std::abs(c.phi(x))) / (1.0 + x.norm()), where);
    }
  }

  AssumptionReport rep;
  rep.mode = mode;
  for (std::size_t k = 0; k < names.size(); ++k) {
    AssumptionCheck chk;
    chk.name = names[k];
    chk.worst = per_scale.front()[k].worst;
    chk.worst_scaled = per_scale.back()[k].worst;
    chk.witness = per_scale.back()[k].witness;
    // Bounded constants must not keep growing with the sampling box.
    chk.passed = std::isfinite(chk.worst) &&
                 (mode == ValidationMode::bounded_box || chk.worst_scaled <= 1.5 * chk.worst + 1e-9);
    if (mode == ValidationMode::global && !chk.passed) {
      // Witness from the largest scale where growth showed up.
      chk.witness = per_scale.back()[k].witness;
    }
    rep.checks.push_back(std::move(chk));
  }

  // Closed-form derivatives against central differences.
  if (c.drift_x || c.diffusion_x || c.running_cost_x || c.terminal_cost_x || c.drift_xx || c.diffusion_xx ||
      c.running_cost_xx || c.terminal_cost_xx) {
    CoefficientSet fd = c;
    fd.drift_x = nullptr;
    fd.diffusion_x = nullptr;
    fd.running_cost_x = nullptr;
    fd.terminal_cost_x = nullptr;
    fd.drift_xx = nullptr;
    fd.diffusion_xx = nullptr;
    fd.running_cost_xx = nullptr;
    fd.terminal_cost_xx = nullptr;
    fd.fd_step = 1e-4;
    fd.fd_step2 = 1e-3;
    AssumptionCheck chk;
    chk.name = "derivatives";
    double worst = 0.0;
    const int probes = std::min(samples, 200);
    for (int it = 0; it < probes; ++it) {
      const double t = tdist(rng);
      const Vec x = rand_vec(n, 1.0);
      const auto& u = U[udist(rng)];
      Vec w = rand_vec(n, 1.0);
      Mat W = Mat::Zero(n, m);
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < m; ++k) W(i, k) = unit(rng);
      auto rel = [](const auto& a, const auto& b) { return (a - b).norm() / (1.0 + a.norm()); };
      double e = 0.0;
      // First derivatives to 1e-6, Hessians (second differences) to 1e-4.
      if (c.drift_x) e = std::max(e, rel(c.a_x(t, x, u), fd.a_x(t, x, u)) / 1e-6);
      if (c.diffusion_x)
        for (int k = 0; k < m; ++k) e = std::max(e, rel(c.b_x(t, x, u, k), fd.b_x(t, x, u, k)) / 1e-6);
      if (c.running_cost_x) e = std::max(e, rel(c.f_x(t, x, u), fd.f_x(t, x, u)) / 1e-6);
      if (c.terminal_cost_x) e = std::max(e, rel(c.h_x(x), fd.h_x(x)) / 1e-6);
      if (c.drift_xx) e = std::max(e, rel(c.a_xx(t, x, u, w), fd.a_xx(t, x, u, w)) / 1e-4);
      if (c.diffusion_xx) e = std::max(e, rel(c.b_xx(t, x, u, W), fd.b_xx(t, x, u, W)) / 1e-4);
      if (c.running_cost_xx) e = std::max(e, rel(c.f_xx(t, x, u), fd.f_xx(t, x, u)) / 1e-4);
      if (c.terminal_cost_xx) e = std::max(e, rel(c.h_xx(x), fd.h_xx(x)) / 1e-4);
      if (e > worst || chk.witness.empty()) {
        worst = std::max(worst, e);
        chk.witness = fmt_point(t, x, u);
      }
    }
    chk.worst = chk.worst_scaled = worst;  // in units of the tolerance
    chk.passed = worst <= 1.0;
    rep.checks.push_back(std::move(chk));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Scalar scenarios

namespace {

Vec vec1(double v) {
  Vec r(1);
  r[0] = v;
  return r;
}

Mat mat1(double v) {
  Mat r(1, 1);
  r(0, 0) = v;
  return r;
}

nlohmann::json options_json(const ProblemOptions& o) {
  return {{"steps", o.steps},       {"control_lo", o.control_lo}, {"control_hi", o.control_hi},
          {"control_step", o.control_step}, {"seed", o.seed}, {"box", o.box}};
}

SpectralProblem scalar_shell(const std::string& name, double T, const ProblemOptions& opt) {
  SpectralProblem p;
  p.name = name;
  p.op = SpectralOperator::zero(1);
  p.controls = ControlSet::grid(opt.control_lo, opt.control_hi, opt.control_step);
  p.horizon = TimeGrid(0.0, T, opt.steps);
  p.noise = NoiseModel{1, opt.seed, 1};
  p.box = opt.box;
  p.coeff.state_dim = 1;
  p.coeff.noise_dim = 1;
  p.params = options_json(opt);
  return p;
}

}  // namespace

SpectralProblem make_lq(const LqParams& lq, const ProblemOptions& opt) {
  if (!(lq.n_cost > 0.0)) throw Error("make_lq: n_cost must be positive");
  if (!(lq.T > 0.0)) throw Error("make_lq: horizon must be positive");
  SpectralProblem p = scalar_shell("lq", lq.T, opt);
  auto& c = p.coeff;
  const LqParams q = lq;
  c.drift = [q](double, const Vec& x, const ControlPoint& u) { return vec1(q.alpha * x[0] + q.beta * u[0]); };
  c.diffusion = [q](double, const Vec&, const ControlPoint&) { return mat1(q.sigma); };
  c.running_cost = [q](double, const Vec& x, const ControlPoint& u) {
    return q.m_cost * x[0] * x[0] + q.n_cost * u[0] * u[0];
  };
  c.terminal_cost = [q](const Vec& x) { return q.gamma * x[0] * x[0]; };
  c.drift_x = [q](double, const Vec&, const ControlPoint&) { return mat1(q.alpha); };
  c.diffusion_x = [](double, const Vec&, const ControlPoint&, int) { return mat1(0.0); };
  c.running_cost_x = [q](double, const Vec& x, const ControlPoint&) { return vec1(2.0 * q.m_cost * x[0]); };
  c.terminal_cost_x = [q](const Vec& x) { return vec1(2.0 * q.gamma * x[0]); };
  c.drift_xx = [](double, const Vec&, const ControlPoint&, const Vec&) { return mat1(0.0); };
  c.diffusion_xx = [](double, const Vec&, const ControlPoint&, const Mat&) { return mat1(0.0); };
  c.running_cost_xx = [q](double, const Vec&, const ControlPoint&) { return mat1(2.0 * q.m_cost); };
  c.terminal_cost_xx = [q](const Vec&) { return mat1(2.0 * q.gamma); };
  p.lq = lq;
  p.params.update({{"alpha", lq.alpha}, {"beta", lq.beta}, {"sigma", lq.sigma}, {"m_cost", lq.m_cost},
                   {"n_cost", lq.n_cost}, {"gamma", lq.gamma}, {"T", lq.T}});
  return p;
}

SpectralProblem make_lq(double alpha, double beta, double sigma, double m_cost, double n_cost, double gamma,
                        double T, const ProblemOptions& opt) {
  return make_lq(LqParams{alpha, beta, sigma, m_cost, n_cost, gamma, T}, opt);
}

SpectralProblem make_lq1(const ProblemOptions& opt) {
  auto p = make_lq(LqParams{}, opt);
  p.name = "lq1";
  return p;
}

SpectralProblem make_bang_bang(double T, const ProblemOptions& opt) {
  SpectralProblem p = scalar_shell("bang-bang", T, opt);
  p.controls = ControlSet({vec1(-1.0), vec1(1.0)});
  auto& c = p.coeff;
  c.drift = [](double, const Vec&, const ControlPoint& u) { return vec1(u[0]); };
  c.diffusion = [](double, const Vec&, const ControlPoint&) { return mat1(0.0); };
  c.running_cost = [](double, const Vec&, const ControlPoint&) { return 0.0; };
  c.terminal_cost = [](const Vec& x) { return x[0] * x[0]; };
  c.drift_x = [](double, const Vec&, const ControlPoint&) { return mat1(0.0); };
  c.diffusion_x = [](double, const Vec&, const ControlPoint&, int) { return mat1(0.0); };
  c.running_cost_x = [](double, const Vec&, const ControlPoint&) { return vec1(0.0); };
  c.terminal_cost_x = [](const Vec& x) { return vec1(2.0 * x[0]); };
  c.drift_xx = [](double, const Vec&, const ControlPoint&, const Vec&) { return mat1(0.0); };
  c.diffusion_xx = [](double, const Vec&, const ControlPoint&, const Mat&) { return mat1(0.0); };
  c.running_cost_xx = [](double, const Vec&, const ControlPoint&) { return mat1(0.0); };
  c.terminal_cost_xx = [](const Vec&) { return mat1(2.0); };
  p.params["T"] = T;
  p.params.erase("control_lo");
  p.params.erase("control_hi");
  p.params.erase("control_step");
  return p;
}

SpectralProblem make_control_diffusion(const ProblemOptions& opt) {
  SpectralProblem p = scalar_shell("control-diffusion", 1.0, opt);
  auto& c = p.coeff;
  c.drift = [](double, const Vec&, const ControlPoint& u) { return vec1(u[0]); };
  c.diffusion = [](double, const Vec&, const ControlPoint& u) { return mat1(u[0]); };
  c.running_cost = [](double, const Vec& x, const ControlPoint& u) { return x[0] * x[0] + u[0] * u[0]; };
  c.terminal_cost = [](const Vec& x) { return x[0] * x[0]; };
  c.drift_x = [](double, const Vec&, const ControlPoint&) { return mat1(0.0); };
  c.diffusion_x = [](double, const Vec&, const ControlPoint&, int) { return mat1(0.0); };
  c.running_cost_x = [](double, const Vec& x, const ControlPoint&) { return vec1(2.0 * x[0]); };
  c.terminal_cost_x = [](const Vec& x) { return vec1(2.0 * x[0]); };
  c.drift_xx = [](double, const Vec&, const ControlPoint&, const Vec&) { return mat1(0.0); };
  c.diffusion_xx = [](double, const Vec&, const ControlPoint&, const Mat&) { return mat1(0.0); };
  c.running_cost_xx = [](double, const Vec&, const ControlPoint&) { return mat1(2.0); };
  c.terminal_cost_xx = [](const Vec&) { return mat1(2.0); };
  return p;
}

// ---------------------------------------------------------------------------
// Field scenarios

ScalarProfile named_profile(const std::string& name) {
  auto mk = [&](auto v, auto d1, auto d2) { return ScalarProfile{name, v, d1, d2}; };
  if (name == "zero") return mk([](double, double) { return 0.0; }, [](double, double) { return 0.0; },
                                [](double, double) { return 0.0; });
  if (name == "tanh")
    return mk([](double r, double u) { return std::tanh(r) + u; },
              [](double r, double) { const double th = std::tanh(r); return 1.0 - th * th; },
              [](double r, double) { const double th = std::tanh(r); return -2.0 * th * (1.0 - th * th); });
  if (name == "cos")
    return mk([](double r, double) { return 0.1 * std::cos(r); }, [](double r, double) { return -0.1 * std::sin(r); },
              [](double r, double) { return -0.1 * std::cos(r); });
  if (name == "ou_drift")
    return mk([](double r, double u) { return -r + u; }, [](double, double) { return -1.0; },
              [](double, double) { return 0.0; });
  if (name == "const_noise")
    return mk([](double, double) { return 0.5; }, [](double, double) { return 0.0; },
              [](double, double) { return 0.0; });
  if (name == "quad_cost")
    return mk([](double r, double u) { return r * r + u * u; }, [](double r, double) { return 2.0 * r; },
              [](double, double) { return 2.0; });
  if (name == "quad_terminal")
    return mk([](double r, double) { return r * r; }, [](double r, double) { return 2.0 * r; },
              [](double, double) { return 2.0; });
  if (name == "quad_clipped")
    return mk([](double r, double) { return std::sqrt(1.0 + r * r) - 1.0; },
              [](double r, double) { return r / std::sqrt(1.0 + r * r); },
              [](double r, double) { return std::pow(1.0 + r * r, -1.5); });
  if (name == "quad_clipped_cost")
    return mk([](double r, double u) { return std::sqrt(1.0 + r * r) - 1.0 + 0.5 * u * u; },
              [](double r, double) { return r / std::sqrt(1.0 + r * r); },
              [](double r, double) { return std::pow(1.0 + r * r, -1.5); });
  if (name == "cubic")
    return mk([](double r, double) { return r * r * r; }, [](double r, double) { return 3.0 * r * r; },
              [](double r, double) { return 6.0 * r; });
  throw Error("unknown profile '" + name + "'");
}

FieldProfiles heat_default_profiles() {
  return {named_profile("tanh"), named_profile("cos"), named_profile("quad_clipped_cost"),
          named_profile("quad_clipped"), 2.0};
}

FieldProfiles zero_profiles() {
  return {named_profile("zero"), named_profile("zero"), named_profile("zero"), named_profile("zero"), 2.0};
}

FieldProfiles linear_profiles() {
  return {named_profile("ou_drift"), named_profile("const_noise"), named_profile("quad_cost"),
          named_profile("quad_terminal"), 2.0};
}

ProblemOptions heat_options() {
  ProblemOptions o;
  o.steps = 100;
  o.control_lo = -1.0;
  o.control_hi = 1.0;
  o.control_step = 0.25;
  o.box = 2.0;
  return o;
}

namespace {

/// Nemytskii coefficients sampled on a midpoint quadrature of (0,1).
/// Y maps state coordinates to field values, F places forcing on state
/// coordinates, G holds the noise shapes.
struct FieldModel {
  int Q = 0;
  int n = 0;
  int m = 0;
  double w = 0.0;
  Eigen::MatrixXd Y, F, G;
  FieldProfiles prof;

  Eigen::VectorXd field(const Vec& x) const { return Y * x; }
};

void check_profile_bound(const ScalarProfile& phi, const ControlSet& U, double C, const char* role) {
  for (const auto& u : U.points()) {
    if (std::abs(phi.value(0.0, u[0])) > C)
      throw Error(std::string("field scenario: ") + role + " profile '" + phi.name + "' violates |phi(0,u)| <= " +
                  std::to_string(C) + " at u=" + std::to_string(u[0]));
    for (int i = 0; i <= 800; ++i) {
      const double r = -20.0 + 0.05 * i;
      const double v = std::abs(phi.d1(r, u[0])) + std::abs(phi.d2(r, u[0]));
      if (!(v <= C))
        throw Error(std::string("field scenario: ") + role + " profile '" + phi.name + "' violates the derivative bound " +
                    std::to_string(C) + " at r=" + std::to_string(r));
    }
  }
}

void install_field(SpectralProblem& p, std::shared_ptr<const FieldModel> fm) {
  auto& c = p.coeff;
  c.state_dim = fm->n;
  c.noise_dim = fm->m;
  c.drift = [fm](double, const Vec& x, const ControlPoint& u) {
    const auto y = fm->field(x);
    Eigen::VectorXd s(fm->Q);
    for (int q = 0; q < fm->Q; ++q) s[q] = fm->prof.drift.value(y[q], u[0]);
    return Vec(fm->w * (fm->F.transpose() * s));
  };
  c.diffusion = [fm](double, const Vec& x, const ControlPoint& u) {
    const auto y = fm->field(x);
    Mat b = Mat::Zero(fm->n, fm->m);
    for (int q = 0; q < fm->Q; ++q) {
      const double s = fm->w * fm->prof.diffusion.value(y[q], u[0]);
      if (s != 0.0) b.noalias() += s * fm->F.row(q).transpose() * fm->G.row(q);
    }
    return b;
  };
  c.running_cost = [fm](double, const Vec& x, const ControlPoint& u) {
    const auto y = fm->field(x);
    double s = 0.0;
    for (int q = 0; q < fm->Q; ++q) s += fm->prof.running.value(y[q], u[0]);
    return fm->w * s;
  };
  c.terminal_cost = [fm](const Vec& x) {
    const auto y = fm->field(x);
    double s = 0.0;
    for (int q = 0; q < fm->Q; ++q) s += fm->prof.terminal.value(y[q], 0.0);
    return fm->w * s;
  };
  c.drift_x = [fm](double, const Vec& x, const ControlPoint& u) {
    const auto y = fm->field(x);
    Mat J = Mat::Zero(fm->n, fm->n);
    for (int q = 0; q < fm->Q; ++q)
      J.noalias() += (fm->w * fm->prof.drift.d1(y[q], u[0])) * fm->F.row(q).transpose() * fm->Y.row(q);
    return J;
  };
  c.diffusion_x = [fm](double, const Vec& x, const ControlPoint& u, int k) {
    const auto y = fm->field(x);
    Mat J = Mat::Zero(fm->n, fm->n);
    for (int q = 0; q < fm->Q; ++q)
      J.noalias() +=
          (fm->w * fm->prof.diffusion.d1(y[q], u[0]) * fm->G(q, k)) * fm->F.row(q).transpose() * fm->Y.row(q);
    return J;
  };
  c.running_cost_x = [fm](double, const Vec& x, const ControlPoint& u) {
    const auto y = fm->field(x);
    Eigen::VectorXd s(fm->Q);
    for (int q = 0; q < fm->Q; ++q) s[q] = fm->prof.running.d1(y[q], u[0]);
    return Vec(fm->w * (fm->Y.transpose() * s));
  };
  c.terminal_cost_x = [fm](const Vec& x) {
    const auto y = fm->field(x);
    Eigen::VectorXd s(fm->Q);
    for (int q = 0; q < fm->Q; ++q) s[q] = fm->prof.terminal.d1(y[q], 0.0);
    return Vec(fm->w * (fm->Y.transpose() * s));
  };
  auto weighted_gram = [fm](const Eigen::VectorXd& s) {
    Mat H = Mat::Zero(fm->n, fm->n);
    for (int q = 0; q < fm->Q; ++q)
      if (s[q] != 0.0) H.noalias() += s[q] * fm->Y.row(q).transpose() * fm->Y.row(q);
    return H;
  };
  c.drift_xx = [fm, weighted_gram](double, const Vec& x, const ControlPoint& u, const Vec& wv) {
    const auto y = fm->field(x);
    const Eigen::VectorXd fw = fm->F * Eigen::VectorXd(wv);
    Eigen::VectorXd s(fm->Q);
    for (int q = 0; q < fm->Q; ++q) s[q] = fm->w * fw[q] * fm->prof.drift.d2(y[q], u[0]);
    return weighted_gram(s);
  };
  c.diffusion_xx = [fm, weighted_gram](double, const Vec& x, const ControlPoint& u, const Mat& W) {
    const auto y = fm->field(x);
    Eigen::VectorXd s(fm->Q);
    for (int q = 0; q < fm->Q; ++q) {
      const double contraction = fm->F.row(q) * Eigen::MatrixXd(W) * fm->G.row(q).transpose();
      s[q] = fm->w * contraction * fm->prof.diffusion.d2(y[q], u[0]);
    }
    return weighted_gram(s);
  };
  c.running_cost_xx = [fm, weighted_gram](double, const Vec& x, const ControlPoint& u) {
    const auto y = fm->field(x);
    Eigen::VectorXd s(fm->Q);
    for (int q = 0; q < fm->Q; ++q) s[q] = fm->w * fm->prof.running.d2(y[q], u[0]);
    return weighted_gram(s);
  };
  c.terminal_cost_xx = [fm, weighted_gram](const Vec& x) {
    const auto y = fm->field(x);
    Eigen::VectorXd s(fm->Q);
    for (int q = 0; q < fm->Q; ++q) s[q] = fm->w * fm->prof.terminal.d2(y[q], 0.0);
    return weighted_gram(s);
  };
}

Eigen::MatrixXd sine_table(int Q, int N) {
  Eigen::MatrixXd E(Q, N);
  for (int q = 0; q < Q; ++q) {
    const double xi = (q + 0.5) / Q;
    for (int k = 0; k < N; ++k) E(q, k) = std::numbers::sqrt2 * std::sin((k + 1) * std::numbers::pi * xi);
  }
  return E;
}

nlohmann::json profiles_json(const FieldProfiles& pr) {
  return {{"drift", pr.drift.name},
          {"diffusion", pr.diffusion.name},
          {"running", pr.running.name},
          {"terminal", pr.terminal.name},
          {"bound", pr.bound}};
}

}  // namespace

SpectralProblem make_heat(int N, const FieldProfiles& profiles, ProblemOptions opt) {
  if (N < 1 || N > kMaxDim) throw Error("make_heat: N must be in [1, " + std::to_string(kMaxDim) + "]");
  SpectralProblem p;
  p.name = "heat";
  std::vector<double> lam(static_cast<std::size_t>(N));
  for (int k = 0; k < N; ++k) lam[k] = std::pow((k + 1) * std::numbers::pi, 2);
  p.op = SpectralOperator::diagonal(lam);
  p.controls = ControlSet::grid(opt.control_lo, opt.control_hi, opt.control_step);
  check_profile_bound(profiles.drift, p.controls, profiles.bound, "drift");
  check_profile_bound(profiles.diffusion, p.controls, profiles.bound, "diffusion");
  p.horizon = TimeGrid(0.0, 1.0, opt.steps);
  p.noise = NoiseModel{N, opt.seed, 1};
  p.box = opt.box;

  auto fm = std::make_shared<FieldModel>();
  fm->Q = std::max(64, 8 * N);
  fm->n = N;
  fm->m = N;
  fm->w = 1.0 / fm->Q;
  fm->Y = sine_table(fm->Q, N);
  fm->F = fm->Y;
  fm->G = fm->Y;
  fm->prof = profiles;
  install_field(p, fm);
  p.params = options_json(opt);
  p.params["N"] = N;
  p.params.update(profiles_json(profiles));
  return p;
}

SpectralProblem make_wave(int N, const FieldProfiles& profiles, ProblemOptions opt) {
  if (N < 1 || 2 * N > kMaxDim) throw Error("make_wave: N must be in [1, " + std::to_string(kMaxDim / 2) + "]");
  SpectralProblem p;
  p.name = "wave";
  std::vector<double> freq(static_cast<std::size_t>(N));
  for (int k = 0; k < N; ++k) freq[k] = (k + 1) * std::numbers::pi;
  p.op = SpectralOperator::wave(freq);
  p.controls = ControlSet::grid(opt.control_lo, opt.control_hi, opt.control_step);
  check_profile_bound(profiles.drift, p.controls, profiles.bound, "drift");
  check_profile_bound(profiles.diffusion, p.controls, profiles.bound, "diffusion");
  p.horizon = TimeGrid(0.0, 1.0, opt.steps);
  p.noise = NoiseModel{N, opt.seed, 1};
  p.box = opt.box;

  auto fm = std::make_shared<FieldModel>();
  fm->Q = std::max(64, 8 * N);
  fm->n = 2 * N;
  fm->m = N;
  fm->w = 1.0 / fm->Q;
  const auto E = sine_table(fm->Q, N);
  fm->Y = Eigen::MatrixXd::Zero(fm->Q, 2 * N);
  fm->F = Eigen::MatrixXd::Zero(fm->Q, 2 * N);
  for (int k = 0; k < N; ++k) {
    fm->Y.col(2 * k) = E.col(k) / freq[k];  // displacement from the energy coordinate
    fm->F.col(2 * k + 1) = E.col(k);        // forcing enters the velocity equation
  }
  fm->G = E;
  fm->prof = profiles;
  install_field(p, fm);
  p.params = options_json(opt);
  p.params["N"] = N;
  p.params.update(profiles_json(profiles));
  return p;
}

// ---------------------------------------------------------------------------
// Registry

namespace {

nlohmann::json field_defaults(const FieldProfiles& pr) {
  auto j = options_json(heat_options());
  j["N"] = 4;
  j.update(profiles_json(pr));
  return j;
}

nlohmann::json lq_defaults() {
  auto j = options_json(ProblemOptions{});
  const LqParams q;
  j.update({{"alpha", q.alpha}, {"beta", q.beta}, {"sigma", q.sigma}, {"m_cost", q.m_cost},
            {"n_cost", q.n_cost}, {"gamma", q.gamma}, {"T", q.T}});
  return j;
}

nlohmann::json merged(const nlohmann::json& defaults, const nlohmann::json& given, const std::string& scen) {
  nlohmann::json out = defaults;
  if (given.is_null()) return out;
  if (!given.is_object()) throw Error("scenario '" + scen + "': params must be an object");
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (!defaults.contains(it.key())) throw Error("scenario '" + scen + "': unknown parameter '" + it.key() + "'");
    out[it.key()] = it.value();
  }
  return out;
}

ProblemOptions options_from(const nlohmann::json& j) {
  ProblemOptions o;
  o.steps = j.at("steps").get<int>();
  if (j.contains("control_lo")) o.control_lo = j.at("control_lo").get<double>();
  if (j.contains("control_hi")) o.control_hi = j.at("control_hi").get<double>();
  if (j.contains("control_step")) o.control_step = j.at("control_step").get<double>();
  o.seed = j.at("seed").get<std::uint64_t>();
  o.box = j.at("box").get<double>();
  return o;
}

FieldProfiles profiles_from(const nlohmann::json& j) {
  return {named_profile(j.at("drift").get<std::string>()), named_profile(j.at("diffusion").get<std::string>()),
          named_profile(j.at("running").get<std::string>()), named_profile(j.at("terminal").get<std::string>()),
          j.at("bound").get<double>()};
}

}  // namespace

std::vector<ScenarioInfo> list_scenarios() {
  auto bb = options_json(ProblemOptions{});
  bb.erase("control_lo");
  bb.erase("control_hi");
  bb.erase("control_step");
  bb["T"] = 1.0;
  auto cd = options_json(ProblemOptions{});
  cd["control_lo"] = -2.0;
  cd["control_hi"] = 2.0;
  cd["control_step"] = 0.1;
  cd["steps"] = 100;
  auto lq1 = options_json(ProblemOptions{});
  return {
      {"lq1", "scalar LQ benchmark a=u, b=0.5, f=x^2+u^2, h=x^2, T=1", lq1},
      {"lq", "scalar LQ family a=alpha x+beta u, b=sigma, f=m x^2+n u^2, h=gamma x^2", lq_defaults()},
      {"heat-N", "stochastic heat equation on (0,1), N Dirichlet modes, Nemytskii profiles",
       field_defaults(heat_default_profiles())},
      {"wave-N", "stochastic wave equation in first-order form, N modes (2N coordinates)",
       field_defaults(zero_profiles())},
      {"bang-bang", "deterministic dX=u dt, U={-1,1}, f=0, h=x^2", bb},
      {"control-diffusion", "scalar a=u, b=u, f=x^2+u^2, h=x^2", cd},
  };
}

SpectralProblem make_scenario(const nlohmann::json& scenario) {
  if (!scenario.is_object() || !scenario.contains("name")) throw Error("scenario: expected {\"name\": ..., \"params\": {...}}");
  for (auto it = scenario.begin(); it != scenario.end(); ++it)
    if (it.key() != "name" && it.key() != "params") throw Error("scenario: unknown key '" + it.key() + "'");
  std::string name = scenario.at("name").get<std::string>();
  const nlohmann::json given = scenario.contains("params") ? scenario.at("params") : nlohmann::json();

  // heat-4 / wave-2 shorthand fixes N.
  std::optional<int> suffix_n;
  for (const char* fam : {"heat-", "wave-"}) {
    const std::string f(fam);
    if (name.rfind(f, 0) == 0 && name != f + "N") {
      try {
        std::size_t used = 0;
        suffix_n = std::stoi(name.substr(f.size()), &used);
        if (used != name.size() - f.size()) throw Error("");
      } catch (...) {
        throw Error("scenario: cannot parse mode count in '" + name + "'");
      }
      name = f + "N";
    }
  }
  for (const auto& info : list_scenarios()) {
    if (info.name != name) continue;
    auto params = merged(info.defaults, given, name);
    if (suffix_n) params["N"] = *suffix_n;
    const auto opt = options_from(params);
    SpectralProblem p;
    if (name == "lq1") {
      p = make_lq1(opt);
    } else if (name == "lq") {
      p = make_lq(LqParams{params["alpha"], params["beta"], params["sigma"], params["m_cost"], params["n_cost"],
                           params["gamma"], params["T"]},
                  opt);
    } else if (name == "heat-N") {
      p = make_heat(params["N"].get<int>(), profiles_from(params), opt);
    } else if (name == "wave-N") {
      p = make_wave(params["N"].get<int>(), profiles_from(params), opt);
    } else if (name == "bang-bang") {
      p = make_bang_bang(params["T"].get<double>(), opt);
    } else {
      p = make_control_diffusion(opt);
    }
    p.name = suffix_n ? scenario.at("name").get<std::string>() : name;
    p.params = params;
    return p;
  }
  throw Error("scenario: unknown scenario '" + name + "'");
}

}  // namespace pmpdp
