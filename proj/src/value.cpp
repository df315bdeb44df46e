#include "pmpdp/value.hpp"

#include "pmpdp/backward.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace pmpdp {

namespace {

constexpr int kMaxFeatures = 1 + kMaxDim + kMaxDim * (kMaxDim + 1) / 2;

// Standard normals for the one-step expectation at horizon node `node`:
// antithetic pairs, then rescaled to unit sample second moment per coordinate.
std::vector<double> step_normals(const NoiseModel& noise, int node, int M, int m) {
  std::vector<double> w(static_cast<std::size_t>(M) * m);
  const int half = M / 2;
  for (int s = 0; s < half; ++s)
    for (int k = 0; k < m; ++k) {
      const double z = counter_normal(noise.seed, static_cast<std::uint64_t>(node),
                                      static_cast<std::uint64_t>(s) * m + k);
      w[static_cast<std::size_t>(2 * s) * m + k] = z;
      w[static_cast<std::size_t>(2 * s + 1) * m + k] = -z;
    }
  for (int k = 0; k < m; ++k) {
    double ss = 0.0;
    for (int s = 0; s < 2 * half; ++s) ss += w[static_cast<std::size_t>(s) * m + k] * w[static_cast<std::size_t>(s) * m + k];
    const double scale = ss > 0.0 ? 1.0 / std::sqrt(ss / (2 * half)) : 1.0;
    for (int s = 0; s < 2 * half; ++s) w[static_cast<std::size_t>(s) * m + k] *= scale;
  }
  return w;
}

// Antithetic pairs average out the odd part of V(c0 + C1 w); the even part's
// variance is at most the total minus what is linear in w.  Returned scaled
// so that dividing by the sample count gives the estimator variance.
double even_variance(double total, double linear) { return 2.0 * std::max(0.0, total - linear * linear); }

double uniform_from(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
  return 0.5 * std::erfc(-counter_normal(seed, stream, counter) / std::sqrt(2.0));
}

// Sorted draws with prefix sums of w and w^2 and a bucket index for O(1)
// threshold counts.
struct SortedDraws {
  std::vector<double> w, s1, s2;
  std::vector<int> first;
  double lo = 0.0, width = 1.0;

  explicit SortedDraws(std::vector<double> draws) : w(std::move(draws)) {
    std::sort(w.begin(), w.end());
    const std::size_t M = w.size();
    s1.assign(M + 1, 0.0);
    s2.assign(M + 1, 0.0);
    for (std::size_t s = 0; s < M; ++s) {
      s1[s + 1] = s1[s] + w[s];
      s2[s + 1] = s2[s] + w[s] * w[s];
    }
    const int C = 4096;
    lo = w.front();
    width = std::max((w.back() - w.front()) / C, 1e-300);
    first.resize(C + 1);
    std::size_t idx = 0;
    for (int c = 0; c <= C; ++c) {
      const double edge = lo + c * width;
      while (idx < M && w[idx] < edge) ++idx;
      first[static_cast<std::size_t>(c)] = static_cast<int>(idx);
    }
  }

  /// Number of draws strictly below `thr`.
  int below(double thr) const {
    const int M = static_cast<int>(w.size());
    if (thr <= w.front()) return 0;
    if (thr > w.back()) return M;
    int c = static_cast<int>((thr - lo) / width);
    c = std::clamp(c, 0, static_cast<int>(first.size()) - 1);
    int idx = first[static_cast<std::size_t>(c)];
    while (idx > 0 && w[static_cast<std::size_t>(idx - 1)] >= thr) --idx;
    while (idx < M && w[static_cast<std::size_t>(idx)] < thr) ++idx;
    return idx;
  }
};

struct OneStep {
  double mean = 0.0;
  double var = 0.0;
  double gvar = 0.0;  ///< summed per-coordinate variance of grad V(X')
  Vec z;
  bool extrapolated = false;
};

// E[V(X')] with X' = S(x + a dt) + S b dW for a quadratic fit V: exact
// Gaussian moments.  Also returns Z = E[V(X') dW] / dt = (S b)^T grad V(mu).
double quadratic_expectation(const FittedStep& f, const Vec& mu, const Mat& C, Vec* grad_out) {
  const int d = static_cast<int>(f.active.size());
  const int n = static_cast<int>(mu.size());
  double zm[kMaxDim];
  for (int a = 0; a < d; ++a) zm[a] = (mu[f.active[a]] - f.mean[a]) / f.scale[a];
  double feat[kMaxFeatures];
  f.basis.features(zm, d, feat);
  const int K = f.basis.size(d);
  double v = 0.0;
  for (int c = 0; c < K; ++c) v += f.coef(c, 0) * feat[c];
  double dz[kMaxDim] = {};
  if (f.basis.degree >= 1)
    for (int a = 0; a < d; ++a) dz[a] = f.coef(1 + a, 0);
  if (f.basis.degree >= 2) {
    const Mat Sigma = C * C.transpose();
    int c = 1 + d;
    for (int a = 0; a < d; ++a)
      for (int b = a; b < d; ++b) {
        const double w = f.coef(c++, 0);
        v += w * Sigma(f.active[a], f.active[b]) / (f.scale[a] * f.scale[b]);
        if (a == b) {
          dz[a] += 2.0 * w * zm[a];
        } else {
          dz[a] += w * zm[b];
          dz[b] += w * zm[a];
        }
      }
  }
  if (grad_out) {
    Vec g = Vec::Zero(n);
    for (int a = 0; a < d; ++a) g[f.active[a]] = dz[a] / f.scale[a];
    *grad_out = g;
  }
  return v;
}

Mat sym(const Mat& A) { return 0.5 * (A + A.transpose()); }

}  // namespace

// ---------------------------------------------------------------------------
// Field accessors

double ValueField::interpolate(const std::vector<double>& data, const Vec& x) const {
  const int n = static_cast<int>(axis_.size());
  const double h = axis_[1] - axis_[0];
  int k[2] = {0, 0};
  double w[2] = {0.0, 0.0};
  for (int a = 0; a < dim_; ++a) {
    const double r = (x[a] - axis_[0]) / h;
    k[a] = std::clamp(static_cast<int>(std::floor(r)), 0, n - 2);
    w[a] = r - k[a];
  }
  if (dim_ == 1) return (1.0 - w[0]) * data[static_cast<std::size_t>(k[0])] + w[0] * data[static_cast<std::size_t>(k[0] + 1)];
  auto at = [&](int i, int j) { return data[static_cast<std::size_t>(i) + static_cast<std::size_t>(j) * n]; };
  return (1.0 - w[0]) * (1.0 - w[1]) * at(k[0], k[1]) + w[0] * (1.0 - w[1]) * at(k[0] + 1, k[1]) +
         (1.0 - w[0]) * w[1] * at(k[0], k[1] + 1) + w[0] * w[1] * at(k[0] + 1, k[1] + 1);
}

double ValueField::value(int step, const Vec& x) const {
  if (step < 0 || step > steps()) throw Error("ValueField::value: step out of range");
  if (x.size() != dim_) throw Error("ValueField::value: state has wrong dimension");
  if (step == steps()) return problem_.coeff.phi(x);
  if (mode_ == ValueMode::grid) return interpolate(values_[static_cast<std::size_t>(step)], x);
  return fits_[static_cast<std::size_t>(step)].eval(x.data(), 0);
}

double ValueField::stderr_at(int step, const Vec& x) const {
  if (step < 0 || step > steps()) throw Error("ValueField::stderr_at: step out of range");
  if (mode_ == ValueMode::grid) {
    const double v = interpolate(stderr_[static_cast<std::size_t>(step)], x);
    return std::sqrt(std::max(0.0, v));
  }
  return fit_rms_[static_cast<std::size_t>(step)];
}

double ValueField::gradient_stderr_at(int step, const Vec& x) const {
  if (step < 0 || step > steps()) throw Error("ValueField::gradient_stderr_at: step out of range");
  if (mode_ != ValueMode::grid) return 0.0;
  return std::sqrt(std::max(0.0, interpolate(grad_var_[static_cast<std::size_t>(step)], x)));
}

Vec ValueField::interpolate_gradient(const std::vector<double>& data, const Vec& x) const {
  const int n = static_cast<int>(axis_.size());
  const double h = axis_[1] - axis_[0];
  int k[2] = {0, 0};
  double w[2] = {0.0, 0.0};
  for (int a = 0; a < dim_; ++a) {
    const double r = (x[a] - axis_[0]) / h;
    k[a] = std::clamp(static_cast<int>(std::floor(r)), 0, n - 2);
    w[a] = r - k[a];
  }
  Vec g(dim_);
  if (dim_ == 1) {
    g[0] = (data[static_cast<std::size_t>(k[0] + 1)] - data[static_cast<std::size_t>(k[0])]) / h;
    return g;
  }
  auto at = [&](int i, int j) { return data[static_cast<std::size_t>(i) + static_cast<std::size_t>(j) * n]; };
  g[0] = ((1.0 - w[1]) * (at(k[0] + 1, k[1]) - at(k[0], k[1])) + w[1] * (at(k[0] + 1, k[1] + 1) - at(k[0], k[1] + 1))) / h;
  g[1] = ((1.0 - w[0]) * (at(k[0], k[1] + 1) - at(k[0], k[1])) + w[0] * (at(k[0] + 1, k[1] + 1) - at(k[0] + 1, k[1]))) / h;
  return g;
}

bool ValueField::in_hull(const Vec& x) const {
  for (int a = 0; a < dim_; ++a)
    if (x[a] < lo_ - 1e-12 || x[a] > hi_ + 1e-12) return false;
  return true;
}

int ValueField::point_count(int step) const {
  if (mode_ == ValueMode::grid) return static_cast<int>(std::pow(static_cast<double>(axis_.size()), dim_) + 0.5);
  return static_cast<int>(cloud_[static_cast<std::size_t>(step)].size() / dim_);
}

Vec ValueField::point(int step, int index) const {
  Vec x(dim_);
  if (mode_ == ValueMode::grid) {
    const int n = static_cast<int>(axis_.size());
    for (int a = 0; a < dim_; ++a) {
      x[a] = axis_[static_cast<std::size_t>(index % n)];
      index /= n;
    }
  } else {
    const auto& c = cloud_[static_cast<std::size_t>(step)];
    for (int a = 0; a < dim_; ++a) x[a] = c[static_cast<std::size_t>(index) * dim_ + a];
  }
  return x;
}

namespace {

// One Bellman step at (node i of the field, x) given the continuation.
struct Bellman {
  const SpectralProblem& p;
  double dt;
  Mat S;

  template <class Expect>
  std::pair<std::size_t, OneStep> minimize(double t, const Vec& x, Expect&& expect, double* best_value) const {
    std::size_t best = 0;
    OneStep best_step;
    double bv = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < p.controls.size(); ++r) {
      const auto& u = p.controls[r];
      const Vec c0 = S * Vec(x + p.coeff.a(t, x, u) * dt);
      const Mat C1 = S * p.coeff.b(t, x, u) * std::sqrt(dt);
      OneStep os = expect(c0, C1);
      const double y = os.mean + p.coeff.g(t, x, os.mean, os.z, u) * dt;
      if (y < bv) {
        bv = y;
        best = r;
        best_step = os;
      }
    }
    *best_value = bv;
    return {best, best_step};
  }
};

}  // namespace

std::size_t ValueField::policy_at(int step, const Vec& x) const {
  if (step < 0 || step >= steps()) throw Error("ValueField::policy_at: step out of range");
  if (mode_ == ValueMode::grid) {
    const int n = static_cast<int>(axis_.size());
    const double h = axis_[1] - axis_[0];
    std::size_t flat = 0, stride = 1;
    for (int a = 0; a < dim_; ++a) {
      const int k = std::clamp(static_cast<int>(std::lround((x[a] - axis_[0]) / h)), 0, n - 1);
      flat += static_cast<std::size_t>(k) * stride;
      stride *= static_cast<std::size_t>(n);
    }
    return policy_[static_cast<std::size_t>(step)][flat];
  }
  const double dt = grid_.dt();
  const Bellman bell{problem_, dt, problem_.op.semigroup_matrix(dt)};
  const auto& next = fits_[static_cast<std::size_t>(step + 1)];
  const bool last = step + 1 == steps();
  const int m = problem_.noise_dim();
  double v = 0.0;
  return bell
      .minimize(time(step), x,
                [&](const Vec& c0, const Mat& C1) {
                  OneStep os;
                  if (last) {
                    os.z = Vec::Zero(m);
                    const double r = std::sqrt(static_cast<double>(m));
                    for (int k = 0; k < m; ++k)
                      for (double sgn : {1.0, -1.0}) {
                        const double y = problem_.coeff.phi(Vec(c0 + sgn * r * C1.col(k)));
                        os.mean += y / (2 * m);
                        os.z[k] += sgn * r * y / (2 * m);
                      }
                    os.z /= std::sqrt(dt);
                    return os;
                  }
                  Vec g;
                  os.mean = quadratic_expectation(next, c0, C1, &g);
                  os.z = C1.transpose() * g / std::sqrt(dt);
                  return os;
                },
                &v)
      .first;
}

ControlPolicy ValueField::policy() const {
  auto self = std::make_shared<const ValueField>(*this);
  return ControlPolicy::feedback([self](int step, double, const Vec& x) {
    const int s = step - self->offset();
    if (s < 0 || s >= self->steps()) throw Error("value-field policy: step outside the field");
    return self->policy_at(s, x);
  });
}

ValueField ValueField::from_function(const SpectralProblem& p, double t, const std::vector<double>& axis,
                                     const std::function<double(double, const Vec&)>& fn) {
  if (p.dim() > 2) throw Error("ValueField::from_function: grid fields need N <= 2");
  if (axis.size() < 2) throw Error("ValueField::from_function: need at least two anchors");
  const auto off = p.horizon.index_of(t);
  if (!off) throw Error("ValueField::from_function: start time is not a horizon node");
  ValueField f;
  f.mode_ = ValueMode::grid;
  f.problem_ = p;
  f.offset_ = *off;
  f.grid_ = p.horizon.tail(*off);
  f.dim_ = p.dim();
  f.axis_ = axis;
  f.lo_ = axis.front();
  f.hi_ = axis.back();
  const int A = f.point_count(0);
  for (int i = 0; i <= f.steps(); ++i) {
    std::vector<double> v(static_cast<std::size_t>(A));
    for (int a = 0; a < A; ++a) v[static_cast<std::size_t>(a)] = fn(f.time(i), f.point(i, a));
    f.values_.push_back(std::move(v));
    f.stderr_.emplace_back(static_cast<std::size_t>(A), 0.0);
    f.grad_var_.emplace_back(static_cast<std::size_t>(A), 0.0);
    if (i < f.steps()) f.policy_.emplace_back(static_cast<std::size_t>(A), 0);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Backward induction

ValueField compute_value(const SpectralProblem& p, double t, const ValueOptions& opt) {
  const int N = p.dim(), m = p.noise_dim();
  ValueMode mode = opt.mode;
  if (mode == ValueMode::automatic) mode = N <= 2 ? ValueMode::grid : ValueMode::regression;
  if (mode == ValueMode::grid && N > 2) throw Error("compute_value: grid mode supports N <= 2");
  if (p.controls.size() > 65535) throw Error("compute_value: control set too large");
  const auto off = p.horizon.index_of(t);
  if (!off) throw Error("compute_value: start time is not a horizon node");

  ValueField f;
  f.mode_ = mode;
  f.problem_ = p;
  f.offset_ = *off;
  f.grid_ = p.horizon.tail(*off);
  f.dim_ = N;
  f.lo_ = std::isnan(opt.lo) ? -p.box : opt.lo;
  f.hi_ = std::isnan(opt.hi) ? p.box : opt.hi;
  if (!(f.hi_ > f.lo_)) throw Error("compute_value: empty anchor box");
  const int L = f.steps();
  const double dt = f.grid_.dt();
  const Bellman bell{p, dt, p.op.semigroup_matrix(dt)};
  const NoiseModel noise = p.noise.derive(opt.tag);

  if (mode == ValueMode::grid) {
    if (opt.anchors < 2) throw Error("compute_value: need at least two anchors per axis");
    if (opt.samples < 2) throw Error("compute_value: need at least two samples");
    const int n = opt.anchors;
    f.axis_.resize(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) f.axis_[static_cast<std::size_t>(k)] = f.lo_ + (f.hi_ - f.lo_) * k / (n - 1);
    const double h = f.axis_[1] - f.axis_[0];
    const int A = f.point_count(0);
    f.values_.assign(static_cast<std::size_t>(L + 1), std::vector<double>(static_cast<std::size_t>(A)));
    f.stderr_.assign(static_cast<std::size_t>(L + 1), std::vector<double>(static_cast<std::size_t>(A), 0.0));
    f.grad_var_ = f.stderr_;
    f.policy_.assign(static_cast<std::size_t>(L), std::vector<std::uint16_t>(static_cast<std::size_t>(A), 0));
    for (int a = 0; a < A; ++a) f.values_[static_cast<std::size_t>(L)][static_cast<std::size_t>(a)] = p.coeff.phi(f.point(L, a));
    const int M = 2 * ((opt.samples + 1) / 2);

    for (int i = L - 1; i >= 0; --i) {
      const double ti = f.time(i);
      const auto& next = f.values_[static_cast<std::size_t>(i + 1)];
      const auto& next_se = f.stderr_[static_cast<std::size_t>(i + 1)];
      const auto& next_gv = f.grad_var_[static_cast<std::size_t>(i + 1)];
      auto w = step_normals(noise, f.offset_ + i, M, m);
      long extrap = 0;

      if (N == 1 && m == 1) {
        const SortedDraws draws(std::move(w));
        auto expect = [&](const Vec& c0v, const Mat& C1) {
          OneStep os;
          os.z = Vec::Zero(1);
          const double c0 = c0v[0], c1 = C1(0, 0);
          if (std::abs(c1) < 1e-300) {
            os.mean = f.interpolate(next, c0v);
            os.extrapolated = c0 < f.lo_ || c0 > f.hi_;
            return os;
          }
          const double c = std::abs(c1);
          const double xmin = c0 + c * draws.w.front(), xmax = c0 + c * draws.w.back();
          os.extrapolated = xmin < f.lo_ || xmax > f.hi_;
          const int kmin = std::clamp(static_cast<int>(std::floor((xmin - f.lo_) / h)), 0, n - 2);
          const int kmax = std::clamp(static_cast<int>(std::floor((xmax - f.lo_) / h)), 0, n - 2);
          double sv = 0.0, sv2 = 0.0, svw = 0.0, sb = 0.0, sb2 = 0.0, sbw = 0.0;
          int lo_idx = 0;
          for (int k = kmin; k <= kmax; ++k) {
            const int hi_idx = k == kmax ? M : draws.below((f.axis_[static_cast<std::size_t>(k + 1)] - c0) / c);
            const int cnt = hi_idx - lo_idx;
            if (cnt > 0) {
              const double v0 = next[static_cast<std::size_t>(k)], v1 = next[static_cast<std::size_t>(k + 1)];
              const double beta = (v1 - v0) / h;
              const double alpha = v0 - beta * f.axis_[static_cast<std::size_t>(k)];
              const double Aa = alpha + beta * c0, Bb = beta * c;
              const double w1 = draws.s1[static_cast<std::size_t>(hi_idx)] - draws.s1[static_cast<std::size_t>(lo_idx)];
              const double w2 = draws.s2[static_cast<std::size_t>(hi_idx)] - draws.s2[static_cast<std::size_t>(lo_idx)];
              sv += cnt * Aa + Bb * w1;
              sv2 += cnt * Aa * Aa + 2.0 * Aa * Bb * w1 + Bb * Bb * w2;
              svw += Aa * w1 + Bb * w2;
              sb += cnt * beta;
              sb2 += cnt * beta * beta;
              sbw += beta * w1;
            }
            lo_idx = hi_idx;
          }
          os.mean = sv / M;
          os.var = even_variance((sv2 - M * os.mean * os.mean) / (M - 1), svw / M);
          os.z[0] = (c1 < 0 ? -svw : svw) / M / std::sqrt(dt);
          os.gvar = even_variance((sb2 - sb * sb / M) / (M - 1), sbw / M);
          return os;
        };
        for (int a = 0; a < A; ++a) {
          const Vec x = f.point(i, a);
          double v = 0.0;
          auto [best, os] = bell.minimize(ti, x, expect, &v);
          f.values_[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] = v;
          f.policy_[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] = static_cast<std::uint16_t>(best);
          const Vec c0 = bell.S * Vec(x + p.coeff.a(ti, x, p.controls[best]) * dt);
          f.stderr_[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] =
              std::max(0.0, f.interpolate(next_se, c0)) + os.var / M;
          const double jn = Mat(bell.S * (Mat::Identity(N, N) + p.coeff.a_x(ti, x, p.controls[best]) * dt)).squaredNorm();
          f.grad_var_[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] =
              jn * (std::max(0.0, f.interpolate(next_gv, c0)) + os.gvar / M);
          if (os.extrapolated) ++extrap;
        }
      } else {
        auto expect = [&](const Vec& c0, const Mat& C1) {
          OneStep os;
          os.z = Vec::Zero(m);
          double sv = 0.0, sv2 = 0.0;
          Vec wk(m), sg = Vec::Zero(N), sg2 = Vec::Zero(N);
          Mat sgw = Mat::Zero(N, m);
          for (int s = 0; s < M; ++s) {
            for (int k = 0; k < m; ++k) wk[k] = w[static_cast<std::size_t>(s) * m + k];
            const Vec xp = c0 + C1 * wk;
            if (!f.in_hull(xp)) os.extrapolated = true;
            const double v = f.interpolate(next, xp);
            const Vec gv = f.interpolate_gradient(next, xp);
            sg += gv;
            sg2 += gv.cwiseProduct(gv);
            sgw += gv * wk.transpose();
            sv += v;
            sv2 += v * v;
            os.z += v * wk;
          }
          os.mean = sv / M;
          os.var = even_variance((sv2 - M * os.mean * os.mean) / (M - 1), os.z.norm() / M);
          for (int a = 0; a < N; ++a)
            os.gvar += even_variance((sg2[a] - sg[a] * sg[a] / M) / (M - 1), sgw.row(a).norm() / M);
          os.z /= M * std::sqrt(dt);
          return os;
        };
        for (int a = 0; a < A; ++a) {
          const Vec x = f.point(i, a);
          double v = 0.0;
          auto [best, os] = bell.minimize(ti, x, expect, &v);
          f.values_[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] = v;
          f.policy_[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] = static_cast<std::uint16_t>(best);
          const Vec c0 = bell.S * Vec(x + p.coeff.a(ti, x, p.controls[best]) * dt);
          f.stderr_[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] =
              std::max(0.0, f.interpolate(next_se, c0)) + os.var / M;
          const double jn = Mat(bell.S * (Mat::Identity(N, N) + p.coeff.a_x(ti, x, p.controls[best]) * dt)).squaredNorm();
          f.grad_var_[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] =
              jn * (std::max(0.0, f.interpolate(next_gv, c0)) + os.gvar / M);
          if (os.extrapolated) ++extrap;
        }
      }
      f.extrapolations_ += extrap;
    }
    return f;
  }

  // Regression mode: quadratic value fits on a uniform cloud, exact Gaussian
  // expectations of the next fit.
  const int C = opt.cloud;
  const RegressionBasis basis = RegressionBasis::quadratic();
  if (C < 2 * basis.size(N)) throw Error("compute_value: cloud too small for a quadratic fit");
  f.fits_.resize(static_cast<std::size_t>(L + 1));
  f.fit_rms_.assign(static_cast<std::size_t>(L + 1), 0.0);
  f.cloud_.resize(static_cast<std::size_t>(L + 1));
  for (int i = 0; i <= L; ++i) {
    auto& c = f.cloud_[static_cast<std::size_t>(i)];
    c.resize(static_cast<std::size_t>(C) * N);
    for (int j = 0; j < C; ++j)
      for (int k = 0; k < N; ++k)
        c[static_cast<std::size_t>(j) * N + k] =
            f.lo_ + (f.hi_ - f.lo_) * uniform_from(noise.seed, (1ULL << 40) + static_cast<std::uint64_t>(f.offset_ + i),
                                                   static_cast<std::uint64_t>(j) * N + k);
  }
  Eigen::MatrixXd Y(C, 1);
  auto fit_step = [&](int i) {
    char where[64];
    std::snprintf(where, sizeof where, "value step %d (t=%.6g)", f.offset_ + i, f.time(i));
    Regression reg(basis, f.cloud_[static_cast<std::size_t>(i)].data(), C, N, where, 0);
    f.fits_[static_cast<std::size_t>(i)] = reg.fit(Y);
    const Eigen::MatrixXd r = Y - reg.fitted(f.fits_[static_cast<std::size_t>(i)]);
    f.fit_rms_[static_cast<std::size_t>(i)] = std::sqrt(r.squaredNorm() / C);
  };
  for (int j = 0; j < C; ++j) Y(j, 0) = p.coeff.phi(f.point(L, j));
  fit_step(L);
  // The last step integrates Phi itself with the symmetric 2m-point rule
  // (exact for cubics), so the terminal fit error never enters the field.
  auto terminal_expect = [&](const Vec& c0, const Mat& C1) {
    OneStep os;
    os.z = Vec::Zero(m);
    const double r = std::sqrt(static_cast<double>(m));
    for (int k = 0; k < m; ++k)
      for (double sgn : {1.0, -1.0}) {
        const double v = p.coeff.phi(Vec(c0 + sgn * r * C1.col(k)));
        os.mean += v / (2 * m);
        os.z[k] += sgn * r * v / (2 * m);
      }
    os.z /= std::sqrt(dt);
    return os;
  };
  for (int i = L - 1; i >= 0; --i) {
    const double ti = f.time(i);
    const auto& next = f.fits_[static_cast<std::size_t>(i + 1)];
    auto expect = [&](const Vec& c0, const Mat& C1) {
      if (i == L - 1) return terminal_expect(c0, C1);
      OneStep os;
      Vec g;
      os.mean = quadratic_expectation(next, c0, C1, &g);
      os.z = C1.transpose() * g / std::sqrt(dt);
      return os;
    };
    for (int j = 0; j < C; ++j) {
      double v = 0.0;
      bell.minimize(ti, f.point(i, j), expect, &v);
      Y(j, 0) = v;
    }
    fit_step(i);
  }
  return f;
}

// ---------------------------------------------------------------------------
// DPP

DppReport dpp_consistency(const ValueField& field, double t, double t_hat, const Vec& eta, int paths,
                          std::uint64_t tag) {
  const auto s0 = field.step_of(t), s1 = field.step_of(t_hat);
  if (!s0 || !s1) throw Error("dpp_consistency: times must be field nodes");
  if (*s1 < *s0) throw Error("dpp_consistency: t_hat before t");
  DppReport r;
  r.lhs = field.value(*s0, eta);
  r.lhs_se = field.stderr_at(*s0, eta);
  if (*s1 == *s0) {
    r.rhs = r.lhs;
    r.rhs_se = r.lhs_se;
    r.combined_se = r.lhs_se;
    return r;
  }
  const auto& p = field.problem();
  SimulationOptions so;
  so.noise = p.noise.derive(tag);
  const PathBundle b = simulate_state(p, t, eta, field.policy(), paths, so);
  std::vector<double> zeta(static_cast<std::size_t>(b.paths));
  for (int j = 0; j < b.paths; ++j) zeta[j] = field.value(*s1, b.state(j, *s1 - *s0));
  std::vector<double> rhs(static_cast<std::size_t>(b.paths));
  if (p.coeff.driver) {
    const Driver g = [&p](double tt, const Vec& x, double y, const Vec& z, const ControlPoint& u) {
      return p.coeff.g(tt, x, y, z, u);
    };
    rhs = backward_evaluator(p, b, zeta, t, t_hat, g);
  } else {
    const double dt = b.grid.dt();
    for (int j = 0; j < b.paths; ++j) {
      double s = 0.0;
      for (int i = 0; i < *s1 - *s0; ++i) s += p.coeff.f(b.time(i), b.state(j, i), p.controls[b.control(j, i)]) * dt;
      rhs[j] = s + zeta[j];
    }
  }
  const auto ms = mean_se(rhs);
  r.rhs = ms.mean;
  r.rhs_se = ms.se;
  r.gap = std::abs(r.lhs - r.rhs);
  r.combined_se = std::sqrt(r.lhs_se * r.lhs_se + r.rhs_se * r.rhs_se);
  return r;
}

double hamiltonian_G(const SpectralProblem& pr, double t, const Vec& x, const ControlPoint& rho, const Vec& p,
                     const Mat& P) {
  const Mat b = pr.coeff.b(t, x, rho);
  return 0.5 * (b.transpose() * P * b).trace() + p.dot(pr.coeff.a(t, x, rho)) - pr.coeff.f(t, x, rho);
}

// ---------------------------------------------------------------------------
// Differentials

namespace {

void spatial_derivatives(const ValueField& f, int step, const Vec& x, double h, Vec& Vx, Mat& Vxx) {
  const int N = f.dim();
  Vx.resize(N);
  Vxx.resize(N, N);
  const double v0 = f.value(step, x);
  for (int a = 0; a < N; ++a) {
    Vec xp = x, xm = x;
    xp[a] += h;
    xm[a] -= h;
    const double vp = f.value(step, xp), vm = f.value(step, xm);
    Vx[a] = (vp - vm) / (2 * h);
    Vxx(a, a) = (vp - 2 * v0 + vm) / (h * h);
    for (int b = 0; b < a; ++b) {
      Vec pp = x, pm = x, mp = x, mm = x;
      pp[a] += h, pp[b] += h;
      pm[a] += h, pm[b] -= h;
      mp[a] -= h, mp[b] += h;
      mm[a] -= h, mm[b] -= h;
      Vxx(a, b) = Vxx(b, a) =
          (f.value(step, pp) - f.value(step, pm) - f.value(step, mp) + f.value(step, mm)) / (4 * h * h);
    }
  }
}

}  // namespace

DifferentialEstimate numeric_differentials(const ValueField& field, int step, const Vec& x, double h,
                                           int time_steps) {
  if (!(h > 0.0)) throw Error("numeric_differentials: step must be positive");
  if (time_steps < 1 || step + time_steps > field.steps())
    throw Error("numeric_differentials: time quotient leaves the field");
  Vec probe = x;
  for (int a = 0; a < field.dim(); ++a) probe[a] = std::abs(x[a]) + 2 * h;
  if (field.mode() == ValueMode::grid && !field.in_hull(probe))
    throw Error("numeric_differentials: stencil leaves the anchor hull");
  DifferentialEstimate d;
  d.h = h;
  d.time_steps = time_steps;
  Vec Vx2;
  Mat Vxx2;
  spatial_derivatives(field, step, x, h, d.Vx, d.Vxx);
  spatial_derivatives(field, step, x, 2 * h, Vx2, Vxx2);
  d.err_x = (d.Vx - Vx2).cwiseAbs() / 3.0;
  d.err_xx = (d.Vxx - Vxx2).cwiseAbs() / 3.0;
  d.Vxx = sym(d.Vxx);
  const double v0 = field.value(step, x);
  const double dtk = field.time(step + time_steps) - field.time(step);
  d.Vt = (field.value(step + time_steps, x) - v0) / dtk;
  if (step + 2 * time_steps <= field.steps()) {
    const double vt2 = (field.value(step + 2 * time_steps, x) - v0) / (field.time(step + 2 * time_steps) - field.time(step));
    d.err_t = std::abs(d.Vt - vt2);
  }
  auto noisy = [](double est, double err) { return err > std::abs(est) && err > 1e-12; };
  d.noisy = noisy(d.Vt, d.err_t);
  for (int a = 0; a < field.dim(); ++a) {
    d.noisy = d.noisy || noisy(d.Vx[a], d.err_x[a]);
    for (int b = 0; b < field.dim(); ++b) d.noisy = d.noisy || noisy(d.Vxx(a, b), d.err_xx(a, b));
  }
  return d;
}

HjbResidual hjb_residual(const ValueField& field, int step, const Vec& x, double h, int time_steps) {
  const auto& p = field.problem();
  HjbResidual r;
  r.diff = numeric_differentials(field, step, x, h, time_steps);
  const auto& d = r.diff;
  const double t = field.time(step);
  double best = std::numeric_limits<double>::infinity(), best_err = 0.0;
  for (std::size_t k = 0; k < p.controls.size(); ++k) {
    const auto& u = p.controls[k];
    const Mat b = p.coeff.b(t, x, u);
    const Vec a = p.coeff.a(t, x, u);
    const double v = 0.5 * (b.transpose() * d.Vxx * b).trace() + d.Vx.dot(a) + p.coeff.f(t, x, u);
    if (v < best) {
      best = v;
      const Mat bb = (b * b.transpose()).cwiseAbs();
      best_err = 0.5 * bb.cwiseProduct(d.err_xx).sum() + a.cwiseAbs().dot(d.err_x);
    }
  }
  const double drift = p.op.apply_adjoint(d.Vx).dot(x);
  r.residual = d.Vt + drift + best;
  r.error_bar = d.err_t + p.op.apply_adjoint(d.err_x).cwiseAbs().dot(x.cwiseAbs()) + best_err;
  r.inconclusive = d.noisy;
  return r;
}

// ---------------------------------------------------------------------------
// Membership

MembershipReport superdiff_membership(const ValueField& field, int step, const Vec& x, const DifferentialTriple& tr,
                                      const std::vector<double>& radii, ProbeKind kind, bool super) {
  const int N = field.dim();
  if (radii.size() < 2) throw Error("superdiff_membership: insufficient probes (need a ladder of at least two radii)");
  for (std::size_t k = 1; k < radii.size(); ++k)
    if (!(radii[k] < radii[k - 1]) || !(radii[k] > 0.0)) throw Error("superdiff_membership: radii must decrease");
  if (step < 0 || step >= field.steps()) throw Error("superdiff_membership: step out of range");
  if (kind != ProbeKind::time && (tr.p.size() != N || tr.P.rows() != N || tr.P.cols() != N))
    throw Error("superdiff_membership: triple has wrong dimension");

  std::vector<Vec> dirs;
  if (kind != ProbeKind::time) {
    for (int a = 0; a < N; ++a) {
      Vec e = Vec::Zero(N);
      e[a] = 1.0;
      dirs.push_back(e);
      dirs.push_back(-e);
    }
    if (N == 2) {
      const double s = 1.0 / std::sqrt(2.0);
      for (double sa : {1.0, -1.0})
        for (double sb : {1.0, -1.0}) {
          Vec e(2);
          e << sa * s, sb * s;
          dirs.push_back(e);
        }
    }
  } else {
    dirs.push_back(Vec::Zero(N));
  }

  const double v0 = field.value(step, x);
  const double se0 = field.stderr_at(step, x);
  // Multilinear interpolation error is at most h^2/8 |V_xx| per axis; the
  // curvature comes from second differences of the field itself.
  const double hs = field.spacing();
  auto interp_error = [&](int s, const Vec& at) {
    if (hs <= 0.0) return 0.0;
    double e = 0.0;
    const double c = field.value(s, at);
    for (int a = 0; a < N; ++a) {
      Vec xp = at, xm = at;
      xp[a] += hs;
      xm[a] -= hs;
      if (field.in_hull(xp) && field.in_hull(xm))
        e += std::abs(field.value(s, xp) - 2 * c + field.value(s, xm)) / 8.0;
    }
    return e;
  };
  const double interp0 = interp_error(step, x);
  const double dt = field.grid().dt();
  const double sign = super ? 1.0 : -1.0;

  MembershipReport rep;
  std::vector<double> logr, logpos;
  for (std::size_t k = 0; k < radii.size(); ++k) {
    const double rad = radii[k];
    int ds = 0;
    if (kind == ProbeKind::time) ds = static_cast<int>(std::lround(rad / dt));
    if (kind == ProbeKind::joint) ds = static_cast<int>(std::lround(rad * rad / dt));
    if (kind != ProbeKind::spatial && ds < 1)
      throw Error("superdiff_membership: insufficient probes (time offset below one field step)");
    if (step + ds > field.steps()) throw Error("superdiff_membership: probe beyond the terminal time");
    double worst = -std::numeric_limits<double>::infinity(), worst_tol = 0.0, pos = 0.0;
    int witness = -1;
    bool all_ok = true;
    for (std::size_t d = 0; d < dirs.size(); ++d) {
      const Vec dy = kind == ProbeKind::time ? Vec(Vec::Zero(N)) : Vec(rad * dirs[d]);
      const Vec y = x + dy;
      if (field.mode() == ValueMode::grid && !field.in_hull(y))
        throw Error("superdiff_membership: probe leaves the anchor hull");
      const double dts = field.time(step + ds) - field.time(step);
      double R = field.value(step + ds, y) - v0 - tr.r * dts;
      if (kind != ProbeKind::time) R -= tr.p.dot(dy) + 0.5 * dy.dot(tr.P * dy);
      R *= sign;
      const double den = dts + dy.squaredNorm();
      // Error of the difference v(s,y) - v(t,x).  Spatially the Monte Carlo
      // errors are shared, leaving gradient error times |dy|; in time only the
      // sampling noise injected between t and s remains.
      double err_mc = 0.0;
      if (field.mode() == ValueMode::grid) {
        const double g = std::max(field.gradient_stderr_at(step, x), field.gradient_stderr_at(step + ds, y));
        const double se1 = field.stderr_at(step + ds, y);
        const double fresh = ds > 0 ? std::sqrt(std::max(0.0, se0 * se0 - se1 * se1)) : 0.0;
        err_mc = std::hypot(g * dy.norm(), fresh);
      } else {
        err_mc = std::hypot(se0, field.stderr_at(step + ds, y));
      }
      const double err_tr = tr.r_se * dts + tr.p_se * dy.norm() + 0.5 * tr.P_se * dy.squaredNorm();
      const double err = 3.0 * std::hypot(err_mc, err_tr) + interp0 + interp_error(step + ds, y);
      const double mnorm = R / den, tnorm = err / den;
      pos = std::max(pos, R);
      if (mnorm > tnorm) all_ok = false;
      if (mnorm - tnorm > worst - worst_tol || witness < 0) {
        worst = mnorm;
        worst_tol = tnorm;
        witness = static_cast<int>(d);
      }
    }
    rep.rung_margins.push_back(worst);
    if (pos > 0.0) {
      logr.push_back(std::log(rad));
      logpos.push_back(std::log(pos));
    }
    if (k + 1 == radii.size()) {
      rep.accepted = all_ok;
      rep.margin = worst;
      rep.tolerance = worst_tol;
      rep.witness_direction = witness;
    }
  }
  if (logr.size() >= 2) {
    const double mx = std::accumulate(logr.begin(), logr.end(), 0.0) / logr.size();
    const double my = std::accumulate(logpos.begin(), logpos.end(), 0.0) / logpos.size();
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t k = 0; k < logr.size(); ++k) {
      sxy += (logr[k] - mx) * (logpos[k] - my);
      sxx += (logr[k] - mx) * (logr[k] - mx);
    }
    rep.trend = sxx > 0.0 ? sxy / sxx : 0.0;
  }
  return rep;
}

void write_value_csv(std::ostream& os, const ValueField& f, int time_stride) {
  if (time_stride < 1) throw Error("write_value_csv: stride must be positive");
  os << "time";
  for (int a = 0; a < f.dim(); ++a) os << ",x" << a;
  os << ",value,stderr,control\n";
  char buf[64];
  for (int i = 0; i <= f.steps(); i += time_stride) {
    const int P = f.point_count(i);
    for (int j = 0; j < P; ++j) {
      const Vec x = f.point(i, j);
      std::snprintf(buf, sizeof buf, "%.10g", f.time(i));
      os << buf;
      for (int a = 0; a < f.dim(); ++a) {
        std::snprintf(buf, sizeof buf, ",%.12g", x[a]);
        os << buf;
      }
      std::snprintf(buf, sizeof buf, ",%.12g,%.6g,", f.value(i, x), f.stderr_at(i, x));
      os << buf;
      if (i < f.steps())
        os << f.policy_at(i, x);
      else
        os << -1;
      os << '\n';
    }
    if (i < f.steps() && i + time_stride > f.steps()) i = f.steps() - time_stride;
  }
}

}  // namespace pmpdp
