#include "pmpdp/regression.hpp"

#include <cmath>
#include <limits>

namespace pmpdp {

int RegressionBasis::size(int d) const {
  switch (degree) {
    case 0: return 1;
    case 1: return 1 + d;
    case 2: return 1 + d + d * (d + 1) / 2;
    default: throw Error("RegressionBasis: degree must be 0, 1 or 2");
  }
}

void RegressionBasis::features(const double* z, int d, double* out) const {
  out[0] = 1.0;
  if (degree == 0) return;
  for (int a = 0; a < d; ++a) out[1 + a] = z[a];
  if (degree == 1) return;
  int c = 1 + d;
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) out[c++] = z[a] * z[b];
}

Eigen::VectorXd FittedStep::features(const double* x) const {
  const int d = static_cast<int>(active.size());
  double z[kMaxDim];
  for (int a = 0; a < d; ++a) z[a] = (x[active[a]] - mean[a]) / scale[a];
  Eigen::VectorXd f(basis.size(d));
  basis.features(z, d, f.data());
  return f;
}

namespace {

// Up to 1 + 16 + 136 features; kept off the heap since eval sits in every inner loop.
constexpr int kMaxFeatures = 1 + kMaxDim + kMaxDim * (kMaxDim + 1) / 2;

int stack_features(const FittedStep& s, const double* x, double* out) {
  const int d = static_cast<int>(s.active.size());
  double z[kMaxDim];
  for (int a = 0; a < d; ++a) z[a] = (x[s.active[a]] - s.mean[a]) / s.scale[a];
  s.basis.features(z, d, out);
  return s.basis.size(d);
}

}  // namespace

Eigen::VectorXd FittedStep::eval(const double* x) const {
  double f[kMaxFeatures];
  const int K = stack_features(*this, x, f);
  return coef.transpose() * Eigen::Map<const Eigen::VectorXd>(f, K);
}

void FittedStep::eval(const double* x, double* out) const {
  double f[kMaxFeatures];
  const int K = stack_features(*this, x, f);
  const int T = targets();
  for (int t = 0; t < T; ++t) {
    const double* c = coef.data() + static_cast<std::size_t>(t) * coef.rows();
    double v = 0.0;
    for (int k = 0; k < K; ++k) v += c[k] * f[k];
    out[t] = v;
  }
}

double FittedStep::eval(const double* x, int target) const {
  double f[kMaxFeatures];
  const int K = stack_features(*this, x, f);
  return coef.col(target).dot(Eigen::Map<const Eigen::VectorXd>(f, K));
}

double FittedStep::stderr_at(const double* x, int target) const {
  const int B = static_cast<int>(batch_coef.size());
  if (B < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto f = features(x);
  double s = 0.0, s2 = 0.0;
  for (const auto& c : batch_coef) {
    const double v = c.col(target).dot(f);
    s += v;
    s2 += v * v;
  }
  const double mean = s / B;
  const double var = std::max(0.0, (s2 - B * mean * mean) / (B - 1));
  return std::sqrt(var / B);
}

Regression::Regression(RegressionBasis basis, const double* X, int M, int N, std::string where, int batches)
    : M_(M) {
  if (M < 1) throw Error("regression at " + where + ": no samples");
  proto_.basis = basis;
  // Standardize; coordinates without spread carry no information.
  for (int k = 0; k < N; ++k) {
    double s = 0.0;
    for (int j = 0; j < M; ++j) s += X[static_cast<std::size_t>(j) * N + k];
    const double mu = s / M;
    double v = 0.0;
    for (int j = 0; j < M; ++j) {
      const double d = X[static_cast<std::size_t>(j) * N + k] - mu;
      v += d * d;
    }
    const double sd = std::sqrt(v / M);
    if (sd > 1e-12 * std::max(1.0, std::abs(mu))) {
      proto_.active.push_back(k);
      proto_.mean.push_back(mu);
      proto_.scale.push_back(sd);
    }
  }
  const int d = static_cast<int>(proto_.active.size());
  const int K = basis.size(d);
  phi_.resize(M, K);
  double z[kMaxDim];
  Eigen::VectorXd row(K);
  for (int j = 0; j < M; ++j) {
    for (int a = 0; a < d; ++a)
      z[a] = (X[static_cast<std::size_t>(j) * N + proto_.active[a]] - proto_.mean[a]) / proto_.scale[a];
    basis.features(z, d, row.data());
    phi_.row(j) = row.transpose();
  }
  if (M < K) throw Error("regression at " + where + ": fewer samples than basis functions");

  Eigen::MatrixXd G = phi_.transpose() * phi_;
  dinv_ = G.diagonal().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd Gn = dinv_.asDiagonal() * G * dinv_.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Gn, Eigen::EigenvaluesOnly);
  const double lmin = es.eigenvalues().minCoeff(), lmax = es.eigenvalues().maxCoeff();
  if (!(lmin > 1e-12 * lmax))
    throw Error("regression at " + where + ": rank-deficient design (basis functions collinear on the samples)");
  condition_ = lmax / lmin;
  proto_.condition = condition_;
  gram_.compute(Gn);

  batches_ = (batches > 1 && M / batches >= 4 * K) ? batches : 0;
  for (int b = 0; b < batches_; ++b) {
    const int lo = static_cast<int>(static_cast<long long>(M) * b / batches_);
    const int hi = static_cast<int>(static_cast<long long>(M) * (b + 1) / batches_);
    const auto blk = phi_.middleRows(lo, hi - lo);
    batch_gram_.emplace_back(Eigen::MatrixXd(dinv_.asDiagonal() * (blk.transpose() * blk) * dinv_.asDiagonal()));
  }
}

FittedStep Regression::fit(const Eigen::MatrixXd& Y) const {
  if (Y.rows() != M_) throw Error("Regression::fit: target rows do not match the sample count");
  FittedStep out = proto_;
  out.coef = dinv_.asDiagonal() * gram_.solve(dinv_.asDiagonal() * (phi_.transpose() * Y));
  for (int b = 0; b < batches_; ++b) {
    const int lo = static_cast<int>(static_cast<long long>(M_) * b / batches_);
    const int hi = static_cast<int>(static_cast<long long>(M_) * (b + 1) / batches_);
    const Eigen::MatrixXd rhs = phi_.middleRows(lo, hi - lo).transpose() * Y.middleRows(lo, hi - lo);
    out.batch_coef.emplace_back(dinv_.asDiagonal() * batch_gram_[b].solve(dinv_.asDiagonal() * rhs));
  }
  return out;
}

StepFit fit_with_increments(const Regression& reg, const Eigen::MatrixXd& Y, const std::vector<double>& dw, int m,
                            double dt) {
  StepFit out;
  out.value = reg.fit(Y);
  const Eigen::MatrixXd R = Y - reg.fitted(out.value);
  const auto M = Y.rows(), T = Y.cols();
  Eigen::MatrixXd Z(M, T * m);
  for (Eigen::Index j = 0; j < M; ++j)
    for (int k = 0; k < m; ++k) {
      const double w = dw[static_cast<std::size_t>(j) * m + k] / dt;
      for (Eigen::Index c = 0; c < T; ++c) Z(j, k * T + c) = R(j, c) * w;
    }
  out.mart = reg.fit(Z);
  return out;
}

double FittedField::max_condition() const {
  double c = 1.0;
  for (const auto& s : steps) c = std::max(c, s.condition);
  return c;
}

}  // namespace pmpdp
