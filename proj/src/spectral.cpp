#include "pmpdp/spectral.hpp"

#include <cmath>
#include <numbers>

namespace pmpdp {

namespace {

constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

SpectralOperator SpectralOperator::diagonal(std::vector<double> eigenvalues) {
  if (eigenvalues.empty() || eigenvalues.size() > static_cast<std::size_t>(kMaxDim))
    throw Error("SpectralOperator: dimension must be in [1, " + std::to_string(kMaxDim) + "]");
  for (double l : eigenvalues)
    if (!std::isfinite(l)) throw Error("SpectralOperator: non-finite eigenvalue");
  SpectralOperator op;
  op.decay_ = std::move(eigenvalues);
  return op;
}

SpectralOperator SpectralOperator::zero(int dim) {
  return diagonal(std::vector<double>(static_cast<std::size_t>(dim), 0.0));
}

SpectralOperator SpectralOperator::wave(std::vector<double> frequencies) {
  if (frequencies.empty() || 2 * frequencies.size() > static_cast<std::size_t>(kMaxDim))
    throw Error("SpectralOperator: wave dimension out of range");
  SpectralOperator op;
  op.frequency_ = std::move(frequencies);
  return op;
}

bool SpectralOperator::is_zero() const {
  for (double l : decay_)
    if (l != 0.0) return false;
  for (double w : frequency_)
    if (w != 0.0) return false;
  return true;
}

Vec SpectralOperator::apply(const Vec& v) const {
  Vec out(dim());
  const int nd = static_cast<int>(decay_.size());
  for (int k = 0; k < nd; ++k) out[k] = -decay_[k] * v[k];
  for (std::size_t j = 0; j < frequency_.size(); ++j) {
    const int i = nd + 2 * static_cast<int>(j);
    out[i] = frequency_[j] * v[i + 1];
    out[i + 1] = -frequency_[j] * v[i];
  }
  return out;
}

Vec SpectralOperator::apply_adjoint(const Vec& v) const {
  Vec out(dim());
  const int nd = static_cast<int>(decay_.size());
  for (int k = 0; k < nd; ++k) out[k] = -decay_[k] * v[k];
  for (std::size_t j = 0; j < frequency_.size(); ++j) {
    const int i = nd + 2 * static_cast<int>(j);
    out[i] = -frequency_[j] * v[i + 1];
    out[i + 1] = frequency_[j] * v[i];
  }
  return out;
}

Vec SpectralOperator::semigroup(double t, const Vec& v) const {
  Vec out(dim());
  const int nd = static_cast<int>(decay_.size());
  for (int k = 0; k < nd; ++k) out[k] = decay_[k] == 0.0 ? v[k] : std::exp(-decay_[k] * t) * v[k];
  for (std::size_t j = 0; j < frequency_.size(); ++j) {
    const int i = nd + 2 * static_cast<int>(j);
    const double c = std::cos(frequency_[j] * t);
    const double s = std::sin(frequency_[j] * t);
    out[i] = c * v[i] + s * v[i + 1];
    out[i + 1] = -s * v[i] + c * v[i + 1];
  }
  return out;
}

Mat SpectralOperator::semigroup_matrix(double t) const {
  if (!(t >= 0.0)) throw Error("semigroup_matrix: negative time");
  const int n = dim();
  Mat s = Mat::Zero(n, n);
  const int nd = static_cast<int>(decay_.size());
  for (int k = 0; k < nd; ++k) s(k, k) = std::exp(-decay_[k] * t);
  for (std::size_t j = 0; j < frequency_.size(); ++j) {
    const int i = nd + 2 * static_cast<int>(j);
    const double c = std::cos(frequency_[j] * t);
    const double sn = std::sin(frequency_[j] * t);
    s(i, i) = c;
    s(i, i + 1) = sn;
    s(i + 1, i) = -sn;
    s(i + 1, i + 1) = c;
  }
  return s;
}

StateVector semigroup_apply(const SpectralOperator& op, double t, const StateVector& v) {
  if (!(t >= 0.0)) throw Error("semigroup_apply: negative time " + std::to_string(t));
  if (v.size() != op.dim()) throw Error("semigroup_apply: dimension mismatch");
  return op.semigroup(t, v);
}

TimeGrid::TimeGrid(double t0, double T, int steps) : t0_(t0), T_(T), steps_(steps) {
  if (!(t0 >= 0.0) || !(T > t0)) throw Error("TimeGrid: need 0 <= t0 < T");
  if (steps < 1) throw Error("TimeGrid: steps must be positive");
}

std::optional<int> TimeGrid::index_of(double t) const {
  const double x = (t - t0_) / dt();
  const double r = std::round(x);
  if (r < 0 || r > steps_ || std::abs(x - r) > 1e-9 * std::max(1.0, std::abs(x))) return std::nullopt;
  return static_cast<int>(r);
}

TimeGrid TimeGrid::tail(int i) const {
  if (i < 0 || i >= steps_) throw Error("TimeGrid::tail: index out of range");
  TimeGrid g;
  g.t0_ = node(i);
  g.T_ = T_;
  g.steps_ = steps_ - i;
  return g;
}

NoiseModel NoiseModel::derive(std::uint64_t tag) const {
  NoiseModel n = *this;
  n.seed = mix64(seed ^ mix64(tag ^ 0xd1b54a32d192ed03ULL));
  return n;
}

double counter_normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
  // Box-Muller on a hashed counter pair; even/odd counters share one pair.
  const std::uint64_t key = mix64(seed ^ mix64(stream + 0x632be59bd9b4e019ULL));
  const std::uint64_t pair = counter >> 1;
  const std::uint64_t r1 = mix64(key ^ mix64(2 * pair));
  const std::uint64_t r2 = mix64(key ^ mix64(2 * pair + 1) ^ 0x2545f4914f6cdd1dULL);
  const double u1 = (static_cast<double>(r1 >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(r2 >> 11) * 0x1.0p-53;
  const double rad = std::sqrt(-2.0 * std::log(u1));
  const double ang = 2.0 * std::numbers::pi * u2;
  return (counter & 1U) ? rad * std::sin(ang) : rad * std::cos(ang);
}

double brownian_increment(const NoiseModel& noise, const TimeGrid& grid, std::uint64_t path, int step,
                          int k) {
  const int r = noise.refinement;
  const double scale = std::sqrt(grid.dt() / r);
  // Global fine index counted from time 0 so tails of a grid reuse the same path.
  const auto origin = static_cast<std::int64_t>(std::llround(grid.t0() / grid.dt()));
  double sum = 0.0;
  for (int j = 0; j < r; ++j) {
    const auto fine = static_cast<std::uint64_t>((origin + step) * r + j);
    sum += counter_normal(noise.seed, path, fine * static_cast<std::uint64_t>(noise.dim) + k);
  }
  return scale * sum;
}

IncrementEnsemble sample_increments(const NoiseModel& noise, const TimeGrid& grid, int paths) {
  if (paths < 1) throw Error("sample_increments: need at least one path");
  if (noise.dim < 1 || noise.dim > kMaxDim) throw Error("sample_increments: bad noise dimension");
  IncrementEnsemble e;
  e.paths = paths;
  e.steps = grid.steps();
  e.dim = noise.dim;
  e.data.resize(static_cast<std::size_t>(paths) * e.steps * e.dim);
  std::size_t idx = 0;
  for (int p = 0; p < paths; ++p)
    for (int i = 0; i < e.steps; ++i)
      for (int k = 0; k < e.dim; ++k) e.data[idx++] = brownian_increment(noise, grid, p, i, k);
  return e;
}

}  // namespace pmpdp
