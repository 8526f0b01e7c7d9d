#ifndef TSMC_CORE_HPP
#define TSMC_CORE_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "tsmc/rng.hpp"

namespace tsmc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct DegenerateWeightsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CovarianceDegenerateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractViolationError : std::logic_error {
  using std::logic_error::logic_error;
};
struct InsufficientSamplesError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline double log_sum_exp(const Vector& values) {
  if (values.size() == 0) throw ContractViolationError("log_sum_exp: empty input");
  const double m = values.maxCoeff();
  if (!std::isfinite(m)) {
    if (m == -std::numeric_limits<double>::infinity())
      throw DegenerateWeightsError("log_sum_exp: all entries are -inf");
    throw ContractViolationError("log_sum_exp: non-finite entry");
  }
  double s = 0.0;
  for (Eigen::Index i = 0; i < values.size(); ++i) s += std::exp(values[i] - m);
  return m + std::log(s);
}

/// Log-weights over a particle population.  Normalization is shift
/// invariant and done through log_sum_exp.
struct LogWeights {
  Vector values;

  Eigen::Index size() const { return values.size(); }

  LogWeights normalized() const {
    const double lse = log_sum_exp(values);
    return LogWeights{values.array() - lse};
  }

  /// Linear-space weights; only meaningful after normalization.
  Vector weights() const { return values.array().exp(); }

  static LogWeights uniform(Eigen::Index n) {
    return LogWeights{Vector::Constant(n, -std::log(static_cast<double>(n)))};
  }
};

/// N x d particle matrix with attached log-weights.
struct ParticleSystem {
  Matrix particles;  // rows are parameter vectors in unconstrained space
  LogWeights log_weights;

  Eigen::Index count() const { return particles.rows(); }
  Eigen::Index dim() const { return particles.cols(); }

  void validate() const {
    if (count() < 2 || dim() < 1)
      throw ContractViolationError("ParticleSystem: need N >= 2 and d >= 1");
    if (count() != log_weights.size())
      throw ContractViolationError("ParticleSystem: row count != weight count");
    if (!particles.allFinite())
      throw ContractViolationError("ParticleSystem: non-finite particle entry");
  }
};

/// Effective sample size 1 / sum w_i^2 of normalized weights.
inline double ess(const Vector& weights) {
  const double total = weights.sum();
  if (std::abs(total - 1.0) > 1e-8)
    throw ContractViolationError("ess: weights are not normalized");
  return 1.0 / weights.array().square().sum();
}

inline double ess(const LogWeights& lw) { return ess(Vector(lw.weights())); }

/// Stratified resampling: one uniform draw per stratum [j/count, (j+1)/count).
inline std::vector<Eigen::Index> stratified_resample(const Vector& weights, Eigen::Index count,
                                                     RngStream& rng) {
  const double total = weights.sum();
  if (std::abs(total - 1.0) > 1e-8)
    throw ContractViolationError("stratified_resample: weights are not normalized");
  if (count < 1) throw ContractViolationError("stratified_resample: count must be >= 1");

  std::vector<Eigen::Index> indices(static_cast<std::size_t>(count));
  Eigen::Index i = 0;
  double cum = weights[0];
  for (Eigen::Index j = 0; j < count; ++j) {
    const double u = (static_cast<double>(j) + rng.uniform()) / static_cast<double>(count);
    while (u > cum && i + 1 < weights.size()) cum += weights[++i];
    indices[static_cast<std::size_t>(j)] = i;
  }
  return indices;
}

namespace detail {

inline double base_jitter(const Matrix& cov) {
  const double mean_diag = cov.diagonal().mean();
  return 1e-8 * (mean_diag > 0.0 ? mean_diag : 1.0);
}

/// Lower Cholesky factor, adding jitter to the diagonal and doubling it
/// up to six times on factorization failure.
inline Matrix cholesky_with_jitter(const Matrix& cov) {
  double jitter = base_jitter(cov);
  Matrix work = cov;
  work.diagonal().array() += jitter;
  for (int attempt = 0; attempt <= 6; ++attempt) {
    Eigen::LLT<Matrix> llt(work);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    jitter *= 2.0;
    work = cov;
    work.diagonal().array() += jitter;
  }
  throw CovarianceDegenerateError("cholesky_with_jitter: matrix not positive definite after jitter");
}

}  // namespace detail

/// Weighted mean and (unbiased) covariance of a particle system, with
/// the diagonal jitter already applied so the result factorizes.
inline std::pair<Vector, Matrix> weighted_mean_cov(const ParticleSystem& system) {
  system.validate();
  const Vector w = system.log_weights.normalized().weights();
  if (ess(w) < 2.0) throw ContractViolationError("weighted_mean_cov: ESS < 2");

  const Vector mean = system.particles.transpose() * w;
  const Eigen::Index d = system.dim();
  Matrix cov = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < system.count(); ++i) {
    const Vector c = system.particles.row(i).transpose() - mean;
    cov.noalias() += w[i] * (c * c.transpose());
  }
  const double w2 = w.array().square().sum();
  cov /= (1.0 - w2);  // matches the unbiased estimator under uniform weights

  cov.diagonal().array() += detail::base_jitter(cov);
  detail::cholesky_with_jitter(cov);  // throws if degenerate beyond repair
  return {mean, cov};
}

/// One multivariate normal draw: mean + L z.
inline Vector mvn_sample(const Vector& mean, const Matrix& cov, RngStream& rng) {
  const Matrix chol = detail::cholesky_with_jitter(cov);
  Vector z(mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  return mean + chol * z;
}

struct Interval {
  double lo;
  double hi;
  bool contains(double x) const { return x >= lo && x <= hi; }
};

/// Highest posterior density region from a Gaussian KDE (Silverman
/// bandwidth, 512-point grid): the set where the estimated density is
/// at least the (1 - level) quantile of the density at the samples.
inline std::vector<Interval> hpd_region(const std::vector<double>& samples, double level) {
  if (samples.size() < 100)
    throw InsufficientSamplesError("hpd_region: need at least 100 samples");
  if (!(level > 0.0 && level < 1.0))
    throw ContractViolationError("hpd_region: level must be in (0,1)");

  const std::size_t n = samples.size();
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double s : samples) var += (s - mean) * (s - mean);
  var /= static_cast<double>(n - 1);
  const double sd = std::sqrt(var);

  if (sd == 0.0) {
    const double eps = std::max(1e-12, std::abs(samples[0]) * 1e-12);
    return {Interval{samples[0] - eps, samples[0] + eps}};
  }

  const double h = 1.06 * sd * std::pow(static_cast<double>(n), -0.2);
  const auto [mn_it, mx_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *mn_it - 3.0 * h;
  const double hi = *mx_it + 3.0 * h;

  constexpr int kGrid = 512;
  const double step = (hi - lo) / (kGrid - 1);
  const double inv_nh = 1.0 / (static_cast<double>(n) * h * std::sqrt(2.0 * 3.14159265358979323846));

  std::vector<double> grid_density(kGrid, 0.0);
  for (double s : samples) {
    // Kernel support truncated at 8 bandwidths; error is below 1e-14.
    const int g_lo = std::max(0, static_cast<int>(std::floor((s - 8.0 * h - lo) / step)));
    const int g_hi = std::min(kGrid - 1, static_cast<int>(std::ceil((s + 8.0 * h - lo) / step)));
    for (int g = g_lo; g <= g_hi; ++g) {
      const double z = (lo + step * g - s) / h;
      grid_density[static_cast<std::size_t>(g)] += std::exp(-0.5 * z * z);
    }
  }
  for (double& v : grid_density) v *= inv_nh;

  auto kde = [&](double x) {
    const double t = std::clamp((x - lo) / step, 0.0, static_cast<double>(kGrid - 1));
    const std::size_t g = static_cast<std::size_t>(t);
    if (g + 1 >= grid_density.size()) return grid_density.back();
    const double frac = t - static_cast<double>(g);
    return grid_density[g] * (1.0 - frac) + grid_density[g + 1] * frac;
  };

  std::vector<double> at_samples(n);
  for (std::size_t i = 0; i < n; ++i) at_samples[i] = kde(samples[i]);
  std::sort(at_samples.begin(), at_samples.end());
  const double pos = (1.0 - level) * static_cast<double>(n - 1);
  const std::size_t j = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(j);
  const double fq = j + 1 < n ? at_samples[j] * (1.0 - frac) + at_samples[j + 1] * frac
                              : at_samples[j];

  std::vector<Interval> region;
  bool open = false;
  double start = 0.0;
  double last = lo;
  for (int g = 0; g < kGrid; ++g) {
    const double x = lo + step * g;
    const bool above = kde(x) >= fq;
    if (above && !open) {
      open = true;
      start = x;
    } else if (!above && open) {
      open = false;
      region.push_back(Interval{start, last});
    }
    last = x;
  }
  if (open) region.push_back(Interval{start, hi});
  return region;
}

inline bool region_contains(const std::vector<Interval>& region, double x) {
  return std::any_of(region.begin(), region.end(),
                     [&](const Interval& iv) { return iv.contains(x); });
}

}  // namespace tsmc

#endif  // TSMC_CORE_HPP
