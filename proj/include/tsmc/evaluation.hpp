#ifndef TSMC_EVALUATION_HPP
#define TSMC_EVALUATION_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "tsmc/core.hpp"
#include "tsmc/model.hpp"
#include "tsmc/smc.hpp"
#include "tsmc/tsmc.hpp"

namespace tsmc {

inline double bias(const std::vector<double>& samples, double theta_star) {
  if (samples.empty()) throw ContractViolationError("bias: empty samples");
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) /
                      static_cast<double>(samples.size());
  return std::abs(mean - theta_star);
}

inline double mse(const std::vector<double>& samples, double theta_star) {
  if (samples.empty()) throw ContractViolationError("mse: empty samples");
  double acc = 0.0;
  for (double s : samples) acc += (s - theta_star) * (s - theta_star);
  return acc / static_cast<double>(samples.size());
}

inline double stdev(const std::vector<double>& samples) {
  if (samples.size() < 2) throw InsufficientSamplesError("stdev: need at least 2 samples");
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) /
                      static_cast<double>(samples.size());
  double acc = 0.0;
  for (double s : samples) acc += (s - mean) * (s - mean);
  return std::sqrt(acc / static_cast<double>(samples.size() - 1));
}

/// 1 iff theta_star lies in the marginal HPD region at the given level.
inline int coverage_hit(const std::vector<double>& samples, double theta_star,
                        double level = 0.9) {
  return region_contains(hpd_region(samples, level), theta_star) ? 1 : 0;
}

struct ClppdOptions {
  /// Default takes the log of the posterior-mean density per point; the
  /// alternative averages the log-densities instead.
  bool average_of_logs = false;
};

/// Computed log pointwise predictive density of the posterior particles
/// on the target data.  Weighted particle systems are handled through
/// their normalized weights.
inline double clppd(const Dataset& target, const ParticleSystem& posterior,
                    const ModelSpec& model, const ClppdOptions& opts = {},
                    int* degenerate_points = nullptr) {
  posterior.validate();
  const Vector log_w = posterior.log_weights.normalized().values;
  double total = 0.0;
  for (const Observation& obs : target.observations) {
    Vector terms(posterior.count());
    for (Eigen::Index j = 0; j < posterior.count(); ++j)
      terms[j] = model.pointwise_log_lik(obs, posterior.particles.row(j).transpose());
    if (opts.average_of_logs) {
      total += (log_w.array().exp() * terms.array()).sum();
      continue;
    }
    try {
      total += log_sum_exp(log_w + terms);
    } catch (const DegenerateWeightsError&) {
      if (degenerate_points != nullptr) ++*degenerate_points;
      total += -std::numeric_limits<double>::infinity();
    }
  }
  return total;
}

struct LooOptions {
  MutationConfig refresh{.initial_steps = 3, .delta = 1.0, .max_steps = 200};
  /// When the fitted posterior does not involve the target data (the
  /// source-only method), the leave-one-out weights are uniform and LOO
  /// reduces to the in-sample predictive score.
  bool posterior_uses_target = true;
  double min_ess = 10.0;
};

/// Importance-sampled leave-one-out predictive score.  For each held
/// out point the particles are reweighted by 1/p(y_i|theta), stratified
/// resampled, refreshed toward the leave-one-out posterior, and the
/// held-out log density is the log of the mean pointwise likelihood.
///
/// extra_log_density carries everything in the fitted posterior beyond
/// the target-likelihood terms (prior, any source contribution).
inline double loo(const Dataset& target, const ParticleSystem& posterior, const ModelSpec& model,
                  const std::function<double(const Vector&)>& extra_log_density,
                  const LooOptions& opts, RngStream& rng, int* low_ess_count = nullptr) {
  posterior.validate();
  if (!opts.posterior_uses_target) return clppd(target, posterior, model);

  const Eigen::Index n_obs = static_cast<Eigen::Index>(target.observations.size());
  const Eigen::Index n = posterior.count();
  const Vector log_w = posterior.log_weights.normalized().values;

  // Pointwise log-likelihood matrix, reused for the weights of every fold.
  Matrix pll(n, n_obs);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Vector theta = posterior.particles.row(j).transpose();
    for (Eigen::Index i = 0; i < n_obs; ++i)
      pll(j, i) = model.pointwise_log_lik(target.observations[static_cast<std::size_t>(i)], theta);
  }

  double total = 0.0;
  for (Eigen::Index i = 0; i < n_obs; ++i) {
    Vector lw = log_w - pll.col(i);
    const double lse = log_sum_exp(lw);
    lw.array() -= lse;
    const Vector w = lw.array().exp();
    if (low_ess_count != nullptr && ess(w) < opts.min_ess) ++*low_ess_count;

    RngStream fold_rng = rng.split(static_cast<std::uint64_t>(i));
    RngStream resample_rng = fold_rng.split(0);
    const auto idx = stratified_resample(w, n, resample_rng);
    Matrix resampled(n, posterior.dim());
    for (Eigen::Index j = 0; j < n; ++j)
      resampled.row(j) = posterior.particles.row(idx[static_cast<std::size_t>(j)]);
    ParticleSystem fold{std::move(resampled), LogWeights::uniform(n)};

    auto loo_target = [&](const Vector& theta) {
      return extra_log_density(theta) + model.log_likelihood(target, theta) -
             model.pointwise_log_lik(target.observations[static_cast<std::size_t>(i)], theta);
    };
    RngStream refresh_rng = fold_rng.split(1);
    fold = mcmc_mutate(fold, loo_target, opts.refresh, refresh_rng);

    Vector held_out(n);
    for (Eigen::Index j = 0; j < n; ++j)
      held_out[j] = model.pointwise_log_lik(target.observations[static_cast<std::size_t>(i)],
                                            fold.particles.row(j).transpose());
    total += log_sum_exp(held_out) - std::log(static_cast<double>(n));
  }
  return total;
}

/// LOO for the normalized power prior joint samples: each particle
/// keeps its own alpha, and the refresh targets
/// p(y_{T,-i}|theta) p(y_S|theta)^alpha_j pi(theta) with alpha_j fixed.
inline double loo_npp(const Dataset& target, const NppResult& npp, const Dataset& source,
                      const ModelSpec& model, const LooOptions& opts, RngStream& rng,
                      int* low_ess_count = nullptr) {
  const Eigen::Index n = npp.joint_theta.rows();
  const Eigen::Index n_obs = static_cast<Eigen::Index>(target.observations.size());

  Matrix pll(n, n_obs);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Vector theta = npp.joint_theta.row(j).transpose();
    for (Eigen::Index i = 0; i < n_obs; ++i)
      pll(j, i) = model.pointwise_log_lik(target.observations[static_cast<std::size_t>(i)], theta);
  }

  double total = 0.0;
  for (Eigen::Index i = 0; i < n_obs; ++i) {
    Vector lw = -pll.col(i).array() - std::log(static_cast<double>(n));
    const double lse = log_sum_exp(lw);
    lw.array() -= lse;
    const Vector w = lw.array().exp();
    if (low_ess_count != nullptr && ess(w) < opts.min_ess) ++*low_ess_count;

    RngStream fold_rng = rng.split(static_cast<std::uint64_t>(i));
    RngStream resample_rng = fold_rng.split(0);
    const auto idx = stratified_resample(w, n, resample_rng);
    Matrix theta_rs(n, npp.joint_theta.cols());
    Vector alpha_rs(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      theta_rs.row(j) = npp.joint_theta.row(idx[static_cast<std::size_t>(j)]);
      alpha_rs[j] = npp.joint_alpha[idx[static_cast<std::size_t>(j)]];
    }
    ParticleSystem fold{std::move(theta_rs), LogWeights::uniform(n)};

    auto loo_target = [&](Eigen::Index j, const Vector& theta) {
      double ld = model.log_prior(theta) + model.log_likelihood(target, theta) -
                  model.pointwise_log_lik(target.observations[static_cast<std::size_t>(i)], theta);
      if (alpha_rs[j] != 0.0) ld += alpha_rs[j] * model.log_likelihood(source, theta);
      return ld;
    };
    RngStream refresh_rng = fold_rng.split(1);
    fold = mcmc_mutate_conditional(fold, loo_target, opts.refresh, refresh_rng);

    Vector held_out(n);
    for (Eigen::Index j = 0; j < n; ++j)
      held_out[j] = model.pointwise_log_lik(target.observations[static_cast<std::size_t>(i)],
                                            fold.particles.row(j).transpose());
    total += log_sum_exp(held_out) - std::log(static_cast<double>(n));
  }
  return total;
}

/// Average ranks, 1 = best; ties share the mean of their positions and
/// non-finite values rank behind every finite one.
inline std::vector<double> rank_methods(const std::vector<double>& values, bool higher_is_better) {
  const std::size_t m = values.size();
  if (m < 2) throw ContractViolationError("rank_methods: need at least 2 methods");

  auto score = [&](std::size_t i) {
    if (!std::isfinite(values[i])) return -std::numeric_limits<double>::infinity();
    return higher_is_better ? values[i] : -values[i];
  };
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score(a) > score(b); });

  std::vector<double> ranks(m, 0.0);
  std::size_t pos = 0;
  while (pos < m) {
    std::size_t end = pos;
    while (end + 1 < m && score(order[end + 1]) == score(order[pos])) ++end;
    const double avg = 0.5 * static_cast<double>(pos + end) + 1.0;
    for (std::size_t k = pos; k <= end; ++k) ranks[order[k]] = avg;
    pos = end + 1;
  }
  return ranks;
}

}  // namespace tsmc

#endif  // TSMC_EVALUATION_HPP
