#ifndef TSMC_SMC_HPP
#define TSMC_SMC_HPP

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "tsmc/core.hpp"
#include "tsmc/model.hpp"
#include "tsmc/rng.hpp"

namespace tsmc {

/// Tempered posterior p(y_T|theta)^gamma p(y_S|theta)^alpha pi(theta).
/// Either dataset pointer may be null when its temperature is zero.
struct AnnealedTarget {
  const ModelSpec* model = nullptr;
  const Dataset* target_data = nullptr;
  const Dataset* source_data = nullptr;
  double gamma = 0.0;
  double alpha = 0.0;

  double log_density(const Vector& theta) const {
    double ld = model->log_prior(theta);
    if (gamma != 0.0 && target_data != nullptr)
      ld += gamma * model->log_likelihood(*target_data, theta);
    if (alpha != 0.0 && source_data != nullptr)
      ld += alpha * model->log_likelihood(*source_data, theta);
    return ld;
  }
};

struct MutationConfig {
  int initial_steps = 5;  // S in the pilot loop, must be >= 2
  double delta = 1.0;     // additive acceptance count, keeps p > 0
  int max_steps = 200;
};

struct MutationDiagnostics {
  int total_steps = 0;
  double pilot_acceptance = 0.0;
  bool clamped = false;
};

/// Total step count R = max(ceil(log 0.01 / log(1-p)), S) from the
/// pilot acceptance rate p; p >= 1 degenerates to S.
inline int mutation_step_count(double p, int initial_steps) {
  if (p >= 1.0) return initial_steps;
  return std::max(static_cast<int>(std::ceil(std::log(0.01) / std::log1p(-p))), initial_steps);
}

/// Random-walk Metropolis rejuvenation with a self-tuned step count:
/// S-1 pilot sweeps estimate the per-step acceptance rate p, then each
/// particle is continued to R = max(ceil(log 0.01 / log(1-p)), S) total
/// steps.  The proposal covariance is the particle covariance, computed
/// once at entry.  Targets may differ per particle (conditional case).
inline ParticleSystem mcmc_mutate_conditional(
    const ParticleSystem& system,
    const std::function<double(Eigen::Index, const Vector&)>& log_target,
    const MutationConfig& config, RngStream& rng, MutationDiagnostics* diag = nullptr) {
  system.validate();
  if (config.initial_steps < 2)
    throw ContractViolationError("mcmc_mutate: initial_steps must be >= 2");

  const Eigen::Index n = system.count();
  const auto [mean, cov] = weighted_mean_cov(system);
  const Matrix chol = detail::cholesky_with_jitter(cov);

  Matrix particles = system.particles;
  Vector current_ld(n);
  for (Eigen::Index i = 0; i < n; ++i)
    current_ld[i] = log_target(i, particles.row(i).transpose());

  std::vector<RngStream> streams;
  streams.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    streams.push_back(rng.split(static_cast<std::uint64_t>(i)));

  Vector z(system.dim());
  auto one_step = [&](Eigen::Index i, RngStream& stream) {
    for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = stream.normal();
    const Vector proposal = particles.row(i).transpose() + chol * z;
    const double ld = log_target(i, proposal);
    const double u = stream.uniform();
    if (ld - current_ld[i] > std::log(u)) {
      particles.row(i) = proposal.transpose();
      current_ld[i] = ld;
      return true;
    }
    return false;
  };

  const int pilot_steps = config.initial_steps - 1;
  long accepted = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < pilot_steps; ++k)
      if (one_step(i, streams[static_cast<std::size_t>(i)])) ++accepted;

  const double p = (static_cast<double>(accepted) + config.delta) /
                   (static_cast<double>(pilot_steps) * static_cast<double>(n));
  int total = mutation_step_count(p, config.initial_steps);
  bool clamped = false;
  if (total > config.max_steps) {
    total = config.max_steps;
    clamped = true;
  }

  // Continuation sweeps k = S..R, one more pass per particle per k.
  const int extra = total - config.initial_steps + 1;
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < extra; ++k) one_step(i, streams[static_cast<std::size_t>(i)]);

  if (diag != nullptr) {
    diag->total_steps = total;
    diag->pilot_acceptance = p;
    diag->clamped = clamped;
  }
  return ParticleSystem{std::move(particles), LogWeights::uniform(n)};
}

inline ParticleSystem mcmc_mutate(const ParticleSystem& system,
                                  const std::function<double(const Vector&)>& log_target,
                                  const MutationConfig& config, RngStream& rng,
                                  MutationDiagnostics* diag = nullptr) {
  return mcmc_mutate_conditional(
      system, [&](Eigen::Index, const Vector& theta) { return log_target(theta); }, config, rng,
      diag);
}

inline ParticleSystem mcmc_mutate(const ParticleSystem& system, const AnnealedTarget& target,
                                  const MutationConfig& config, RngStream& rng,
                                  MutationDiagnostics* diag = nullptr) {
  return mcmc_mutate(
      system, [&](const Vector& theta) { return target.log_density(theta); }, config, rng, diag);
}

/// Largest temperature in [lower, 1] whose ESS meets the target, found
/// by bisection.  ess_at must be monotone non-increasing.
inline double bisect_temperature(const std::function<double(double)>& ess_at, double lower,
                                 double target_ess, double tol = 1e-8, int max_iter = 100) {
  if (ess_at(1.0) >= target_ess) return 1.0;
  double lo = lower;
  double hi = 1.0;
  for (int it = 0; it < max_iter && hi - lo > tol; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (ess_at(mid) >= target_ess)
      lo = mid;
    else
      hi = mid;
  }
  return lo > lower ? lo : lower + tol;
}

/// ESS after reweighting the system by exp((tau - lower) * incr).
inline double ess_after_reweight(const LogWeights& normalized, const Vector& incremental_log_lik,
                                 double delta_temp) {
  Vector lw = normalized.values + delta_temp * incremental_log_lik;
  const double lse = log_sum_exp(lw);
  lw.array() -= lse;
  return 1.0 / lw.array().exp().square().sum();
}

inline double next_temperature(const ParticleSystem& system, const Vector& incremental_log_lik,
                               double lower, double target_ess) {
  if (!(lower >= 0.0 && lower < 1.0))
    throw ContractViolationError("next_temperature: lower must be in [0,1)");
  const LogWeights normalized = system.log_weights.normalized();
  return bisect_temperature(
      [&](double tau) { return ess_after_reweight(normalized, incremental_log_lik, tau - lower); },
      lower, target_ess);
}

/// Weight and evidence update for a temperature increment: new log
/// weights are the old normalized log weights plus delta * incr, and
/// the log evidence gains log sum_i W_i exp(delta * incr_i).
inline std::pair<LogWeights, double> reweight_and_evidence(const LogWeights& weights,
                                                           const Vector& incremental_log_lik,
                                                           double delta_temp,
                                                           double running_log_evidence) {
  if (delta_temp < 0.0)
    throw ContractViolationError("reweight_and_evidence: delta_temp must be >= 0");
  const LogWeights normalized = weights.normalized();
  Vector new_lw = normalized.values + delta_temp * incremental_log_lik;
  const double increment = log_sum_exp(new_lw);  // throws on fully degenerate weights
  return {LogWeights{std::move(new_lw)}, running_log_evidence + increment};
}

struct SmcConfig {
  MutationConfig mutation;
  double ess_fraction = 0.5;  // adaptive tempering target as a fraction of N
  double bisect_tol = 1e-8;
};

enum class AnnealPhase { target_gamma, source_alpha };

struct AnnealStep {
  double temperature = 0.0;
  ParticleSystem snapshot;  // equally weighted, post-mutation
  double log_evidence = 0.0;
};

struct AnnealResult {
  std::vector<AnnealStep> steps;
  ParticleSystem final_system;
  double log_evidence = 0.0;
};

inline ParticleSystem resample_system(const ParticleSystem& system, RngStream& rng) {
  const Vector w = system.log_weights.normalized().weights();
  const auto idx = stratified_resample(w, system.count(), rng);
  Matrix resampled(system.count(), system.dim());
  for (Eigen::Index i = 0; i < system.count(); ++i)
    resampled.row(i) = system.particles.row(idx[static_cast<std::size_t>(i)]);
  return ParticleSystem{std::move(resampled), LogWeights::uniform(system.count())};
}

/// Single-chain adaptive anneal of one temperature from `start` to 1,
/// holding the other fixed.  Each step selects the next temperature at
/// the ESS target, updates weights and evidence, resamples, mutates,
/// and stores the equally weighted snapshot.
inline AnnealResult anneal_phase(ParticleSystem system, const ModelSpec& model,
                                 const Dataset* target_data, const Dataset* source_data,
                                 AnnealPhase phase, double fixed_other, double start,
                                 const SmcConfig& config, RngStream& rng,
                                 double initial_log_evidence = 0.0) {
  system.validate();
  const Dataset* moving =
      phase == AnnealPhase::target_gamma ? target_data : source_data;
  if (moving == nullptr)
    throw ContractViolationError("anneal_phase: moving dataset missing");

  AnnealResult result;
  result.log_evidence = initial_log_evidence;
  double temp = start;
  const double target_ess = config.ess_fraction * static_cast<double>(system.count());

  int step_index = 0;
  while (temp < 1.0) {
    const Vector incr = model.log_likelihood_all(*moving, system.particles);
    const double next = next_temperature(system, incr, temp, target_ess);
    const double delta = next - temp;

    auto [new_weights, new_evidence] =
        reweight_and_evidence(system.log_weights, incr, delta, result.log_evidence);
    system.log_weights = new_weights.normalized();
    result.log_evidence = new_evidence;

    RngStream resample_rng = rng.split(2 * static_cast<std::uint64_t>(step_index));
    system = resample_system(system, resample_rng);

    AnnealedTarget target;
    target.model = &model;
    target.target_data = target_data;
    target.source_data = source_data;
    if (phase == AnnealPhase::target_gamma) {
      target.gamma = next;
      target.alpha = fixed_other;
    } else {
      target.gamma = fixed_other;
      target.alpha = next;
    }
    RngStream mutate_rng = rng.split(2 * static_cast<std::uint64_t>(step_index) + 1);
    system = mcmc_mutate(system, target, config.mutation, mutate_rng);

    result.steps.push_back(AnnealStep{next, system, result.log_evidence});
    temp = next;
    ++step_index;
  }
  result.final_system = system;
  return result;
}

/// Plain posterior fit (gamma annealed to 1, no source term); the
/// workhorse behind the target-only, source-only and oracle methods.
inline AnnealResult fit_posterior(const ModelSpec& model, const Dataset& data, Eigen::Index n_particles,
                                  const SmcConfig& config, RngStream& rng) {
  RngStream init_rng = rng.split(0x5EED);
  Matrix particles(n_particles, model.dimension);
  for (Eigen::Index i = 0; i < n_particles; ++i)
    particles.row(i) = model.sample_prior(init_rng).transpose();
  ParticleSystem system{std::move(particles), LogWeights::uniform(n_particles)};
  RngStream phase_rng = rng.split(0xA11EA1);
  return anneal_phase(std::move(system), model, &data, nullptr, AnnealPhase::target_gamma, 0.0,
                      0.0, config, phase_rng);
}

}  // namespace tsmc

#endif  // TSMC_SMC_HPP
