#ifndef TSMC_TSMC_HPP
#define TSMC_TSMC_HPP

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tsmc/core.hpp"
#include "tsmc/model.hpp"
#include "tsmc/rng.hpp"
#include "tsmc/smc.hpp"

namespace tsmc {

/// Equally weighted particle snapshot at one alpha rung, with the
/// per-particle source log-likelihood cached so importance-sampling
/// queries need no likelihood re-evaluation.
struct TsmcSnapshot {
  Matrix particles;
  Vector source_log_lik;
};

/// Output of the dual-temperature run: the full (gamma, alpha) ladder,
/// both chains' snapshots at every alpha rung (chain 1 carries the
/// target data, chain 0 ignores it), and the running log normalizing
/// constants log C_S and log C_{T,S}.
struct TsmcTrace {
  std::vector<double> gamma_ladder;  // gamma_0 .. gamma_{T*}
  std::vector<double> alpha_ladder;  // alpha_0 .. alpha_{T*}

  std::vector<double> alpha_rungs;  // stored alpha values, alpha_T = 0 .. 1
  std::vector<TsmcSnapshot> chain0;
  std::vector<TsmcSnapshot> chain1;
  std::vector<double> logC0;  // log C_S(alpha_t)
  std::vector<double> logC1;  // log C_{T,S}(alpha_t)

  std::vector<double> phase2_min_ess;  // realized pre-resampling min-chain ESS per move

  std::string model_id;
  std::uint64_t root_seed = 0;

  // runtime-only references, not serialized
  const ModelSpec* model = nullptr;
  const Dataset* target_data = nullptr;
  const Dataset* source_data = nullptr;

  double log_z_target() const { return logC1.front(); }
  Eigen::Index particle_count() const { return chain1.front().particles.rows(); }
};

struct TsmcConfig {
  SmcConfig smc;
};

/// Transfer SMC: phase 1 anneals gamma 0 -> 1 on chain 1 alone; phase 2
/// anneals alpha 0 -> 1 on both chains in lockstep, selecting each rung
/// so the smaller of the two chains' ESS stays at N/2.
inline TsmcTrace run_tsmc(const ModelSpec& model, const Dataset& target, const Dataset& source,
                          Eigen::Index n_particles, const TsmcConfig& config, RngStream& rng,
                          std::uint64_t root_seed = 0) {
  if (n_particles < 100) throw ContractViolationError("run_tsmc: N must be >= 100");
  if (target.observations.empty() || source.observations.empty())
    throw ContractViolationError("run_tsmc: datasets must be non-empty");

  TsmcTrace trace;
  trace.model_id = model.id;
  trace.root_seed = root_seed;
  trace.model = &model;
  trace.target_data = &target;
  trace.source_data = &source;

  RngStream init_rng = rng.split(1);
  Matrix prior0(n_particles, model.dimension);
  Matrix prior1(n_particles, model.dimension);
  for (Eigen::Index i = 0; i < n_particles; ++i) prior1.row(i) = model.sample_prior(init_rng).transpose();
  for (Eigen::Index i = 0; i < n_particles; ++i) prior0.row(i) = model.sample_prior(init_rng).transpose();

  // Phase 1: chain 1 anneals the target likelihood; chain 0 stays at the prior.
  RngStream phase1_rng = rng.split(2);
  AnnealResult phase1 =
      anneal_phase(ParticleSystem{prior1, LogWeights::uniform(n_particles)}, model, &target,
                   &source, AnnealPhase::target_gamma, 0.0, 0.0, config.smc, phase1_rng);

  trace.gamma_ladder.push_back(0.0);
  trace.alpha_ladder.push_back(0.0);
  for (const AnnealStep& step : phase1.steps) {
    trace.gamma_ladder.push_back(step.temperature);
    trace.alpha_ladder.push_back(0.0);
  }

  ParticleSystem chain1 = phase1.final_system;
  ParticleSystem chain0{prior0, LogWeights::uniform(n_particles)};

  Vector srcll1 = model.log_likelihood_all(source, chain1.particles);
  Vector srcll0 = model.log_likelihood_all(source, chain0.particles);

  trace.alpha_rungs.push_back(0.0);
  trace.chain1.push_back(TsmcSnapshot{chain1.particles, srcll1});
  trace.chain0.push_back(TsmcSnapshot{chain0.particles, srcll0});
  trace.logC1.push_back(phase1.log_evidence);  // C_1(0) = Z_T
  trace.logC0.push_back(0.0);                  // C_0(0) = 1

  const double target_ess = config.smc.ess_fraction * static_cast<double>(n_particles);
  double alpha = 0.0;
  double logC0 = 0.0;
  double logC1 = phase1.log_evidence;

  RngStream phase2_rng = rng.split(3);
  int step_index = 0;
  while (alpha < 1.0) {
    const LogWeights norm0 = chain0.log_weights.normalized();
    const LogWeights norm1 = chain1.log_weights.normalized();
    auto min_ess = [&](double a) {
      const double d = a - alpha;
      return std::min(ess_after_reweight(norm0, srcll0, d), ess_after_reweight(norm1, srcll1, d));
    };
    const double next = bisect_temperature(min_ess, alpha, target_ess, config.smc.bisect_tol);
    const double delta = next - alpha;
    trace.phase2_min_ess.push_back(min_ess(next));

    for (int k = 0; k < 2; ++k) {
      ParticleSystem& chain = k == 0 ? chain0 : chain1;
      const Vector& srcll = k == 0 ? srcll0 : srcll1;
      double& logC = k == 0 ? logC0 : logC1;
      try {
        auto [new_weights, new_logC] = reweight_and_evidence(chain.log_weights, srcll, delta, logC);
        chain.log_weights = new_weights.normalized();
        logC = new_logC;
      } catch (const DegenerateWeightsError&) {
        throw DegenerateWeightsError("run_tsmc: degenerate weights in chain " + std::to_string(k) +
                                     " at alpha = " + std::to_string(next));
      }
      RngStream resample_rng = phase2_rng.split(4 * static_cast<std::uint64_t>(step_index) + 2 * k);
      chain = resample_system(chain, resample_rng);

      AnnealedTarget tgt;
      tgt.model = &model;
      tgt.target_data = &target;
      tgt.source_data = &source;
      tgt.gamma = k == 0 ? 0.0 : 1.0;
      tgt.alpha = next;
      RngStream mutate_rng = phase2_rng.split(4 * static_cast<std::uint64_t>(step_index) + 2 * k + 1);
      chain = mcmc_mutate(chain, tgt, config.smc.mutation, mutate_rng);
    }

    srcll0 = model.log_likelihood_all(source, chain0.particles);
    srcll1 = model.log_likelihood_all(source, chain1.particles);

    trace.alpha_rungs.push_back(next);
    trace.chain0.push_back(TsmcSnapshot{chain0.particles, srcll0});
    trace.chain1.push_back(TsmcSnapshot{chain1.particles, srcll1});
    trace.logC0.push_back(logC0);
    trace.logC1.push_back(logC1);
    trace.gamma_ladder.push_back(1.0);
    trace.alpha_ladder.push_back(next);

    alpha = next;
    ++step_index;
  }
  return trace;
}

struct IsUpdateResult {
  ParticleSystem chain1;  // weighted, approximating pi(theta | y_T, y_S, alpha)
  double logC0 = 0.0;     // log C_S(alpha)
  double logC1 = 0.0;     // log C_{T,S}(alpha)
};

/// One importance-sampling step from the nearest stored rung below
/// alpha_is.  The snapshot weights are uniform, so the reweight is
/// exp((alpha_is - alpha_h) * source log-lik) and each constant gains
/// the log of the mean increment.
inline IsUpdateResult is_update(const TsmcTrace& trace, double alpha_is) {
  if (!(alpha_is >= 0.0 && alpha_is <= 1.0))
    throw ContractViolationError("is_update: alpha must be in [0,1]");
  std::size_t h = 0;
  for (std::size_t j = 0; j < trace.alpha_rungs.size(); ++j)
    if (trace.alpha_rungs[j] <= alpha_is) h = j;
  const double delta = alpha_is - trace.alpha_rungs[h];

  const Eigen::Index n = trace.chain1[h].particles.rows();
  const double log_uniform = -std::log(static_cast<double>(n));

  IsUpdateResult result;
  Vector lw1 = Vector::Constant(n, log_uniform) + delta * trace.chain1[h].source_log_lik;
  Vector lw0 = Vector::Constant(n, log_uniform) + delta * trace.chain0[h].source_log_lik;
  result.logC1 = trace.logC1[h] + log_sum_exp(lw1);
  result.logC0 = trace.logC0[h] + log_sum_exp(lw0);
  result.chain1 = ParticleSystem{trace.chain1[h].particles, LogWeights{lw1}.normalized()};
  return result;
}

struct FppResult {
  double alpha_star = 0.0;
  ParticleSystem posterior;  // weighted particles at alpha_star
  std::vector<std::pair<double, double>> logC_T_grid;  // (alpha, log C_T(alpha))
};

/// Model-evidence grid search for the fixed power prior: evaluate
/// log C_T = log C_{T,S} - log C_S over the stored rungs united with a
/// uniform grid of P intervals, and take the argmax (ties toward the
/// smallest alpha).
inline FppResult grid_search_me(const TsmcTrace& trace, int grid_points) {
  if (grid_points < 2) throw ContractViolationError("grid_search_me: P must be >= 2");

  std::vector<double> grid = trace.alpha_rungs;
  for (int j = 0; j <= grid_points; ++j)
    grid.push_back(static_cast<double>(j) / static_cast<double>(grid_points));
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  FppResult result;
  double best = -std::numeric_limits<double>::infinity();
  for (double a : grid) {
    const IsUpdateResult u = is_update(trace, a);
    const double logCT = u.logC1 - u.logC0;
    result.logC_T_grid.emplace_back(a, logCT);
    if (logCT > best) {
      best = logCT;
      result.alpha_star = a;
    }
  }
  result.posterior = is_update(trace, result.alpha_star).chain1;
  return result;
}

struct NppResult {
  Matrix joint_theta;       // one row per joint sample
  Vector joint_alpha;       // resampled alpha values
  Vector prior_alpha;       // the Beta prior draws
  Vector marginal_weights;  // normalized weights over the prior draws
};

/// Normalized power prior sampling: weight Beta prior draws of alpha by
/// the estimated C_T(alpha), resample, and draw one theta per joint
/// sample from the importance-updated chain-1 particles.
inline NppResult sample_npp(const TsmcTrace& trace, Eigen::Index n_samples, double beta_a,
                            double beta_b, RngStream& rng) {
  if (n_samples < 1) throw ContractViolationError("sample_npp: n_samples must be >= 1");
  if (!(beta_a > 0.0 && beta_b > 0.0))
    throw ContractViolationError("sample_npp: Beta parameters must be positive");

  NppResult result;
  result.prior_alpha.resize(n_samples);
  Vector logCT(n_samples);
  RngStream draw_rng = rng.split(1);
  for (Eigen::Index i = 0; i < n_samples; ++i) {
    result.prior_alpha[i] = draw_rng.beta(beta_a, beta_b);
    const IsUpdateResult u = is_update(trace, result.prior_alpha[i]);
    logCT[i] = u.logC1 - u.logC0;
  }
  if (!logCT.array().isFinite().any())
    throw DegenerateWeightsError("sample_npp: all C_T estimates non-finite");

  result.marginal_weights = LogWeights{logCT}.normalized().weights();

  RngStream resample_rng = rng.split(2);
  const auto idx = stratified_resample(result.marginal_weights, n_samples, resample_rng);

  const Eigen::Index d = trace.chain1.front().particles.cols();
  result.joint_theta.resize(n_samples, d);
  result.joint_alpha.resize(n_samples);
  RngStream theta_rng = rng.split(3);
  for (Eigen::Index i = 0; i < n_samples; ++i) {
    const double a = result.prior_alpha[idx[static_cast<std::size_t>(i)]];
    result.joint_alpha[i] = a;
    const IsUpdateResult u = is_update(trace, a);
    const Vector w = u.chain1.log_weights.weights();
    double cum = 0.0;
    const double target = theta_rng.uniform();
    Eigen::Index pick = u.chain1.count() - 1;
    for (Eigen::Index j = 0; j < u.chain1.count(); ++j) {
      cum += w[j];
      if (target <= cum) {
        pick = j;
        break;
      }
    }
    result.joint_theta.row(i) = u.chain1.particles.row(pick);
  }
  return result;
}

// -------------------------------------------------------------------------
// Trace persistence: raw little-endian doubles, bit-exact round trip.

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline void put_doubles(std::ostream& out, const double* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}
inline void get_doubles(std::istream& in, double* p, std::size_t n) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}
inline void put_vec(std::ostream& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  put_doubles(out, v.data(), v.size());
}
inline std::vector<double> get_vec(std::istream& in) {
  std::vector<double> v(get_u64(in));
  get_doubles(in, v.data(), v.size());
  return v;
}

}  // namespace detail

inline constexpr char kTraceMagic[8] = {'T', 'S', 'M', 'C', 'T', 'R', '0', '1'};

inline void save_trace(std::ostream& out, const TsmcTrace& trace) {
  out.write(kTraceMagic, sizeof kTraceMagic);
  detail::put_u64(out, trace.model_id.size());
  out.write(trace.model_id.data(), static_cast<std::streamsize>(trace.model_id.size()));
  detail::put_u64(out, trace.root_seed);
  detail::put_vec(out, trace.gamma_ladder);
  detail::put_vec(out, trace.alpha_ladder);
  detail::put_vec(out, trace.alpha_rungs);
  detail::put_vec(out, trace.logC0);
  detail::put_vec(out, trace.logC1);
  detail::put_vec(out, trace.phase2_min_ess);
  const std::uint64_t rungs = trace.alpha_rungs.size();
  const std::uint64_t n = static_cast<std::uint64_t>(trace.chain1.front().particles.rows());
  const std::uint64_t d = static_cast<std::uint64_t>(trace.chain1.front().particles.cols());
  detail::put_u64(out, n);
  detail::put_u64(out, d);
  for (std::uint64_t r = 0; r < rungs; ++r) {
    for (const auto* chain : {&trace.chain0, &trace.chain1}) {
      const TsmcSnapshot& snap = (*chain)[r];
      detail::put_doubles(out, snap.particles.data(), n * d);
      detail::put_doubles(out, snap.source_log_lik.data(), n);
    }
  }
}

inline TsmcTrace load_trace(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kTraceMagic))
    throw std::runtime_error("load_trace: bad magic");
  TsmcTrace trace;
  trace.model_id.resize(detail::get_u64(in));
  in.read(trace.model_id.data(), static_cast<std::streamsize>(trace.model_id.size()));
  trace.root_seed = detail::get_u64(in);
  trace.gamma_ladder = detail::get_vec(in);
  trace.alpha_ladder = detail::get_vec(in);
  trace.alpha_rungs = detail::get_vec(in);
  trace.logC0 = detail::get_vec(in);
  trace.logC1 = detail::get_vec(in);
  trace.phase2_min_ess = detail::get_vec(in);
  const std::uint64_t n = detail::get_u64(in);
  const std::uint64_t d = detail::get_u64(in);
  for (std::size_t r = 0; r < trace.alpha_rungs.size(); ++r) {
    for (auto* chain : {&trace.chain0, &trace.chain1}) {
      TsmcSnapshot snap;
      snap.particles.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
      snap.source_log_lik.resize(static_cast<Eigen::Index>(n));
      detail::get_doubles(in, snap.particles.data(), n * d);
      detail::get_doubles(in, snap.source_log_lik.data(), n);
      chain->push_back(std::move(snap));
    }
  }
  if (!in) throw std::runtime_error("load_trace: truncated file");
  return trace;
}

}  // namespace tsmc

#endif  // TSMC_TSMC_HPP
