#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "helpers/conjugate.hpp"
#include "tsmc/smc.hpp"

using namespace tsmc;

namespace {

ParticleSystem prior_cloud(const ModelSpec& model, Eigen::Index n, RngStream& rng) {
  Matrix p(n, model.dimension);
  for (Eigen::Index i = 0; i < n; ++i) p.row(i) = model.sample_prior(rng).transpose();
  return ParticleSystem{std::move(p), LogWeights::uniform(n)};
}

}  // namespace

TEST_CASE("mutation step count formula") {
  CHECK(mutation_step_count(0.99, 5) == 5);   // ceil(log .01 / log .01) = 1 -> S
  CHECK(mutation_step_count(0.5, 5) == 7);    // ceil(4.6052 / 0.6931) = 7
  CHECK(mutation_step_count(0.5, 9) == 9);    // S dominates
  CHECK(mutation_step_count(1.0, 5) == 5);    // p >= 1 degenerates to S
  CHECK(mutation_step_count(1.2, 3) == 3);
}

TEST_CASE("mcmc_mutate rejects bad config") {
  RngStream rng = RngStream::root(1);
  const ModelSpec model = oracle::conjugate_normal_model(1.0, 0.0, 1.0);
  RngStream prior_rng = rng.split(0);
  ParticleSystem system = prior_cloud(model, 50, prior_rng);
  MutationConfig config;
  config.initial_steps = 1;
  RngStream mrng = rng.split(1);
  CHECK_THROWS_AS(
      mcmc_mutate(system, [&](const Vector& t) { return model.log_prior(t); }, config, mrng),
      ContractViolationError);
}

TEST_CASE("mcmc_mutate preserves the prior target") {
  // particles start as exact draws from the target (a 2-D standard
  // normal); mutation must leave the first two moments unchanged up to
  // Monte Carlo error (chains are independent across particles)
  const Eigen::Index n = 10000;
  RngStream rng = RngStream::root(42);
  Matrix p(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    p(i, 0) = rng.normal();
    p(i, 1) = rng.normal();
  }
  ParticleSystem system{p, LogWeights::uniform(n)};
  auto target = [](const Vector& t) { return -0.5 * t.squaredNorm(); };
  MutationConfig config;
  RngStream mrng = rng.split(1);
  MutationDiagnostics diag;
  const ParticleSystem out = mcmc_mutate(system, target, config, mrng, &diag);
  CHECK(diag.total_steps >= config.initial_steps);

  const double se_mean = 1.0 / std::sqrt(static_cast<double>(n));
  for (int dim = 0; dim < 2; ++dim) {
    const double mean = out.particles.col(dim).mean();
    const double var = (out.particles.col(dim).array() - mean).square().sum() / (n - 1.0);
    CHECK(std::abs(mean) < 3.0 * se_mean);
    CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0) * se_mean);
  }
}

TEST_CASE("mcmc_mutate leaves the conjugate posterior invariant") {
  oracle::ConjugateNormal conj;
  conj.sigma = 1.0;
  conj.mu0 = 0.0;
  conj.tau0 = 3.0;
  RngStream rng = RngStream::root(99);
  RngStream data_rng = rng.split(0);
  const Dataset target =
      oracle::iid_normal_dataset(30, 1.5, conj.sigma, Dataset::Role::target, data_rng);
  conj.set_target(target);

  const double post_mean = conj.post_mean(1.0, 0.0);
  const double post_sd = std::sqrt(conj.post_var(1.0, 0.0));

  const Eigen::Index n = 5000;
  Matrix p(n, 1);
  RngStream draw_rng = rng.split(1);
  for (Eigen::Index i = 0; i < n; ++i) p(i, 0) = post_mean + post_sd * draw_rng.normal();
  ParticleSystem system{p, LogWeights::uniform(n)};

  const ModelSpec model = oracle::conjugate_normal_model(conj.sigma, conj.mu0, conj.tau0);
  AnnealedTarget tgt;
  tgt.model = &model;
  tgt.target_data = &target;
  tgt.gamma = 1.0;
  tgt.alpha = 0.0;
  RngStream mrng = rng.split(2);
  const ParticleSystem out = mcmc_mutate(system, tgt, MutationConfig{}, mrng);

  const double se = post_sd / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(out.particles.col(0).mean() - post_mean) < 3.0 * se);
}

TEST_CASE("next_temperature boundary cases") {
  const Eigen::Index n = 100;
  Matrix p = Matrix::Zero(n, 1);
  p.col(0).setLinSpaced(n, 0.0, 1.0);
  ParticleSystem system{p, LogWeights::uniform(n)};

  CHECK(next_temperature(system, Vector::Constant(n, -3.7), 0.0, 50.0) == 1.0);

  Vector mild = Vector::Zero(n);
  mild[0] = -0.1;  // ESS at tau = 1 still far above N/2
  CHECK(next_temperature(system, mild, 0.0, 50.0) == 1.0);

  CHECK_THROWS_AS(next_temperature(system, mild, 1.0, 50.0), ContractViolationError);
}

TEST_CASE("next_temperature matches the closed-form two-atom ESS") {
  // four particles, incr = (0, 0, -c, -c): with x = exp(-c tau) the ESS
  // is (2 + 2x)^2 / (2 + 2x^2); solving ESS = 3 gives x = 2 - sqrt(3)
  const double c = 2.0;
  Matrix p(4, 1);
  p << 0, 1, 2, 3;
  ParticleSystem system{p, LogWeights::uniform(4)};
  Vector incr(4);
  incr << 0.0, 0.0, -c, -c;

  const double x_star = 2.0 - std::sqrt(3.0);
  const double tau_star = -std::log(x_star) / c;
  REQUIRE(tau_star < 1.0);
  const double tau = next_temperature(system, incr, 0.0, 3.0);
  CHECK(tau == Catch::Approx(tau_star).margin(1e-6));
}

TEST_CASE("bisection lands on the ESS target") {
  RngStream rng = RngStream::root(314);
  const Eigen::Index n = 200;
  Matrix p = Matrix::Zero(n, 1);
  ParticleSystem system{p, LogWeights::uniform(n)};
  for (int trial = 0; trial < 50; ++trial) {
    Vector incr(n);
    for (Eigen::Index i = 0; i < n; ++i) incr[i] = -10.0 * rng.uniform();
    const double target = static_cast<double>(n) / 2.0;
    const double tau = next_temperature(system, incr, 0.0, target);
    const double realized =
        ess_after_reweight(system.log_weights.normalized(), incr, tau);
    if (tau < 1.0)
      CHECK(std::abs(realized - target) <= 1.0);
    else
      CHECK(realized >= target - 1.0);
  }
}

TEST_CASE("reweight_and_evidence") {
  const Eigen::Index n = 8;
  const LogWeights uniform = LogWeights::uniform(n);
  Vector incr(n);
  incr.setLinSpaced(n, -1.0, 1.0);

  {
    auto [w, ev] = reweight_and_evidence(uniform, incr, 0.0, -2.5);
    CHECK(ev == Catch::Approx(-2.5));
    const Vector norm = LogWeights{w}.normalized().values;
    for (Eigen::Index i = 0; i < n; ++i)
      CHECK(norm[i] == Catch::Approx(uniform.values[i]).margin(1e-12));
  }
  {
    const double c = -3.25;
    auto [w, ev] = reweight_and_evidence(uniform, Vector::Constant(n, c), 0.4, 1.0);
    CHECK(ev == Catch::Approx(1.0 + 0.4 * c));
  }
  CHECK_THROWS_AS(reweight_and_evidence(uniform, incr, -0.1, 0.0), ContractViolationError);
  const double ninf = -std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(reweight_and_evidence(uniform, Vector::Constant(n, ninf), 1.0, 0.0),
                  DegenerateWeightsError);
}

TEST_CASE("anneal_phase with a constant likelihood finishes in one step") {
  ModelSpec model = oracle::conjugate_normal_model(1.0, 0.0, 1.0);
  model.pointwise_log_lik = [](const Observation&, const Vector&) { return 0.0; };

  Dataset data;
  data.kind = ObservationKind::regression;
  data.observations.resize(5);

  RngStream rng = RngStream::root(7);
  RngStream prior_rng = rng.split(0);
  ParticleSystem system = prior_cloud(model, 300, prior_rng);
  RngStream phase_rng = rng.split(1);
  const AnnealResult result = anneal_phase(system, model, &data, nullptr,
                                           AnnealPhase::target_gamma, 0.0, 0.0, SmcConfig{},
                                           phase_rng);
  REQUIRE(result.steps.size() == 1);
  CHECK(result.steps[0].temperature == 1.0);
  CHECK(result.log_evidence == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("anneal_phase temperatures increase strictly and replay identically") {
  oracle::ConjugateNormal conj;
  conj.sigma = 0.3;  // tight likelihood forces several rungs
  conj.tau0 = 5.0;
  RngStream data_rng = RngStream::root(12).split(0);
  const Dataset data =
      oracle::iid_normal_dataset(40, 2.0, conj.sigma, Dataset::Role::target, data_rng);
  const ModelSpec model = oracle::conjugate_normal_model(conj.sigma, conj.mu0, conj.tau0);

  auto run = [&] {
    RngStream rng = RngStream::root(500);
    return fit_posterior(model, data, 500, SmcConfig{}, rng);
  };
  const AnnealResult a = run();
  const AnnealResult b = run();

  REQUIRE(a.steps.size() >= 2);
  double prev = 0.0;
  for (const AnnealStep& step : a.steps) {
    CHECK(step.temperature > prev);
    prev = step.temperature;
  }
  CHECK(prev == 1.0);

  REQUIRE(a.steps.size() == b.steps.size());
  CHECK(a.log_evidence == b.log_evidence);
  CHECK(a.final_system.particles == b.final_system.particles);
}

TEST_CASE("smc evidence matches the conjugate regression marginal likelihood") {
  const double sigma = 1.0, tau = 2.0;
  const ModelSpec model = oracle::conjugate_regression_model(sigma, tau);

  RngStream data_rng = RngStream::root(33).split(0);
  Dataset data;
  data.kind = ObservationKind::regression;
  data.observations.resize(20);
  for (auto& obs : data.observations) {
    obs.x1 = data_rng.normal();
    obs.y = 1.0 + 0.5 * obs.x1 + sigma * data_rng.normal();
  }
  const double truth = oracle::conjugate_regression_log_evidence(data, sigma, tau);

  double mean_est = 0.0;
  const int seeds = 10;
  for (int s = 0; s < seeds; ++s) {
    RngStream rng = RngStream::root(1000 + static_cast<std::uint64_t>(s));
    const AnnealResult fit = fit_posterior(model, data, 2000, SmcConfig{}, rng);
    mean_est += fit.log_evidence;
  }
  mean_est /= seeds;
  CHECK(std::abs(mean_est - truth) / std::abs(truth) < 0.03);
}

TEST_CASE("conditional mutation uses per-particle targets") {
  // two sub-populations with different target means must stay separated
  const Eigen::Index n = 400;
  Matrix p(n, 1);
  RngStream rng = RngStream::root(64);
  for (Eigen::Index i = 0; i < n; ++i)
    p(i, 0) = (i < n / 2 ? -4.0 : 4.0) + 0.5 * rng.normal();
  ParticleSystem system{p, LogWeights::uniform(n)};
  auto log_target = [n](Eigen::Index i, const Vector& t) {
    const double mu = i < n / 2 ? -4.0 : 4.0;
    return -0.5 * (t[0] - mu) * (t[0] - mu) / 0.25;
  };
  RngStream mrng = rng.split(1);
  const ParticleSystem out = mcmc_mutate_conditional(system, log_target, MutationConfig{}, mrng);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i < n / 2)
      CHECK(out.particles(i, 0) < 0.0);
    else
      CHECK(out.particles(i, 0) > 0.0);
  }
}
