#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "helpers/conjugate.hpp"
#include "tsmc/evaluation.hpp"

using namespace tsmc;

namespace {

// exact leave-one-out predictive score for the conjugate normal model
double conjugate_exact_loo(const oracle::ConjugateNormal& conj, const Dataset& target) {
  double total = 0.0;
  for (const auto& held : target.observations) {
    oracle::ConjugateNormal fold = conj;
    fold.n_t -= 1.0;
    fold.sum_t -= held.y;
    fold.sumsq_t -= held.y * held.y;
    total += fold.log_predictive(held.y, 1.0, 0.0);
  }
  return total;
}

ParticleSystem posterior_cloud(const oracle::ConjugateNormal& conj, Eigen::Index n,
                               RngStream& rng) {
  const double m = conj.post_mean(1.0, 0.0);
  const double sd = std::sqrt(conj.post_var(1.0, 0.0));
  Matrix p(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) p(i, 0) = m + sd * rng.normal();
  return ParticleSystem{std::move(p), LogWeights::uniform(n)};
}

}  // namespace

TEST_CASE("scalar metrics") {
  CHECK(bias({1, 3}, 2.0) == Catch::Approx(0.0).margin(1e-15));
  CHECK(bias({2, 2}, 0.0) == Catch::Approx(2.0));
  CHECK(bias({0, 1, 2, 3}, 1.0) == Catch::Approx(0.5));
  CHECK_THROWS_AS(bias({}, 0.0), ContractViolationError);

  CHECK(mse({1, 3}, 2.0) == Catch::Approx(1.0));
  CHECK(mse({2}, 2.0) == Catch::Approx(0.0).margin(1e-15));
  CHECK(mse({0, 4}, 1.0) == Catch::Approx(5.0));

  CHECK(stdev({1, 3}) == Catch::Approx(std::sqrt(2.0)));
  CHECK(stdev({4, 4, 4}) == Catch::Approx(0.0).margin(1e-15));
  CHECK(stdev({0, 1, 2}) == Catch::Approx(1.0));
  CHECK_THROWS_AS(stdev({1}), InsufficientSamplesError);
}

TEST_CASE("coverage hit") {
  RngStream rng = RngStream::root(5);
  std::vector<double> samples(100000);
  for (double& s : samples) s = rng.normal();
  CHECK(coverage_hit(samples, 0.0) == 1);
  CHECK(coverage_hit(samples, 5.0) == 0);

  const std::vector<int> hits{1, 1, 0, 1};
  double cov = 0.0;
  for (int h : hits) cov += h;
  CHECK(cov / hits.size() == Catch::Approx(0.75));
}

TEST_CASE("clppd degenerate and invariance cases") {
  const ModelSpec model = oracle::conjugate_normal_model(1.0, 0.0, 1.0);
  Dataset target;
  target.kind = ObservationKind::regression;
  target.observations.resize(1);
  target.observations[0].y = 0.7;

  // two copies of one particle: the weighted mean collapses to p(y|theta)
  Matrix p = Matrix::Constant(2, 1, 0.2);
  const ParticleSystem single{p, LogWeights::uniform(2)};
  const double expected = model.pointwise_log_lik(target.observations[0], p.row(0).transpose());
  CHECK(clppd(target, single, model) == Catch::Approx(expected));

  // permutation and duplication invariance
  RngStream rng = RngStream::root(2);
  Matrix q(4, 1);
  for (int i = 0; i < 4; ++i) q(i, 0) = rng.normal();
  const double base = clppd(target, ParticleSystem{q, LogWeights::uniform(4)}, model);
  Matrix perm(4, 1);
  perm << q(2, 0), q(0, 0), q(3, 0), q(1, 0);
  CHECK(clppd(target, ParticleSystem{perm, LogWeights::uniform(4)}, model) ==
        Catch::Approx(base));
  Matrix dup(8, 1);
  dup << q, q;
  CHECK(clppd(target, ParticleSystem{dup, LogWeights::uniform(8)}, model) ==
        Catch::Approx(base));

  // average-of-logs as the alternative definition
  ClppdOptions avg;
  avg.average_of_logs = true;
  double manual = 0.0;
  for (int i = 0; i < 4; ++i)
    manual += 0.25 * model.pointwise_log_lik(target.observations[0], q.row(i).transpose());
  CHECK(clppd(target, ParticleSystem{q, LogWeights::uniform(4)}, model, avg) ==
        Catch::Approx(manual));
}

TEST_CASE("clppd matches the conjugate posterior predictive") {
  oracle::ConjugateNormal conj;
  conj.sigma = 1.0;
  conj.tau0 = 3.0;
  RngStream rng = RngStream::root(71);
  RngStream data_rng = rng.split(0);
  const Dataset target =
      oracle::iid_normal_dataset(15, 1.0, conj.sigma, Dataset::Role::target, data_rng);
  conj.set_target(target);

  RngStream cloud_rng = rng.split(1);
  const ParticleSystem posterior = posterior_cloud(conj, 10000, cloud_rng);
  const ModelSpec model = oracle::conjugate_normal_model(conj.sigma, conj.mu0, conj.tau0);

  double exact = 0.0;
  for (const auto& obs : target.observations) exact += conj.log_predictive(obs.y, 1.0, 0.0);
  CHECK(clppd(target, posterior, model) == Catch::Approx(exact).margin(0.05));
}

TEST_CASE("loo importance sampling matches the conjugate refit oracle") {
  oracle::ConjugateNormal conj;
  conj.sigma = 1.0;
  conj.tau0 = 3.0;
  RngStream rng = RngStream::root(83);
  RngStream data_rng = rng.split(0);
  const Dataset target =
      oracle::iid_normal_dataset(10, 0.5, conj.sigma, Dataset::Role::target, data_rng);
  conj.set_target(target);

  RngStream cloud_rng = rng.split(1);
  const ParticleSystem posterior = posterior_cloud(conj, 4000, cloud_rng);
  const ModelSpec model = oracle::conjugate_normal_model(conj.sigma, conj.mu0, conj.tau0);

  const auto prior = [&](const Vector& t) { return model.log_prior(t); };
  RngStream loo_rng = rng.split(2);
  int low_ess = 0;
  const double est = loo(target, posterior, model, prior, LooOptions{}, loo_rng, &low_ess);
  const double exact = conjugate_exact_loo(conj, target);
  CHECK(std::abs(est - exact) < 0.1 * static_cast<double>(target.size()));
}

TEST_CASE("loo shortcuts") {
  const ModelSpec model = oracle::conjugate_normal_model(1.0, 0.0, 1.0);
  RngStream rng = RngStream::root(17);
  Matrix p(200, 1);
  for (int i = 0; i < 200; ++i) p(i, 0) = rng.normal();
  const ParticleSystem posterior{p, LogWeights::uniform(200)};
  Dataset target;
  target.kind = ObservationKind::regression;
  target.observations.resize(4);
  for (int i = 0; i < 4; ++i) target.observations[i].y = 0.3 * i;

  // source-only posterior: weights cancel and LOO is the in-sample score
  LooOptions opts;
  opts.posterior_uses_target = false;
  RngStream r1 = RngStream::root(1);
  CHECK(loo(target, posterior, model, [](const Vector&) { return 0.0; }, opts, r1) ==
        Catch::Approx(clppd(target, posterior, model)));

  // constant likelihood with a single point: LOO equals log p(y|theta)
  ModelSpec flat = model;
  flat.pointwise_log_lik = [](const Observation&, const Vector&) { return -1.75; };
  Dataset one;
  one.kind = ObservationKind::regression;
  one.observations.resize(1);
  RngStream r2 = RngStream::root(2);
  CHECK(loo(one, posterior, flat, [&](const Vector& t) { return model.log_prior(t); },
            LooOptions{}, r2) == Catch::Approx(-1.75));
}

TEST_CASE("loo_npp collapses to loo at fixed alpha") {
  oracle::ConjugateNormal conj;
  conj.tau0 = 3.0;
  RngStream rng = RngStream::root(29);
  RngStream t_rng = rng.split(0);
  RngStream s_rng = rng.split(1);
  const Dataset target = oracle::iid_normal_dataset(6, 0.5, 1.0, Dataset::Role::target, t_rng);
  const Dataset source = oracle::iid_normal_dataset(9, 0.8, 1.0, Dataset::Role::source, s_rng);
  conj.set_target(target);
  const ModelSpec model = oracle::conjugate_normal_model(conj.sigma, conj.mu0, conj.tau0);

  RngStream cloud_rng = rng.split(2);
  const ParticleSystem posterior = posterior_cloud(conj, 300, cloud_rng);

  NppResult npp;
  npp.joint_theta = posterior.particles;
  npp.joint_alpha = Vector::Zero(300);

  RngStream ra = RngStream::root(1001);
  RngStream rb = RngStream::root(1001);
  const double via_npp = loo_npp(target, npp, source, model, LooOptions{}, ra);
  const double via_loo = loo(target, posterior, model,
                             [&](const Vector& t) { return model.log_prior(t); }, LooOptions{},
                             rb);
  CHECK(via_npp == Catch::Approx(via_loo).margin(1e-9));

  npp.joint_alpha = Vector::Ones(300);
  RngStream rc = RngStream::root(1001);
  RngStream rd = RngStream::root(1001);
  const double npp_full = loo_npp(target, npp, source, model, LooOptions{}, rc);
  const double loo_full = loo(
      target, posterior, model,
      [&](const Vector& t) { return model.log_prior(t) + model.log_likelihood(source, t); },
      LooOptions{}, rd);
  CHECK(npp_full == Catch::Approx(loo_full).margin(1e-6));
}

TEST_CASE("loo does not beat clppd on average") {
  oracle::ConjugateNormal base;
  base.tau0 = 3.0;
  const ModelSpec model = oracle::conjugate_normal_model(base.sigma, base.mu0, base.tau0);
  double clppd_sum = 0.0;
  double loo_sum = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    RngStream rng = RngStream::root(4000 + static_cast<std::uint64_t>(rep));
    oracle::ConjugateNormal conj = base;
    RngStream data_rng = rng.split(0);
    const Dataset target =
        oracle::iid_normal_dataset(10, 0.5, conj.sigma, Dataset::Role::target, data_rng);
    conj.set_target(target);
    RngStream cloud_rng = rng.split(1);
    const ParticleSystem posterior = posterior_cloud(conj, 1000, cloud_rng);
    clppd_sum += clppd(target, posterior, model);
    RngStream loo_rng = rng.split(2);
    loo_sum += loo(target, posterior, model,
                   [&](const Vector& t) { return model.log_prior(t); }, LooOptions{}, loo_rng);
  }
  CHECK(loo_sum / 20.0 <= clppd_sum / 20.0);
}

TEST_CASE("rank methods") {
  CHECK(rank_methods({-5, -3, -4}, true) == std::vector<double>{3, 1, 2});
  CHECK(rank_methods({-3, -3, -4}, true) == std::vector<double>{1.5, 1.5, 3});
  CHECK(rank_methods({-5, -3, -4}, false) == std::vector<double>{1, 3, 2});

  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK(rank_methods({1.0, nan, 2.0}, true) == std::vector<double>{2, 3, 1});

  const auto six = rank_methods({-80.0, -85.0, -90.0, -82.0, -81.0, -83.0}, true);
  double sum = 0.0;
  for (double r : six) {
    CHECK(r >= 1.0);
    CHECK(r <= 6.0);
    sum += r;
  }
  CHECK(sum == Catch::Approx(21.0));

  CHECK_THROWS_AS(rank_methods({1.0}, true), ContractViolationError);
}
