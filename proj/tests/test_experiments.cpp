#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <sstream>

#include "tsmc/experiments.hpp"

using namespace tsmc;

namespace {

ScenarioConfig small_linear(int k, std::uint64_t seed) {
  ScenarioConfig config = make_scenario(Example::linear, k);
  config.n_target = 20;
  config.n_source = 30;
  config.particles = 300;
  config.replicates = 2;
  config.root_seed = seed;
  return config;
}

}  // namespace

TEST_CASE("scenario construction") {
  {
    const ScenarioConfig c = make_scenario(Example::linear, 0);
    CHECK(c.theta_source == c.theta_target);
    CHECK(c.n_target == 40);
    CHECK(c.n_source == 80);
    CHECK(c.scenario_id() == "linear_k0");
  }
  {
    const ScenarioConfig c = make_scenario(Example::linear, 2);
    CHECK(c.theta_source[0] == Catch::Approx(5.6));
    CHECK(c.theta_source[1] == Catch::Approx(2.4));
    CHECK(c.theta_source[2] == Catch::Approx(2.25));
  }
  {
    const ScenarioConfig c = make_scenario(Example::cure, 1);
    const Vector& sd = cure_pilot_sd();
    REQUIRE(sd.size() == 7);
    for (int p = 0; p < 7; ++p) {
      CHECK(sd[p] > 0.0);
      CHECK(c.theta_source[p] == Catch::Approx(c.theta_target[p] + 2.0 * sd[p]));
    }
    CHECK(c.n_source == 300);
  }
  CHECK_THROWS_AS(make_scenario(Example::linear, 4), ContractViolationError);
  CHECK_THROWS_AS(make_scenario(Example::linear, -1), ContractViolationError);
}

TEST_CASE("run_replicate produces a full method panel deterministically") {
  const ScenarioConfig config = small_linear(0, 42);
  const auto records = run_replicate(config, 0);
  REQUIRE(records.size() == 6);

  const Method order[] = {Method::True, Method::BT, Method::BS,
                          Method::BU,   Method::FPP, Method::NPP};
  for (int i = 0; i < 6; ++i) {
    CHECK(records[i].method == order[i]);
    INFO("method " << method_name(records[i].method) << ": " << records[i].failure);
    REQUIRE_FALSE(records[i].failed);
    REQUIRE(records[i].bias.size() == 3);
    CHECK(std::isfinite(records[i].clppd));
    CHECK(std::isfinite(records[i].loo));
    for (int p = 0; p < 3; ++p) {
      CHECK(records[i].bias[p] >= 0.0);
      CHECK(records[i].stdev[p] > 0.0);
      CHECK((records[i].coverage_hit[p] == 0 || records[i].coverage_hit[p] == 1));
    }
  }

  // replay is bit-identical
  const auto again = run_replicate(config, 0);
  REQUIRE(again.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(again[i].bias == records[i].bias);
    CHECK(again[i].mse == records[i].mse);
    CHECK(again[i].stdev == records[i].stdev);
    CHECK(again[i].coverage_hit == records[i].coverage_hit);
    CHECK(again[i].clppd == records[i].clppd);
    CHECK(again[i].loo == records[i].loo);
  }

  // at k = 0 the full-update posterior sees data equivalent to the
  // oracle's, so their accuracies agree on the posterior-sd scale
  const MetricsRecord& truth = records[0];
  const MetricsRecord& bu = records[3];
  for (int p = 0; p < 3; ++p)
    CHECK(std::abs(bu.bias[p] - truth.bias[p]) < 2.0 * truth.stdev[p]);
}

TEST_CASE("evidence search favors transfer for a matched source") {
  // k = 0 with a large matched source: the selected alpha should exceed
  // 0.5 in a clear majority of replicates
  const ModelSpec& model = detail::scenario_model(Example::linear);
  const ScenarioConfig config = make_scenario(Example::linear, 0);
  int above = 0;
  const int reps = 20;
  for (int rep = 0; rep < reps; ++rep) {
    RngStream rng = RngStream::root(7000 + static_cast<std::uint64_t>(rep));
    RngStream t_rng = rng.split(0);
    RngStream s_rng = rng.split(1);
    const Dataset target = generate_linear(config.n_target, config.theta_target,
                                           Dataset::Role::target, t_rng);
    const Dataset source = generate_linear(config.n_source, config.theta_source,
                                           Dataset::Role::source, s_rng);
    RngStream fit_rng = rng.split(2);
    const TsmcTrace trace = run_tsmc(model, target, source, 400, TsmcConfig{}, fit_rng);
    const FppResult fpp = grid_search_me(trace, 100);
    if (fpp.alpha_star > 0.5) ++above;
  }
  CHECK(above > reps / 2);
}

TEST_CASE("aggregate") {
  auto rec = [](int k, int rep, Method m, double b, double cov, double clppd_v, double loo_v) {
    MetricsRecord r;
    r.scenario_id = "synthetic";
    r.k = k;
    r.replicate = rep;
    r.method = m;
    r.bias = {b};
    r.mse = {b * b};
    r.stdev = {1.0};
    r.coverage_hit = {cov > 0.5 ? 1 : 0};
    r.clppd = clppd_v;
    r.loo = loo_v;
    return r;
  };

  SECTION("single replicate reproduces the records") {
    std::vector<MetricsRecord> records;
    records.push_back(rec(0, 0, Method::BT, 0.25, 1, -10.0, -11.0));
    records.push_back(rec(0, 0, Method::BS, 0.75, 0, -12.0, -13.0));
    const AggregateTable table = aggregate(records);
    REQUIRE(table.rows.size() == 2);
    CHECK(table.rows[0].bias[0] == Catch::Approx(0.25));
    CHECK(table.rows[0].coverage[0] == Catch::Approx(1.0));
    CHECK(table.rows[0].c_rank == Catch::Approx(1.0));
    CHECK(table.rows[1].c_rank == Catch::Approx(2.0));
    CHECK(table.rows[0].l_rank == Catch::Approx(1.0));
  }

  SECTION("six-method ranks sum to 21 and coverage averages the hits") {
    std::vector<MetricsRecord> records;
    for (int rep = 0; rep < 4; ++rep)
      for (int m = 0; m < 6; ++m)
        records.push_back(rec(1, rep, static_cast<Method>(m), 0.1 * m, m % 2,
                              -10.0 - m - 0.1 * rep, -11.0 - ((m + rep) % 6)));
    const AggregateTable table = aggregate(records);
    REQUIRE(table.rows.size() == 6);
    double c_sum = 0.0, l_sum = 0.0;
    for (const auto& row : table.rows) {
      CHECK(row.replicates_used == 4);
      c_sum += row.c_rank;
      l_sum += row.l_rank;
      CHECK(row.coverage[0] == Catch::Approx(static_cast<int>(row.method) % 2));
    }
    CHECK(c_sum == Catch::Approx(21.0));
    CHECK(l_sum == Catch::Approx(21.0));
  }

  SECTION("failed records are excluded") {
    std::vector<MetricsRecord> records;
    records.push_back(rec(0, 0, Method::BT, 0.25, 1, -10.0, -11.0));
    records.push_back(rec(0, 0, Method::BS, 0.75, 0, -12.0, -13.0));
    MetricsRecord bad = rec(0, 1, Method::BT, 9.0, 0, -99.0, -99.0);
    bad.failed = true;
    records.push_back(bad);
    const AggregateTable table = aggregate(records);
    REQUIRE(table.rows.size() == 2);
    CHECK(table.rows[0].replicates_used == 1);
    CHECK(table.rows[0].bias[0] == Catch::Approx(0.25));
  }
}

TEST_CASE("experiment output is independent of the worker count") {
  const std::vector<ScenarioConfig> scenarios{small_linear(0, 77)};
  const auto seq = run_experiment(scenarios, 1);
  const auto par = run_experiment(scenarios, 3);

  std::ostringstream a, b;
  write_records_csv(a, seq, 3);
  write_records_csv(b, par, 3);
  CHECK(a.str() == b.str());

  // 2 replicates x 6 methods
  REQUIRE(seq.size() == 12);
  const AggregateTable table = aggregate(seq);
  CHECK(table.rows.size() == 6);
  std::ostringstream agg;
  write_aggregate_csv(agg, table);
  CHECK(agg.str().find("k,method,replicates") == 0);
}

TEST_CASE("records csv marks failures") {
  MetricsRecord bad;
  bad.scenario_id = "linear_k0";
  bad.k = 0;
  bad.replicate = 3;
  bad.method = Method::FPP;
  bad.failed = true;
  bad.failure = "boom";
  std::ostringstream out;
  write_records_csv(out, {bad}, 3);
  const std::string text = out.str();
  CHECK(text.find("linear_k0,0,3,FPP") != std::string::npos);
  CHECK(text.find("nan") != std::string::npos);
  CHECK(text.find(",1\n") != std::string::npos);  // failed flag
}
