#ifndef TSMC_EXPERIMENTS_HPP
#define TSMC_EXPERIMENTS_HPP

#include <atomic>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "tsmc/core.hpp"
#include "tsmc/evaluation.hpp"
#include "tsmc/model.hpp"
#include "tsmc/smc.hpp"
#include "tsmc/tsmc.hpp"

namespace tsmc {

enum class Method { True, BT, BS, BU, FPP, NPP };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::True: return "True";
    case Method::BT: return "BT";
    case Method::BS: return "BS";
    case Method::BU: return "BU";
    case Method::FPP: return "FPP";
    case Method::NPP: return "NPP";
  }
  return "?";
}

inline constexpr Method kAllMethods[] = {Method::True, Method::BT, Method::BS,
                                         Method::BU,   Method::FPP, Method::NPP};

enum class Example { linear, cure };

struct ScenarioConfig {
  Example example = Example::linear;
  int k = 0;
  int n_target = 40;
  int n_source = 80;  // 300 for the cure model
  int replicates = 20;
  Eigen::Index particles = 1000;
  Eigen::Index npp_samples = 0;  // 0 means: use `particles`
  std::uint64_t root_seed = 1;
  double beta_a = 1.0;
  double beta_b = 1.0;
  int grid_points = 100;
  SmcConfig smc;
  LooOptions loo_opts;

  Vector theta_target;  // natural scale
  Vector theta_source;  // natural scale

  std::string scenario_id() const {
    return std::string(example == Example::linear ? "linear" : "cure") + "_k" + std::to_string(k);
  }
};

inline Vector linear_true_theta() {
  Vector t(3);
  t << 5.0, 3.0, 2.0;
  return t;
}

inline Vector cure_true_theta() {
  Vector t(7);
  t << 0.163, -0.299, 0.120, -0.287, 0.276, 1.103, -0.538;
  return t;
}

/// Marginal posterior standard deviations from one fixed-seed pilot fit
/// on a size-40 target dataset; these define the cure-model shift scale
/// for every scenario.
inline const Vector& cure_pilot_sd() {
  static const Vector sd = [] {
    const ModelSpec model = weibull_cure_model();
    RngStream rng = RngStream::root(0xC0DE5EED);
    RngStream data_rng = rng.split(0);
    const Dataset pilot_data =
        generate_cure(40, cure_true_theta(), Dataset::Role::target, data_rng);
    SmcConfig config;
    RngStream fit_rng = rng.split(1);
    const AnnealResult fit = fit_posterior(model, pilot_data, 4000, config, fit_rng);
    Vector out(model.dimension);
    for (int p = 0; p < model.dimension; ++p) {
      std::vector<double> column(static_cast<std::size_t>(fit.final_system.count()));
      for (Eigen::Index i = 0; i < fit.final_system.count(); ++i)
        column[static_cast<std::size_t>(i)] =
            model.constrain(fit.final_system.particles.row(i).transpose())[p];
      out[p] = stdev(column);
    }
    return out;
  }();
  return sd;
}

inline ScenarioConfig make_scenario(Example example, int k) {
  if (k < 0 || k > 3) throw ContractViolationError("make_scenario: k must be in {0..3}");
  ScenarioConfig config;
  config.example = example;
  config.k = k;
  if (example == Example::linear) {
    config.n_source = 80;
    config.theta_target = linear_true_theta();
    // shift scale printed in the study: 0.15 for the coefficients,
    // 0.125 for sigma
    Vector shift(3);
    shift << 2.0 * k * 0.15, -2.0 * k * 0.15, k * 0.125;
    config.theta_source = config.theta_target + shift;
  } else {
    config.n_source = 300;
    config.theta_target = cure_true_theta();
    config.theta_source = k == 0 ? config.theta_target
                                 : config.theta_target +
                                       2.0 * static_cast<double>(k) * cure_pilot_sd();
  }
  return config;
}

struct MetricsRecord {
  std::string scenario_id;
  int k = 0;
  int replicate = 0;
  Method method = Method::True;
  std::vector<double> bias;
  std::vector<double> mse;
  std::vector<double> stdev;
  std::vector<int> coverage_hit;
  double clppd = 0.0;
  double loo = 0.0;
  bool failed = false;
  std::string failure;
};

namespace detail {

inline const ModelSpec& scenario_model(Example example) {
  static const ModelSpec linear = linear_model();
  static const ModelSpec cure = weibull_cure_model();
  return example == Example::linear ? linear : cure;
}

inline Dataset scenario_generate(Example example, int n, const Vector& theta, Dataset::Role role,
                                 RngStream& rng) {
  return example == Example::linear ? generate_linear(n, theta, role, rng)
                                    : generate_cure(n, theta, role, rng);
}

inline MetricsRecord score_posterior(const ScenarioConfig& config, int replicate, Method method,
                                     const ParticleSystem& posterior, const Dataset& target,
                                     const ModelSpec& model) {
  MetricsRecord rec;
  rec.scenario_id = config.scenario_id();
  rec.k = config.k;
  rec.replicate = replicate;
  rec.method = method;

  const Vector w = posterior.log_weights.normalized().weights();
  const int d = model.dimension;
  for (int p = 0; p < d; ++p) {
    // Metrics operate on the natural-scale marginal.  Weighted systems
    // contribute through weighted moments and a weight-replicated HPD.
    std::vector<double> column(static_cast<std::size_t>(posterior.count()));
    double wmean = 0.0;
    for (Eigen::Index i = 0; i < posterior.count(); ++i) {
      column[static_cast<std::size_t>(i)] =
          model.constrain(posterior.particles.row(i).transpose())[p];
      wmean += w[i] * column[static_cast<std::size_t>(i)];
    }
    const double theta_star = config.theta_target[p];
    double wmse = 0.0;
    double wvar = 0.0;
    for (Eigen::Index i = 0; i < posterior.count(); ++i) {
      const double v = column[static_cast<std::size_t>(i)];
      wmse += w[i] * (v - theta_star) * (v - theta_star);
      wvar += w[i] * (v - wmean) * (v - wmean);
    }
    const double w2 = w.array().square().sum();
    rec.bias.push_back(std::abs(wmean - theta_star));
    rec.mse.push_back(wmse);
    rec.stdev.push_back(std::sqrt(wvar / (1.0 - w2)));
    rec.coverage_hit.push_back(coverage_hit(column, theta_star, 0.9));
  }
  rec.clppd = clppd(target, posterior, model);
  return rec;
}

}  // namespace detail

/// Resample a weighted system to equal weights (metric convenience).
inline ParticleSystem equalize(const ParticleSystem& system, RngStream& rng) {
  return resample_system(system, rng);
}

/// Fit all six methods on one replicate's (target, source) pair and
/// compute the full metric panel for each.  Seeds depend only on
/// (root_seed, k, replicate); any sampler failure marks that method's
/// record failed without aborting the rest.
inline std::vector<MetricsRecord> run_replicate(const ScenarioConfig& config, int replicate) {
  const ModelSpec& model = detail::scenario_model(config.example);
  RngStream rep_rng = RngStream::root(config.root_seed)
                          .split(static_cast<std::uint64_t>(config.k))
                          .split(static_cast<std::uint64_t>(replicate));

  RngStream data_rng = rep_rng.split(0);
  RngStream target_rng = data_rng.split(0);
  RngStream source_rng = data_rng.split(1);
  RngStream aux_rng = data_rng.split(2);
  const Dataset target = detail::scenario_generate(config.example, config.n_target,
                                                   config.theta_target, Dataset::Role::target,
                                                   target_rng);
  const Dataset source = detail::scenario_generate(config.example, config.n_source,
                                                   config.theta_source, Dataset::Role::source,
                                                   source_rng);
  // The oracle method sees target-process data of the pooled size.
  Dataset true_data = target;
  const Dataset aux = detail::scenario_generate(config.example, config.n_source,
                                                config.theta_target, Dataset::Role::target,
                                                aux_rng);
  true_data.observations.insert(true_data.observations.end(), aux.observations.begin(),
                                aux.observations.end());

  std::vector<MetricsRecord> records;
  auto guarded = [&](Method method, auto&& body) {
    try {
      records.push_back(body());
    } catch (const std::exception& e) {
      MetricsRecord rec;
      rec.scenario_id = config.scenario_id();
      rec.k = config.k;
      rec.replicate = replicate;
      rec.method = method;
      rec.failed = true;
      rec.failure = e.what();
      records.push_back(rec);
    }
  };

  const auto prior_only = [&](const Vector& theta) { return model.log_prior(theta); };

  guarded(Method::True, [&] {
    RngStream rng = rep_rng.split(1);
    RngStream fit_rng = rng.split(0);
    const AnnealResult fit = fit_posterior(model, true_data, config.particles, config.smc, fit_rng);
    MetricsRecord rec =
        detail::score_posterior(config, replicate, Method::True, fit.final_system, target, model);
    auto extra = [&](const Vector& theta) {
      return model.log_prior(theta) + model.log_likelihood(aux, theta);
    };
    RngStream loo_rng = rng.split(1);
    rec.loo = loo(target, fit.final_system, model, extra, config.loo_opts, loo_rng);
    return rec;
  });

  guarded(Method::BT, [&] {
    RngStream rng = rep_rng.split(2);
    RngStream fit_rng = rng.split(0);
    const AnnealResult fit = fit_posterior(model, target, config.particles, config.smc, fit_rng);
    MetricsRecord rec =
        detail::score_posterior(config, replicate, Method::BT, fit.final_system, target, model);
    RngStream loo_rng = rng.split(1);
    rec.loo = loo(target, fit.final_system, model, prior_only, config.loo_opts, loo_rng);
    return rec;
  });

  guarded(Method::BS, [&] {
    RngStream rng = rep_rng.split(3);
    RngStream fit_rng = rng.split(0);
    const AnnealResult fit = fit_posterior(model, source, config.particles, config.smc, fit_rng);
    MetricsRecord rec =
        detail::score_posterior(config, replicate, Method::BS, fit.final_system, target, model);
    LooOptions opts = config.loo_opts;
    opts.posterior_uses_target = false;
    RngStream loo_rng = rng.split(1);
    rec.loo = loo(target, fit.final_system, model, prior_only, opts, loo_rng);
    return rec;
  });

  // One TSMC run serves BU (terminal rung), FPP and NPP.
  RngStream tsmc_rng = rep_rng.split(4);
  TsmcTrace trace;
  bool have_trace = false;
  std::string trace_failure;
  try {
    RngStream fit_rng = tsmc_rng.split(0);
    trace = run_tsmc(model, target, source, config.particles, TsmcConfig{config.smc}, fit_rng,
                     config.root_seed);
    have_trace = true;
  } catch (const std::exception& e) {
    trace_failure = e.what();
  }

  auto trace_guard = [&](Method method, auto&& body) {
    if (!have_trace) {
      MetricsRecord rec;
      rec.scenario_id = config.scenario_id();
      rec.k = config.k;
      rec.replicate = replicate;
      rec.method = method;
      rec.failed = true;
      rec.failure = trace_failure;
      records.push_back(rec);
      return;
    }
    guarded(method, body);
  };

  trace_guard(Method::BU, [&] {
    const ParticleSystem posterior{trace.chain1.back().particles,
                                   LogWeights::uniform(config.particles)};
    MetricsRecord rec =
        detail::score_posterior(config, replicate, Method::BU, posterior, target, model);
    auto extra = [&](const Vector& theta) {
      return model.log_prior(theta) + model.log_likelihood(source, theta);
    };
    RngStream loo_rng = tsmc_rng.split(1);
    rec.loo = loo(target, posterior, model, extra, config.loo_opts, loo_rng);
    return rec;
  });

  trace_guard(Method::FPP, [&] {
    const FppResult fpp = grid_search_me(trace, config.grid_points);
    // equal-weight copy so the KDE-based coverage sees plain samples
    RngStream eq_rng = tsmc_rng.split(5);
    const ParticleSystem posterior = equalize(fpp.posterior, eq_rng);
    MetricsRecord rec =
        detail::score_posterior(config, replicate, Method::FPP, posterior, target, model);
    auto extra = [&](const Vector& theta) {
      double ld = model.log_prior(theta);
      if (fpp.alpha_star != 0.0) ld += fpp.alpha_star * model.log_likelihood(source, theta);
      return ld;
    };
    RngStream loo_rng = tsmc_rng.split(2);
    rec.loo = loo(target, posterior, model, extra, config.loo_opts, loo_rng);
    return rec;
  });

  trace_guard(Method::NPP, [&] {
    const Eigen::Index n_joint = config.npp_samples > 0 ? config.npp_samples : config.particles;
    RngStream npp_rng = tsmc_rng.split(3);
    const NppResult npp = sample_npp(trace, n_joint, config.beta_a, config.beta_b, npp_rng);
    const ParticleSystem posterior{npp.joint_theta, LogWeights::uniform(n_joint)};
    MetricsRecord rec =
        detail::score_posterior(config, replicate, Method::NPP, posterior, target, model);
    RngStream loo_rng = tsmc_rng.split(4);
    rec.loo = loo_npp(target, npp, source, model, config.loo_opts, loo_rng);
    return rec;
  });

  return records;
}

struct AggregateRow {
  int k = 0;
  Method method = Method::True;
  int replicates_used = 0;
  std::vector<double> bias;
  std::vector<double> mse;
  std::vector<double> stdev;
  std::vector<double> coverage;
  double clppd = 0.0;
  double clppd_se = 0.0;
  double c_rank = 0.0;
  double loo = 0.0;
  double loo_se = 0.0;
  double l_rank = 0.0;
};

struct AggregateTable {
  std::vector<AggregateRow> rows;  // ordered by (k, method)
};

/// Per-(k, method) metric means; CLPPD/LOO ranks are computed within
/// each replicate across its successful methods, then averaged.
inline AggregateTable aggregate(const std::vector<MetricsRecord>& records) {
  std::map<std::pair<int, int>, std::vector<const MetricsRecord*>> groups;
  std::map<std::pair<int, int>, std::vector<const MetricsRecord*>> cells;
  for (const MetricsRecord& rec : records) {
    if (rec.failed) continue;
    groups[{rec.k, rec.replicate}].push_back(&rec);
    cells[{rec.k, static_cast<int>(rec.method)}].push_back(&rec);
  }

  // rank within each (k, replicate)
  std::map<const MetricsRecord*, std::pair<double, double>> ranks;
  for (auto& [key, members] : groups) {
    std::vector<double> clppds;
    std::vector<double> loos;
    for (const auto* rec : members) {
      clppds.push_back(rec->clppd);
      loos.push_back(rec->loo);
    }
    const auto c_ranks = rank_methods(clppds, /*higher_is_better=*/true);
    const auto l_ranks = rank_methods(loos, /*higher_is_better=*/true);
    for (std::size_t i = 0; i < members.size(); ++i)
      ranks[members[i]] = {c_ranks[i], l_ranks[i]};
  }

  AggregateTable table;
  for (auto& [key, members] : cells) {
    AggregateRow row;
    row.k = key.first;
    row.method = static_cast<Method>(key.second);
    row.replicates_used = static_cast<int>(members.size());
    const std::size_t d = members.front()->bias.size();
    row.bias.assign(d, 0.0);
    row.mse.assign(d, 0.0);
    row.stdev.assign(d, 0.0);
    row.coverage.assign(d, 0.0);
    double clppd_sq = 0.0;
    double loo_sq = 0.0;
    for (const auto* rec : members) {
      for (std::size_t p = 0; p < d; ++p) {
        row.bias[p] += rec->bias[p];
        row.mse[p] += rec->mse[p];
        row.stdev[p] += rec->stdev[p];
        row.coverage[p] += rec->coverage_hit[p];
      }
      row.clppd += rec->clppd;
      clppd_sq += rec->clppd * rec->clppd;
      row.loo += rec->loo;
      loo_sq += rec->loo * rec->loo;
      row.c_rank += ranks[rec].first;
      row.l_rank += ranks[rec].second;
    }
    const double m = static_cast<double>(members.size());
    for (std::size_t p = 0; p < d; ++p) {
      row.bias[p] /= m;
      row.mse[p] /= m;
      row.stdev[p] /= m;
      row.coverage[p] /= m;
    }
    row.clppd /= m;
    row.loo /= m;
    row.c_rank /= m;
    row.l_rank /= m;
    if (members.size() > 1) {
      row.clppd_se = std::sqrt(std::max(0.0, clppd_sq / m - row.clppd * row.clppd) / (m - 1.0));
      row.loo_se = std::sqrt(std::max(0.0, loo_sq / m - row.loo * row.loo) / (m - 1.0));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// Run every (k, replicate) cell of a scenario family on a simple work
/// pool.  Results are ordered by (k, replicate, method) independent of
/// completion order, so worker count never changes the output.
inline std::vector<MetricsRecord> run_experiment(const std::vector<ScenarioConfig>& scenarios,
                                                 int workers) {
  struct Cell {
    const ScenarioConfig* config;
    int replicate;
  };
  std::vector<Cell> cells;
  for (const ScenarioConfig& config : scenarios)
    for (int r = 0; r < config.replicates; ++r) cells.push_back(Cell{&config, r});

  std::vector<std::vector<MetricsRecord>> results(cells.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      results[i] = run_replicate(*cells[i].config, cells[i].replicate);
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  std::vector<MetricsRecord> flat;
  for (auto& group : results)
    for (auto& rec : group) flat.push_back(std::move(rec));
  return flat;
}

// -------------------------------------------------------------------------
// CSV output

inline void write_records_csv(std::ostream& out, const std::vector<MetricsRecord>& records,
                              int dimension) {
  out << "scenario_id,k,replicate,method";
  for (int p = 0; p < dimension; ++p) out << ",bias_" << p;
  for (int p = 0; p < dimension; ++p) out << ",mse_" << p;
  for (int p = 0; p < dimension; ++p) out << ",stdev_" << p;
  for (int p = 0; p < dimension; ++p) out << ",cov_" << p;
  out << ",clppd,loo,failed\n";
  for (const MetricsRecord& rec : records) {
    out << rec.scenario_id << ',' << rec.k << ',' << rec.replicate << ','
        << method_name(rec.method);
    auto emit = [&](const std::vector<double>& v) {
      for (int p = 0; p < dimension; ++p)
        out << ',' << (rec.failed ? "nan" : detail::fmt17(v[static_cast<std::size_t>(p)]));
    };
    emit(rec.bias);
    emit(rec.mse);
    emit(rec.stdev);
    for (int p = 0; p < dimension; ++p)
      out << ','
          << (rec.failed ? "nan" : std::to_string(rec.coverage_hit[static_cast<std::size_t>(p)]));
    out << ',' << (rec.failed ? "nan" : detail::fmt17(rec.clppd)) << ','
        << (rec.failed ? "nan" : detail::fmt17(rec.loo)) << ',' << (rec.failed ? 1 : 0) << '\n';
  }
}

inline void write_aggregate_csv(std::ostream& out, const AggregateTable& table) {
  if (table.rows.empty()) return;
  const std::size_t d = table.rows.front().bias.size();
  out << "k,method,replicates";
  for (std::size_t p = 0; p < d; ++p) out << ",bias_" << p;
  for (std::size_t p = 0; p < d; ++p) out << ",mse_" << p;
  for (std::size_t p = 0; p < d; ++p) out << ",stdev_" << p;
  for (std::size_t p = 0; p < d; ++p) out << ",cov_" << p;
  out << ",clppd,clppd_se,c_rank,loo,loo_se,l_rank\n";
  for (const AggregateRow& row : table.rows) {
    out << row.k << ',' << method_name(row.method) << ',' << row.replicates_used;
    for (std::size_t p = 0; p < d; ++p) out << ',' << detail::fmt17(row.bias[p]);
    for (std::size_t p = 0; p < d; ++p) out << ',' << detail::fmt17(row.mse[p]);
    for (std::size_t p = 0; p < d; ++p) out << ',' << detail::fmt17(row.stdev[p]);
    for (std::size_t p = 0; p < d; ++p) out << ',' << detail::fmt17(row.coverage[p]);
    out << ',' << detail::fmt17(row.clppd) << ',' << detail::fmt17(row.clppd_se) << ','
        << detail::fmt17(row.c_rank) << ',' << detail::fmt17(row.loo) << ','
        << detail::fmt17(row.loo_se) << ',' << detail::fmt17(row.l_rank) << '\n';
  }
}

}  // namespace tsmc

#endif  // TSMC_EXPERIMENTS_HPP
