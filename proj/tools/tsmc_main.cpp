#include <CLI11.hpp>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tsmc/core.hpp"
#include "tsmc/evaluation.hpp"
#include "tsmc/experiments.hpp"
#include "tsmc/model.hpp"
#include "tsmc/smc.hpp"
#include "tsmc/tsmc.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

// exit codes: 0 success, 1 internal error, 2 user/config error, 3 partial
constexpr int kExitInternal = 1;
constexpr int kExitUser = 2;
constexpr int kExitPartial = 3;

struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_header_comment(std::ostream& out, std::uint64_t seed) {
  out << "# tsmc " << kVersion << " seed=" << seed << "\n";
}

tsmc::Example parse_example(const std::string& name) {
  if (name == "linear") return tsmc::Example::linear;
  if (name == "cure") return tsmc::Example::cure;
  throw UserError("unknown example: " + name);
}

tsmc::Dataset load_dataset(const std::string& path, tsmc::Dataset::Role role) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open dataset file: " + path);
  return tsmc::read_dataset_csv(in, role);
}

const tsmc::ModelSpec& model_for(const tsmc::Dataset& data) {
  static const tsmc::ModelSpec linear = tsmc::linear_model();
  static const tsmc::ModelSpec cure = tsmc::weibull_cure_model();
  return data.kind == tsmc::ObservationKind::regression ? linear : cure;
}

void print_posterior_summary(const tsmc::ParticleSystem& posterior, const tsmc::ModelSpec& model) {
  const tsmc::Vector w = posterior.log_weights.normalized().weights();
  for (int p = 0; p < model.dimension; ++p) {
    double mean = 0.0;
    for (Eigen::Index i = 0; i < posterior.count(); ++i)
      mean += w[i] * model.constrain(posterior.particles.row(i).transpose())[p];
    double var = 0.0;
    for (Eigen::Index i = 0; i < posterior.count(); ++i) {
      const double v = model.constrain(posterior.particles.row(i).transpose())[p];
      var += w[i] * (v - mean) * (v - mean);
    }
    const double w2 = w.array().square().sum();
    std::cout << "param_" << p << " mean=" << mean << " sd=" << std::sqrt(var / (1.0 - w2))
              << "\n";
  }
}

void write_posterior_csv(const std::string& path, const tsmc::ParticleSystem& posterior,
                         const tsmc::ModelSpec& model, std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write: " + path);
  write_header_comment(out, seed);
  for (int p = 0; p < model.dimension; ++p) out << (p ? "," : "") << "param_" << p;
  out << ",log_weight\n";
  const tsmc::Vector lw = posterior.log_weights.normalized().values;
  for (Eigen::Index i = 0; i < posterior.count(); ++i) {
    const tsmc::Vector natural = model.constrain(posterior.particles.row(i).transpose());
    for (int p = 0; p < model.dimension; ++p)
      out << (p ? "," : "") << tsmc::detail::fmt17(natural[p]);
    out << ',' << tsmc::detail::fmt17(lw[i]) << '\n';
  }
}

// flat `key = value` config with [sections]; section names join keys as
// section.key
std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::string section;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UserError("bad config line: " + line);
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

int cmd_simulate(const std::string& example_name, int k, const std::string& role_name, int n,
                 std::uint64_t seed, const std::string& out_path,
                 const std::vector<double>& theta_override) {
  const tsmc::Example example = parse_example(example_name);
  const tsmc::Dataset::Role role =
      role_name == "source" ? tsmc::Dataset::Role::source : tsmc::Dataset::Role::target;

  tsmc::Vector theta;
  if (!theta_override.empty()) {
    theta = Eigen::Map<const tsmc::Vector>(theta_override.data(),
                                           static_cast<Eigen::Index>(theta_override.size()));
  } else {
    const tsmc::ScenarioConfig scenario = tsmc::make_scenario(example, k);
    theta = role == tsmc::Dataset::Role::source ? scenario.theta_source : scenario.theta_target;
  }

  tsmc::RngStream rng = tsmc::RngStream::root(seed);
  const tsmc::Dataset data = example == tsmc::Example::linear
                                 ? tsmc::generate_linear(n, theta, role, rng)
                                 : tsmc::generate_cure(n, theta, role, rng);
  std::ofstream out(out_path);
  if (!out) throw UserError("cannot write: " + out_path);
  write_header_comment(out, seed);
  tsmc::write_dataset_csv(out, data);
  return 0;
}

int cmd_fit(const std::string& method, const std::string& target_path,
            const std::string& source_path, Eigen::Index n_particles, std::uint64_t seed,
            const std::string& out_path) {
  const bool needs_target = method != "bs";
  const bool needs_source = method != "bt";
  if (needs_target && target_path.empty())
    throw UserError("method " + method + " requires --target");
  if (needs_source && source_path.empty())
    throw UserError("method " + method + " requires --source");

  tsmc::Dataset target;
  tsmc::Dataset source;
  if (needs_target) target = load_dataset(target_path, tsmc::Dataset::Role::target);
  if (needs_source) source = load_dataset(source_path, tsmc::Dataset::Role::source);

  const tsmc::ModelSpec& model = model_for(method == "bs" ? source : target);
  tsmc::SmcConfig config;
  tsmc::RngStream rng = tsmc::RngStream::root(seed);

  if (method == "bt" || method == "bs") {
    const tsmc::Dataset& data = method == "bt" ? target : source;
    const tsmc::AnnealResult fit = tsmc::fit_posterior(model, data, n_particles, config, rng);
    std::cout << "log_evidence=" << tsmc::detail::fmt17(fit.log_evidence) << "\n";
    print_posterior_summary(fit.final_system, model);
    if (!out_path.empty()) write_posterior_csv(out_path, fit.final_system, model, seed);
    return 0;
  }

  const tsmc::TsmcTrace trace =
      tsmc::run_tsmc(model, target, source, n_particles, tsmc::TsmcConfig{config}, rng, seed);

  if (method == "bu") {
    const tsmc::ParticleSystem posterior{trace.chain1.back().particles,
                                         tsmc::LogWeights::uniform(n_particles)};
    print_posterior_summary(posterior, model);
    if (!out_path.empty()) write_posterior_csv(out_path, posterior, model, seed);
    return 0;
  }
  if (method == "fpp") {
    const tsmc::FppResult fpp = tsmc::grid_search_me(trace, 100);
    std::cout << "alpha_star=" << fpp.alpha_star << "\n";
    print_posterior_summary(fpp.posterior, model);
    if (!out_path.empty()) {
      std::ofstream out(out_path, std::ios::binary);
      if (!out) throw UserError("cannot write: " + out_path);
      tsmc::save_trace(out, trace);
    }
    return 0;
  }
  if (method == "npp") {
    tsmc::RngStream npp_rng = rng.split(0x4E50);
    const tsmc::NppResult npp = tsmc::sample_npp(trace, n_particles, 1.0, 1.0, npp_rng);
    std::cout << "alpha_mean=" << npp.joint_alpha.mean() << "\n";
    const tsmc::ParticleSystem posterior{npp.joint_theta,
                                         tsmc::LogWeights::uniform(npp.joint_theta.rows())};
    print_posterior_summary(posterior, model);
    if (!out_path.empty()) {
      std::ofstream out(out_path, std::ios::binary);
      if (!out) throw UserError("cannot write: " + out_path);
      tsmc::save_trace(out, trace);
    }
    return 0;
  }
  throw UserError("unknown method: " + method);
}

struct ExperimentSettings {
  std::string example = "linear";
  std::vector<int> ks = {0, 1, 2, 3};
  int replicates = 20;
  Eigen::Index particles = 1000;
  std::uint64_t seed = 1;
  int workers = 0;
  std::string out_dir = ".";
  int n_target = 0;   // 0 = scenario default
  int n_source = 0;
  int grid_points = 100;
};

void apply_config_file(ExperimentSettings& settings, const std::string& path) {
  const auto kv = parse_config_file(path);
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(std::string("experiment.") + key);
    if (it == kv.end()) it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (const auto* v = get("example")) settings.example = *v;
  if (const auto* v = get("ks")) {
    settings.ks.clear();
    std::stringstream ss(*v);
    std::string tok;
    while (std::getline(ss, tok, ',')) settings.ks.push_back(std::stoi(tok));
  }
  if (const auto* v = get("replicates")) settings.replicates = std::stoi(*v);
  if (const auto* v = get("particles")) settings.particles = std::stoll(*v);
  if (const auto* v = get("seed")) settings.seed = std::stoull(*v);
  if (const auto* v = get("workers")) settings.workers = std::stoi(*v);
  if (const auto* v = get("out")) settings.out_dir = *v;
  if (const auto* v = get("n_target")) settings.n_target = std::stoi(*v);
  if (const auto* v = get("n_source")) settings.n_source = std::stoi(*v);
  if (const auto* v = get("grid_points")) settings.grid_points = std::stoi(*v);
}

int cmd_experiment(const ExperimentSettings& settings) {
  const tsmc::Example example = parse_example(settings.example);
  std::vector<tsmc::ScenarioConfig> scenarios;
  for (int k : settings.ks) {
    tsmc::ScenarioConfig config = tsmc::make_scenario(example, k);
    config.replicates = settings.replicates;
    config.particles = settings.particles;
    config.root_seed = settings.seed;
    config.grid_points = settings.grid_points;
    if (settings.n_target > 0) config.n_target = settings.n_target;
    if (settings.n_source > 0) config.n_source = settings.n_source;
    scenarios.push_back(config);
  }

  const int workers = settings.workers > 0
                          ? settings.workers
                          : static_cast<int>(std::thread::hardware_concurrency());
  const auto records = tsmc::run_experiment(scenarios, workers);
  const auto table = tsmc::aggregate(records);

  namespace fs = std::filesystem;
  fs::create_directories(settings.out_dir);
  const int d = tsmc::detail::scenario_model(example).dimension;
  {
    std::ofstream out(fs::path(settings.out_dir) / "records.csv");
    if (!out) throw UserError("cannot write records.csv under " + settings.out_dir);
    write_header_comment(out, settings.seed);
    tsmc::write_records_csv(out, records, d);
  }
  {
    std::ofstream out(fs::path(settings.out_dir) / "aggregate.csv");
    if (!out) throw UserError("cannot write aggregate.csv under " + settings.out_dir);
    write_header_comment(out, settings.seed);
    tsmc::write_aggregate_csv(out, table);
  }
  {
    std::ofstream out(fs::path(settings.out_dir) / "summary.txt");
    write_header_comment(out, settings.seed);
    out << "example = " << settings.example << "\n";
    out << "replicates = " << settings.replicates << "\n";
    out << "particles = " << settings.particles << "\n";
    out << "workers_requested = " << settings.workers << "\n";
    for (const auto& row : table.rows) {
      out << "cell k=" << row.k << " method=" << tsmc::method_name(row.method)
          << " replicates_used=" << row.replicates_used
          << " clppd_se=" << tsmc::detail::fmt17(row.clppd_se)
          << " loo_se=" << tsmc::detail::fmt17(row.loo_se) << "\n";
    }
  }

  std::size_t failures = 0;
  for (const auto& rec : records)
    if (rec.failed) ++failures;
  if (failures > 0) {
    std::cerr << failures << " replicate fits failed; their cells were excluded\n";
    return kExitPartial;
  }
  return 0;
}

struct RecordRow {
  std::string scenario;
  int k = 0;
  int replicate = 0;
  std::string method;
  std::vector<double> values;  // numeric columns in file order
  std::vector<std::string> names;
};

std::vector<RecordRow> read_records_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open records file: " + path);
  std::vector<RecordRow> rows;
  std::string line;
  std::vector<std::string> header;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) fields.push_back(tok);
    if (header.empty()) {
      header = fields;
      continue;
    }
    if (fields.size() != header.size())
      throw UserError("malformed records row at line " + std::to_string(line_no));
    RecordRow row;
    try {
      row.scenario = fields[0];
      row.k = std::stoi(fields[1]);
      row.replicate = std::stoi(fields[2]);
      row.method = fields[3];
      for (std::size_t i = 4; i < fields.size(); ++i) {
        row.names.push_back(header[i]);
        row.values.push_back(std::stod(fields[i]));
      }
    } catch (const std::exception&) {
      throw UserError("malformed records row at line " + std::to_string(line_no));
    }
    rows.push_back(std::move(row));
  }
  if (header.empty()) throw UserError("records file has no header: " + path);
  return rows;
}

// 1-D Gaussian KDE on a fixed grid (Silverman bandwidth), normalized
// for trapezoid integration.
void write_kde_csv(std::ostream& out, const std::vector<double>& values, std::uint64_t seed) {
  write_header_comment(out, seed);
  out << "x,density\n";
  const std::size_t n = values.size();
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var = n > 1 ? var / static_cast<double>(n - 1) : 0.0;
  const double sd = std::sqrt(var);
  const double h = sd > 0.0 ? 1.06 * sd * std::pow(static_cast<double>(n), -0.2) : 1e-6;
  const double lo = *std::min_element(values.begin(), values.end()) - 3.0 * h;
  const double hi = *std::max_element(values.begin(), values.end()) + 3.0 * h;
  constexpr int kGrid = 256;
  for (int g = 0; g < kGrid; ++g) {
    const double x = lo + (hi - lo) * g / (kGrid - 1);
    double dens = 0.0;
    for (double v : values) {
      const double z = (x - v) / h;
      dens += std::exp(-0.5 * z * z);
    }
    dens /= static_cast<double>(n) * h * std::sqrt(2.0 * 3.14159265358979323846);
    out << tsmc::detail::fmt17(x) << ',' << tsmc::detail::fmt17(dens) << '\n';
  }
}

int cmd_report(const std::string& records_path, const std::string& out_dir, std::uint64_t seed) {
  const auto rows = read_records_csv(records_path);
  if (rows.empty()) throw UserError("records file has no data rows: " + records_path);

  // aligned per-(k, method) table of clppd / loo means and average ranks
  std::map<std::pair<int, std::string>, std::vector<const RecordRow*>> cells;
  for (const auto& row : rows) cells[{row.k, row.method}].push_back(&row);

  auto column_index = [&](const char* name) -> std::size_t {
    const auto& names = rows.front().names;
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw UserError(std::string("records file missing column: ") + name);
  };
  const std::size_t clppd_col = column_index("clppd");
  const std::size_t loo_col = column_index("loo");

  // per-(k, replicate) ranks across methods, averaged per cell
  std::map<std::pair<int, int>, std::vector<const RecordRow*>> reps;
  for (const auto& row : rows) reps[{row.k, row.replicate}].push_back(&row);
  std::map<const RecordRow*, std::pair<double, double>> ranks;
  for (const auto& [key, members] : reps) {
    if (members.size() < 2) {
      for (const auto* row : members) ranks[row] = {1.0, 1.0};
      continue;
    }
    std::vector<double> clppds, loos;
    for (const auto* row : members) {
      clppds.push_back(row->values[clppd_col]);
      loos.push_back(row->values[loo_col]);
    }
    const auto c_ranks = tsmc::rank_methods(clppds, true);
    const auto l_ranks = tsmc::rank_methods(loos, true);
    for (std::size_t i = 0; i < members.size(); ++i)
      ranks[members[i]] = {c_ranks[i], l_ranks[i]};
  }

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::ofstream table(fs::path(out_dir) / "report.txt");
  write_header_comment(table, seed);
  char buf[200];
  std::snprintf(buf, sizeof buf, "%4s %-6s %6s %12s %8s %12s %8s\n", "k", "method", "reps",
                "clppd", "c_rank", "loo", "l_rank");
  table << buf;
  for (const auto& [key, members] : cells) {
    double clppd_mean = 0.0, loo_mean = 0.0, c_rank = 0.0, l_rank = 0.0;
    for (const auto* row : members) {
      clppd_mean += row->values[clppd_col];
      loo_mean += row->values[loo_col];
      c_rank += ranks[row].first;
      l_rank += ranks[row].second;
    }
    const double m = static_cast<double>(members.size());
    std::snprintf(buf, sizeof buf, "%4d %-6s %6zu %12.3f %8.2f %12.3f %8.2f\n", key.first,
                  key.second.c_str(), members.size(), clppd_mean / m, c_rank / m, loo_mean / m,
                  l_rank / m);
    table << buf;
  }

  // per-method KDE grids over the replicate-level predictive scores
  std::map<std::string, std::vector<double>> loo_by_method;
  for (const auto& row : rows) loo_by_method[row.method].push_back(row.values[loo_col]);
  for (const auto& [method, values] : loo_by_method) {
    if (values.size() < 2) continue;
    std::ofstream out(fs::path(out_dir) / ("kde_loo_" + method + ".csv"));
    write_kde_csv(out, values, seed);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transfer SMC power prior toolkit"};
  app.require_subcommand(1);

  // simulate
  auto* simulate = app.add_subcommand("simulate", "generate a dataset CSV");
  std::string sim_example = "linear";
  int sim_k = 0;
  std::string sim_role = "target";
  int sim_n = 40;
  std::uint64_t sim_seed = 1;
  std::string sim_out = "dataset.csv";
  std::vector<double> sim_theta;
  simulate->add_option("--example", sim_example, "linear|cure");
  simulate->add_option("--k", sim_k, "parameter shift level 0..3");
  simulate->add_option("--role", sim_role, "target|source");
  simulate->add_option("--n", sim_n, "observation count");
  simulate->add_option("--seed", sim_seed, "root seed");
  simulate->add_option("--out", sim_out, "output CSV path");
  simulate->add_option("--theta", sim_theta, "explicit natural-scale parameters");

  // fit
  auto* fit = app.add_subcommand("fit", "fit one method to dataset files");
  std::string fit_method = "bt";
  std::string fit_target;
  std::string fit_source;
  Eigen::Index fit_particles = 2000;
  std::uint64_t fit_seed = 1;
  std::string fit_out;
  fit->add_option("--method", fit_method, "bt|bs|bu|fpp|npp")->required();
  fit->add_option("--target", fit_target, "target dataset CSV");
  fit->add_option("--source", fit_source, "source dataset CSV");
  fit->add_option("--particles", fit_particles, "particle count N");
  fit->add_option("--seed", fit_seed, "root seed");
  fit->add_option("--out", fit_out, "trace (fpp/npp) or posterior CSV output");

  // experiment
  auto* experiment = app.add_subcommand("experiment", "run a full simulation study");
  ExperimentSettings settings;
  std::string exp_config;
  bool have_replicates = false;
  experiment->add_option("--config", exp_config, "key = value config file");
  auto* rep_opt = experiment->add_option("--replicates", settings.replicates);
  experiment->add_option("--example", settings.example, "linear|cure");
  experiment->add_option("--ks", settings.ks, "shift levels");
  auto* part_opt = experiment->add_option("--particles", settings.particles);
  auto* seed_opt = experiment->add_option("--seed", settings.seed);
  auto* workers_opt = experiment->add_option("--workers", settings.workers);
  auto* out_opt = experiment->add_option("--out", settings.out_dir);
  (void)have_replicates;

  // report
  auto* report = app.add_subcommand("report", "summarize a records CSV");
  std::string rep_records;
  std::string rep_out = ".";
  std::uint64_t rep_seed = 1;
  report->add_option("--records", rep_records, "records CSV path")->required();
  report->add_option("--out", rep_out, "output directory");
  report->add_option("--seed", rep_seed, "seed recorded in output headers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUser;
  }

  try {
    if (simulate->parsed())
      return cmd_simulate(sim_example, sim_k, sim_role, sim_n, sim_seed, sim_out, sim_theta);
    if (fit->parsed())
      return cmd_fit(fit_method, fit_target, fit_source, fit_particles, fit_seed, fit_out);
    if (experiment->parsed()) {
      ExperimentSettings merged;
      if (!exp_config.empty()) apply_config_file(merged, exp_config);
      // explicit flags override config-file values
      if (rep_opt->count() > 0) merged.replicates = settings.replicates;
      if (experiment->count("--example") > 0) merged.example = settings.example;
      if (experiment->count("--ks") > 0) merged.ks = settings.ks;
      if (part_opt->count() > 0) merged.particles = settings.particles;
      if (seed_opt->count() > 0) merged.seed = settings.seed;
      if (workers_opt->count() > 0) merged.workers = settings.workers;
      if (out_opt->count() > 0) merged.out_dir = settings.out_dir;
      return cmd_experiment(merged);
    }
    if (report->parsed()) return cmd_report(rep_records, rep_out, rep_seed);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const tsmc::ContractViolationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
