#ifndef TSMC_MODEL_HPP
#define TSMC_MODEL_HPP

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsmc/core.hpp"
#include "tsmc/rng.hpp"

namespace tsmc {

struct InvalidObservationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class ObservationKind { regression, survival };

/// One record of either dataset schema.  Regression uses (y, x1);
/// survival uses all five fields.
struct Observation {
  double y = 0.0;
  double nu = 0.0;
  double x1 = 0.0;
  double x2 = 0.0;
  double x3 = 0.0;
};

struct Dataset {
  enum class Role { target, source };
  Role role = Role::target;
  ObservationKind kind = ObservationKind::regression;
  std::vector<Observation> observations;

  std::size_t size() const { return observations.size(); }

  /// Column cache for vectorized likelihood evaluation.  Built lazily;
  /// a dataset is owned by one thread while it is being evaluated.
  struct Cache {
    Vector y;
    Vector nu;
    Vector log_y;
    Matrix design;  // regression: (1, x); survival: (1, x1, x2, x3, x2*x3)
    bool ready = false;
  };
  mutable Cache cache;

  const Cache& columns() const {
    if (!cache.ready || cache.y.size() != static_cast<Eigen::Index>(observations.size())) {
      const Eigen::Index n = static_cast<Eigen::Index>(observations.size());
      cache.y.resize(n);
      if (kind == ObservationKind::regression) {
        cache.design.resize(n, 2);
        for (Eigen::Index i = 0; i < n; ++i) {
          const Observation& obs = observations[static_cast<std::size_t>(i)];
          cache.y[i] = obs.y;
          cache.design(i, 0) = 1.0;
          cache.design(i, 1) = obs.x1;
        }
      } else {
        cache.nu.resize(n);
        cache.log_y.resize(n);
        cache.design.resize(n, 5);
        for (Eigen::Index i = 0; i < n; ++i) {
          const Observation& obs = observations[static_cast<std::size_t>(i)];
          cache.y[i] = obs.y;
          cache.nu[i] = obs.nu;
          cache.log_y[i] = std::log(obs.y);
          cache.design(i, 0) = 1.0;
          cache.design(i, 1) = obs.x1;
          cache.design(i, 2) = obs.x2;
          cache.design(i, 3) = obs.x3;
          cache.design(i, 4) = obs.x2 * obs.x3;
        }
      }
      cache.ready = true;
    }
    return cache;
  }
};

/// Pluggable model: proper prior plus sampler on the unconstrained
/// space, pointwise log-likelihood, and the constraint map to natural
/// scale.  The prior density already includes any transform Jacobian.
struct ModelSpec {
  std::string id;
  int dimension = 0;
  std::function<double(const Vector&)> log_prior;
  std::function<Vector(RngStream&)> sample_prior;
  std::function<double(const Observation&, const Vector&)> pointwise_log_lik;
  // Optional vectorized total; must agree with the pointwise sum.
  std::function<double(const Dataset&, const Vector&)> total_log_lik;
  std::function<Vector(const Vector&)> constrain;
  std::function<Vector(const Vector&)> unconstrain;

  double log_likelihood(const Dataset& data, const Vector& theta) const {
    if (total_log_lik) return total_log_lik(data, theta);
    double total = 0.0;
    for (const Observation& obs : data.observations) total += pointwise_log_lik(obs, theta);
    return total;
  }

  /// Per-particle total log-likelihood over a dataset.
  Vector log_likelihood_all(const Dataset& data, const Matrix& particles) const {
    Vector out(particles.rows());
    for (Eigen::Index i = 0; i < particles.rows(); ++i)
      out[i] = log_likelihood(data, particles.row(i).transpose());
    return out;
  }
};

namespace detail {

inline double normal_log_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * std::log(2.0 * 3.14159265358979323846) - std::log(sd) - 0.5 * z * z;
}

}  // namespace detail

/// Gaussian linear regression y = b0 + b1 x + eps.  Parameters
/// (b0, b1, log sigma); priors b ~ N(0, 10^2), log sigma ~ N(0, 1.5^2).
inline ModelSpec linear_model() {
  ModelSpec spec;
  spec.id = "linear";
  spec.dimension = 3;
  spec.log_prior = [](const Vector& theta) {
    return detail::normal_log_pdf(theta[0], 0.0, 10.0) +
           detail::normal_log_pdf(theta[1], 0.0, 10.0) +
           detail::normal_log_pdf(theta[2], 0.0, 1.5);
  };
  spec.sample_prior = [](RngStream& rng) {
    Vector theta(3);
    theta[0] = 10.0 * rng.normal();
    theta[1] = 10.0 * rng.normal();
    theta[2] = 1.5 * rng.normal();
    return theta;
  };
  spec.pointwise_log_lik = [](const Observation& obs, const Vector& theta) {
    const double sd = std::exp(theta[2]);
    return detail::normal_log_pdf(obs.y, theta[0] + theta[1] * obs.x1, sd);
  };
  spec.total_log_lik = [](const Dataset& data, const Vector& theta) {
    const auto& cols = data.columns();
    const double sd = std::exp(theta[2]);
    const Vector resid = cols.y - cols.design * theta.head(2);
    const double n = static_cast<double>(cols.y.size());
    return -n * (0.5 * std::log(2.0 * 3.14159265358979323846) + theta[2]) -
           0.5 * resid.squaredNorm() / (sd * sd);
  };
  spec.constrain = [](const Vector& theta) {
    Vector out = theta;
    out[2] = std::exp(theta[2]);
    return out;
  };
  spec.unconstrain = [](const Vector& natural) {
    Vector out = natural;
    out[2] = std::log(natural[2]);
    return out;
  };
  return spec;
}

namespace detail {

inline double cure_design_eta(const Observation& obs, const Vector& theta) {
  return theta[0] + theta[1] * obs.x1 + theta[2] * obs.x2 + theta[3] * obs.x3 +
         theta[4] * obs.x2 * obs.x3;
}

}  // namespace detail

/// Weibull cure model.  Parameters (b0..b4, log k, lambda); design row
/// (1, x1, x2, x3, x2*x3).  Event density f(y) = k y^(k-1)
/// exp(lambda - y^k exp(lambda)), F(y) = 1 - exp(-y^k exp(lambda)),
/// pointwise log-lik nu (eta + log f) - exp(eta) F.
inline ModelSpec weibull_cure_model() {
  ModelSpec spec;
  spec.id = "cure";
  spec.dimension = 7;
  spec.log_prior = [](const Vector& theta) {
    double lp = 0.0;
    for (int i = 0; i < 5; ++i) lp += detail::normal_log_pdf(theta[i], 0.0, 10.0);
    lp += detail::normal_log_pdf(theta[5], 0.0, 1.0);   // log k
    lp += detail::normal_log_pdf(theta[6], 0.0, 10.0);  // lambda
    return lp;
  };
  spec.sample_prior = [](RngStream& rng) {
    Vector theta(7);
    for (int i = 0; i < 5; ++i) theta[i] = 10.0 * rng.normal();
    theta[5] = rng.normal();
    theta[6] = 10.0 * rng.normal();
    return theta;
  };
  spec.pointwise_log_lik = [](const Observation& obs, const Vector& theta) {
    if (obs.y <= 0.0) throw InvalidObservationError("weibull_cure_model: y must be positive");
    const double k = std::exp(theta[5]);
    const double lambda = theta[6];
    const double eta = detail::cure_design_eta(obs, theta);
    const double yk_el = std::pow(obs.y, k) * std::exp(lambda);
    const double cdf = -std::expm1(-yk_el);
    double ll = -std::exp(eta) * cdf;
    if (obs.nu != 0.0) {
      const double log_f = std::log(k) + (k - 1.0) * std::log(obs.y) + lambda - yk_el;
      ll += eta + log_f;
    }
    return ll;
  };
  spec.total_log_lik = [](const Dataset& data, const Vector& theta) {
    const auto& cols = data.columns();
    if (cols.y.size() > 0 && cols.y.minCoeff() <= 0.0)
      throw InvalidObservationError("weibull_cure_model: y must be positive");
    const double k = std::exp(theta[5]);
    const double lambda = theta[6];
    const Eigen::ArrayXd eta = (cols.design * theta.head(5)).array();
    const Eigen::ArrayXd yk_el = (k * cols.log_y.array() + lambda).exp();
    const Eigen::ArrayXd cdf = -(-yk_el).expm1();
    double ll = -(eta.exp() * cdf).sum();
    ll += (cols.nu.array() *
           (eta + std::log(k) + (k - 1.0) * cols.log_y.array() + lambda - yk_el))
              .sum();
    return ll;
  };
  spec.constrain = [](const Vector& theta) {
    Vector out = theta;
    out[5] = std::exp(theta[5]);
    return out;
  };
  spec.unconstrain = [](const Vector& natural) {
    Vector out = natural;
    out[5] = std::log(natural[5]);
    return out;
  };
  return spec;
}

/// Simulate regression data: x ~ N(0,1), y = b0 + b1 x + N(0, sigma^2).
/// theta is natural scale (b0, b1, sigma).
inline Dataset generate_linear(int n, const Vector& theta, Dataset::Role role, RngStream& rng) {
  if (n < 1) throw ContractViolationError("generate_linear: n must be >= 1");
  if (!(theta[2] > 0.0)) throw ContractViolationError("generate_linear: sigma must be positive");
  Dataset data;
  data.role = role;
  data.kind = ObservationKind::regression;
  data.observations.resize(static_cast<std::size_t>(n));
  for (auto& obs : data.observations) {
    obs.x1 = rng.normal();
    obs.y = theta[0] + theta[1] * obs.x1 + theta[2] * rng.normal();
  }
  return data;
}

inline constexpr double kCureCensorTime = 5.5;

/// Inverse CDF of the Weibull with F(y) = 1 - exp(-y^k exp(lambda)),
/// evaluated at 1 - u so a uniform u maps directly to a draw.
inline double weibull_inverse_cdf_draw(double u, double k, double lambda) {
  return std::pow(-std::log(u) / std::exp(lambda), 1.0 / k);
}

/// Simulate cure-model data: covariates per the trial summaries, latent
/// cell count C ~ Poisson(exp(eta)), relapse time the minimum of C
/// Weibull draws, right-censored at 5.5.  theta is natural scale
/// (b0..b4, k, lambda).  The minimum over a Poisson number of iid
/// Weibulls has survival S(t) = exp(-exp(eta) F(t)) (S(inf) = P(C = 0)),
/// so each observation is a single inverse-CDF draw instead of C
/// explicit Weibull draws; exp(eta) can be astronomically large for
/// strongly shifted source parameters.
inline Dataset generate_cure(int n, const Vector& theta, Dataset::Role role, RngStream& rng) {
  if (n < 1) throw ContractViolationError("generate_cure: n must be >= 1");
  const double k = theta[5];
  if (!(k > 0.0)) throw ContractViolationError("generate_cure: k must be positive");
  const double lambda = theta[6];

  Dataset data;
  data.role = role;
  data.kind = ObservationKind::survival;
  data.observations.resize(static_cast<std::size_t>(n));
  for (auto& obs : data.observations) {
    obs.x1 = rng.bernoulli(0.511) ? 1.0 : 0.0;
    obs.x2 = rng.bernoulli(0.397) ? 1.0 : 0.0;
    const double s = 0.6 * rng.normal();
    obs.x3 = s / 0.6;  // exact N(0,1) standardization of s ~ N(0, 0.6^2)
    const double eta = theta[0] + theta[1] * obs.x1 + theta[2] * obs.x2 + theta[3] * obs.x3 +
                       theta[4] * obs.x2 * obs.x3;
    const double mu = std::exp(eta);
    // S(t) = exp(-mu F(t)); u >= S(censor) means an event before the cap
    const double q = -std::log(rng.uniform()) / mu;  // F(Y_min), maybe > 1
    const double f_censor = -std::expm1(-std::pow(kCureCensorTime, k) * std::exp(lambda));
    if (q >= f_censor) {
      obs.y = kCureCensorTime;
      obs.nu = 0.0;
    } else {
      obs.y = std::pow(-std::log1p(-q) / std::exp(lambda), 1.0 / k);
      obs.nu = 1.0;
    }
  }
  return data;
}

// -------------------------------------------------------------------------
// Dataset CSV round trip: decimal text with 17 significant digits, one
// header row; lines starting with '#' are metadata and skipped on read.

namespace detail {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_dataset_csv(std::ostream& out, const Dataset& data) {
  if (data.kind == ObservationKind::regression) {
    out << "y,x\n";
    for (const auto& obs : data.observations)
      out << detail::fmt17(obs.y) << ',' << detail::fmt17(obs.x1) << '\n';
  } else {
    out << "y,nu,x1,x2,x3\n";
    for (const auto& obs : data.observations)
      out << detail::fmt17(obs.y) << ',' << detail::fmt17(obs.nu) << ','
          << detail::fmt17(obs.x1) << ',' << detail::fmt17(obs.x2) << ','
          << detail::fmt17(obs.x3) << '\n';
  }
}

inline Dataset read_dataset_csv(std::istream& in, Dataset::Role role) {
  Dataset data;
  data.role = role;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!have_header) {
      if (fields.size() == 2 && fields[0] == "y" && fields[1] == "x") {
        data.kind = ObservationKind::regression;
      } else if (fields.size() == 5 && fields[0] == "y" && fields[1] == "nu") {
        data.kind = ObservationKind::survival;
      } else {
        throw InvalidObservationError("read_dataset_csv: unrecognized header: " + line);
      }
      have_header = true;
      continue;
    }
    Observation obs;
    if (data.kind == ObservationKind::regression) {
      if (fields.size() != 2) throw InvalidObservationError("read_dataset_csv: bad row: " + line);
      obs.y = std::stod(fields[0]);
      obs.x1 = std::stod(fields[1]);
    } else {
      if (fields.size() != 5) throw InvalidObservationError("read_dataset_csv: bad row: " + line);
      obs.y = std::stod(fields[0]);
      obs.nu = std::stod(fields[1]);
      obs.x1 = std::stod(fields[2]);
      obs.x2 = std::stod(fields[3]);
      obs.x3 = std::stod(fields[4]);
    }
    data.observations.push_back(obs);
  }
  if (!have_header) throw InvalidObservationError("read_dataset_csv: empty file");
  return data;
}

}  // namespace tsmc

#endif  // TSMC_MODEL_HPP
