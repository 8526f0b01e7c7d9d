#ifndef TSMC_RNG_HPP
#define TSMC_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>

namespace tsmc {

/// Counter-based splittable random stream.
///
/// Each draw hashes (key, counter) with the splitmix64 finalizer, so a
/// stream is a pure function of its key and position.  Substreams are
/// derived by hashing the parent key with a child index, which lets
/// replicates, particles and MCMC chains own independent streams that
/// reproduce bit-identically regardless of execution order.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key = 0) : key_(key), ctr_(0) {}

  static RngStream root(std::uint64_t seed) { return RngStream(mix(seed, 0x243F6A8885A308D3ull)); }

  /// Independent child stream; the parent is unaffected.
  RngStream split(std::uint64_t index) const { return RngStream(mix(key_, index ^ 0xD1B54A32D192ED03ull)); }

  std::uint64_t next_u64() { return mix(key_, ctr_++); }

  /// Uniform on (0, 1); never returns an exact endpoint.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1p-53;
  }

  /// Standard normal via Box-Muller (two uniforms per draw, no cache).
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Gamma(shape, 1) via Marsaglia-Tsang, boosted for shape < 1.
  double gamma(double shape) {
    if (shape <= 0.0) throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

  /// Exact Poisson draw: inversion for small rates, PTRS rejection above.
  long poisson(double rate) {
    if (rate < 0.0) throw std::invalid_argument("poisson: rate must be non-negative");
    if (rate == 0.0) return 0;
    if (rate < 30.0) {
      const double l = std::exp(-rate);
      long k = 0;
      double p = uniform();
      while (p > l) {
        p *= uniform();
        ++k;
      }
      return k;
    }
    return poisson_ptrs(rate);
  }

 private:
  // Hoermann's transformed rejection with squeeze (PTRS), exact for rate >= 10.
  long poisson_ptrs(double rate) {
    const double slam = std::sqrt(rate);
    const double loglam = std::log(rate);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
      const double u = uniform() - 0.5;
      const double v = uniform();
      const double us = 0.5 - std::abs(u);
      const double k = std::floor((2.0 * a / us + b) * u + rate + 0.43);
      if (us >= 0.07 && v <= vr) return static_cast<long>(k);
      if (k < 0.0 || (us < 0.013 && v > us)) continue;
      if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b) <=
          k * loglam - rate - std::lgamma(k + 1.0)) {
        return static_cast<long>(k);
      }
    }
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t ctr_;
};

}  // namespace tsmc

#endif  // TSMC_RNG_HPP
