#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "hfrl/ks_env.hpp"

namespace hfrl::test {

inline double l2_norm(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Benettin two-trajectory estimate of the leading Lyapunov exponent of the
// uncontrolled system: renormalize the separation every `interval` time units.
inline double benettin_lyapunov(const EnvConfig& cfg, double mu, double horizon, std::uint64_t seed,
                                double interval = 1.0, double d0 = 1e-8) {
  KsEnv env(cfg);
  auto y = env.reset(0, seed, 0, mu).y;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise;
  std::vector<double> z(y.size());
  double mean = 0.0;
  for (auto& v : z) {
    v = noise(rng);
    mean += v;
  }
  mean /= static_cast<double>(z.size());
  for (auto& v : z) v -= mean;  // keep the perturbation in the zero-mean subspace
  const double n0 = l2_norm(z, std::vector<double>(z.size(), 0.0));
  for (std::size_t i = 0; i < y.size(); ++i) z[i] = y[i] + d0 * z[i] / n0;
  const auto forcing = forcing_field(mu, cfg.grid);
  const auto substeps = static_cast<std::size_t>(std::lround(interval / cfg.dt));
  const auto rounds = static_cast<std::size_t>(std::lround(horizon / interval));
  double sum = 0.0;
  for (std::size_t r = 0; r < rounds; ++r) {
    if (!env.advance(y, forcing, substeps) || !env.advance(z, forcing, substeps)) return std::nan("");
    const double d = l2_norm(y, z);
    sum += std::log(d / d0);
    for (std::size_t i = 0; i < y.size(); ++i) z[i] = y[i] + (z[i] - y[i]) * d0 / d;
  }
  return sum / (static_cast<double>(rounds) * interval);
}

}  // namespace hfrl::test
