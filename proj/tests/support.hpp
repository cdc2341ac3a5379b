#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "hfrl/autodiff.hpp"
#include "hfrl/config.hpp"

namespace hfrl::test {

using ad::Matrix;
using ad::Tensor;

inline Matrix random_matrix(ad::Index r, ad::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(r, c);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

// ||g_analytic - g_fd|| / (||g_analytic|| + ||g_fd||) over all inputs, with
// central differences of step eps. f must return a scalar tensor.
inline double gradient_error(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Matrix> inputs,
                             double eps = 1e-6) {
  std::vector<Tensor> params;
  for (auto& m : inputs) params.push_back(Tensor::parameter(m));
  ad::backward(f(params));
  double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Matrix analytic = params[p].has_grad() ? params[p].grad() : Matrix::Zero(inputs[p].rows(), inputs[p].cols());
    for (ad::Index k = 0; k < inputs[p].size(); ++k) {
      const auto eval_at = [&](double delta) {
        std::vector<Tensor> shifted;
        for (std::size_t q = 0; q < inputs.size(); ++q) {
          Matrix m = inputs[q];
          if (q == p) m.data()[k] += delta;
          shifted.push_back(Tensor::constant(m));
        }
        ad::NoGradGuard guard;
        return f(shifted).item();
      };
      const double numeric = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
      const double a = analytic.data()[k];
      diff += (a - numeric) * (a - numeric);
      norm_a += a * a;
      norm_n += numeric * numeric;
    }
  }
  const double denom = std::sqrt(norm_a) + std::sqrt(norm_n);
  return denom < 1e-300 ? 0.0 : std::sqrt(diff) / denom;
}

// Smallest configuration that exercises every code path quickly.
inline ExperimentConfig tiny_config(EncoderKind kind = EncoderKind::Mlp) {
  ExperimentConfig cfg;
  cfg.env.grid.points = 16;
  cfg.env.actuator_count = 4;
  cfg.env.episode_length = 20;
  cfg.env.burn_in_steps = 20;
  cfg.env.init_modes = 4;
  cfg.env.mu_grid = {-0.075, 0.0, 0.075};
  cfg.encoder.kind = kind;
  cfg.encoder.stage_widths = {4, 6};
  cfg.encoder.blocks_per_stage = 1;
  cfg.encoder.fourier_mapping = 8;
  cfg.encoder.kan_basis = 3;
  cfg.hidden = 8;
  cfg.quantiles = 3;
  cfg.trainer.num_envs = 4;
  cfg.trainer.total_env_steps = 160;
  cfg.trainer.batch_size = 8;
  cfg.trainer.buffer_capacity = 200;
  cfg.trainer.drop = 1;
  cfg.trainer.eval_episodes = 2;
  cfg.trainer.eval_interval_fraction = 0.25;
  cfg.trainer.exploration_fraction = 0.25;
  cfg.seed = 3;
  return cfg;
}

}  // namespace hfrl::test
