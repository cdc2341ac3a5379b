#pragma once

// Truncated quantile critic targets and the asymmetric quantile Huber loss.

#include <cstddef>
#include <span>
#include <vector>

#include "hfrl/autodiff.hpp"

namespace hfrl {

struct TqcSpec {
  std::size_t critics = 2;
  std::size_t quantiles = 25;
  std::size_t drop = 5;

  std::size_t pooled() const { return critics * quantiles; }
  std::size_t kept() const { return pooled() - drop; }
  void validate() const;
};

// tau_m = (m - 0.5) / M for m = 1..M.
std::vector<double> quantile_midpoints(std::size_t m);

// Pools the atoms, sorts ascending (stable in critic-then-atom order), keeps
// the lowest pooled - drop and maps each to r + gamma_eff * z.
std::vector<double> tqc_targets(std::span<const std::vector<double>> next_atoms, double n_step_return,
                                double gamma_eff, std::size_t drop);

// Batched form: each critic's atoms are batch x M; returns batch x kept.
ad::Matrix tqc_targets(std::span<const ad::Matrix> next_atoms, std::span<const double> n_step_return,
                       std::span<const double> gamma_eff, std::size_t drop);

// (1/B) sum_b sum_m sum_j rho_{tau_m}(Y_bj - q_bm), with the Huber breakpoint
// at 1. pred is batch x M (differentiable); targets is batch x K (constant).
ad::Tensor quantile_huber_loss(const ad::Tensor& pred, const ad::Matrix& targets, std::span<const double> midpoints);

// Scalar asymmetric Huber for one residual delta = target - prediction.
double quantile_huber(double delta, double tau);

// Mean of the kept (truncated) pooled atoms.
double truncation_mean(std::span<const double> atoms, std::size_t drop);
double mean_of(std::span<const double> kept);

}  // namespace hfrl
