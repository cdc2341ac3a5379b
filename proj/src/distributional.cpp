#include "hfrl/distributional.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hfrl {

void TqcSpec::validate() const {
  if (critics == 0 || quantiles == 0) throw std::invalid_argument("tqc: critics and quantiles must be positive");
  if (drop >= pooled()) throw std::invalid_argument("tqc: drop must be below the pooled atom count");
}

std::vector<double> quantile_midpoints(std::size_t m) {
  if (m == 0) throw std::invalid_argument("quantile_midpoints: M must be positive");
  std::vector<double> tau(m);
  for (std::size_t i = 0; i < m; ++i) tau[i] = (static_cast<double>(i) + 0.5) / static_cast<double>(m);
  return tau;
}

namespace {

void sort_and_shift(std::vector<double>& pooled, std::size_t drop, double r, double gamma_eff, double* out) {
  for (double z : pooled) {
    if (!std::isfinite(z)) throw std::domain_error("tqc_targets: non-finite atom");
  }
  if (drop >= pooled.size()) throw std::invalid_argument("tqc_targets: drop must be below the pooled atom count");
  std::stable_sort(pooled.begin(), pooled.end());
  const std::size_t kept = pooled.size() - drop;
  for (std::size_t j = 0; j < kept; ++j) out[j] = r + gamma_eff * pooled[j];
}

}  // namespace

std::vector<double> tqc_targets(std::span<const std::vector<double>> next_atoms, double n_step_return,
                                double gamma_eff, std::size_t drop) {
  std::vector<double> pooled;
  for (const auto& c : next_atoms) pooled.insert(pooled.end(), c.begin(), c.end());
  if (pooled.empty()) throw std::invalid_argument("tqc_targets: no atoms");
  std::vector<double> out(pooled.size() > drop ? pooled.size() - drop : 0);
  sort_and_shift(pooled, drop, n_step_return, gamma_eff, out.data());
  return out;
}

ad::Matrix tqc_targets(std::span<const ad::Matrix> next_atoms, std::span<const double> n_step_return,
                       std::span<const double> gamma_eff, std::size_t drop) {
  if (next_atoms.empty()) throw std::invalid_argument("tqc_targets: no critics");
  const ad::Index batch = next_atoms.front().rows();
  ad::Index pooled_size = 0;
  for (const auto& c : next_atoms) {
    if (c.rows() != batch) throw ad::ShapeError("tqc_targets: critic batch mismatch");
    pooled_size += c.cols();
  }
  if (static_cast<ad::Index>(n_step_return.size()) != batch || static_cast<ad::Index>(gamma_eff.size()) != batch) {
    throw ad::ShapeError("tqc_targets: return/discount length mismatch");
  }
  if (static_cast<ad::Index>(drop) >= pooled_size) throw std::invalid_argument("tqc_targets: drop too large");
  ad::Matrix out(batch, pooled_size - static_cast<ad::Index>(drop));
  std::vector<double> pooled(static_cast<std::size_t>(pooled_size));
  for (ad::Index b = 0; b < batch; ++b) {
    std::size_t k = 0;
    for (const auto& c : next_atoms) {
      for (ad::Index m = 0; m < c.cols(); ++m) pooled[k++] = c(b, m);
    }
    sort_and_shift(pooled, drop, n_step_return[static_cast<std::size_t>(b)], gamma_eff[static_cast<std::size_t>(b)],
                   out.row(b).data());
  }
  return out;
}

double quantile_huber(double delta, double tau) {
  const double a = std::abs(delta);
  const double huber = a <= 1.0 ? 0.5 * delta * delta : a - 0.5;
  return std::abs(tau - (delta < 0.0 ? 1.0 : 0.0)) * huber;
}

ad::Tensor quantile_huber_loss(const ad::Tensor& pred, const ad::Matrix& targets, std::span<const double> midpoints) {
  const ad::Index batch = pred.rows();
  const ad::Index m = pred.cols();
  if (targets.rows() != batch) throw ad::ShapeError("quantile_huber_loss: batch mismatch");
  if (static_cast<ad::Index>(midpoints.size()) != m) throw ad::ShapeError("quantile_huber_loss: midpoint count mismatch");
  if (batch == 0) throw ad::ShapeError("quantile_huber_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch);
  const std::vector<double> tau(midpoints.begin(), midpoints.end());
  ad::Matrix grad(batch, m);
  double loss = 0.0;
  const ad::Matrix& q = pred.value();
  for (ad::Index b = 0; b < batch; ++b) {
    for (ad::Index i = 0; i < m; ++i) {
      double g = 0.0;
      const double t = tau[static_cast<std::size_t>(i)];
      for (ad::Index j = 0; j < targets.cols(); ++j) {
        const double delta = targets(b, j) - q(b, i);
        const double w = std::abs(t - (delta < 0.0 ? 1.0 : 0.0));
        const double a = std::abs(delta);
        loss += w * (a <= 1.0 ? 0.5 * delta * delta : a - 0.5);
        g -= w * std::clamp(delta, -1.0, 1.0);
      }
      grad(b, i) = g * inv_b;
    }
  }
  return ad::Tensor::make(ad::Matrix::Constant(1, 1, loss * inv_b), {pred},
                          [grad](ad::Node& self) { self.parents[0]->accumulate(self.grad(0, 0) * grad); });
}

double mean_of(std::span<const double> kept) {
  if (kept.empty()) throw std::invalid_argument("truncation_mean: empty set");
  return std::accumulate(kept.begin(), kept.end(), 0.0) / static_cast<double>(kept.size());
}

double truncation_mean(std::span<const double> atoms, std::size_t drop) {
  if (drop >= atoms.size()) throw std::invalid_argument("truncation_mean: drop leaves an empty set");
  std::vector<double> sorted(atoms.begin(), atoms.end());
  std::stable_sort(sorted.begin(), sorted.end());
  return mean_of(std::span<const double>(sorted.data(), sorted.size() - drop));
}

}  // namespace hfrl
