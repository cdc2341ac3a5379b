#include "hfrl/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hfrl::optim {

double cosine_lr(double base_lr, std::size_t t, std::size_t total) {
  if (total == 0) return base_lr;
  if (t >= total) return 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

AdamW::AdamW(std::vector<ad::Tensor> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  state_.m.reserve(params_.size());
  state_.v.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.requires_grad()) throw std::invalid_argument("AdamW: parameter does not require grad");
    state_.m.push_back(ad::Matrix::Zero(p.rows(), p.cols()));
    state_.v.push_back(ad::Matrix::Zero(p.rows(), p.cols()));
  }
}

StepStatus AdamW::step() {
  for (const auto& p : params_) {
    if (p.has_grad() && !p.grad().allFinite()) return StepStatus::SkippedNonFinite;
  }
  const double lr = current_lr();
  const std::size_t t = ++state_.step;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double decay = 1.0 - lr * config_.weight_decay;
  const double inv_bc1 = 1.0 / bc1;
  const double inv_bc2 = 1.0 / bc2;
  const double eps = config_.eps;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    double* m = state_.m[i].data();
    double* v = state_.v[i].data();
    double* w = p.mutable_value().data();
    const double* g = p.has_grad() ? p.grad().data() : nullptr;
    const ad::Index n = p.size();
    for (ad::Index k = 0; k < n; ++k) {
      const double gk = g ? g[k] : 0.0;
      m[k] = b1 * m[k] + (1.0 - b1) * gk;
      v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
      if (lr != 0.0) w[k] = w[k] * decay - lr * (m[k] * inv_bc1) / (std::sqrt(v[k] * inv_bc2) + eps);
    }
  }
  return StepStatus::Applied;
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void polyak_update(const std::vector<ad::Tensor>& online, const std::vector<ad::Tensor>& target, double tau) {
  if (online.size() != target.size()) throw ad::ShapeError("polyak_update: parameter count mismatch");
  for (std::size_t i = 0; i < online.size(); ++i) {
    if (online[i].rows() != target[i].rows() || online[i].cols() != target[i].cols()) {
      throw ad::ShapeError("polyak_update: shape mismatch at parameter " + std::to_string(i));
    }
    ad::Tensor t = target[i];
    ad::Matrix& w = t.mutable_value();
    if (tau == 1.0) {
      w = online[i].value();
    } else if (tau != 0.0) {
      w = (1.0 - tau) * w + tau * online[i].value();
    }
  }
}

}  // namespace hfrl::optim
