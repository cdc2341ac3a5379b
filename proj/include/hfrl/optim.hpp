#pragma once

#include <cstddef>
#include <vector>

#include "hfrl/autodiff.hpp"

namespace hfrl::optim {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::size_t total_steps = 0;  // cosine horizon; 0 disables annealing
};

// base_lr * 0.5 (1 + cos(pi t / T)), clamped to 0 for t >= T.
double cosine_lr(double base_lr, std::size_t t, std::size_t total);

struct AdamWState {
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
  std::size_t step = 0;  // completed updates
};

enum class StepStatus { Applied, SkippedNonFinite };

class AdamW {
 public:
  AdamW(std::vector<ad::Tensor> params, AdamWConfig config);

  double current_lr() const { return cosine_lr(config_.lr, state_.step, config_.total_steps); }

  // Decoupled weight decay, bias-corrected moments. Parameters without a
  // gradient are treated as having a zero gradient. A non-finite gradient
  // anywhere skips the whole update and leaves the state untouched.
  StepStatus step();
  void zero_grad();

  const AdamWState& state() const { return state_; }
  AdamWState& mutable_state() { return state_; }
  const std::vector<ad::Tensor>& params() const { return params_; }
  const AdamWConfig& config() const { return config_; }

 private:
  std::vector<ad::Tensor> params_;
  AdamWConfig config_;
  AdamWState state_;
};

// target <- (1 - tau) target + tau online, elementwise.
void polyak_update(const std::vector<ad::Tensor>& online, const std::vector<ad::Tensor>& target, double tau);

}  // namespace hfrl::optim
