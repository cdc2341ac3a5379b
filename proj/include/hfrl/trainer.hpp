#pragma once

// FastTD3/TQC off-policy training over hypernetwork-generated actor/critics.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hfrl/config.hpp"
#include "hfrl/distributional.hpp"
#include "hfrl/hypernet.hpp"
#include "hfrl/optim.hpp"

namespace hfrl {

// Welford running mean / population variance per coordinate.
class RunningMoments {
 public:
  explicit RunningMoments(std::size_t dim = 1) : mean_(dim, 0.0), m2_(dim, 0.0) {}

  void update(std::span<const double> x);
  std::size_t dim() const { return mean_.size(); }
  std::uint64_t count() const { return count_; }
  double mean(std::size_t i = 0) const { return mean_.at(i); }
  // m2 / count; 1 until two samples have been seen.
  double variance(std::size_t i = 0) const;

  nlohmann::json to_json() const;
  static RunningMoments from_json(const nlohmann::json& j);

 private:
  std::uint64_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

class ObsNormalizer {
 public:
  explicit ObsNormalizer(std::size_t dim = 1, double eps = 1e-8) : moments_(dim), eps_(eps) {}

  void update(std::span<const double> y) { moments_.update(y); }
  // (y - mean) / sqrt(var + eps), row-wise.
  Matrix normalize(const Matrix& y) const;
  const RunningMoments& moments() const { return moments_; }
  double eps() const { return eps_; }

  nlohmann::json to_json() const;
  static ObsNormalizer from_json(const nlohmann::json& j);

 private:
  RunningMoments moments_;
  double eps_;
};

// Scales rewards by the running standard deviation; no mean shift.
class RewardNormalizer {
 public:
  explicit RewardNormalizer(double eps = 1e-8) : eps_(eps) {}

  void update(double r) { moments_.update(std::span<const double>(&r, 1)); }
  double scale(double r) const;
  const RunningMoments& moments() const { return moments_; }

  nlohmann::json to_json() const;
  static RewardNormalizer from_json(const nlohmann::json& j);

 private:
  RunningMoments moments_;
  double eps_;
};

struct Transition {
  std::vector<double> obs;       // raw field, length N
  std::vector<double> action;    // applied action
  std::vector<double> next_obs;  // raw field after the last step of the window
  double mu = 0.0;
  double n_step_return = 0.0;      // sum gamma^i * scaled r
  double n_step_return_raw = 0.0;  // same over raw rewards
  double gamma_eff = 0.0;          // gamma^len, or 0 when the window ends an episode
  std::size_t length = 0;
  bool done = false;
};

// Per-slot queue that turns single steps into n-step transitions.
class NStepAssembler {
 public:
  NStepAssembler(std::size_t n, double gamma, bool bootstrap_on_timeout = false)
      : n_(n), gamma_(gamma), bootstrap_on_timeout_(bootstrap_on_timeout) {}

  // Adds one step. `terminal` ends the episode by termination (discount 0),
  // `truncated` by the time limit. Returns the transitions completed.
  std::vector<Transition> push(std::vector<double> obs, std::vector<double> action, double mu, double reward_scaled,
                               double reward_raw, const std::vector<double>& next_obs, bool terminal, bool truncated);

  // Closes the queue as terminal at `last_obs` (used when a step is discarded).
  std::vector<Transition> flush_terminal(const std::vector<double>& last_obs);

  std::size_t pending() const { return queue_.size(); }

 private:
  struct Entry {
    std::vector<double> obs;
    std::vector<double> action;
    double mu;
    double r_scaled;
    double r_raw;
  };
  Transition emit(const std::vector<double>& next_obs, std::size_t len, bool done) const;

  std::size_t n_;
  double gamma_;
  bool bootstrap_on_timeout_;
  std::deque<Entry> queue_;
};

struct ReplayBatch {
  Matrix obs;
  Matrix action;
  Matrix next_obs;
  std::vector<double> mu;
  std::vector<double> n_step_return;
  std::vector<double> gamma_eff;
  std::size_t size() const { return mu.size(); }
};

class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t obs_dim, std::size_t action_dim);

  void push(const Transition& t);
  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t inserted() const { return inserted_; }
  Transition at(std::size_t i) const;
  ReplayBatch sample(std::size_t batch, std::mt19937_64& rng) const;
  ReplayBatch gather(std::span<const std::size_t> index) const;

 private:
  std::size_t capacity_;
  std::size_t obs_dim_;
  std::size_t action_dim_;
  std::size_t size_ = 0;
  std::size_t head_ = 0;
  std::size_t inserted_ = 0;
  std::vector<double> obs_, next_obs_, action_, mu_, ret_, ret_raw_, gamma_, len_, done_;
};

// Online and target hypernetworks plus normalizers.
class Agent {
 public:
  explicit Agent(const ExperimentConfig& config);

  const ExperimentConfig& config() const { return config_; }
  HyperNetwork& actor() { return actor_; }
  HyperNetwork& actor_target() { return actor_target_; }
  HyperNetwork& critic(std::size_t i) { return critics_.at(i); }
  HyperNetwork& critic_target(std::size_t i) { return critic_targets_.at(i); }
  ObsNormalizer& obs_normalizer() { return obs_norm_; }
  const ObsNormalizer& obs_normalizer() const { return obs_norm_; }
  RewardNormalizer& reward_normalizer() { return reward_norm_; }

  // Deterministic policy on raw fields (rows) with per-row mu. No graph.
  Matrix act(const Matrix& y_raw, std::span<const double> mu);

  // Quantile atoms of critic i at raw fields and actions. No graph.
  Matrix quantiles(std::size_t i, const Matrix& y_raw, const Matrix& actions, std::span<const double> mu);

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static Agent load(const std::filesystem::path& path, nlohmann::json* manifest = nullptr);

 private:
  ExperimentConfig config_;
  HyperNetwork actor_;
  HyperNetwork actor_target_;
  std::vector<HyperNetwork> critics_;
  std::vector<HyperNetwork> critic_targets_;
  ObsNormalizer obs_norm_;
  RewardNormalizer reward_norm_;
};

// Gradient updates against sampled batches.
class Learner {
 public:
  Learner(Agent& agent, std::uint64_t seed);

  // Run one power iteration per backbone layer on each online forward.
  bool spectral_updates = true;

  // One critic step; returns the loss, or NaN when the step was skipped.
  double critic_update(const ReplayBatch& batch);
  // Ascent on critic 1's mean atom; returns the objective or NaN if skipped.
  double actor_update(const ReplayBatch& batch);
  void polyak();

  // Critic loss for a batch without stepping (tests and diagnostics).
  ad::Tensor critic_loss(const ReplayBatch& batch, const Matrix& next_actions);
  Matrix target_actions(const ReplayBatch& batch);

  std::size_t gradient_steps() const { return gradient_steps_; }
  std::size_t skipped() const { return skipped_; }
  std::size_t consecutive_nonfinite() const { return consecutive_nonfinite_; }
  double critic_lr() const { return critic_opt_.current_lr(); }
  optim::AdamW& critic_optimizer() { return critic_opt_; }
  optim::AdamW& actor_optimizer() { return actor_opt_; }

  // Runs the critic update and, on every actor_delay-th call, the actor
  // update and Polyak averaging. Returns {critic loss, actor objective}.
  std::pair<double, double> gradient_step(const ReplayBatch& batch);

 private:
  Agent& agent_;
  std::mt19937_64 rng_;
  std::vector<double> midpoints_;
  optim::AdamW critic_opt_;
  optim::AdamW actor_opt_;
  std::size_t gradient_steps_ = 0;
  std::size_t skipped_ = 0;
  std::size_t consecutive_nonfinite_ = 0;
};

using Policy = std::function<Matrix(const Matrix& y_raw, std::span<const double> mu)>;

struct EpisodeStats {
  std::vector<double> mu;
  std::vector<double> returns;  // raw episodic return per episode
  std::vector<bool> unstable;
  double mean() const;
  double min() const;
  double max() const;
};

// Runs episodes in lockstep; episode e uses mu[e] and a reset stream derived
// from (seed, e). Rewards are raw.
EpisodeStats run_episodes(const EnvConfig& env, const Policy& policy, std::span<const double> mu, std::uint64_t seed);

Policy agent_policy(Agent& agent);
Policy random_policy(std::size_t action_dim, std::uint64_t seed);

// mu values for n episodes cycling through `grid`.
std::vector<double> balanced_mu(std::span<const double> grid, std::size_t n);

struct MetricsRow {
  std::size_t step = 0;
  double train_reward_rolling = std::numeric_limits<double>::quiet_NaN();
  double eval_mean = 0.0;
  double eval_min = 0.0;
  double eval_max = 0.0;
  double critic_loss = std::numeric_limits<double>::quiet_NaN();
  double actor_obj = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
  double wall_clock_s = 0.0;
};

std::string metrics_header();
std::string format_metrics_row(const MetricsRow& row);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

struct TrainOptions {
  bool write_files = true;
  bool verbose = false;
  // Observers for tests and diagnostics.
  std::function<void(std::size_t env_steps, bool policy_used)> on_collect;
  std::function<void(const ReplayBuffer&)> inspect_replay;  // called once, after the last update
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::filesystem::path checkpoint;
  double reuse_ratio = 0.0;
  std::size_t env_steps = 0;
  std::size_t gradient_steps = 0;
  std::size_t skipped_updates = 0;
  std::size_t replay_inserted = 0;
  std::size_t unstable_transitions = 0;
  double wall_clock_s = 0.0;
};

// Writes metrics.csv, run.json and checkpoint.bin under out_dir.
TrainResult train(const ExperimentConfig& config, const std::filesystem::path& out_dir, const TrainOptions& options = {});

}  // namespace hfrl
