#pragma once

// Full run specification, serialized as JSON.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "hfrl/hypernet.hpp"
#include "hfrl/ks_env.hpp"

namespace hfrl {

struct TrainerConfig {
  std::size_t num_envs = 64;
  std::size_t total_env_steps = 200000;  // transitions across all slots
  std::size_t batch_size = 1024;
  std::size_t gradient_steps = 2;  // per ensemble step
  std::size_t n_step = 3;
  double gamma = 0.99;
  double tau = 0.01;
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double exploration_fraction = 0.05;
  double exploration_noise = 0.05;
  double target_noise = 0.2;
  double target_noise_clip = 0.5;
  std::size_t actor_delay = 2;
  std::size_t buffer_capacity = 200000;
  std::size_t drop = 5;
  double eval_interval_fraction = 0.05;
  std::size_t eval_episodes = 10;
  std::vector<double> eval_mu;  // empty selects the training grid
  double normalizer_eps = 1e-8;
  bool bootstrap_on_timeout = false;
  std::size_t max_consecutive_nonfinite = 100;
  std::size_t rolling_window = 100;  // episodes in the rolling train return

  double reuse_ratio() const {
    return static_cast<double>(gradient_steps) * static_cast<double>(batch_size) / static_cast<double>(num_envs);
  }
  std::size_t iterations() const { return (total_env_steps + num_envs - 1) / num_envs; }
  std::size_t total_gradient_steps() const { return iterations() * gradient_steps; }
  void validate() const;
};

struct ExperimentConfig {
  EnvConfig env;
  EncoderConfig encoder;
  Index hidden = 256;
  Index quantiles = 25;
  TrainerConfig trainer;
  std::uint64_t seed = 0;

  TargetTopology topology() const;
  void validate() const;
};

// Defaults plus the reduced hypernetwork widths used for desk-scale runs.
ExperimentConfig desk_config();

nlohmann::json to_json(const EnvConfig& cfg);
nlohmann::json to_json(const EncoderConfig& cfg);
nlohmann::json to_json(const TrainerConfig& cfg);
nlohmann::json to_json(const ExperimentConfig& cfg);

// Missing keys keep their defaults; unknown keys are rejected.
EnvConfig env_from_json(const nlohmann::json& j);
EncoderConfig encoder_from_json(const nlohmann::json& j);
TrainerConfig trainer_from_json(const nlohmann::json& j);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

ExperimentConfig load_config(const std::filesystem::path& path);

// FNV-1a 64 over the compact JSON dump, as 16 hex digits. The experiment hash
// excludes the seed; the environment hash covers only the env section.
std::string fnv1a_hex(const std::string& text);
std::string config_hash(const ExperimentConfig& cfg);
std::string env_hash(const EnvConfig& cfg);

}  // namespace hfrl
