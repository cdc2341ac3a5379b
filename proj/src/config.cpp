#include "hfrl/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

namespace hfrl {

using nlohmann::json;

namespace {

class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw std::invalid_argument("config: section '" + section_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value for " + section_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const char* key) const { return j_.at(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw std::invalid_argument("config: unknown key " + section_ + "." + key);
    }
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

std::string precision_name(Precision p) { return p == Precision::Float32 ? "float32" : "float64"; }

Precision parse_precision(const std::string& s) {
  if (s == "float64") return Precision::Float64;
  if (s == "float32") return Precision::Float32;
  throw std::invalid_argument("config: precision must be float64|float32, got '" + s + "'");
}

}  // namespace

void TrainerConfig::validate() const {
  if (num_envs == 0) throw std::invalid_argument("trainer: num_envs must be positive");
  if (total_env_steps == 0) throw std::invalid_argument("trainer: total_env_steps must be positive");
  if (batch_size == 0) throw std::invalid_argument("trainer: batch_size must be positive");
  if (n_step == 0) throw std::invalid_argument("trainer: n_step must be positive");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("trainer: gamma must lie in [0, 1]");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("trainer: tau must lie in [0, 1]");
  if (!(lr > 0.0)) throw std::invalid_argument("trainer: lr must be positive");
  if (!(exploration_fraction >= 0.0 && exploration_fraction <= 1.0)) {
    throw std::invalid_argument("trainer: exploration_fraction must lie in [0, 1]");
  }
  if (actor_delay == 0) throw std::invalid_argument("trainer: actor_delay must be positive");
  if (buffer_capacity == 0) throw std::invalid_argument("trainer: buffer_capacity must be positive");
  if (!(eval_interval_fraction > 0.0 && eval_interval_fraction <= 1.0)) {
    throw std::invalid_argument("trainer: eval_interval_fraction must lie in (0, 1]");
  }
  if (eval_episodes == 0) throw std::invalid_argument("trainer: eval_episodes must be positive");
  if (!(normalizer_eps > 0.0)) throw std::invalid_argument("trainer: normalizer_eps must be positive");
}

TargetTopology ExperimentConfig::topology() const {
  TargetTopology t;
  t.state_dim = static_cast<Index>(env.grid.points);
  t.action_dim = static_cast<Index>(env.actuator_count);
  t.hidden = hidden;
  t.quantiles = quantiles;
  t.critic_heads = 2;
  return t;
}

void ExperimentConfig::validate() const {
  env.validate();
  encoder.validate();
  trainer.validate();
  if (hidden <= 0 || quantiles <= 0) throw std::invalid_argument("config: hidden and quantiles must be positive");
  if (trainer.drop >= 2 * static_cast<std::size_t>(quantiles)) {
    throw std::invalid_argument("config: trainer.drop must be below 2 * quantiles");
  }
}

ExperimentConfig desk_config() {
  ExperimentConfig cfg;
  cfg.env.mu_grid = {-0.075, 0.0, 0.075};
  cfg.encoder.kind = EncoderKind::Mlp;
  cfg.encoder.stage_widths = {16, 32, 64};
  cfg.trainer.eval_mu = {0.0};
  return cfg;
}

json to_json(const EnvConfig& c) {
  return json{{"length", c.grid.length},
              {"points", c.grid.points},
              {"dt", c.dt},
              {"substeps_per_action", c.substeps_per_action},
              {"burn_in_steps", c.burn_in_steps},
              {"episode_length", c.episode_length},
              {"blowup_threshold", c.blowup_threshold},
              {"alpha", c.alpha},
              {"actuator_count", c.actuator_count},
              {"actuator_width", c.actuator_width},
              {"actuator_amplitude", c.actuator_amplitude},
              {"reference", to_string(c.reference)},
              {"reference_amplitudes", c.reference_amplitudes},
              {"reference_offset", c.reference_offset},
              {"init_energy", c.init_energy},
              {"init_modes", c.init_modes},
              {"stagger", c.stagger},
              {"max_reset_attempts", c.max_reset_attempts},
              {"mu_grid", c.mu_grid},
              {"precision", precision_name(c.precision)}};
}

json to_json(const EncoderConfig& c) {
  return json{{"kind", to_string(c.kind)},
              {"stage_widths", c.stage_widths},
              {"blocks_per_stage", c.blocks_per_stage},
              {"spectral_norm", c.spectral_norm},
              {"fourier_mapping", c.fourier_mapping},
              {"fourier_sigma", c.fourier_sigma},
              {"kan_basis", c.kan_basis},
              {"ln_eps", c.ln_eps},
              {"head_input_scale", c.head_input_scale},
              {"mu_scale", c.mu.scale}};
}

json to_json(const TrainerConfig& c) {
  return json{{"num_envs", c.num_envs},
              {"total_env_steps", c.total_env_steps},
              {"batch_size", c.batch_size},
              {"gradient_steps", c.gradient_steps},
              {"n_step", c.n_step},
              {"gamma", c.gamma},
              {"tau", c.tau},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"exploration_fraction", c.exploration_fraction},
              {"exploration_noise", c.exploration_noise},
              {"target_noise", c.target_noise},
              {"target_noise_clip", c.target_noise_clip},
              {"actor_delay", c.actor_delay},
              {"buffer_capacity", c.buffer_capacity},
              {"drop", c.drop},
              {"eval_interval_fraction", c.eval_interval_fraction},
              {"eval_episodes", c.eval_episodes},
              {"eval_mu", c.eval_mu},
              {"normalizer_eps", c.normalizer_eps},
              {"bootstrap_on_timeout", c.bootstrap_on_timeout},
              {"max_consecutive_nonfinite", c.max_consecutive_nonfinite},
              {"rolling_window", c.rolling_window}};
}

json to_json(const ExperimentConfig& c) {
  return json{{"env", to_json(c.env)},
              {"encoder", to_json(c.encoder)},
              {"topology", {{"hidden", c.hidden}, {"quantiles", c.quantiles}}},
              {"trainer", to_json(c.trainer)},
              {"seed", c.seed}};
}

EnvConfig env_from_json(const json& j) {
  EnvConfig c;
  Reader r(j, "env");
  r.get("length", c.grid.length);
  r.get("points", c.grid.points);
  r.get("dt", c.dt);
  r.get("substeps_per_action", c.substeps_per_action);
  r.get("burn_in_steps", c.burn_in_steps);
  r.get("episode_length", c.episode_length);
  r.get("blowup_threshold", c.blowup_threshold);
  r.get("alpha", c.alpha);
  r.get("actuator_count", c.actuator_count);
  r.get("actuator_width", c.actuator_width);
  r.get("actuator_amplitude", c.actuator_amplitude);
  if (r.has("reference")) c.reference = parse_reference_case(r.at("reference").get<std::string>());
  r.get("reference_amplitudes", c.reference_amplitudes);
  r.get("reference_offset", c.reference_offset);
  r.get("init_energy", c.init_energy);
  r.get("init_modes", c.init_modes);
  r.get("stagger", c.stagger);
  r.get("max_reset_attempts", c.max_reset_attempts);
  r.get("mu_grid", c.mu_grid);
  if (r.has("precision")) c.precision = parse_precision(r.at("precision").get<std::string>());
  r.finish();
  return c;
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  Reader r(j, "encoder");
  if (r.has("kind")) c.kind = parse_encoder_kind(r.at("kind").get<std::string>());
  r.get("stage_widths", c.stage_widths);
  r.get("blocks_per_stage", c.blocks_per_stage);
  r.get("spectral_norm", c.spectral_norm);
  r.get("fourier_mapping", c.fourier_mapping);
  r.get("fourier_sigma", c.fourier_sigma);
  r.get("kan_basis", c.kan_basis);
  r.get("ln_eps", c.ln_eps);
  r.get("head_input_scale", c.head_input_scale);
  r.get("mu_scale", c.mu.scale);
  r.finish();
  return c;
}

TrainerConfig trainer_from_json(const json& j) {
  TrainerConfig c;
  Reader r(j, "trainer");
  r.get("num_envs", c.num_envs);
  r.get("total_env_steps", c.total_env_steps);
  r.get("batch_size", c.batch_size);
  r.get("gradient_steps", c.gradient_steps);
  r.get("n_step", c.n_step);
  r.get("gamma", c.gamma);
  r.get("tau", c.tau);
  r.get("lr", c.lr);
  r.get("weight_decay", c.weight_decay);
  r.get("exploration_fraction", c.exploration_fraction);
  r.get("exploration_noise", c.exploration_noise);
  r.get("target_noise", c.target_noise);
  r.get("target_noise_clip", c.target_noise_clip);
  r.get("actor_delay", c.actor_delay);
  r.get("buffer_capacity", c.buffer_capacity);
  r.get("drop", c.drop);
  r.get("eval_interval_fraction", c.eval_interval_fraction);
  r.get("eval_episodes", c.eval_episodes);
  r.get("eval_mu", c.eval_mu);
  r.get("normalizer_eps", c.normalizer_eps);
  r.get("bootstrap_on_timeout", c.bootstrap_on_timeout);
  r.get("max_consecutive_nonfinite", c.max_consecutive_nonfinite);
  r.get("rolling_window", c.rolling_window);
  r.finish();
  return c;
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c;
  Reader r(j, "config");
  if (r.has("env")) c.env = env_from_json(r.at("env"));
  if (r.has("encoder")) c.encoder = encoder_from_json(r.at("encoder"));
  if (r.has("topology")) {
    Reader t(r.at("topology"), "topology");
    t.get("hidden", c.hidden);
    t.get("quantiles", c.quantiles);
    t.finish();
  }
  if (r.has("trainer")) c.trainer = trainer_from_json(r.at("trainer"));
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config: parse error in " + path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("seed");
  return fnv1a_hex(j.dump());
}

std::string env_hash(const EnvConfig& cfg) { return fnv1a_hex(to_json(cfg).dump()); }

}  // namespace hfrl
