#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfrl/spectral.hpp"

namespace hfrl {

class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Shortest distance between x and c on a circle of circumference `length`.
double periodic_distance(double x, double c, double length);

struct ActuatorBank {
  std::vector<double> centers;
  double width = 0.8;
  double amplitude = 1.0;
  std::size_t points = 0;
  std::vector<double> kernels;  // centers.size() x points, row-major

  static ActuatorBank make(const GridSpec& grid, std::size_t count = 8, double width = 0.8, double amplitude = 1.0);

  std::size_t count() const { return centers.size(); }
  double kernel(std::size_t i, double x, double length) const;
  std::span<const double> row(std::size_t i) const { return {kernels.data() + i * points, points}; }
};

enum class ReferenceCase { Zero, FourModeCosine, FourModeCosineOffset };

std::string to_string(ReferenceCase c);
ReferenceCase parse_reference_case(const std::string& name);  // zero | cos4 | cos4-offset

struct ReferenceTarget {
  ReferenceCase kind = ReferenceCase::Zero;
  std::array<double, 4> amplitudes{0.5, 0.5, 0.5, 0.5};
  double offset = 0.0;
  std::vector<double> profile;

  static ReferenceTarget make(ReferenceCase kind, const GridSpec& grid, std::array<double, 4> amplitudes = {0.5, 0.5, 0.5, 0.5},
                              double offset = 0.5);

  ZeroModePolicy zero_mode() const;
};

enum class Precision { Float64, Float32 };

// The 19-point training grid -0.225 + 0.025 k.
std::vector<double> default_mu_grid();

struct EnvConfig {
  GridSpec grid;
  double dt = 0.05;
  std::size_t substeps_per_action = 4;
  std::size_t burn_in_steps = 100;  // solver substeps
  std::size_t episode_length = 250;  // control steps
  double blowup_threshold = 1e3;
  double alpha = 0.1;
  std::size_t actuator_count = 8;
  double actuator_width = 0.8;
  double actuator_amplitude = 1.0;
  ReferenceCase reference = ReferenceCase::Zero;
  std::array<double, 4> reference_amplitudes{0.5, 0.5, 0.5, 0.5};
  double reference_offset = 0.5;
  double init_energy = -1.0;  // squared L2 norm of the initial field; <= 0 selects L (RMS 1)
  std::size_t init_modes = 8;
  bool stagger = true;
  std::size_t max_reset_attempts = 5;
  std::vector<double> mu_grid = default_mu_grid();
  Precision precision = Precision::Float64;

  void validate() const;
  double target_energy() const { return init_energy > 0.0 ? init_energy : grid.length; }
  double control_dt() const { return dt * static_cast<double>(substeps_per_action); }
};

struct EnvState {
  std::vector<double> y;
  double mu = 0.0;
  std::size_t step_count = 0;
  bool done = false;

  // [y_0 .. y_{N-1}, mu]
  std::vector<double> observation() const;
};

struct StepInfo {
  bool truncated = false;  // reached the episode horizon
  bool unstable = false;   // non-finite field or blow-up; transition must not be replayed
  std::vector<double> terminal_observation;  // filled by auto-resetting batch steps
  std::vector<double> applied_action;        // action after clipping to [-1, 1]
};

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

std::vector<double> forcing_field(double mu, const GridSpec& grid);
std::vector<double> control_field(std::span<const double> u, const ActuatorBank& bank);

// r = -(1/(2 T)) (dx sum e^2 + alpha dx |u|^2), e = y - y_ref.
double reward(std::span<const double> y, std::span<const double> u, const ReferenceTarget& ref, const EnvConfig& cfg);

// splitmix64-style mixing for counter-based per-slot streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

// Single controlled KS instance. Holds FFT plans, so one per worker.
class KsEnv {
 public:
  explicit KsEnv(EnvConfig config);
  ~KsEnv();
  KsEnv(KsEnv&&) noexcept;
  KsEnv& operator=(KsEnv&&) noexcept;

  const EnvConfig& config() const { return config_; }
  const ActuatorBank& actuators() const { return bank_; }
  const ReferenceTarget& reference() const { return reference_; }
  std::size_t action_dim() const { return bank_.count(); }
  std::size_t observation_dim() const { return config_.grid.points + 1; }

  // Random 8-mode sine superposition scaled to the target energy, before
  // burn-in and before the zero-mode policy.
  std::vector<double> initial_field(std::mt19937_64& rng) const;

  // Staggered reset: the stream depends only on (seed, env_index, episode).
  EnvState reset(std::size_t env_index, std::uint64_t seed, std::uint64_t episode, double mu);

  StepResult step(const EnvState& state, std::span<const double> u);

  // Advances `substeps` solver substeps holding the given total forcing.
  // Returns false on instability.
  bool advance(std::vector<double>& y, std::span<const double> total_forcing, std::size_t substeps);

  double reward(std::span<const double> y, std::span<const double> u) const;

 private:
  struct Solver;
  EnvConfig config_;
  ActuatorBank bank_;
  ReferenceTarget reference_;
  std::unique_ptr<Solver> solver_;
};

// N_env independent slots stepped in lockstep with auto-reset. mu is fixed per
// slot (round-robin over the configured grid unless given explicitly).
class KsEnsemble {
 public:
  KsEnsemble(EnvConfig config, std::size_t num_envs, std::uint64_t seed, std::vector<double> slot_mu = {});

  std::size_t size() const { return states_.size(); }
  const std::vector<EnvState>& states() const { return states_; }
  const std::vector<double>& slot_mu() const { return slot_mu_; }
  KsEnv& env() { return env_; }

  // actions: size() x action_dim, row-major.
  std::vector<StepResult> batch_step(std::span<const double> actions);

  // Overwrites a slot's state (tests and fault injection).
  void set_state(std::size_t slot, EnvState state) { states_.at(slot) = std::move(state); }

 private:
  KsEnv env_;
  std::uint64_t seed_;
  std::vector<double> slot_mu_;
  std::vector<std::uint64_t> episodes_;
  std::vector<EnvState> states_;
};

struct TrajectoryMeta {
  double mu = 0.0;
  std::string reference_case;
  std::uint64_t seed = 0;
  std::string config_hash;
};

// CSV with columns t, x_0..x_{N-1} plus a JSON sidecar (<path>.json).
void write_trajectory(const std::filesystem::path& csv_path, const std::vector<std::vector<double>>& rows,
                      double control_dt, const TrajectoryMeta& meta);

}  // namespace hfrl
