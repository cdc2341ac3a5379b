#include "hfrl/ks_env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>

#include "json.hpp"

namespace hfrl {

double periodic_distance(double x, double c, double length) {
  double d = std::fmod(std::abs(x - c), length);
  return std::min(d, length - d);
}

ActuatorBank ActuatorBank::make(const GridSpec& grid, std::size_t count, double width, double amplitude) {
  grid.validate();
  if (count == 0) throw std::invalid_argument("ActuatorBank: need at least one actuator");
  if (!(width > 0.0)) throw std::invalid_argument("ActuatorBank: width must be positive");
  ActuatorBank bank;
  bank.width = width;
  bank.amplitude = amplitude;
  bank.points = grid.points;
  bank.centers.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    bank.centers[i] = grid.length * static_cast<double>(i) / static_cast<double>(count);
  }
  bank.kernels.resize(count * grid.points);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < grid.points; ++j) {
      bank.kernels[i * grid.points + j] = bank.kernel(i, grid.x(j), grid.length);
    }
  }
  return bank;
}

double ActuatorBank::kernel(std::size_t i, double x, double length) const {
  const double d = periodic_distance(x, centers.at(i), length) / width;
  return amplitude * std::exp(-d * d);
}

std::string to_string(ReferenceCase c) {
  switch (c) {
    case ReferenceCase::Zero:
      return "zero";
    case ReferenceCase::FourModeCosine:
      return "cos4";
    case ReferenceCase::FourModeCosineOffset:
      return "cos4-offset";
  }
  return "zero";
}

ReferenceCase parse_reference_case(const std::string& name) {
  if (name == "zero") return ReferenceCase::Zero;
  if (name == "cos4") return ReferenceCase::FourModeCosine;
  if (name == "cos4-offset") return ReferenceCase::FourModeCosineOffset;
  throw std::invalid_argument("unknown reference case '" + name + "' (expected zero|cos4|cos4-offset)");
}

ReferenceTarget ReferenceTarget::make(ReferenceCase kind, const GridSpec& grid, std::array<double, 4> amplitudes,
                                      double offset) {
  ReferenceTarget ref;
  ref.kind = kind;
  ref.amplitudes = amplitudes;
  ref.offset = kind == ReferenceCase::FourModeCosineOffset ? offset : 0.0;
  ref.profile.assign(grid.points, 0.0);
  if (kind == ReferenceCase::Zero) return ref;
  for (std::size_t j = 0; j < grid.points; ++j) {
    double v = ref.offset;
    for (std::size_t k = 1; k <= 4; ++k) {
      v += amplitudes[k - 1] * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) * grid.x(j) / grid.length);
    }
    ref.profile[j] = v;
  }
  return ref;
}

ZeroModePolicy ReferenceTarget::zero_mode() const {
  if (kind == ReferenceCase::FourModeCosineOffset) return PinTo{offset};
  return ZeroMean{};
}

std::vector<double> default_mu_grid() {
  std::vector<double> grid(19);
  for (std::size_t k = 0; k < grid.size(); ++k) grid[k] = -0.225 + 0.025 * static_cast<double>(k);
  return grid;
}

void EnvConfig::validate() const {
  grid.validate();
  if (!(dt > 0.0)) throw std::invalid_argument("EnvConfig: dt must be positive");
  if (substeps_per_action == 0) throw std::invalid_argument("EnvConfig: substeps_per_action must be >= 1");
  if (episode_length == 0) throw std::invalid_argument("EnvConfig: episode_length must be >= 1");
  if (!(blowup_threshold > 0.0)) throw std::invalid_argument("EnvConfig: blowup_threshold must be positive");
  if (alpha < 0.0) throw std::invalid_argument("EnvConfig: alpha must be non-negative");
  if (actuator_count == 0) throw std::invalid_argument("EnvConfig: actuator_count must be >= 1");
  if (init_modes == 0 || init_modes >= grid.points / 2) throw std::invalid_argument("EnvConfig: bad init_modes");
  if (max_reset_attempts == 0) throw std::invalid_argument("EnvConfig: max_reset_attempts must be >= 1");
  if (mu_grid.empty()) throw std::invalid_argument("EnvConfig: mu_grid must not be empty");
}

std::vector<double> EnvState::observation() const {
  std::vector<double> obs(y);
  obs.push_back(mu);
  return obs;
}

std::vector<double> forcing_field(double mu, const GridSpec& grid) {
  std::vector<double> f(grid.points);
  for (std::size_t j = 0; j < grid.points; ++j) f[j] = mu * std::cos(4.0 * std::numbers::pi * grid.x(j) / grid.length);
  return f;
}

std::vector<double> control_field(std::span<const double> u, const ActuatorBank& bank) {
  if (u.size() != bank.count()) throw std::invalid_argument("control_field: action size mismatch");
  std::vector<double> out(bank.points, 0.0);
  for (std::size_t i = 0; i < bank.count(); ++i) {
    const double ui = std::clamp(u[i], -1.0, 1.0);
    if (ui == 0.0) continue;
    const auto row = bank.row(i);
    for (std::size_t j = 0; j < bank.points; ++j) out[j] += ui * row[j];
  }
  return out;
}

double reward(std::span<const double> y, std::span<const double> u, const ReferenceTarget& ref, const EnvConfig& cfg) {
  const std::size_t n = cfg.grid.points;
  if (y.size() != n) throw std::invalid_argument("reward: field size mismatch");
  const double dx = cfg.grid.dx();
  double err = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double e = y[j] - (ref.profile.empty() ? 0.0 : ref.profile[j]);
    err += e * e;
  }
  double effort = 0.0;
  for (double ui : u) effort += ui * ui;
  return -(dx * err + cfg.alpha * dx * effort) / (2.0 * static_cast<double>(cfg.episode_length));
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0xD6E8FEB86659FD93ULL));
}

struct KsEnv::Solver {
  ZeroModePolicy zero_mode;
  Etdrk4Coefficients coeffs;
  SpectralTransform transform;
  std::optional<BasicEtdrk4Coefficients<float>> coeffs32;
  std::unique_ptr<BasicSpectralTransform<float>> transform32;

  Solver(const EnvConfig& cfg, ZeroModePolicy policy)
      : zero_mode(policy), coeffs(precompute_etdrk4(cfg.grid, cfg.dt)), transform(cfg.grid) {
    if (cfg.precision == Precision::Float32) {
      coeffs32 = downcast<float>(coeffs);
      transform32 = std::make_unique<BasicSpectralTransform<float>>(cfg.grid);
    }
  }
};

KsEnv::KsEnv(EnvConfig config) : config_(std::move(config)) {
  config_.validate();
  bank_ = ActuatorBank::make(config_.grid, config_.actuator_count, config_.actuator_width, config_.actuator_amplitude);
  reference_ = ReferenceTarget::make(config_.reference, config_.grid, config_.reference_amplitudes,
                                     config_.reference_offset);
  solver_ = std::make_unique<Solver>(config_, reference_.zero_mode());
}

KsEnv::~KsEnv() = default;
KsEnv::KsEnv(KsEnv&&) noexcept = default;
KsEnv& KsEnv::operator=(KsEnv&&) noexcept = default;

double KsEnv::reward(std::span<const double> y, std::span<const double> u) const {
  return hfrl::reward(y, u, reference_, config_);
}

std::vector<double> KsEnv::initial_field(std::mt19937_64& rng) const {
  const auto& grid = config_.grid;
  std::normal_distribution<double> amp(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::vector<double> y(grid.points, 0.0);
  for (std::size_t m = 1; m <= config_.init_modes; ++m) {
    const double a = amp(rng);
    const double p = phase(rng);
    for (std::size_t j = 0; j < grid.points; ++j) {
      y[j] += a * std::sin(2.0 * std::numbers::pi * static_cast<double>(m) * grid.x(j) / grid.length + p);
    }
  }
  double energy = 0.0;
  for (double v : y) energy += v * v;
  energy *= grid.dx();
  const double scale = energy > 0.0 ? std::sqrt(config_.target_energy() / energy) : 0.0;
  for (double& v : y) v *= scale;
  return y;
}

bool KsEnv::advance(std::vector<double>& y, std::span<const double> total_forcing, std::size_t substeps) {
  auto& s = *solver_;
  const double threshold = config_.blowup_threshold;
  try {
    if (config_.precision == Precision::Float64) {
      const auto forcing_hat = s.transform.forward(total_forcing).coeffs;
      auto field = s.transform.forward(y);
      for (std::size_t i = 0; i < substeps; ++i) {
        field = etdrk4_step<double>(field, forcing_hat, s.coeffs, s.zero_mode, s.transform);
      }
      y = s.transform.inverse(field);
    } else {
      std::vector<float> f32(total_forcing.begin(), total_forcing.end());
      std::vector<float> y32(y.begin(), y.end());
      const auto forcing_hat = s.transform32->forward(f32).coeffs;
      auto field = s.transform32->forward(y32);
      for (std::size_t i = 0; i < substeps; ++i) {
        field = etdrk4_step<float>(field, forcing_hat, *s.coeffs32, s.zero_mode, *s.transform32);
      }
      const auto back = s.transform32->inverse(field);
      y.assign(back.begin(), back.end());
    }
  } catch (const InstabilityError&) {
    return false;
  }
  return std::all_of(y.begin(), y.end(), [threshold](double v) { return std::isfinite(v) && std::abs(v) <= threshold; });
}

EnvState KsEnv::reset(std::size_t env_index, std::uint64_t seed, std::uint64_t episode, double mu) {
  std::mt19937_64 rng(mix_seed(seed, env_index, episode));
  const auto forcing = forcing_field(mu, config_.grid);
  const double mean = zero_mode_target(reference_.zero_mode());
  for (std::size_t attempt = 0; attempt < config_.max_reset_attempts; ++attempt) {
    auto y = initial_field(rng);
    for (double& v : y) v += mean;
    std::size_t substeps = config_.burn_in_steps;
    if (config_.stagger && config_.burn_in_steps > 0) {
      substeps += std::uniform_int_distribution<std::size_t>(0, config_.burn_in_steps)(rng);
    }
    if (substeps == 0 || advance(y, forcing, substeps)) {
      return EnvState{std::move(y), mu, 0, false};
    }
  }
  throw std::runtime_error("KsEnv::reset: burn-in unstable after " + std::to_string(config_.max_reset_attempts) +
                           " attempts");
}

StepResult KsEnv::step(const EnvState& state, std::span<const double> u) {
  if (state.done) throw ContractViolation("KsEnv::step called on a finished episode");
  if (u.size() != action_dim()) throw std::invalid_argument("KsEnv::step: action size mismatch");
  if (state.y.size() != config_.grid.points) throw std::invalid_argument("KsEnv::step: state size mismatch");

  StepResult out;
  out.info.applied_action.resize(u.size());
  std::transform(u.begin(), u.end(), out.info.applied_action.begin(), [](double v) { return std::clamp(v, -1.0, 1.0); });

  auto total = forcing_field(state.mu, config_.grid);
  const auto ctrl = control_field(out.info.applied_action, bank_);
  for (std::size_t j = 0; j < total.size(); ++j) total[j] += ctrl[j];

  out.state = EnvState{state.y, state.mu, state.step_count + 1, false};
  const bool ok = advance(out.state.y, total, config_.substeps_per_action);
  out.info.unstable = !ok;
  if (ok) {
    out.reward = reward(out.state.y, out.info.applied_action);
  } else {
    // Worst admissible field: every point at the blow-up threshold.
    double effort = 0.0;
    for (double v : out.info.applied_action) effort += v * v;
    const double dx = config_.grid.dx();
    const double t = config_.blowup_threshold;
    out.reward = -(config_.grid.length * t * t + config_.alpha * dx * effort) /
                 (2.0 * static_cast<double>(config_.episode_length));
  }
  out.info.truncated = out.state.step_count >= config_.episode_length;
  out.done = out.info.unstable || out.info.truncated;
  out.state.done = out.done;
  return out;
}

KsEnsemble::KsEnsemble(EnvConfig config, std::size_t num_envs, std::uint64_t seed, std::vector<double> slot_mu)
    : env_(std::move(config)), seed_(seed), slot_mu_(std::move(slot_mu)) {
  if (num_envs == 0) throw std::invalid_argument("KsEnsemble: need at least one environment");
  const auto& grid = env_.config().mu_grid;
  if (slot_mu_.empty()) {
    slot_mu_.resize(num_envs);
    for (std::size_t i = 0; i < num_envs; ++i) slot_mu_[i] = grid[i % grid.size()];
  }
  if (slot_mu_.size() != num_envs) throw std::invalid_argument("KsEnsemble: slot_mu size mismatch");
  episodes_.assign(num_envs, 0);
  states_.reserve(num_envs);
  for (std::size_t i = 0; i < num_envs; ++i) states_.push_back(env_.reset(i, seed_, 0, slot_mu_[i]));
}

std::vector<StepResult> KsEnsemble::batch_step(std::span<const double> actions) {
  const std::size_t a = env_.action_dim();
  if (actions.size() != states_.size() * a) throw std::invalid_argument("KsEnsemble::batch_step: shape mismatch");
  std::vector<StepResult> results;
  results.reserve(states_.size());
  for (std::size_t i = 0; i < states_.size(); ++i) {
    auto r = env_.step(states_[i], actions.subspan(i * a, a));
    if (r.done) {
      r.info.terminal_observation = r.state.observation();
      ++episodes_[i];
      r.state = env_.reset(i, seed_, episodes_[i], slot_mu_[i]);
    }
    states_[i] = r.state;
    results.push_back(std::move(r));
  }
  return results;
}

void write_trajectory(const std::filesystem::path& csv_path, const std::vector<std::vector<double>>& rows,
                      double control_dt, const TrajectoryMeta& meta) {
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("cannot write " + csv_path.string());
  const std::size_t n = rows.empty() ? 0 : rows.front().size();
  out << "t";
  for (std::size_t j = 0; j < n; ++j) out << ",x_" << j;
  out << '\n' << std::setprecision(17);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out << static_cast<double>(r) * control_dt;
    for (double v : rows[r]) out << ',' << v;
    out << '\n';
  }
  nlohmann::json side{{"mu", meta.mu}, {"case", meta.reference_case}, {"seed", meta.seed},
                      {"config_hash", meta.config_hash}, {"rows", rows.size()}, {"columns", n}};
  std::ofstream js(csv_path.string() + ".json");
  js << side.dump(2) << '\n';
}

}  // namespace hfrl
