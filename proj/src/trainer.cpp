#include "hfrl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "hfrl/checkpoint.hpp"

namespace hfrl {

using nlohmann::json;

// ---------------------------------------------------------------- normalizers

void RunningMoments::update(std::span<const double> x) {
  if (x.size() != mean_.size()) throw ad::ShapeError("RunningMoments: dimension mismatch");
  ++count_;
  const double n = static_cast<double>(count_);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double delta = x[i] - mean_[i];
    mean_[i] += delta / n;
    m2_[i] += delta * (x[i] - mean_[i]);
  }
}

double RunningMoments::variance(std::size_t i) const {
  if (count_ < 2) return 1.0;
  return m2_.at(i) / static_cast<double>(count_);
}

json RunningMoments::to_json() const { return json{{"count", count_}, {"mean", mean_}, {"m2", m2_}}; }

RunningMoments RunningMoments::from_json(const json& j) {
  RunningMoments m;
  m.count_ = j.at("count").get<std::uint64_t>();
  m.mean_ = j.at("mean").get<std::vector<double>>();
  m.m2_ = j.at("m2").get<std::vector<double>>();
  if (m.mean_.size() != m.m2_.size()) throw std::runtime_error("RunningMoments: inconsistent state");
  return m;
}

Matrix ObsNormalizer::normalize(const Matrix& y) const {
  if (static_cast<std::size_t>(y.cols()) != moments_.dim()) throw ad::ShapeError("ObsNormalizer: dimension mismatch");
  Matrix out(y.rows(), y.cols());
  for (Index j = 0; j < y.cols(); ++j) {
    const auto c = static_cast<std::size_t>(j);
    const double inv = 1.0 / std::sqrt(moments_.variance(c) + eps_);
    out.col(j) = (y.col(j).array() - moments_.mean(c)) * inv;
  }
  return out;
}

json ObsNormalizer::to_json() const { return json{{"moments", moments_.to_json()}, {"eps", eps_}}; }

ObsNormalizer ObsNormalizer::from_json(const json& j) {
  ObsNormalizer n;
  n.moments_ = RunningMoments::from_json(j.at("moments"));
  n.eps_ = j.at("eps").get<double>();
  return n;
}

double RewardNormalizer::scale(double r) const { return r / std::sqrt(moments_.variance() + eps_); }

json RewardNormalizer::to_json() const { return json{{"moments", moments_.to_json()}, {"eps", eps_}}; }

RewardNormalizer RewardNormalizer::from_json(const json& j) {
  RewardNormalizer n;
  n.moments_ = RunningMoments::from_json(j.at("moments"));
  n.eps_ = j.at("eps").get<double>();
  return n;
}

// ------------------------------------------------------------------- n-step

Transition NStepAssembler::emit(const std::vector<double>& next_obs, std::size_t len, bool done) const {
  const Entry& first = queue_.front();
  Transition t;
  t.obs = first.obs;
  t.action = first.action;
  t.mu = first.mu;
  t.next_obs = next_obs;
  t.length = len;
  double g = 1.0;
  for (std::size_t i = 0; i < len; ++i) {
    t.n_step_return += g * queue_[i].r_scaled;
    t.n_step_return_raw += g * queue_[i].r_raw;
    g *= gamma_;
  }
  t.done = done;
  t.gamma_eff = done ? 0.0 : g;
  return t;
}

std::vector<Transition> NStepAssembler::push(std::vector<double> obs, std::vector<double> action, double mu,
                                             double reward_scaled, double reward_raw, const std::vector<double>& next_obs,
                                             bool terminal, bool truncated) {
  queue_.push_back({std::move(obs), std::move(action), mu, reward_scaled, reward_raw});
  std::vector<Transition> out;
  if (terminal || truncated) {
    const bool done = terminal || !bootstrap_on_timeout_;
    while (!queue_.empty()) {
      out.push_back(emit(next_obs, queue_.size(), done));
      queue_.pop_front();
    }
  } else if (queue_.size() >= n_) {
    out.push_back(emit(next_obs, n_, false));
    queue_.pop_front();
  }
  return out;
}

std::vector<Transition> NStepAssembler::flush_terminal(const std::vector<double>& last_obs) {
  std::vector<Transition> out;
  while (!queue_.empty()) {
    out.push_back(emit(last_obs, queue_.size(), true));
    queue_.pop_front();
  }
  return out;
}

// ------------------------------------------------------------------- replay

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::size_t obs_dim, std::size_t action_dim)
    : capacity_(capacity), obs_dim_(obs_dim), action_dim_(action_dim) {
  if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
  obs_.resize(capacity * obs_dim);
  next_obs_.resize(capacity * obs_dim);
  action_.resize(capacity * action_dim);
  mu_.resize(capacity);
  ret_.resize(capacity);
  ret_raw_.resize(capacity);
  gamma_.resize(capacity);
  len_.resize(capacity);
  done_.resize(capacity);
}

void ReplayBuffer::push(const Transition& t) {
  if (t.obs.size() != obs_dim_ || t.next_obs.size() != obs_dim_ || t.action.size() != action_dim_) {
    throw ad::ShapeError("ReplayBuffer::push: transition shape mismatch");
  }
  const std::size_t i = head_;
  std::copy(t.obs.begin(), t.obs.end(), obs_.begin() + static_cast<std::ptrdiff_t>(i * obs_dim_));
  std::copy(t.next_obs.begin(), t.next_obs.end(), next_obs_.begin() + static_cast<std::ptrdiff_t>(i * obs_dim_));
  std::copy(t.action.begin(), t.action.end(), action_.begin() + static_cast<std::ptrdiff_t>(i * action_dim_));
  mu_[i] = t.mu;
  ret_[i] = t.n_step_return;
  ret_raw_[i] = t.n_step_return_raw;
  gamma_[i] = t.gamma_eff;
  len_[i] = static_cast<double>(t.length);
  done_[i] = t.done ? 1.0 : 0.0;
  head_ = (head_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
  ++inserted_;
}

Transition ReplayBuffer::at(std::size_t i) const {
  if (i >= size_) throw std::out_of_range("ReplayBuffer::at");
  Transition t;
  t.obs.assign(obs_.begin() + static_cast<std::ptrdiff_t>(i * obs_dim_),
               obs_.begin() + static_cast<std::ptrdiff_t>((i + 1) * obs_dim_));
  t.next_obs.assign(next_obs_.begin() + static_cast<std::ptrdiff_t>(i * obs_dim_),
                    next_obs_.begin() + static_cast<std::ptrdiff_t>((i + 1) * obs_dim_));
  t.action.assign(action_.begin() + static_cast<std::ptrdiff_t>(i * action_dim_),
                  action_.begin() + static_cast<std::ptrdiff_t>((i + 1) * action_dim_));
  t.mu = mu_[i];
  t.n_step_return = ret_[i];
  t.n_step_return_raw = ret_raw_[i];
  t.gamma_eff = gamma_[i];
  t.length = static_cast<std::size_t>(len_[i]);
  t.done = done_[i] != 0.0;
  return t;
}

ReplayBatch ReplayBuffer::gather(std::span<const std::size_t> index) const {
  const auto n = static_cast<Index>(index.size());
  ReplayBatch b;
  b.obs.resize(n, static_cast<Index>(obs_dim_));
  b.next_obs.resize(n, static_cast<Index>(obs_dim_));
  b.action.resize(n, static_cast<Index>(action_dim_));
  b.mu.resize(index.size());
  b.n_step_return.resize(index.size());
  b.gamma_eff.resize(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) {
    const std::size_t i = index[r];
    if (i >= size_) throw std::out_of_range("ReplayBuffer::gather");
    const auto row = static_cast<Index>(r);
    std::copy_n(obs_.data() + i * obs_dim_, obs_dim_, b.obs.row(row).data());
    std::copy_n(next_obs_.data() + i * obs_dim_, obs_dim_, b.next_obs.row(row).data());
    std::copy_n(action_.data() + i * action_dim_, action_dim_, b.action.row(row).data());
    b.mu[r] = mu_[i];
    b.n_step_return[r] = ret_[i];
    b.gamma_eff[r] = gamma_[i];
  }
  return b;
}

ReplayBatch ReplayBuffer::sample(std::size_t batch, std::mt19937_64& rng) const {
  if (size_ == 0) throw std::logic_error("ReplayBuffer::sample: empty buffer");
  std::uniform_int_distribution<std::size_t> pick(0, size_ - 1);
  std::vector<std::size_t> index(batch);
  for (auto& i : index) i = pick(rng);
  return gather(index);
}

// -------------------------------------------------------------------- agent

namespace {

std::vector<HyperNetwork> make_critics(const ExperimentConfig& cfg) {
  std::vector<HyperNetwork> out;
  const auto topo = cfg.topology();
  for (Index i = 0; i < topo.critic_heads; ++i) {
    out.emplace_back(cfg.encoder, topo.critic_layers(), "critic" + std::to_string(i),
                     mix_seed(cfg.seed, 2 + static_cast<std::uint64_t>(i)));
  }
  return out;
}

Tensor constant(const Matrix& m) { return Tensor::constant(m); }

}  // namespace

Agent::Agent(const ExperimentConfig& config)
    : config_(config),
      actor_(config.encoder, config.topology().actor_layers(), "actor", mix_seed(config.seed, 1)),
      actor_target_(config.encoder, config.topology().actor_layers(), "actor", mix_seed(config.seed, 1)),
      critics_(make_critics(config)),
      critic_targets_(make_critics(config)),
      obs_norm_(config.env.grid.points, config.trainer.normalizer_eps),
      reward_norm_(config.trainer.normalizer_eps) {
  config_.validate();
  actor_target_.copy_from(actor_);
  for (std::size_t i = 0; i < critics_.size(); ++i) critic_targets_[i].copy_from(critics_[i]);
}

Matrix Agent::act(const Matrix& y_raw, std::span<const double> mu) {
  ad::NoGradGuard guard;
  const auto w = actor_.generate(mu, false);
  return generated_forward(constant(obs_norm_.normalize(y_raw)), w, Role::Actor).value();
}

Matrix Agent::quantiles(std::size_t i, const Matrix& y_raw, const Matrix& actions, std::span<const double> mu) {
  ad::NoGradGuard guard;
  const auto w = critics_.at(i).generate(mu, false);
  const Tensor x = ad::concat_cols({constant(obs_norm_.normalize(y_raw)), constant(actions)});
  return generated_forward(x, w, Role::Critic).value();
}

namespace {

void export_registry(CheckpointArchive& archive, const std::string& prefix, const nn::Registry& reg) {
  for (const auto& e : reg.entries()) archive.tensors.emplace(prefix + e.name, e.tensor.value());
}

void import_registry(const CheckpointArchive& archive, const std::string& prefix, nn::Registry& reg) {
  for (const auto& e : reg.entries()) {
    const auto it = archive.tensors.find(prefix + e.name);
    if (it == archive.tensors.end()) throw std::runtime_error("checkpoint: missing tensor " + prefix + e.name);
    if (it->second.rows() != e.tensor.rows() || it->second.cols() != e.tensor.cols()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + prefix + e.name);
    }
    Tensor t = e.tensor;
    t.mutable_value() = it->second;
  }
}

}  // namespace

void Agent::save(const std::filesystem::path& path, const json& extra) const {
  CheckpointArchive archive;
  archive.manifest = extra.is_object() ? extra : json::object();
  archive.manifest["config"] = to_json(config_);
  archive.manifest["config_hash"] = config_hash(config_);
  archive.manifest["env_hash"] = env_hash(config_.env);
  archive.manifest["seed"] = config_.seed;
  archive.manifest["obs_normalizer"] = obs_norm_.to_json();
  archive.manifest["reward_normalizer"] = reward_norm_.to_json();
  export_registry(archive, "online/", actor_.registry());
  for (const auto& c : critics_) export_registry(archive, "online/", c.registry());
  save_checkpoint(path, archive);
}

Agent Agent::load(const std::filesystem::path& path, json* manifest) {
  const auto archive = load_checkpoint(path);
  const auto& m = archive.manifest;
  if (!m.contains("config") || !m.contains("config_hash")) throw std::runtime_error("checkpoint: manifest lacks config");
  const ExperimentConfig cfg = experiment_from_json(m.at("config"));
  if (config_hash(cfg) != m.at("config_hash").get<std::string>()) {
    throw std::runtime_error("checkpoint: config hash mismatch (stored " + m.at("config_hash").get<std::string>() +
                             ", recomputed " + config_hash(cfg) + ")");
  }
  Agent agent(cfg);
  import_registry(archive, "online/", agent.actor_.registry());
  for (auto& c : agent.critics_) import_registry(archive, "online/", c.registry());
  agent.actor_target_.copy_from(agent.actor_);
  for (std::size_t i = 0; i < agent.critics_.size(); ++i) agent.critic_targets_[i].copy_from(agent.critics_[i]);
  agent.obs_norm_ = ObsNormalizer::from_json(m.at("obs_normalizer"));
  agent.reward_norm_ = RewardNormalizer::from_json(m.at("reward_normalizer"));
  if (manifest) *manifest = m;
  return agent;
}

// ------------------------------------------------------------------ learner

namespace {

std::vector<Tensor> joined_trainables(std::initializer_list<HyperNetwork*> nets) {
  std::vector<Tensor> out;
  for (auto* n : nets) {
    auto t = n->trainable();
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

optim::AdamWConfig adam_config(const TrainerConfig& t, std::size_t total) {
  optim::AdamWConfig c;
  c.lr = t.lr;
  c.weight_decay = t.weight_decay;
  c.total_steps = total;
  return c;
}

}  // namespace

Learner::Learner(Agent& agent, std::uint64_t seed)
    : agent_(agent),
      rng_(seed),
      midpoints_(quantile_midpoints(static_cast<std::size_t>(agent.config().quantiles))),
      critic_opt_(joined_trainables({&agent.critic(0), &agent.critic(1)}),
                  adam_config(agent.config().trainer, agent.config().trainer.total_gradient_steps())),
      actor_opt_(agent.actor().trainable(),
                 adam_config(agent.config().trainer,
                             agent.config().trainer.total_gradient_steps() / agent.config().trainer.actor_delay)) {}

Matrix Learner::target_actions(const ReplayBatch& batch) {
  const auto& t = agent_.config().trainer;
  ad::NoGradGuard guard;
  const auto w = agent_.actor_target().generate(batch.mu, false);
  Matrix a = generated_forward(constant(agent_.obs_normalizer().normalize(batch.next_obs)), w, Role::Actor).value();
  std::normal_distribution<double> noise(0.0, t.target_noise);
  for (Index i = 0; i < a.size(); ++i) {
    const double e = std::clamp(noise(rng_), -t.target_noise_clip, t.target_noise_clip);
    a.data()[i] = std::clamp(a.data()[i] + e, -1.0, 1.0);
  }
  return a;
}

ad::Tensor Learner::critic_loss(const ReplayBatch& batch, const Matrix& next_actions) {
  const auto& cfg = agent_.config();
  const auto& norm = agent_.obs_normalizer();
  Matrix targets;
  {
    ad::NoGradGuard guard;
    const Tensor x_next = ad::concat_cols({constant(norm.normalize(batch.next_obs)), constant(next_actions)});
    std::vector<Matrix> atoms;
    for (std::size_t i = 0; i < 2; ++i) {
      const auto w = agent_.critic_target(i).generate(batch.mu, false);
      atoms.push_back(generated_forward(x_next, w, Role::Critic).value());
    }
    targets = tqc_targets(atoms, batch.n_step_return, batch.gamma_eff, cfg.trainer.drop);
  }
  const Tensor x = ad::concat_cols({constant(norm.normalize(batch.obs)), constant(batch.action)});
  Tensor loss;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto w = agent_.critic(i).generate(batch.mu, spectral_updates);
    const Tensor q = generated_forward(x, w, Role::Critic);
    const Tensor l = quantile_huber_loss(q, targets, midpoints_);
    loss = loss.defined() ? ad::add(loss, l) : l;
  }
  return loss;
}

namespace {

double nonfinite_guard(std::size_t& consecutive, std::size_t& skipped, std::size_t limit) {
  ++skipped;
  if (++consecutive > limit) {
    throw std::runtime_error("training aborted: " + std::to_string(consecutive) + " consecutive non-finite updates");
  }
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

double Learner::critic_update(const ReplayBatch& batch) {
  const std::size_t limit = agent_.config().trainer.max_consecutive_nonfinite;
  critic_opt_.zero_grad();
  const Matrix next = target_actions(batch);
  const Tensor loss = critic_loss(batch, next);
  const double value = loss.item();
  if (!std::isfinite(value)) return nonfinite_guard(consecutive_nonfinite_, skipped_, limit);
  ad::backward(loss);
  if (critic_opt_.step() == optim::StepStatus::SkippedNonFinite) {
    critic_opt_.zero_grad();
    return nonfinite_guard(consecutive_nonfinite_, skipped_, limit);
  }
  consecutive_nonfinite_ = 0;
  return value;
}

double Learner::actor_update(const ReplayBatch& batch) {
  const std::size_t limit = agent_.config().trainer.max_consecutive_nonfinite;
  actor_opt_.zero_grad();
  const Tensor obs = constant(agent_.obs_normalizer().normalize(batch.obs));
  const auto w = agent_.actor().generate(batch.mu, spectral_updates);
  const Tensor a = generated_forward(obs, w, Role::Actor);
  GeneratedWeights critic_w;
  {
    ad::NoGradGuard guard;
    critic_w = agent_.critic(0).generate(batch.mu, false);
  }
  const Tensor q = generated_forward(ad::concat_cols({obs, a}), critic_w, Role::Critic);
  const Tensor objective = ad::mean(q);
  const double value = objective.item();
  if (!std::isfinite(value)) return nonfinite_guard(consecutive_nonfinite_, skipped_, limit);
  ad::backward(ad::neg(objective));
  if (actor_opt_.step() == optim::StepStatus::SkippedNonFinite) {
    actor_opt_.zero_grad();
    return nonfinite_guard(consecutive_nonfinite_, skipped_, limit);
  }
  return value;
}

void Learner::polyak() {
  const double tau = agent_.config().trainer.tau;
  optim::polyak_update(agent_.actor().trainable(), agent_.actor_target().trainable(), tau);
  agent_.actor_target().copy_buffers_from(agent_.actor());
  for (std::size_t i = 0; i < 2; ++i) {
    optim::polyak_update(agent_.critic(i).trainable(), agent_.critic_target(i).trainable(), tau);
    agent_.critic_target(i).copy_buffers_from(agent_.critic(i));
  }
}

std::pair<double, double> Learner::gradient_step(const ReplayBatch& batch) {
  ++gradient_steps_;
  const double c = critic_update(batch);
  double a = std::numeric_limits<double>::quiet_NaN();
  if (gradient_steps_ % agent_.config().trainer.actor_delay == 0) {
    a = actor_update(batch);
    polyak();
  }
  return {c, a};
}

// ----------------------------------------------------------------- rollouts

double EpisodeStats::mean() const {
  if (returns.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(returns.begin(), returns.end(), 0.0) / static_cast<double>(returns.size());
}
double EpisodeStats::min() const {
  return returns.empty() ? std::numeric_limits<double>::quiet_NaN() : *std::min_element(returns.begin(), returns.end());
}
double EpisodeStats::max() const {
  return returns.empty() ? std::numeric_limits<double>::quiet_NaN() : *std::max_element(returns.begin(), returns.end());
}

EpisodeStats run_episodes(const EnvConfig& cfg, const Policy& policy, std::span<const double> mu, std::uint64_t seed) {
  KsEnv env(cfg);
  const std::size_t n = mu.size();
  const std::size_t dim = cfg.grid.points;
  const std::size_t adim = env.action_dim();
  std::vector<EnvState> states;
  states.reserve(n);
  for (std::size_t e = 0; e < n; ++e) states.push_back(env.reset(e, seed, 0, mu[e]));
  EpisodeStats stats;
  stats.mu.assign(mu.begin(), mu.end());
  stats.returns.assign(n, 0.0);
  stats.unstable.assign(n, false);
  std::vector<std::size_t> active(n);
  std::iota(active.begin(), active.end(), std::size_t{0});
  while (!active.empty()) {
    Matrix y(static_cast<Index>(active.size()), static_cast<Index>(dim));
    std::vector<double> m(active.size());
    for (std::size_t r = 0; r < active.size(); ++r) {
      std::copy(states[active[r]].y.begin(), states[active[r]].y.end(), y.row(static_cast<Index>(r)).data());
      m[r] = states[active[r]].mu;
    }
    const Matrix u = policy(y, m);
    if (u.rows() != y.rows() || static_cast<std::size_t>(u.cols()) != adim) throw ad::ShapeError("policy: bad action shape");
    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < active.size(); ++r) {
      const std::size_t e = active[r];
      auto res = env.step(states[e], std::span<const double>(u.row(static_cast<Index>(r)).data(), adim));
      stats.returns[e] += res.reward;
      if (res.info.unstable) stats.unstable[e] = true;
      states[e] = std::move(res.state);
      if (!res.done) still.push_back(e);
    }
    active = std::move(still);
  }
  return stats;
}

Policy agent_policy(Agent& agent) {
  return [&agent](const Matrix& y, std::span<const double> mu) { return agent.act(y, mu); };
}

Policy random_policy(std::size_t action_dim, std::uint64_t seed) {
  auto rng = std::make_shared<std::mt19937_64>(seed);
  return [rng, action_dim](const Matrix& y, std::span<const double>) {
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    Matrix u(y.rows(), static_cast<Index>(action_dim));
    for (Index i = 0; i < u.size(); ++i) u.data()[i] = d(*rng);
    return u;
  };
}

std::vector<double> balanced_mu(std::span<const double> grid, std::size_t n) {
  if (grid.empty()) throw std::invalid_argument("balanced_mu: empty grid");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = grid[i % grid.size()];
  return out;
}

// ------------------------------------------------------------------ metrics

std::string metrics_header() {
  return "step,train_reward_rolling,eval_mean,eval_min,eval_max,critic_loss,actor_obj,lr,wall_clock_s";
}

std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream s;
  s << std::setprecision(17) << r.step << ',' << r.train_reward_rolling << ',' << r.eval_mean << ',' << r.eval_min << ','
    << r.eval_max << ',' << r.critic_loss << ',' << r.actor_obj << ',' << r.lr << ',' << std::setprecision(6)
    << r.wall_clock_s;
  return s.str();
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << metrics_header() << '\n';
  for (const auto& r : rows) out << format_metrics_row(r) << '\n';
}

// -------------------------------------------------------------------- train

namespace {

double mean_finite(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(n);
}

}  // namespace

TrainResult train(const ExperimentConfig& config, const std::filesystem::path& out_dir, const TrainOptions& options) {
  config.validate();
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  const auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - start).count(); };

  const auto& tc = config.trainer;
  const std::size_t num_envs = tc.num_envs;
  const std::size_t dim = config.env.grid.points;

  Agent agent(config);
  Learner learner(agent, mix_seed(config.seed, 7));
  KsEnsemble ensemble(config.env, num_envs, mix_seed(config.seed, 11));
  const std::size_t adim = ensemble.env().action_dim();
  ReplayBuffer buffer(tc.buffer_capacity, dim, adim);
  std::vector<NStepAssembler> assemblers(num_envs, NStepAssembler(tc.n_step, tc.gamma, tc.bootstrap_on_timeout));
  std::mt19937_64 collect_rng(mix_seed(config.seed, 13));
  std::mt19937_64 sample_rng(mix_seed(config.seed, 19));
  const std::uint64_t eval_seed = mix_seed(config.seed, 17);
  const auto eval_grid = tc.eval_mu.empty() ? config.env.mu_grid : tc.eval_mu;
  const auto eval_mu = balanced_mu(eval_grid, tc.eval_episodes);

  const std::size_t iterations = tc.iterations();
  const auto explore_steps =
      static_cast<std::size_t>(std::llround(tc.exploration_fraction * static_cast<double>(tc.total_env_steps)));
  const std::size_t eval_every = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(tc.eval_interval_fraction * static_cast<double>(iterations))));

  TrainResult result;
  result.reuse_ratio = tc.reuse_ratio();
  std::vector<double> episode_return(num_envs, 0.0);
  std::deque<double> rolling;
  std::vector<double> critic_losses, actor_objs;

  const auto evaluate_now = [&](std::size_t step) {
    const auto stats = run_episodes(config.env, agent_policy(agent), eval_mu, eval_seed);
    MetricsRow row;
    row.step = step;
    if (!rolling.empty()) {
      row.train_reward_rolling = std::accumulate(rolling.begin(), rolling.end(), 0.0) / static_cast<double>(rolling.size());
    }
    row.eval_mean = stats.mean();
    row.eval_min = stats.min();
    row.eval_max = stats.max();
    row.critic_loss = mean_finite(critic_losses);
    row.actor_obj = mean_finite(actor_objs);
    row.lr = learner.critic_lr();
    row.wall_clock_s = elapsed();
    critic_losses.clear();
    actor_objs.clear();
    result.metrics.push_back(row);
    if (options.write_files) write_metrics_csv(out_dir / "metrics.csv", result.metrics);
    if (options.verbose) std::cerr << "[train] " << format_metrics_row(row) << '\n';
  };

  if (options.write_files) std::filesystem::create_directories(out_dir);
  evaluate_now(0);

  Matrix y(static_cast<Index>(num_envs), static_cast<Index>(dim));
  Matrix actions(static_cast<Index>(num_envs), static_cast<Index>(adim));
  std::normal_distribution<double> explore_noise(0.0, tc.exploration_noise);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);

  for (std::size_t it = 0; it < iterations; ++it) {
    const std::size_t env_steps = it * num_envs;
    const auto& states = ensemble.states();
    for (std::size_t i = 0; i < num_envs; ++i) {
      std::copy(states[i].y.begin(), states[i].y.end(), y.row(static_cast<Index>(i)).data());
      agent.obs_normalizer().update(states[i].y);
    }
    const bool explore = env_steps < explore_steps;
    if (options.on_collect) options.on_collect(env_steps, !explore);
    if (explore) {
      for (Index k = 0; k < actions.size(); ++k) actions.data()[k] = uniform(collect_rng);
    } else {
      actions = agent.act(y, ensemble.slot_mu());
      for (Index k = 0; k < actions.size(); ++k) {
        actions.data()[k] = std::clamp(actions.data()[k] + explore_noise(collect_rng), -1.0, 1.0);
      }
    }
    const auto results = ensemble.batch_step(std::span<const double>(actions.data(), static_cast<std::size_t>(actions.size())));
    for (const auto& r : results) {
      if (!r.info.unstable) agent.reward_normalizer().update(r.reward);
    }
    for (std::size_t i = 0; i < num_envs; ++i) {
      const auto& r = results[i];
      std::vector<double> obs(y.row(static_cast<Index>(i)).data(), y.row(static_cast<Index>(i)).data() + dim);
      episode_return[i] += r.reward;
      std::vector<Transition> done_transitions;
      if (r.info.unstable) {
        ++result.unstable_transitions;
        done_transitions = assemblers[i].flush_terminal(obs);
      } else {
        const std::vector<double> next =
            r.done ? std::vector<double>(r.info.terminal_observation.begin(), r.info.terminal_observation.begin() + static_cast<std::ptrdiff_t>(dim))
                   : r.state.y;
        done_transitions = assemblers[i].push(std::move(obs), r.info.applied_action, ensemble.slot_mu()[i],
                                              agent.reward_normalizer().scale(r.reward), r.reward, next, false,
                                              r.info.truncated);
      }
      for (const auto& t : done_transitions) buffer.push(t);
      if (r.done) {
        rolling.push_back(episode_return[i]);
        if (rolling.size() > tc.rolling_window) rolling.pop_front();
        episode_return[i] = 0.0;
      }
    }
    if (buffer.size() >= tc.batch_size) {
      for (std::size_t g = 0; g < tc.gradient_steps; ++g) {
        const auto batch = buffer.sample(tc.batch_size, sample_rng);
        const auto [c, a] = learner.gradient_step(batch);
        critic_losses.push_back(c);
        actor_objs.push_back(a);
      }
    }
    if ((it + 1) % eval_every == 0 || it + 1 == iterations) evaluate_now((it + 1) * num_envs);
  }

  if (options.inspect_replay) options.inspect_replay(buffer);
  result.env_steps = iterations * num_envs;
  result.gradient_steps = learner.gradient_steps();
  result.skipped_updates = learner.skipped();
  result.replay_inserted = buffer.inserted();
  result.wall_clock_s = elapsed();
  if (options.write_files) {
    result.checkpoint = out_dir / "checkpoint.bin";
    agent.save(result.checkpoint, json{{"step", result.env_steps}, {"gradient_steps", result.gradient_steps}});
    const json run{{"config", to_json(config)},
                   {"config_hash", config_hash(config)},
                   {"env_hash", env_hash(config.env)},
                   {"seed", config.seed},
                   {"reuse_ratio", result.reuse_ratio},
                   {"env_steps", result.env_steps},
                   {"gradient_steps", result.gradient_steps},
                   {"skipped_updates", result.skipped_updates},
                   {"replay_inserted", result.replay_inserted},
                   {"unstable_transitions", result.unstable_transitions},
                   {"wall_clock_s", result.wall_clock_s}};
    std::ofstream(out_dir / "run.json") << run.dump(2) << '\n';
  }
  return result;
}

}  // namespace hfrl
