#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hfrl/trainer.hpp"
#include "support.hpp"

using namespace hfrl;
using test::random_matrix;

namespace {

ReplayBatch random_batch(const ExperimentConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto dim = static_cast<Index>(cfg.env.grid.points);
  const auto adim = static_cast<Index>(cfg.env.actuator_count);
  ReplayBatch b;
  b.obs = random_matrix(static_cast<Index>(n), dim, rng);
  b.next_obs = random_matrix(static_cast<Index>(n), dim, rng);
  b.action = random_matrix(static_cast<Index>(n), adim, rng).cwiseMax(-1.0).cwiseMin(1.0);
  std::uniform_int_distribution<std::size_t> pick(0, cfg.env.mu_grid.size() - 1);
  std::normal_distribution<double> r;
  for (std::size_t i = 0; i < n; ++i) {
    b.mu.push_back(cfg.env.mu_grid[pick(rng)]);
    b.n_step_return.push_back(r(rng));
    b.gamma_eff.push_back(i % 3 == 0 ? 0.0 : 0.99 * 0.99 * 0.99);
  }
  return b;
}

void perturb(HyperNetwork& net, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  for (auto t : net.trainable()) t.mutable_value() += random_matrix(t.rows(), t.cols(), rng, scale);
  const std::vector<double> mu{0.0};
  for (int i = 0; i < 50; ++i) net.generate(mu, true);
}

std::vector<Matrix> snapshot(const HyperNetwork& net) {
  std::vector<Matrix> out;
  for (const auto& t : net.trainable()) out.push_back(t.value());
  return out;
}

bool same(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

double quantile_huber_scalar(double d, double tau) {
  const double h = std::abs(d) <= 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  return std::abs(tau - (d < 0.0 ? 1.0 : 0.0)) * h;
}

}  // namespace

TEST_CASE("n-step assembly examples") {
  const std::vector<double> o{0.0}, a{0.0};
  SUBCASE("three unit rewards") {
    NStepAssembler q(3, 0.99);
    CHECK(q.push(o, a, 0.0, 1.0, 1.0, o, false, false).empty());
    CHECK(q.push(o, a, 0.0, 1.0, 1.0, o, false, false).empty());
    const auto t = q.push(o, a, 0.0, 1.0, 1.0, o, false, false);
    REQUIRE(t.size() == 1);
    CHECK(t[0].n_step_return == doctest::Approx(2.9701).epsilon(1e-14));
    CHECK(t[0].gamma_eff == doctest::Approx(0.99 * 0.99 * 0.99).epsilon(1e-14));
    CHECK(t[0].length == 3);
    CHECK_FALSE(t[0].done);
  }
  SUBCASE("episode ends after two rewards") {
    NStepAssembler q(3, 0.99);
    CHECK(q.push(o, a, 0.0, 1.0, 1.0, o, false, false).empty());
    const auto t = q.push(o, a, 0.0, 1.0, 1.0, o, true, false);
    REQUIRE(t.size() == 2);
    CHECK(t[0].n_step_return == doctest::Approx(1.99).epsilon(1e-14));
    CHECK(t[0].gamma_eff == 0.0);
    CHECK(t[0].done);
    CHECK(t[1].n_step_return == 1.0);
    CHECK(t[1].gamma_eff == 0.0);
    CHECK(q.pending() == 0);
  }
  SUBCASE("time-limit truncation") {
    NStepAssembler plain(3, 0.9);
    plain.push(o, a, 0.0, 1.0, 1.0, o, false, false);
    CHECK(plain.push(o, a, 0.0, 1.0, 1.0, o, false, true)[0].gamma_eff == 0.0);
    NStepAssembler boot(3, 0.9, true);
    boot.push(o, a, 0.0, 1.0, 1.0, o, false, false);
    const auto t = boot.push(o, a, 0.0, 1.0, 1.0, o, false, true);
    CHECK(t[0].gamma_eff == doctest::Approx(0.81));
    CHECK(t[1].gamma_eff == doctest::Approx(0.9));
  }
  SUBCASE("flush closes the window at the last valid observation") {
    NStepAssembler q(3, 0.99);
    q.push({1.0}, a, 0.0, 2.0, 4.0, {2.0}, false, false);
    q.push({2.0}, a, 0.0, 3.0, 6.0, {3.0}, false, false);
    const auto t = q.flush_terminal({3.0});
    REQUIRE(t.size() == 2);
    CHECK(t[0].obs == std::vector<double>{1.0});
    CHECK(t[0].next_obs == std::vector<double>{3.0});
    CHECK(t[0].n_step_return == doctest::Approx(2.0 + 0.99 * 3.0));
    CHECK(t[0].n_step_return_raw == doctest::Approx(4.0 + 0.99 * 6.0));
    CHECK(t[0].gamma_eff == 0.0);
    CHECK(t[1].n_step_return == 3.0);
    CHECK(q.pending() == 0);
  }
}

TEST_CASE("n-step returns equal recomputation from the reward log") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> u;
  constexpr double gamma = 0.97;
  NStepAssembler q(3, gamma);
  std::vector<double> rewards;  // log of the current episode
  std::vector<Transition> out;
  for (int step = 0; step < 2000; ++step) {
    const double r = n(rng);
    const bool terminal = u(rng) < 0.05;
    rewards.push_back(r);
    const auto t = q.push({static_cast<double>(rewards.size() - 1)}, {0.0}, 0.0, r, 2.0 * r, {0.0}, terminal, false);
    for (const auto& x : t) {
      const auto start = static_cast<std::size_t>(x.obs[0]);
      double expected = 0.0, g = 1.0;
      for (std::size_t i = 0; i < x.length; ++i) {
        expected += g * rewards[start + i];
        g *= gamma;
      }
      REQUIRE(x.n_step_return == expected);
      REQUIRE(x.n_step_return_raw == doctest::Approx(2.0 * expected).epsilon(1e-14));
      REQUIRE(x.gamma_eff == (x.done ? 0.0 : g));
      REQUIRE(x.length <= 3);
    }
    if (terminal) rewards.clear();
  }
}

TEST_CASE("Welford statistics match two-pass statistics") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(3.0, 2.5);
  RunningMoments m(2);
  std::vector<double> a, b;
  for (int i = 0; i < 100000; ++i) {
    const double x[2] = {n(rng), 1e3 + 0.01 * n(rng)};
    a.push_back(x[0]);
    b.push_back(x[1]);
    m.update(x);
  }
  for (const auto& [col, v] : {std::pair{0, &a}, std::pair{1, &b}}) {
    const double mean = std::accumulate(v->begin(), v->end(), 0.0) / static_cast<double>(v->size());
    double ss = 0.0;
    for (double x : *v) ss += (x - mean) * (x - mean);
    CHECK(std::abs(m.mean(static_cast<std::size_t>(col)) - mean) < 1e-10);
    CHECK(std::abs(m.variance(static_cast<std::size_t>(col)) - ss / static_cast<double>(v->size())) < 1e-10);
  }
  RunningMoments fresh(1);
  CHECK(fresh.variance() == 1.0);
  const double one = 5.0;
  fresh.update(std::span<const double>(&one, 1));
  CHECK(fresh.variance() == 1.0);
  CHECK_THROWS(fresh.update(std::vector<double>{1.0, 2.0}));
}

TEST_CASE("normalizers") {
  SUBCASE("observation z-score and JSON round trip") {
    ObsNormalizer norm(3);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 50; ++i) {
      const Matrix y = random_matrix(1, 3, rng, 2.0).array() + 1.0;
      norm.update(std::span<const double>(y.data(), 3));
    }
    const Matrix y = random_matrix(4, 3, rng);
    const Matrix z = norm.normalize(y);
    for (Index c = 0; c < 3; ++c) {
      const auto i = static_cast<std::size_t>(c);
      const double s = std::sqrt(norm.moments().variance(i) + norm.eps());
      CHECK(z(0, c) == doctest::Approx((y(0, c) - norm.moments().mean(i)) / s));
    }
    const auto back = ObsNormalizer::from_json(norm.to_json());
    CHECK(back.normalize(y) == z);
    CHECK(back.moments().count() == 50);
  }
  SUBCASE("reward scaling preserves sign") {
    RewardNormalizer norm;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(-0.5, 3.0);
    for (int i = 0; i < 5000; ++i) {
      const double r = i % 97 == 0 ? 0.0 : n(rng);
      norm.update(r);
      const double s = norm.scale(r);
      REQUIRE((s > 0) == (r > 0));
      REQUIRE((s < 0) == (r < 0));
    }
    const double expected = 1.7 / std::sqrt(norm.moments().variance() + 1e-8);
    CHECK(norm.scale(1.7) == doctest::Approx(expected));
    CHECK(RewardNormalizer::from_json(norm.to_json()).scale(1.7) == norm.scale(1.7));
  }
}

TEST_CASE("replay buffer ring storage") {
  ReplayBuffer buf(5, 2, 1);
  for (int i = 0; i < 8; ++i) {
    Transition t;
    t.obs = {double(i), 0.0};
    t.next_obs = {double(i) + 1, 0.0};
    t.action = {0.5};
    t.mu = 0.1 * i;
    t.n_step_return = i;
    t.gamma_eff = 0.5;
    t.length = 3;
    buf.push(t);
  }
  CHECK(buf.size() == 5);
  CHECK(buf.inserted() == 8);
  std::vector<double> firsts;
  for (std::size_t i = 0; i < buf.size(); ++i) firsts.push_back(buf.at(i).obs[0]);
  std::sort(firsts.begin(), firsts.end());
  CHECK(firsts == std::vector<double>{3, 4, 5, 6, 7});
  std::mt19937_64 rng(0);
  const auto batch = buf.sample(16, rng);
  CHECK(batch.size() == 16);
  CHECK(batch.obs.rows() == 16);
  for (std::size_t i = 0; i < 16; ++i) {
    const auto r = static_cast<Index>(i);
    CHECK(batch.next_obs(r, 0) == batch.obs(r, 0) + 1);
    CHECK(batch.n_step_return[i] == batch.obs(r, 0));
  }
  Transition bad;
  bad.obs = {1.0};
  CHECK_THROWS(buf.push(bad));
}

TEST_CASE("reuse ratio") {
  CHECK(desk_config().trainer.reuse_ratio() == 32.0);
  TrainerConfig full_scale;
  full_scale.num_envs = 1024;
  full_scale.batch_size = 32768;
  full_scale.gradient_steps = 2;
  CHECK(full_scale.reuse_ratio() == 64.0);
}

TEST_CASE("critic loss matches a scalar recomputation") {
  auto cfg = test::tiny_config();
  cfg.quantiles = 2;
  cfg.trainer.drop = 1;
  Agent agent(cfg);
  for (std::size_t i = 0; i < 2; ++i) {
    perturb(agent.critic(i), 100 + i, 0.2);
    agent.critic_target(i).copy_from(agent.critic(i));
  }
  Learner learner(agent, 1);
  learner.spectral_updates = false;
  const auto batch = random_batch(cfg, 4, 5);
  std::mt19937_64 rng(6);
  const Matrix next_actions = random_matrix(4, static_cast<Index>(cfg.env.actuator_count), rng).cwiseMax(-1.0).cwiseMin(1.0);
  const double loss = learner.critic_loss(batch, next_actions).item();

  const auto tau = quantile_midpoints(2);
  double expected = 0.0;
  std::array<Matrix, 2> pred, next;
  for (std::size_t i = 0; i < 2; ++i) {
    pred[i] = agent.quantiles(i, batch.obs, batch.action, batch.mu);
    next[i] = agent.quantiles(i, batch.next_obs, next_actions, batch.mu);
  }
  for (Index b = 0; b < 4; ++b) {
    std::vector<double> pool;
    for (std::size_t i = 0; i < 2; ++i) pool.insert(pool.end(), next[i].row(b).begin(), next[i].row(b).end());
    std::sort(pool.begin(), pool.end());
    pool.pop_back();
    const auto bi = static_cast<std::size_t>(b);
    for (std::size_t i = 0; i < 2; ++i) {
      for (Index m = 0; m < 2; ++m) {
        for (double z : pool) {
          const double y = batch.n_step_return[bi] + batch.gamma_eff[bi] * z;
          expected += quantile_huber_scalar(y - pred[i](b, m), tau[static_cast<std::size_t>(m)]);
        }
      }
    }
  }
  expected /= 4.0;
  CHECK(std::abs(loss - expected) < 1e-10);
}

TEST_CASE("critic loss gradient matches finite differences") {
  auto cfg = test::tiny_config();
  Agent agent(cfg);
  for (std::size_t i = 0; i < 2; ++i) perturb(agent.critic(i), 200 + i, 0.2);
  Learner learner(agent, 2);
  learner.spectral_updates = false;
  const auto batch = random_batch(cfg, 6, 7);
  std::mt19937_64 rng(8);
  const Matrix next_actions = random_matrix(6, static_cast<Index>(cfg.env.actuator_count), rng).cwiseMax(-1.0).cwiseMin(1.0);
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < 2; ++i) {
    for (auto& t : agent.critic(i).trainable()) params.push_back(t);
  }
  for (auto& p : params) p.zero_grad();
  ad::backward(learner.critic_loss(batch, next_actions));
  double diff = 0.0, na = 0.0, nf = 0.0;
  constexpr double eps = 1e-6;
  for (auto& p : params) {
    const Matrix g = p.has_grad() ? p.grad() : Matrix::Zero(p.rows(), p.cols());
    for (Index k = 0; k < p.value().size(); ++k) {
      double& x = p.mutable_value().data()[k];
      const double orig = x;
      ad::NoGradGuard guard;
      x = orig + eps;
      const double up = learner.critic_loss(batch, next_actions).item();
      x = orig - eps;
      const double down = learner.critic_loss(batch, next_actions).item();
      x = orig;
      const double fd = (up - down) / (2 * eps);
      diff += (g.data()[k] - fd) * (g.data()[k] - fd);
      na += g.data()[k] * g.data()[k];
      nf += fd * fd;
    }
  }
  CHECK(std::sqrt(diff) / (std::sqrt(na) + std::sqrt(nf)) < 1e-4);
}

TEST_CASE("zero critics give a zero-loss fixed point and a zero actor gradient") {
  auto cfg = test::tiny_config();
  Agent agent(cfg);
  for (std::size_t i = 0; i < 2; ++i) {
    for (const auto& e : agent.critic(i).registry().entries()) {
      if (e.name.find(".head.") != std::string::npos) {
        auto t = e.tensor;
        t.mutable_value().setZero();
      }
    }
    agent.critic_target(i).copy_from(agent.critic(i));
  }
  Learner learner(agent, 3);
  auto batch = random_batch(cfg, 5, 9);
  std::fill(batch.n_step_return.begin(), batch.n_step_return.end(), 0.0);
  std::fill(batch.gamma_eff.begin(), batch.gamma_eff.end(), 0.0);
  CHECK(learner.critic_loss(batch, learner.target_actions(batch)).item() == 0.0);

  learner.actor_update(batch);
  for (const auto& t : agent.actor().trainable()) {
    if (t.has_grad()) CHECK(t.grad().cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("actor update is delayed and reads critic 1 only") {
  auto cfg = test::tiny_config();
  const auto batch = random_batch(cfg, 8, 10);

  SUBCASE("odd gradient steps leave the actor and the targets untouched") {
    Agent agent(cfg);
    Learner learner(agent, 4);
    const auto actor0 = snapshot(agent.actor());
    const auto target0 = snapshot(agent.critic_target(0));
    const auto critic0 = snapshot(agent.critic(0));
    const auto [c1, a1] = learner.gradient_step(batch);
    CHECK(std::isfinite(c1));
    CHECK(std::isnan(a1));
    CHECK(same(snapshot(agent.actor()), actor0));
    CHECK(same(snapshot(agent.critic_target(0)), target0));
    CHECK_FALSE(same(snapshot(agent.critic(0)), critic0));
    const auto [c2, a2] = learner.gradient_step(batch);
    CHECK(std::isfinite(a2));
    CHECK_FALSE(same(snapshot(agent.actor()), actor0));
    CHECK_FALSE(same(snapshot(agent.critic_target(0)), target0));
  }
  SUBCASE("perturbing critic 2 leaves the actor step unchanged") {
    Agent a(cfg), b(cfg);
    perturb(b.critic(1), 77, 0.5);
    Learner la(a, 5), lb(b, 5);
    la.actor_update(batch);
    lb.actor_update(batch);
    CHECK(same(snapshot(a.actor()), snapshot(b.actor())));
    Agent c(cfg);
    perturb(c.critic(0), 78, 0.5);
    Learner lc(c, 5);
    lc.actor_update(batch);
    CHECK_FALSE(same(snapshot(a.actor()), snapshot(c.actor())));
  }
}

TEST_CASE("Polyak step moves targets by tau times the gap") {
  auto cfg = test::tiny_config();
  Agent agent(cfg);
  perturb(agent.actor(), 31, 0.3);
  Learner learner(agent, 6);
  const auto online = snapshot(agent.actor());
  const auto before = snapshot(agent.actor_target());
  learner.polyak();
  const auto after = snapshot(agent.actor_target());
  for (std::size_t i = 0; i < online.size(); ++i) {
    const Matrix step = after[i] - before[i];
    const Matrix expected = cfg.trainer.tau * (online[i] - before[i]);
    CHECK((step - expected).cwiseAbs().maxCoeff() <= 1e-15 * (1.0 + online[i].cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("tiny training run") {
  auto cfg = test::tiny_config();
  cfg.env.blowup_threshold = 3.0;  // forces occasional instabilities
  std::size_t explore_calls = 0, policy_calls = 0;
  std::size_t last_explore_step = 0;
  bool explore_after_policy = false;
  std::size_t scanned = 0;
  double max_abs = 0.0;
  bool all_finite = true;
  TrainOptions opts;
  opts.write_files = false;
  opts.on_collect = [&](std::size_t steps, bool policy) {
    if (policy) {
      ++policy_calls;
    } else {
      ++explore_calls;
      last_explore_step = steps;
      if (policy_calls > 0) explore_after_policy = true;
    }
  };
  opts.inspect_replay = [&](const ReplayBuffer& buf) {
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const auto t = buf.at(i);
      for (const auto* v : {&t.obs, &t.next_obs}) {
        for (double x : *v) {
          all_finite = all_finite && std::isfinite(x);
          max_abs = std::max(max_abs, std::abs(x));
        }
      }
      ++scanned;
    }
  };
  const auto r1 = train(cfg, {}, opts);
  CHECK(r1.unstable_transitions > 0);
  CHECK(scanned > 0);
  CHECK(all_finite);
  CHECK(max_abs <= cfg.env.blowup_threshold);
  CHECK(explore_calls == 10);  // 25% of 160 steps at 4 envs per iteration
  CHECK_FALSE(explore_after_policy);
  CHECK(last_explore_step < 40);
  CHECK(r1.env_steps == 160);
  CHECK(r1.gradient_steps > 0);
  CHECK(r1.metrics.front().step == 0);
  CHECK(r1.metrics.back().step == 160);

  SUBCASE("same seed, same metrics") {
    const auto r2 = train(cfg, {}, opts);
    REQUIRE(r1.metrics.size() == r2.metrics.size());
    for (std::size_t i = 0; i < r1.metrics.size(); ++i) {
      auto a = r1.metrics[i], b = r2.metrics[i];
      a.wall_clock_s = b.wall_clock_s = 0.0;
      CHECK(format_metrics_row(a) == format_metrics_row(b));
    }
  }
}

TEST_CASE("evaluation leaves the normalizers frozen") {
  auto cfg = test::tiny_config();
  Agent agent(cfg);
  const double y[16] = {1, 2, 3};
  agent.obs_normalizer().update(y);
  const auto before = agent.obs_normalizer().to_json();
  const auto mu = balanced_mu(cfg.env.mu_grid, 4);
  const auto stats = run_episodes(cfg.env, agent_policy(agent), mu, 5);
  CHECK(agent.obs_normalizer().to_json() == before);
  CHECK(stats.returns.size() == 4);
  CHECK(stats.mu == std::vector<double>{-0.075, 0.0, 0.075, -0.075});
  const auto again = run_episodes(cfg.env, agent_policy(agent), mu, 5);
  CHECK(again.returns == stats.returns);
  for (double r : stats.returns) CHECK(r < 0.0);
}
