#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hfrl/eval_harness.hpp"
#include "support.hpp"

using namespace hfrl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("hfrl_eval_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// One tiny training run shared by the tests below.
const fs::path& trained_run() {
  static const fs::path dir = [] {
    const auto d = scratch("run");
    TrainOptions opts;
    train(test::tiny_config(), d, opts);
    return d;
  }();
  return dir;
}

TestProtocol tiny_protocol() {
  TestProtocol p;
  p.seen = {-0.075, 0.0, 0.075};
  p.interpolation = {0.0375};
  p.extrapolation = {-0.1};
  p.episodes = 2;
  return p;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("protocol JSON") {
  TestProtocol p;
  CHECK(p.seen.size() == 7);
  CHECK(p.interpolation == std::vector<double>{0.1125});
  CHECK(p.extrapolation == std::vector<double>{-0.25});
  p.reference = ReferenceCase::FourModeCosine;
  p.config_hash = "0123456789abcdef";
  const auto back = TestProtocol::from_json(p.to_json());
  CHECK(back.to_json() == p.to_json());
  CHECK(back.reference == ReferenceCase::FourModeCosine);
  CHECK(TestProtocol::from_json(nlohmann::json::object()).episodes == 10);
  CHECK_THROWS(TestProtocol::from_json({{"episode", 3}}));
  CHECK_THROWS(TestProtocol::from_json({{"episodes", 0}}));
  CHECK_THROWS(TestProtocol::load("/nonexistent/protocol.json"));
}

TEST_CASE("population std matches a hand computation") {
  CHECK(population_std({1.0, 2.0, 3.0, 4.0}) == doctest::Approx(std::sqrt(1.25)).epsilon(1e-15));
  CHECK(population_std({5.0}) == 0.0);
  CHECK(point_seed(1, 0.1) == point_seed(1, 0.1));
  CHECK(point_seed(1, 0.1) != point_seed(1, 0.2));
  CHECK(point_seed(1, 0.1) != point_seed(2, 0.1));
}

TEST_CASE("policy evaluation") {
  auto cfg = test::tiny_config();
  const auto protocol = tiny_protocol();
  const Policy zero = [&](const Matrix& y, std::span<const double>) {
    return Matrix::Zero(y.rows(), static_cast<Index>(cfg.env.actuator_count));
  };
  const auto report = evaluate_policy(cfg.env, zero, protocol);
  REQUIRE(report.points.size() == 5);
  CHECK(report.points[3].kind == "interpolation");
  CHECK(report.points[4].kind == "extrapolation");
  std::vector<double> means;
  for (const auto& p : report.points) {
    means.push_back(p.mean);
    CHECK(p.min <= p.mean);
    CHECK(p.mean <= p.max);
    CHECK(p.baseline_mean.has_value());
    CHECK(p.seed == point_seed(protocol.seed, p.mu));
  }
  CHECK(report.test_std == population_std(means));
  CHECK(report.test_min == *std::min_element(means.begin(), means.end()));
  CHECK(report.test_max == *std::max_element(means.begin(), means.end()));
  CHECK(report.env_hash == env_hash(cfg.env));

  const auto again = evaluate_policy(cfg.env, zero, protocol);
  CHECK(again.to_json() == report.to_json());

  const auto j = report.to_json();
  CHECK(j.at("summary").at("test_std") == report.test_std);
  CHECK(j.at("points").size() == 5);
}

TEST_CASE("checkpoint evaluation refuses mismatched protocols") {
  const auto ckpt = trained_run() / "checkpoint.bin";
  REQUIRE(fs::exists(ckpt));
  const auto cfg = test::tiny_config();
  auto protocol = tiny_protocol();
  protocol.random_baseline = false;

  const auto report = evaluate(ckpt, protocol);
  CHECK(report.config_hash == config_hash(cfg));
  CHECK(report.train_seed == cfg.seed);
  CHECK(evaluate(ckpt, protocol).to_json() == report.to_json());

  protocol.config_hash = config_hash(cfg);
  CHECK_NOTHROW(evaluate(ckpt, protocol));
  protocol.config_hash = "ffffffffffffffff";
  CHECK_THROWS_AS(evaluate(ckpt, protocol), std::runtime_error);
  protocol.config_hash.reset();
  protocol.reference = ReferenceCase::FourModeCosineOffset;
  CHECK_THROWS_AS(evaluate(ckpt, protocol), std::runtime_error);
}

TEST_CASE("reported returns are raw") {
  const auto ckpt = trained_run() / "checkpoint.bin";
  Agent agent = Agent::load(ckpt);
  const auto& env_cfg = agent.config().env;
  CHECK(agent.reward_normalizer().moments().variance() != 1.0);
  TestProtocol protocol;
  protocol.seen = {0.075};
  protocol.interpolation.clear();
  protocol.extrapolation.clear();
  protocol.episodes = 1;
  protocol.random_baseline = false;
  const auto report = evaluate_policy(env_cfg, agent_policy(agent), protocol);

  KsEnv env(env_cfg);
  auto state = env.reset(0, point_seed(protocol.seed, 0.075), 0, 0.075);
  double total = 0.0;
  while (!state.done) {
    Matrix y(1, static_cast<Index>(state.y.size()));
    std::copy(state.y.begin(), state.y.end(), y.data());
    const std::vector<double> mu{0.075};
    const Matrix u = agent.act(y, mu);
    auto res = env.step(state, std::span<const double>(u.data(), static_cast<std::size_t>(u.size())));
    total += res.reward;
    state = std::move(res.state);
  }
  CHECK(report.points.at(0).mean == total);
}

TEST_CASE("heatmap rollouts") {
  auto cfg = test::tiny_config();
  const HeatmapSpec spec{60, 30};
  Agent agent(cfg);
  const Policy policy = agent_policy(agent);

  const auto h = heatmap_rollout(cfg.env, &policy, 0.0, ReferenceCase::Zero, spec);
  REQUIRE_FALSE(h.unstable);
  CHECK(h.rows.size() == 60);
  CHECK(h.field().rows() == 60);
  CHECK(h.field().cols() == 16);
  CHECK(h.seed == heatmap_seed(0.0, ReferenceCase::Zero));
  CHECK(heatmap_seed(0.0, ReferenceCase::Zero) != heatmap_seed(0.0, ReferenceCase::FourModeCosine));

  const auto again = heatmap_rollout(cfg.env, &policy, 0.0, ReferenceCase::Zero, spec);
  CHECK(again.field() == h.field());

  const auto free = heatmap_rollout(cfg.env, nullptr, 0.0, ReferenceCase::Zero, spec);
  CHECK(free.field().topRows(30) == h.field().topRows(30));
  CHECK(free.field().bottomRows(30) != h.field().bottomRows(30));

  const auto offset = heatmap_rollout(cfg.env, nullptr, 0.0, ReferenceCase::FourModeCosineOffset, spec);
  CHECK(offset.center == doctest::Approx(cfg.env.reference_offset));

  SUBCASE("default shape") {
    const auto full = heatmap_rollout(EnvConfig{}, nullptr, 0.0, ReferenceCase::Zero);
    CHECK(full.field().rows() == 1000);
    CHECK(full.field().cols() == 64);
    CHECK(std::isfinite(heatmap_variance_ratio(full)));
  }
  SUBCASE("window variance") {
    const double v = window_spatial_variance(h, 0, 1);
    const Eigen::RowVectorXd row = h.field().row(0);
    CHECK(v == doctest::Approx((row.array() - row.mean()).square().mean()));
  }
  SUBCASE("instability yields a flagged partial matrix") {
    auto fragile = cfg.env;
    fragile.blowup_threshold = 2.5;
    const auto partial = heatmap_rollout(fragile, nullptr, 0.0, ReferenceCase::Zero, spec);
    CHECK(partial.unstable);
    CHECK(partial.rows.size() < 60);
    CHECK(partial.requested_rows == 60);
  }
  SUBCASE("files") {
    const auto dir = scratch("heatmap");
    const auto files = write_heatmap(dir, h, "abc");
    REQUIRE(fs::exists(files.csv));
    REQUIRE(fs::exists(files.png));
    const auto rows = read_csv(files.csv);
    CHECK(rows.size() == 61);  // header plus one row per control step
    CHECK(rows.front().front() == "t");
    CHECK(rows.back().size() == 17);
    CHECK(std::stod(rows[1][1]) == doctest::Approx(h.rows[0][0]));
    std::ifstream png(files.png, std::ios::binary);
    char sig[8];
    png.read(sig, 8);
    CHECK(std::string(sig + 1, 3) == "PNG");
  }
}

TEST_CASE("sweep") {
  const auto run = trained_run();
  const auto out = scratch("sweep_out");
  SUBCASE("single run gives a degenerate band") {
    const auto result = sweep({run, fs::path("/nonexistent/run")});
    REQUIRE(result.groups.size() == 1);
    CHECK(result.groups[0].runs.size() == 1);
    CHECK(result.missing.size() == 1);
    CHECK(result.summary.at(0).final_eval_std == 0.0);
    write_sweep(out, result);
    const auto curves = read_csv(out / ("curves_" + result.groups[0].config_hash + ".csv"));
    REQUIRE(curves.size() > 2);
    for (std::size_t i = 1; i < curves.size(); ++i) CHECK(curves[i][6] == curves[i][7]);
    CHECK(fs::exists(out / "summary.csv"));
    CHECK(fs::exists(out / "summary.json"));
  }
  SUBCASE("band spans seeds and the test sigma is recomputable") {
    auto cfg = test::tiny_config();
    cfg.seed = 4;
    const auto second = scratch("run_seed4");
    train(cfg, second, {});
    auto protocol = tiny_protocol();
    protocol.random_baseline = false;
    const auto report = evaluate(run / "checkpoint.bin", protocol);
    std::ofstream(run / "report.json") << report.to_json().dump(2);
    const auto result = sweep({run, second});
    REQUIRE(result.groups.size() == 1);
    REQUIRE(result.groups[0].runs.size() == 2);
    write_sweep(out, result);
    const auto curves = read_csv(out / ("curves_" + result.groups[0].config_hash + ".csv"));
    const auto& m1 = result.groups[0].runs[0].metrics.back();
    const auto& m2 = result.groups[0].runs[1].metrics.back();
    const auto& last = curves.back();
    CHECK(std::stod(last[6]) == std::min(m1.eval_mean, m2.eval_mean));
    CHECK(std::stod(last[7]) == std::max(m1.eval_mean, m2.eval_mean));

    std::vector<double> means;
    for (const auto& p : report.points) means.push_back(p.mean);
    const double mean = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
    double ss = 0.0;
    for (double m : means) ss += (m - mean) * (m - mean);
    REQUIRE(result.summary.at(0).test_std.has_value());
    CHECK(*result.summary.at(0).test_std == doctest::Approx(std::sqrt(ss / static_cast<double>(means.size()))));
    fs::remove(run / "report.json");
  }
  SUBCASE("glob expansion") {
    const auto matches = expand_glob((fs::temp_directory_path() / "hfrl_eval_test_ru*").string());
    CHECK(std::find(matches.begin(), matches.end(), run) != matches.end());
    CHECK(expand_glob("/nonexistent/*/nothing").empty());
  }
}
