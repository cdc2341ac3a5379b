#pragma once

// Post-training evaluation: per-mu test profiles, heatmap rollouts, sweeps.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "hfrl/ks_env.hpp"
#include "hfrl/trainer.hpp"

namespace hfrl {

struct TestProtocol {
  std::vector<double> seen{-0.225, -0.15, -0.075, 0.0, 0.075, 0.15, 0.225};
  std::vector<double> interpolation{0.1125};
  std::vector<double> extrapolation{-0.25};
  std::size_t episodes = 10;
  std::optional<ReferenceCase> reference;    // must match the checkpoint when set
  std::optional<std::string> config_hash;    // expected checkpoint hash when set
  std::uint64_t seed = 20240601;
  bool random_baseline = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TestProtocol from_json(const nlohmann::json& j);
  static TestProtocol load(const std::filesystem::path& path);
};

struct PointResult {
  double mu = 0.0;
  std::string kind;  // seen | interpolation | extrapolation
  std::uint64_t seed = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t unstable = 0;
  std::optional<double> baseline_mean;  // random policy, same seeds
};

struct EvalReport {
  std::string config_hash;
  std::string env_hash;
  std::uint64_t train_seed = 0;
  std::uint64_t protocol_seed = 0;
  std::string reference_case;
  std::size_t episodes = 0;
  std::vector<PointResult> points;
  double test_min = 0.0;  // over per-point means
  double test_max = 0.0;
  double test_std = 0.0;  // population std over per-point means

  nlohmann::json to_json() const;
};

// Population standard deviation.
double population_std(const std::vector<double>& v);

// Episode seed for a test point; depends only on (seed, mu).
std::uint64_t point_seed(std::uint64_t seed, double mu);

// Evaluates a deterministic policy on the protocol. Rewards are raw.
EvalReport evaluate_policy(const EnvConfig& env, const Policy& policy, const TestProtocol& protocol);

// Loads the checkpoint, refuses on hash or case mismatch, evaluates the actor.
EvalReport evaluate(const std::filesystem::path& checkpoint, const TestProtocol& protocol);

struct HeatmapSpec {
  std::size_t total_steps = 1000;
  std::size_t onset = 500;
};

struct HeatmapResult {
  double mu = 0.0;
  ReferenceCase reference = ReferenceCase::Zero;
  std::uint64_t seed = 0;
  std::size_t onset = 0;
  std::size_t requested_rows = 0;
  bool unstable = false;                  // rollout stopped early; `rows` is partial
  std::vector<std::vector<double>> rows;  // field after each control step
  double control_dt = 0.0;
  double center = 0.0;                    // palette midpoint

  Matrix field() const;
};

// Seed fixed per (mu, case).
std::uint64_t heatmap_seed(double mu, ReferenceCase c);

// Rolls out with zero action before `onset` and the policy afterwards; a null
// policy leaves the whole rollout uncontrolled.
HeatmapResult heatmap_rollout(EnvConfig env, const Policy* policy, double mu, ReferenceCase c, const HeatmapSpec& spec = {});

// Mean over rows [begin, end) of the spatial variance of each row.
double window_spatial_variance(const HeatmapResult& h, std::size_t begin, std::size_t end);
// Post-onset (800..999) over pre-onset (300..499) spatial variance, scaled to the requested rows.
double heatmap_variance_ratio(const HeatmapResult& h);

// Diverging blue-white-red PNG, time downward, each column widened by
// `x_scale`, onset marked by a black row.
void write_heatmap_png(const std::filesystem::path& path, const HeatmapResult& h, std::size_t x_scale = 4);

struct HeatmapFiles {
  std::filesystem::path csv;
  std::filesystem::path png;
};

// Writes <dir>/heatmap_<case>_mu<mu>.{csv,png} plus a JSON sidecar.
HeatmapFiles write_heatmap(const std::filesystem::path& dir, const HeatmapResult& h, const std::string& config_hash);

HeatmapResult heatmap(const std::filesystem::path& checkpoint, double mu, ReferenceCase c, const HeatmapSpec& spec = {});

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct SweepRun {
  std::filesystem::path dir;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> metrics;
  std::optional<EvalReport> report;
};

struct SweepGroup {
  std::string config_hash;
  std::vector<SweepRun> runs;
};

struct SweepSummaryRow {
  std::string config_hash;
  std::size_t runs = 0;
  double runtime_s = 0.0;  // mean over runs
  double final_train_mean = 0.0;
  double final_train_std = 0.0;
  double final_eval_mean = 0.0;
  double final_eval_std = 0.0;
  std::optional<double> test_min;
  std::optional<double> test_max;
  std::optional<double> test_std;
};

struct SweepResult {
  std::vector<SweepGroup> groups;
  std::vector<SweepSummaryRow> summary;
  std::vector<std::string> missing;  // matched paths without a usable run
};

// Expands a glob pattern to run directories.
std::vector<std::filesystem::path> expand_glob(const std::string& pattern);

SweepResult sweep(const std::vector<std::filesystem::path>& run_dirs);

// Writes summary.csv, summary.json and curves_<hash>.csv (train curve, eval
// curve with min-max band across runs) plus profile_<hash>.csv when reports exist.
void write_sweep(const std::filesystem::path& out_dir, const SweepResult& result);

}  // namespace hfrl
