#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "hfrl/config.hpp"
#include "hfrl/eval_harness.hpp"
#include "hfrl/trainer.hpp"

namespace fs = std::filesystem;
using namespace hfrl;

namespace {

int cmd_train(const std::string& config_path, std::uint64_t seed, const fs::path& out, bool quiet) {
  ExperimentConfig cfg = load_config(config_path);
  cfg.seed = seed;
  cfg.validate();
  TrainOptions opts;
  opts.verbose = !quiet;
  const auto r = train(cfg, out, opts);
  std::cout << "run: " << out.string() << "\nconfig_hash: " << config_hash(cfg) << "\nreuse_ratio: " << r.reuse_ratio
            << "\nenv_steps: " << r.env_steps << "\ngradient_steps: " << r.gradient_steps
            << "\nskipped_updates: " << r.skipped_updates << "\nfinal_eval_mean: " << std::setprecision(10)
            << r.metrics.back().eval_mean << "\ncheckpoint: " << r.checkpoint.string() << '\n';
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const std::string& protocol_path, fs::path out) {
  const TestProtocol protocol = protocol_path.empty() ? TestProtocol{} : TestProtocol::load(protocol_path);
  const EvalReport report = evaluate(checkpoint, protocol);
  if (out.empty()) out = checkpoint.parent_path() / "report.json";
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream(out) << report.to_json().dump(2) << '\n';
  std::cout << std::setprecision(6) << std::fixed;
  std::cout << "mu          kind           mean        min         max\n";
  for (const auto& p : report.points) {
    std::cout << std::setw(10) << p.mu << "  " << std::left << std::setw(13) << p.kind << std::right << std::setw(11)
              << p.mean << ' ' << std::setw(11) << p.min << ' ' << std::setw(11) << p.max << '\n';
  }
  std::cout << "test range [" << report.test_min << ", " << report.test_max << "], test std " << report.test_std
            << "\nreport: " << out.string() << '\n';
  return 0;
}

int cmd_heatmap(const fs::path& checkpoint, double mu, const std::string& case_name, fs::path out_dir) {
  const ReferenceCase c = parse_reference_case(case_name);
  const HeatmapResult h = heatmap(checkpoint, mu, c);
  if (out_dir.empty()) out_dir = checkpoint.parent_path() / "heatmaps";
  const ExperimentConfig cfg = Agent::load(checkpoint).config();
  const auto files = write_heatmap(out_dir, h, config_hash(cfg));
  std::cout << "rows: " << h.rows.size() << " x " << (h.rows.empty() ? 0 : h.rows.front().size())
            << (h.unstable ? " (unstable, partial)" : "") << "\nvariance_ratio: " << heatmap_variance_ratio(h)
            << "\ncsv: " << files.csv.string() << "\npng: " << files.png.string() << '\n';
  return h.unstable ? 3 : 0;
}

int cmd_sweep(const std::string& pattern, const fs::path& out) {
  const auto dirs = expand_glob(pattern);
  const auto result = sweep(dirs);
  write_sweep(out, result);
  for (const auto& r : result.summary) {
    std::cout << r.config_hash << ": runs=" << r.runs << " final_eval=" << r.final_eval_mean << " +- " << r.final_eval_std
              << '\n';
  }
  for (const auto& m : result.missing) std::cout << "missing: " << m << '\n';
  if (dirs.empty()) std::cout << "missing: no paths match " << pattern << '\n';
  std::cout << "summary: " << (out / "summary.csv").string() << '\n';
  return 0;
}

int cmd_init_config(const std::string& preset, const fs::path& out) {
  ExperimentConfig cfg;
  if (preset == "desk") {
    cfg = desk_config();
  } else if (preset != "default") {
    throw CLI::ValidationError("--preset", "expected desk or default");
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream(out) << to_json(cfg).dump(2) << '\n';
  std::cout << "config: " << out.string() << " (hash " << config_hash(cfg) << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hyperFastRL: hypernetwork-conditioned control of the Kuramoto-Sivashinsky equation"};
  app.require_subcommand(1);

  std::string config_path, protocol_path, pattern, case_name = "zero", preset = "desk";
  std::string out, checkpoint;
  std::uint64_t seed = 0;
  double mu = 0.0;
  bool quiet = false;

  auto* train_cmd = app.add_subcommand("train", "Train an agent and write metrics, manifest and checkpoint");
  train_cmd->add_option("--config", config_path, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", seed, "Run seed")->required();
  train_cmd->add_option("--out", out, "Run directory")->required();
  train_cmd->add_flag("--quiet", quiet, "Suppress per-evaluation progress");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a test protocol");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--protocol", protocol_path, "Protocol JSON (defaults when omitted)")->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", out, "Report path (default: report.json beside the checkpoint)");

  auto* heat_cmd = app.add_subcommand("heatmap", "Render a 1000-step rollout with control from step 500");
  heat_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  heat_cmd->add_option("--mu", mu, "Forcing parameter")->required();
  heat_cmd->add_option("--case", case_name, "Reference case")
      ->check(CLI::IsMember({"zero", "cos4", "cos4-offset"}));
  heat_cmd->add_option("--out", out, "Output directory (default: heatmaps/ beside the checkpoint)");

  auto* sweep_cmd = app.add_subcommand("sweep", "Aggregate completed runs");
  sweep_cmd->add_option("--runs", pattern, "Glob over run directories")->required();
  sweep_cmd->add_option("--out", out, "Output directory")->required();

  auto* init_cmd = app.add_subcommand("init-config", "Write a config preset");
  init_cmd->add_option("--preset", preset, "desk or default");
  init_cmd->add_option("--out", out, "Config path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train_cmd) return cmd_train(config_path, seed, out, quiet);
    if (*eval_cmd) return cmd_eval(checkpoint, protocol_path, out);
    if (*heat_cmd) return cmd_heatmap(checkpoint, mu, case_name, out);
    if (*sweep_cmd) return cmd_sweep(pattern, out);
    if (*init_cmd) return cmd_init_config(preset, out);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
