#include "hfrl/eval_harness.hpp"

#include <glob.h>
#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hfrl/checkpoint.hpp"
#include "hfrl/config.hpp"

namespace hfrl {

using nlohmann::json;

// ----------------------------------------------------------------- protocol

void TestProtocol::validate() const {
  if (episodes == 0) throw std::invalid_argument("protocol: episodes must be positive");
  if (seen.empty() && interpolation.empty() && extrapolation.empty()) {
    throw std::invalid_argument("protocol: no test points");
  }
  for (const auto* list : {&seen, &interpolation, &extrapolation}) {
    for (double mu : *list) {
      if (!std::isfinite(mu)) throw std::invalid_argument("protocol: non-finite mu");
    }
  }
}

json TestProtocol::to_json() const {
  json j{{"seen", seen},       {"interpolation", interpolation}, {"extrapolation", extrapolation},
         {"episodes", episodes}, {"seed", seed},                 {"random_baseline", random_baseline}};
  if (reference) j["case"] = to_string(*reference);
  if (config_hash) j["config_hash"] = *config_hash;
  return j;
}

TestProtocol TestProtocol::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("protocol: expected a JSON object");
  static const std::set<std::string> known{"seen",     "interpolation", "extrapolation", "episodes",
                                           "seed",     "random_baseline", "case",        "config_hash"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("protocol: unknown key '" + key + "'");
  }
  TestProtocol p;
  try {
    if (j.contains("seen")) p.seen = j.at("seen").get<std::vector<double>>();
    if (j.contains("interpolation")) p.interpolation = j.at("interpolation").get<std::vector<double>>();
    if (j.contains("extrapolation")) p.extrapolation = j.at("extrapolation").get<std::vector<double>>();
    if (j.contains("episodes")) p.episodes = j.at("episodes").get<std::size_t>();
    if (j.contains("seed")) p.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("random_baseline")) p.random_baseline = j.at("random_baseline").get<bool>();
    if (j.contains("case")) p.reference = parse_reference_case(j.at("case").get<std::string>());
    if (j.contains("config_hash")) p.config_hash = j.at("config_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("protocol: ") + e.what());
  }
  p.validate();
  return p;
}

TestProtocol TestProtocol::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read protocol " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("protocol " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

// ------------------------------------------------------------------- report

json EvalReport::to_json() const {
  json pts = json::array();
  for (const auto& p : points) {
    json row{{"mu", p.mu}, {"kind", p.kind},  {"seed", p.seed},         {"mean", p.mean},
             {"min", p.min}, {"max", p.max}, {"unstable", p.unstable}};
    if (p.baseline_mean) row["random_baseline_mean"] = *p.baseline_mean;
    pts.push_back(row);
  }
  return json{{"config_hash", config_hash},
              {"env_hash", env_hash},
              {"train_seed", train_seed},
              {"protocol_seed", protocol_seed},
              {"case", reference_case},
              {"episodes_per_point", episodes},
              {"points", pts},
              {"summary", {{"test_min", test_min}, {"test_max", test_max}, {"test_std", test_std}}}};
}

double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::uint64_t point_seed(std::uint64_t seed, double mu) { return mix_seed(seed, std::bit_cast<std::uint64_t>(mu), 0x7e57); }

EvalReport evaluate_policy(const EnvConfig& env, const Policy& policy, const TestProtocol& protocol) {
  protocol.validate();
  EvalReport report;
  report.protocol_seed = protocol.seed;
  report.reference_case = to_string(env.reference);
  report.episodes = protocol.episodes;
  report.env_hash = env_hash(env);
  const std::size_t adim = env.actuator_count;
  const auto add = [&](const std::vector<double>& mus, const char* kind) {
    for (double mu : mus) {
      PointResult p;
      p.mu = mu;
      p.kind = kind;
      p.seed = point_seed(protocol.seed, mu);
      const std::vector<double> mu_list(protocol.episodes, mu);
      const auto stats = run_episodes(env, policy, mu_list, p.seed);
      p.mean = stats.mean();
      p.min = stats.min();
      p.max = stats.max();
      p.unstable = static_cast<std::size_t>(std::count(stats.unstable.begin(), stats.unstable.end(), true));
      if (protocol.random_baseline) {
        p.baseline_mean = run_episodes(env, random_policy(adim, mix_seed(p.seed, 1)), mu_list, p.seed).mean();
      }
      report.points.push_back(std::move(p));
    }
  };
  add(protocol.seen, "seen");
  add(protocol.interpolation, "interpolation");
  add(protocol.extrapolation, "extrapolation");
  std::vector<double> means;
  for (const auto& p : report.points) means.push_back(p.mean);
  report.test_min = *std::min_element(means.begin(), means.end());
  report.test_max = *std::max_element(means.begin(), means.end());
  report.test_std = population_std(means);
  return report;
}

namespace {

Agent load_checked(const std::filesystem::path& checkpoint, const std::optional<std::string>& expected_hash, json* manifest) {
  Agent agent = Agent::load(checkpoint, manifest);
  const std::string hash = config_hash(agent.config());
  if (expected_hash && *expected_hash != hash) {
    throw std::runtime_error("config hash mismatch: protocol expects " + *expected_hash + ", checkpoint has " + hash);
  }
  if (manifest->contains("env_hash") && manifest->at("env_hash").get<std::string>() != env_hash(agent.config().env)) {
    throw std::runtime_error("environment hash mismatch in checkpoint " + checkpoint.string());
  }
  return agent;
}

}  // namespace

EvalReport evaluate(const std::filesystem::path& checkpoint, const TestProtocol& protocol) {
  json manifest;
  Agent agent = load_checked(checkpoint, protocol.config_hash, &manifest);
  const auto& env = agent.config().env;
  if (protocol.reference && *protocol.reference != env.reference) {
    throw std::runtime_error("protocol case " + to_string(*protocol.reference) + " differs from the trained case " +
                             to_string(env.reference));
  }
  EvalReport report = evaluate_policy(env, agent_policy(agent), protocol);
  report.config_hash = config_hash(agent.config());
  report.train_seed = agent.config().seed;
  return report;
}

// ------------------------------------------------------------------ heatmap

Matrix HeatmapResult::field() const {
  const Index n = rows.empty() ? 0 : static_cast<Index>(rows.front().size());
  Matrix m(static_cast<Index>(rows.size()), n);
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), m.row(static_cast<Index>(r)).data());
  return m;
}

std::uint64_t heatmap_seed(double mu, ReferenceCase c) {
  return mix_seed(0x4ea7, std::bit_cast<std::uint64_t>(mu), static_cast<std::uint64_t>(c));
}

HeatmapResult heatmap_rollout(EnvConfig env_cfg, const Policy* policy, double mu, ReferenceCase c, const HeatmapSpec& spec) {
  if (spec.onset > spec.total_steps) throw std::invalid_argument("heatmap: onset beyond the rollout length");
  env_cfg.reference = c;
  KsEnv env(env_cfg);
  HeatmapResult h;
  h.mu = mu;
  h.reference = c;
  h.seed = heatmap_seed(mu, c);
  h.onset = spec.onset;
  h.requested_rows = spec.total_steps;
  h.control_dt = env_cfg.control_dt();
  const auto& profile = env.reference().profile;
  h.center = profile.empty() ? 0.0 : std::accumulate(profile.begin(), profile.end(), 0.0) / static_cast<double>(profile.size());
  h.rows.reserve(spec.total_steps);

  EnvState state = env.reset(0, h.seed, 0, mu);
  const std::size_t adim = env.action_dim();
  std::vector<double> zero(adim, 0.0);
  Matrix y(1, static_cast<Index>(env_cfg.grid.points));
  for (std::size_t t = 0; t < spec.total_steps; ++t) {
    std::vector<double> u = zero;
    if (policy && t >= spec.onset) {
      std::copy(state.y.begin(), state.y.end(), y.data());
      const double m = state.mu;
      const Matrix a = (*policy)(y, std::span<const double>(&m, 1));
      u.assign(a.data(), a.data() + a.size());
    }
    // The rollout outlives the episode horizon.
    state.step_count = 0;
    auto res = env.step(state, u);
    if (res.info.unstable) {
      h.unstable = true;
      break;
    }
    h.rows.push_back(res.state.y);
    state = std::move(res.state);
  }
  return h;
}

double window_spatial_variance(const HeatmapResult& h, std::size_t begin, std::size_t end) {
  end = std::min(end, h.rows.size());
  if (begin >= end) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (std::size_t r = begin; r < end; ++r) {
    const auto& row = h.rows[r];
    const double m = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
    double s = 0.0;
    for (double v : row) s += (v - m) * (v - m);
    total += s / static_cast<double>(row.size());
  }
  return total / static_cast<double>(end - begin);
}

double heatmap_variance_ratio(const HeatmapResult& h) {
  const double scale = static_cast<double>(h.requested_rows) / 1000.0;
  const auto at = [&](double r) { return static_cast<std::size_t>(std::lround(r * scale)); };
  if (h.unstable) return std::numeric_limits<double>::quiet_NaN();
  return window_spatial_variance(h, at(800), at(1000)) / window_spatial_variance(h, at(300), at(500));
}

namespace {

std::array<unsigned char, 3> diverging(double v) {
  // v in [-1, 1]: blue (-1), white (0), red (+1).
  v = std::clamp(v, -1.0, 1.0);
  const auto lerp = [](double a, double b, double t) { return static_cast<unsigned char>(std::lround(a + (b - a) * t)); };
  if (v < 0.0) {
    const double t = -v;
    return {lerp(255, 33, t), lerp(255, 102, t), lerp(255, 172, t)};
  }
  return {lerp(255, 178, v), lerp(255, 24, v), lerp(255, 43, v)};
}

struct PngFile {
  std::FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngFile() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

std::string mu_tag(double mu) {
  std::ostringstream s;
  s << std::showpos << std::fixed << std::setprecision(4) << mu;
  return s.str();
}

}  // namespace

void write_heatmap_png(const std::filesystem::path& path, const HeatmapResult& h, std::size_t x_scale) {
  if (h.rows.empty()) throw std::runtime_error("heatmap: no rows to render");
  if (x_scale == 0) throw std::invalid_argument("heatmap: x_scale must be positive");
  const std::size_t n = h.rows.front().size();
  const std::size_t width = n * x_scale;
  const std::size_t height = h.rows.size();
  double amp = 1e-12;
  for (const auto& row : h.rows) {
    for (double v : row) amp = std::max(amp, std::abs(v - h.center));
  }
  std::vector<unsigned char> pixels(width * height * 3);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      auto rgb = diverging((h.rows[r][j] - h.center) / amp);
      if (r == h.onset && h.onset > 0) rgb = {0, 0, 0};
      for (std::size_t k = 0; k < x_scale; ++k) {
        unsigned char* p = &pixels[(r * width + j * x_scale + k) * 3];
        p[0] = rgb[0];
        p[1] = rgb[1];
        p[2] = rgb[2];
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  PngFile f;
  f.fp = std::fopen(path.c_str(), "wb");
  if (!f.fp) throw std::runtime_error("cannot write " + path.string());
  f.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!f.png) throw std::runtime_error("png: cannot create writer");
  f.info = png_create_info_struct(f.png);
  if (!f.info) throw std::runtime_error("png: cannot create info");
  if (setjmp(png_jmpbuf(f.png))) throw std::runtime_error("png: write failed for " + path.string());
  png_init_io(f.png, f.fp);
  png_set_IHDR(f.png, f.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(f.png, f.info);
  for (std::size_t r = 0; r < height; ++r) png_write_row(f.png, &pixels[r * width * 3]);
  png_write_end(f.png, nullptr);
}

HeatmapFiles write_heatmap(const std::filesystem::path& dir, const HeatmapResult& h, const std::string& config_hash) {
  const std::string stem = "heatmap_" + to_string(h.reference) + "_mu" + mu_tag(h.mu);
  HeatmapFiles files{dir / (stem + ".csv"), dir / (stem + ".png")};
  write_trajectory(files.csv, h.rows, h.control_dt, TrajectoryMeta{h.mu, to_string(h.reference), h.seed, config_hash});
  // Extend the sidecar with the rollout status.
  const auto side_path = files.csv.string() + ".json";
  json side;
  {
    std::ifstream in(side_path);
    in >> side;
  }
  side["onset"] = h.onset;
  side["requested_rows"] = h.requested_rows;
  side["unstable"] = h.unstable;
  side["partial"] = h.rows.size() < h.requested_rows;
  side["variance_ratio"] = h.unstable ? json(nullptr) : json(heatmap_variance_ratio(h));
  std::ofstream(side_path) << side.dump(2) << '\n';
  if (!h.rows.empty()) write_heatmap_png(files.png, h);
  return files;
}

HeatmapResult heatmap(const std::filesystem::path& checkpoint, double mu, ReferenceCase c, const HeatmapSpec& spec) {
  json manifest;
  Agent agent = load_checked(checkpoint, std::nullopt, &manifest);
  const Policy policy = agent_policy(agent);
  return heatmap_rollout(agent.config().env, &policy, mu, c, spec);
}

// -------------------------------------------------------------------- sweep

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != metrics_header()) throw std::runtime_error(path.string() + ": bad metrics header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> f;
    std::stringstream s(line);
    std::string cell;
    while (std::getline(s, cell, ',')) f.push_back(std::strtod(cell.c_str(), nullptr));
    if (f.size() != 9) throw std::runtime_error(path.string() + ": expected 9 columns, got " + std::to_string(f.size()));
    MetricsRow r;
    r.step = static_cast<std::size_t>(f[0]);
    r.train_reward_rolling = f[1];
    r.eval_mean = f[2];
    r.eval_min = f[3];
    r.eval_max = f[4];
    r.critic_loss = f[5];
    r.actor_obj = f[6];
    r.lr = f[7];
    r.wall_clock_s = f[8];
    rows.push_back(r);
  }
  return rows;
}

std::vector<std::filesystem::path> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::filesystem::path> out;
  if (rc == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  if (rc != 0 && rc != GLOB_NOMATCH) throw std::runtime_error("glob failed for '" + pattern + "'");
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

EvalReport report_from_json(const json& j) {
  EvalReport r;
  r.config_hash = j.value("config_hash", "");
  r.env_hash = j.value("env_hash", "");
  r.train_seed = j.value("train_seed", std::uint64_t{0});
  r.protocol_seed = j.value("protocol_seed", std::uint64_t{0});
  r.reference_case = j.value("case", "");
  r.episodes = j.value("episodes_per_point", std::size_t{0});
  for (const auto& p : j.at("points")) {
    PointResult pr;
    pr.mu = p.at("mu").get<double>();
    pr.kind = p.value("kind", "");
    pr.seed = p.value("seed", std::uint64_t{0});
    pr.mean = p.at("mean").get<double>();
    pr.min = p.at("min").get<double>();
    pr.max = p.at("max").get<double>();
    pr.unstable = p.value("unstable", std::size_t{0});
    if (p.contains("random_baseline_mean")) pr.baseline_mean = p.at("random_baseline_mean").get<double>();
    r.points.push_back(pr);
  }
  const auto& s = j.at("summary");
  r.test_min = s.at("test_min").get<double>();
  r.test_max = s.at("test_max").get<double>();
  r.test_std = s.at("test_std").get<double>();
  return r;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

SweepResult sweep(const std::vector<std::filesystem::path>& run_dirs) {
  SweepResult result;
  std::map<std::string, SweepGroup> groups;
  for (const auto& dir : run_dirs) {
    try {
      if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory");
      SweepRun run;
      run.dir = dir;
      run.metrics = read_metrics_csv(dir / "metrics.csv");
      if (run.metrics.empty()) throw std::runtime_error("metrics.csv has no rows");
      std::ifstream in(dir / "run.json");
      if (!in) throw std::runtime_error("run.json missing");
      json manifest;
      in >> manifest;
      run.config_hash = manifest.at("config_hash").get<std::string>();
      run.seed = manifest.at("seed").get<std::uint64_t>();
      if (std::ifstream rep(dir / "report.json"); rep) {
        json j;
        rep >> j;
        run.report = report_from_json(j);
      }
      groups[run.config_hash].config_hash = run.config_hash;
      groups[run.config_hash].runs.push_back(std::move(run));
    } catch (const std::exception& e) {
      result.missing.push_back(dir.string() + ": " + e.what());
    }
  }
  for (auto& [hash, group] : groups) {
    SweepSummaryRow row;
    row.config_hash = hash;
    row.runs = group.runs.size();
    std::vector<double> runtime, train, eval, tmin, tmax, tstd;
    for (const auto& run : group.runs) {
      const auto& last = run.metrics.back();
      runtime.push_back(last.wall_clock_s);
      if (std::isfinite(last.train_reward_rolling)) train.push_back(last.train_reward_rolling);
      eval.push_back(last.eval_mean);
      if (run.report) {
        tmin.push_back(run.report->test_min);
        tmax.push_back(run.report->test_max);
        tstd.push_back(run.report->test_std);
      }
    }
    row.runtime_s = mean_of(runtime);
    row.final_train_mean = mean_of(train);
    row.final_train_std = population_std(train);
    row.final_eval_mean = mean_of(eval);
    row.final_eval_std = population_std(eval);
    if (!tmin.empty()) {
      row.test_min = *std::min_element(tmin.begin(), tmin.end());
      row.test_max = *std::max_element(tmax.begin(), tmax.end());
      row.test_std = mean_of(tstd);
    }
    result.summary.push_back(row);
    result.groups.push_back(std::move(group));
  }
  return result;
}

void write_sweep(const std::filesystem::path& out_dir, const SweepResult& result) {
  std::filesystem::create_directories(out_dir);
  const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  {
    std::ofstream csv(out_dir / "summary.csv");
    csv << "config_hash,runs,runtime_s,final_train_mean,final_train_std,final_eval_mean,final_eval_std,test_min,test_max,"
           "test_std\n"
        << std::setprecision(17);
    const auto cell = [](const std::optional<double>& v) {
      std::ostringstream s;
      s << std::setprecision(17);
      if (v) s << *v;
      return s.str();
    };
    for (const auto& r : result.summary) {
      csv << r.config_hash << ',' << r.runs << ',' << r.runtime_s << ',' << r.final_train_mean << ',' << r.final_train_std
          << ',' << r.final_eval_mean << ',' << r.final_eval_std << ',' << cell(r.test_min) << ',' << cell(r.test_max) << ','
          << cell(r.test_std) << '\n';
    }
  }
  json summary = json::array();
  for (const auto& r : result.summary) {
    summary.push_back({{"config_hash", r.config_hash},
                       {"runs", r.runs},
                       {"runtime_s", r.runtime_s},
                       {"final_train_mean", r.final_train_mean},
                       {"final_train_std", r.final_train_std},
                       {"final_eval_mean", r.final_eval_mean},
                       {"final_eval_std", r.final_eval_std},
                       {"test_min", opt(r.test_min)},
                       {"test_max", opt(r.test_max)},
                       {"test_std", opt(r.test_std)}});
  }
  std::ofstream(out_dir / "summary.json") << json{{"summary", summary}, {"missing", result.missing}}.dump(2) << '\n';

  for (const auto& g : result.groups) {
    // Curves: per step, band across runs.
    std::map<std::size_t, std::vector<const MetricsRow*>> by_step;
    for (const auto& run : g.runs) {
      for (const auto& m : run.metrics) by_step[m.step].push_back(&m);
    }
    std::ofstream curves(out_dir / ("curves_" + g.config_hash + ".csv"));
    curves << "step,runs,train_mean,train_min,train_max,eval_mean,eval_min,eval_max\n" << std::setprecision(17);
    for (const auto& [step, rows] : by_step) {
      std::vector<double> train, eval;
      for (const auto* m : rows) {
        if (std::isfinite(m->train_reward_rolling)) train.push_back(m->train_reward_rolling);
        eval.push_back(m->eval_mean);
      }
      const auto mn = [](const std::vector<double>& v) {
        return v.empty() ? std::numeric_limits<double>::quiet_NaN() : *std::min_element(v.begin(), v.end());
      };
      const auto mx = [](const std::vector<double>& v) {
        return v.empty() ? std::numeric_limits<double>::quiet_NaN() : *std::max_element(v.begin(), v.end());
      };
      curves << step << ',' << rows.size() << ',' << mean_of(train) << ',' << mn(train) << ',' << mx(train) << ','
             << mean_of(eval) << ',' << mn(eval) << ',' << mx(eval) << '\n';
    }
    // Per-mu test profile across runs with reports.
    std::map<double, std::vector<double>> profile;
    std::map<double, std::string> kinds;
    for (const auto& run : g.runs) {
      if (!run.report) continue;
      for (const auto& p : run.report->points) {
        profile[p.mu].push_back(p.mean);
        kinds[p.mu] = p.kind;
      }
    }
    if (!profile.empty()) {
      std::ofstream prof(out_dir / ("profile_" + g.config_hash + ".csv"));
      prof << "mu,kind,runs,mean,min,max\n" << std::setprecision(17);
      for (const auto& [mu, v] : profile) {
        prof << mu << ',' << kinds[mu] << ',' << v.size() << ',' << mean_of(v) << ',' << *std::min_element(v.begin(), v.end())
             << ',' << *std::max_element(v.begin(), v.end()) << '\n';
      }
    }
  }
}

}  // namespace hfrl
