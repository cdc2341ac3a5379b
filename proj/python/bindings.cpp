#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hfrl/config.hpp"
#include "hfrl/eval_harness.hpp"
#include "hfrl/ks_env.hpp"
#include "hfrl/spectral.hpp"
#include "hfrl/trainer.hpp"

namespace py = pybind11;
using namespace hfrl;

namespace {

std::vector<double> to_vector(const Eigen::Ref<const Eigen::VectorXd>& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd to_array(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

py::dict step_dict(const StepResult& r) {
  py::dict d;
  d["y"] = to_array(r.state.y);
  d["reward"] = r.reward;
  d["done"] = r.done;
  d["truncated"] = r.info.truncated;
  d["unstable"] = r.info.unstable;
  d["applied_action"] = to_array(r.info.applied_action);
  return d;
}

// Stateful wrapper around one environment instance.
class Env {
 public:
  explicit Env(const std::string& config_json)
      : env_(config_json.empty() ? EnvConfig{} : env_from_json(nlohmann::json::parse(config_json))) {}

  Eigen::VectorXd reset(double mu, std::uint64_t seed, std::uint64_t episode) {
    state_ = env_.reset(0, seed, episode, mu);
    return to_array(state_.y);
  }

  py::dict step(const Eigen::Ref<const Eigen::VectorXd>& u) {
    if (state_.y.empty()) throw std::logic_error("reset() must be called before step()");
    const auto action = to_vector(u);
    auto r = env_.step(state_, action);
    auto d = step_dict(r);
    state_ = std::move(r.state);
    return d;
  }

  double reward(const Eigen::Ref<const Eigen::VectorXd>& y, const Eigen::Ref<const Eigen::VectorXd>& u) const {
    return env_.reward(to_vector(y), to_vector(u));
  }

  std::size_t action_dim() const { return env_.action_dim(); }
  std::size_t observation_dim() const { return env_.observation_dim(); }
  Eigen::VectorXd field() const { return to_array(state_.y); }

 private:
  KsEnv env_;
  EnvState state_;
};

py::dict heatmap_dict(const HeatmapResult& h) {
  py::dict d;
  d["field"] = h.field();
  d["mu"] = h.mu;
  d["case"] = to_string(h.reference);
  d["seed"] = h.seed;
  d["onset"] = h.onset;
  d["unstable"] = h.unstable;
  d["control_dt"] = h.control_dt;
  d["center"] = h.center;
  d["variance_ratio"] = h.unstable ? std::numeric_limits<double>::quiet_NaN() : heatmap_variance_ratio(h);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of hyperfastrl";

  py::class_<Env>(m, "Env")
      .def(py::init<const std::string&>(), py::arg("config_json") = "")
      .def("reset", &Env::reset, py::arg("mu"), py::arg("seed"), py::arg("episode") = 0)
      .def("step", &Env::step, py::arg("action"))
      .def("reward", &Env::reward, py::arg("y"), py::arg("u"))
      .def_property_readonly("action_dim", &Env::action_dim)
      .def_property_readonly("observation_dim", &Env::observation_dim)
      .def_property_readonly("field", &Env::field);

  m.def("forcing_field", [](double mu, std::size_t points, double length) {
    GridSpec g;
    g.points = points;
    g.length = length;
    return to_array(forcing_field(mu, g));
  }, py::arg("mu"), py::arg("points") = 64, py::arg("length") = 22.0);

  m.def("default_config_json", [] { return to_json(ExperimentConfig{}).dump(); });
  m.def("desk_config_json", [] { return to_json(desk_config()).dump(); });
  m.def("config_hash", [](const std::string& j) { return config_hash(experiment_from_json(nlohmann::json::parse(j))); });

  m.def("train", [](const std::string& config_json, std::uint64_t seed, const std::filesystem::path& out) {
    auto cfg = experiment_from_json(nlohmann::json::parse(config_json));
    cfg.seed = seed;
    TrainResult r;
    {
      py::gil_scoped_release release;
      r = train(cfg, out, {});
    }
    py::dict d;
    d["checkpoint"] = r.checkpoint;
    d["env_steps"] = r.env_steps;
    d["gradient_steps"] = r.gradient_steps;
    d["reuse_ratio"] = r.reuse_ratio;
    d["unstable_transitions"] = r.unstable_transitions;
    return d;
  }, py::arg("config_json"), py::arg("seed"), py::arg("out"));

  m.def("evaluate", [](const std::filesystem::path& checkpoint, const std::string& protocol_json) {
    const auto protocol = TestProtocol::from_json(
        protocol_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(protocol_json));
    EvalReport r;
    {
      py::gil_scoped_release release;
      r = evaluate(checkpoint, protocol);
    }
    return r.to_json().dump();
  }, py::arg("checkpoint"), py::arg("protocol_json") = "");

  m.def("heatmap", [](const std::filesystem::path& checkpoint, double mu, const std::string& c, std::size_t rows,
                      std::size_t onset) {
    return heatmap_dict(heatmap(checkpoint, mu, parse_reference_case(c), HeatmapSpec{rows, onset}));
  }, py::arg("checkpoint"), py::arg("mu"), py::arg("case") = "zero", py::arg("rows") = 1000, py::arg("onset") = 500);

  m.def("uncontrolled_heatmap", [](const std::string& env_json, double mu, const std::string& c, std::size_t rows,
                                   std::size_t onset) {
    const auto env = env_json.empty() ? EnvConfig{} : env_from_json(nlohmann::json::parse(env_json));
    return heatmap_dict(heatmap_rollout(env, nullptr, mu, parse_reference_case(c), HeatmapSpec{rows, onset}));
  }, py::arg("env_json") = "", py::arg("mu") = 0.0, py::arg("case") = "zero", py::arg("rows") = 1000,
     py::arg("onset") = 500);

  m.def("quantile_midpoints", &quantile_midpoints, py::arg("m"));
  m.def("tqc_targets", [](const std::vector<std::vector<double>>& atoms, double ret, double discount, std::size_t drop) {
    return tqc_targets(atoms, ret, discount, drop);
  }, py::arg("atoms"), py::arg("n_step_return"), py::arg("discount"), py::arg("drop"));
  m.def("truncation_mean", [](const std::vector<double>& atoms, std::size_t drop) { return truncation_mean(atoms, drop); },
        py::arg("atoms"), py::arg("drop"));
}
