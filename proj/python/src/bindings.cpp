#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rpg/envs.hpp"
#include "rpg/harness.hpp"
#include "rpg/matrix_core.hpp"

namespace py = pybind11;
using namespace rpg;

namespace {

// Small stateful wrapper so Python can drive one game directly.
class PyEnv {
 public:
  PyEnv(const std::string& kind, int n_agents, int episode_length, uint64_t seed)
      : spec_{envs::ParseEnvKind(kind), n_agents, episode_length},
        env_(envs::Environment::Make(spec_)) {
    env_->Reset(seed);
  }
  void reset(uint64_t seed) { env_->Reset(seed); }
  py::dict step(const std::vector<int>& actions, const std::vector<double>& w) {
    const envs::RewardWeights weights =
        w.empty() ? envs::OriginalWeights(spec_.kind) : envs::RewardWeights(w);
    const envs::StepResult r = env_->Step(actions, weights);
    py::dict out;
    out["observations"] = r.observations;
    out["features"] = r.features;
    out["rewards"] = r.rewards;
    out["done"] = r.done;
    py::dict ev;
    const auto& names = r.events.names();
    for (size_t k = 0; k < names.size(); ++k) ev[py::str(names[k])] = r.events.values()[k];
    out["events"] = ev;
    return out;
  }
  std::vector<double> observe(int agent) const { return env_->Observe(agent); }
  bool done() const { return env_->done(); }
  std::string render() const { return envs::Render(spec_.kind, env_->snapshot()); }

 private:
  envs::EnvSpec spec_;
  std::unique_ptr<envs::Environment> env_;
};

std::string BoundJson(const matrix::BoundReport& r) { return r.ToJson(); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Reward-randomized policy gradient core";

  m.def("theorem1_bound", &matrix::theorem1_bound);
  m.def("theorem2_bound", &matrix::theorem2_bound);
  m.def("critical_threshold", [](double a, double b, double c, double d) {
    return matrix::critical_threshold(matrix::PayoffMatrix(a, b, c, d));
  });
  m.def(
      "verify_theorem1",
      [](double a, double b, double c, double d, int64_t trials, uint64_t seed) {
        return BoundJson(
            matrix::verify_theorem1(matrix::PayoffMatrix(a, b, c, d), trials, {}, seed));
      },
      py::arg("a"), py::arg("b"), py::arg("c"), py::arg("d"), py::arg("trials") = 10000,
      py::arg("seed") = 0, py::call_guard<py::gil_scoped_release>());
  m.def(
      "verify_theorem2",
      [](int n, int64_t trials, uint64_t seed) {
        return BoundJson(matrix::verify_theorem2(n, trials, seed));
      },
      py::arg("n"), py::arg("trials") = 2000, py::arg("seed") = 0,
      py::call_guard<py::gil_scoped_release>());

  m.def("original_weights", [](const std::string& kind) {
    return envs::OriginalWeights(envs::ParseEnvKind(kind)).w();
  });
  m.def("event_names", [](const std::string& kind) {
    return envs::EventCounters::Vocabulary(envs::ParseEnvKind(kind));
  });

  py::class_<PyEnv>(m, "Env")
      .def(py::init<const std::string&, int, int, uint64_t>(), py::arg("kind"),
           py::arg("n_agents") = 2, py::arg("episode_length") = 50, py::arg("seed") = 0)
      .def("reset", &PyEnv::reset, py::arg("seed"))
      .def("step", &PyEnv::step, py::arg("actions"), py::arg("weights") = std::vector<double>{})
      .def("observe", &PyEnv::observe)
      .def("render", &PyEnv::render)
      .def_property_readonly("done", &PyEnv::done);

  m.def("preset_names", &harness::PresetNames);
  m.def(
      "preset",
      [](const std::string& name, double scale) {
        return harness::ToJson(harness::MakePreset(name, scale)).dump();
      },
      py::arg("name"), py::arg("scale") = 0.1);
  m.def(
      "run_experiment",
      [](const std::string& config_json, int workers) {
        const auto cfg = harness::FromJson(harness::json::parse(config_json));
        return harness::SummaryToJson(harness::run_experiment(cfg, workers)).dump();
      },
      py::arg("config_json"), py::arg("workers") = 0, py::call_guard<py::gil_scoped_release>());
  m.def("replay", &harness::ReplayPath, py::arg("path"), py::arg("episode") = 0);
}
