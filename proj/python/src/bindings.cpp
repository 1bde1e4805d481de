#include <pybind11/eigen.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "metapid/augment.hpp"
#include "metapid/cli.hpp"
#include "metapid/errors.hpp"
#include "metapid/eval.hpp"
#include "metapid/metanet.hpp"
#include "metapid/parallel.hpp"
#include "metapid/rladapt.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace metapid;

namespace {

// Structured values cross the boundary as plain dicts.
py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::handle& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

RobotModel robot_arg(const py::object& obj) {
  if (py::isinstance<py::str>(obj)) return load_robot(obj.cast<std::string>());
  RobotModel m = from_py(obj).get<RobotModel>();
  m.validate();
  return m;
}

PIDGains gains_arg(const py::object& obj) { return from_py(obj).get<PIDGains>(); }

py::dict sample_dict(const AugmentedSample& s) {
  py::dict d;
  d["base_name"] = s.base_name;
  d["variant_id"] = s.variant_id;
  d["features"] = std::vector<double>(s.features.begin(), s.features.end());
  d["gains"] = to_py(json(s.gains));
  d["opt_error_deg"] = s.opt_error_deg;
  d["seed"] = s.seed;
  return d;
}

py::dict aggregate_dict(const Aggregate& a, const Improvement* imp) {
  py::dict d;
  d["model"] = a.model;
  d["controller"] = a.controller_id;
  d["scenario"] = std::string(to_string(a.scenario));
  d["count"] = a.count;
  d["unstable"] = a.unstable;
  d["mae_deg"] = py::make_tuple(a.mae.mean, a.mae.std);
  d["rmse_deg"] = py::make_tuple(a.rmse.mean, a.rmse.std);
  d["max_deg"] = py::make_tuple(a.max_error.mean, a.max_error.std);
  d["std_deg"] = py::make_tuple(a.std_dev.mean, a.std_dev.std);
  d["per_joint_mae_deg"] = a.per_joint_mae;
  d["mae_improvement_pct"] = imp ? imp->mae_pct : 0.0;
  return d;
}

}  // namespace

PYBIND11_MODULE(_metapid, m) {
  m.doc() = "Meta-learned PID gains with RL-based online adaptation";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_RuntimeError);
  py::register_exception<VersionError>(m, "VersionError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("preset_names", &preset_names);
  m.def(
      "robot", [](const std::string& name_or_path) { return to_py(json(load_robot(name_or_path))); },
      py::arg("name_or_path"), "Robot description as a dict (preset name or JSON path).");
  m.def(
      "features",
      [](const py::object& robot) {
        const FeatureVector f = extract_features(robot_arg(robot));
        return std::vector<double>(f.begin(), f.end());
      },
      py::arg("robot"));
  m.def(
      "evaluate_gains",
      [](const py::object& robot, const py::object& gains) {
        const RobotModel model = robot_arg(robot);
        const PIDGains g = gains_arg(gains);
        py::gil_scoped_release release;
        return evaluate_gains(model, g, test_trajectory(model.n_joints()));
      },
      py::arg("robot"), py::arg("gains"), "Mean absolute tracking error (deg) on the benchmark trajectory.");
  m.def(
      "optimize_gains",
      [](const py::object& robot, std::uint64_t seed, std::size_t population, std::size_t generations,
         std::size_t nm_iterations) {
        const RobotModel model = robot_arg(robot);
        HybridConfig cfg;
        cfg.de.population = population;
        cfg.de.generations = generations;
        cfg.nm.iterations = nm_iterations;
        cfg.de.validate();
        Rng rng(seed);
        OptResult r;
        {
          py::gil_scoped_release release;
          r = hybrid_optimize(model, test_trajectory(model.n_joints()), cfg, rng);
        }
        py::dict d;
        d["gains"] = to_py(json(r.gains));
        d["cost_deg"] = r.cost_deg;
        d["evaluations"] = r.evaluations;
        return d;
      },
      py::arg("robot"), py::arg("seed") = 0, py::arg("population") = 8, py::arg("generations") = 15,
      py::arg("nm_iterations") = 20);

  py::class_<Dataset>(m, "Dataset")
      .def("__len__", &Dataset::size)
      .def("save", [](const Dataset& d, const std::string& path) { save_dataset(d, path); })
      .def(
          "filter", [](const Dataset& d, double t) { return filter_dataset(d, t); },
          py::arg("threshold_deg") = kDefaultQualityThresholdDeg)
      .def("samples", [](const Dataset& d) {
        py::list out;
        for (const auto& s : d.samples) out.append(sample_dict(s));
        return out;
      });
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def(
      "augment",
      [](const std::vector<std::string>& bases, std::size_t variants, std::uint64_t seed, int jobs,
         bool narrow_inertia, std::size_t population, std::size_t generations) {
        AugmentConfig cfg;
        cfg.variants_per_base = variants;
        cfg.seed = seed;
        cfg.jobs = resolve_jobs(jobs);
        if (narrow_inertia) cfg.ranges = PerturbationRanges::narrow_inertia();
        cfg.hybrid.de.population = population;
        cfg.hybrid.de.generations = generations;
        std::vector<RobotModel> models;
        for (const auto& b : bases) models.push_back(load_robot(b));
        py::gil_scoped_release release;
        return build_dataset(models, cfg);
      },
      py::arg("bases"), py::arg("variants") = 100, py::arg("seed") = 0, py::arg("jobs") = 0,
      py::arg("narrow_inertia") = false, py::arg("population") = 8, py::arg("generations") = 15);

  py::class_<MetaNetwork>(m, "MetaNetwork")
      .def_property_readonly("n_joints", &MetaNetwork::n_joints)
      .def_property_readonly("parameter_count", [](const MetaNetwork& n) { return n.params().size(); })
      .def("predict", [](const MetaNetwork& n, const py::object& robot) {
        return to_py(json(predict_gains(n, robot_arg(robot))));
      })
      .def("save", [](const MetaNetwork& n, const std::string& path) { save_metanet(n, path); })
      .def(py::self == py::self);
  m.def("load_metanet", &load_metanet, py::arg("path"));
  m.def("init_metanet", [](std::size_t n, std::uint64_t seed) { return init_network(n, seed); },
        py::arg("n_joints"), py::arg("seed") = 0);
  m.def(
      "train_meta",
      [](const Dataset& data, std::size_t n_joints, std::uint64_t seed, std::size_t max_epochs,
         std::size_t patience, double threshold) {
        Dataset used;
        for (const auto& s : filter_dataset(data, threshold).samples) {
          if (s.gains.n_joints() == n_joints) used.samples.push_back(s);
        }
        if (used.samples.empty()) throw DataError("no usable samples for the requested joint count");
        TrainConfig cfg;
        cfg.seed = seed;
        cfg.max_epochs = max_epochs;
        cfg.early_stop_patience = patience;
        TrainResult r = [&] {
          py::gil_scoped_release release;
          return train(init_network(n_joints, seed), used, cfg);
        }();
        py::dict hist;
        hist["train_loss"] = r.history.train_loss;
        hist["val_loss"] = r.history.val_loss;
        hist["best_epoch"] = r.history.best_epoch;
        hist["n_train"] = r.history.n_train;
        hist["n_val"] = r.history.n_val;
        return py::make_tuple(std::move(r.net), hist);
      },
      py::arg("data"), py::arg("n_joints"), py::arg("seed") = 0, py::arg("max_epochs") = 500,
      py::arg("patience") = 50, py::arg("threshold_deg") = kDefaultQualityThresholdDeg);

  py::class_<PolicyNet>(m, "Policy")
      .def_property_readonly("parameter_count", &PolicyNet::parameter_count)
      .def("save", [](const PolicyNet& p, const std::string& path) { save_policy(p, path); })
      .def(py::self == py::self);
  m.def("load_policy", &load_policy, py::arg("path"));
  m.def(
      "train_rl",
      [](const py::object& robot, const py::object& gains, const std::string& scenario,
         std::size_t total_timesteps, std::uint64_t seed, int jobs, const py::dict& overrides) {
        PPOConfig cfg;
        if (!overrides.empty()) from_py(overrides).get_to(cfg);
        cfg.total_timesteps = total_timesteps;
        cfg.seed = seed;
        cfg.jobs = resolve_jobs(jobs);
        cfg.validate();
        const RobotModel model = robot_arg(robot);
        const PIDGains g = gains_arg(gains);
        const auto kind = disturbance_kind_from_string(scenario);
        RLResult r = [&] {
          py::gil_scoped_release release;
          return train_rl(model, g, DisturbanceScenario::of(kind), cfg);
        }();
        py::list log;
        for (const auto& row : r.log) {
          py::dict d;
          d["iteration"] = row.iteration;
          d["timesteps"] = row.timesteps;
          d["mean_ep_reward"] = row.mean_ep_reward;
          d["policy_loss"] = row.diag.policy_loss;
          d["value_loss"] = row.diag.value_loss;
          d["entropy"] = row.diag.entropy;
          log.append(d);
        }
        return py::make_tuple(std::move(r.policy), log);
      },
      py::arg("robot"), py::arg("gains"), py::arg("scenario") = "none", py::arg("total_timesteps") = 50000,
      py::arg("seed") = 0, py::arg("jobs") = 0, py::arg("overrides") = py::dict());

  m.def(
      "evaluate",
      [](const py::object& robot, const py::object& gains, const PolicyNet* policy,
         const std::vector<std::string>& scenarios, std::size_t seeds, std::size_t episodes, int jobs) {
        const RobotModel model = robot_arg(robot);
        const PIDGains g = gains_arg(gains);
        std::vector<Controller> ctls{{"fixed", g, std::nullopt}};
        if (policy) ctls.push_back({"adaptive", g, *policy});
        std::vector<DisturbanceKind> kinds;
        for (const auto& s : scenarios) kinds.push_back(disturbance_kind_from_string(s));
        EvalConfig cfg;
        cfg.seeds.clear();
        for (std::size_t k = 0; k < seeds; ++k) cfg.seeds.push_back(k);
        cfg.episodes_per_cell = episodes;
        cfg.jobs = resolve_jobs(jobs);
        EvalReport rep = [&] {
          py::gil_scoped_release release;
          return evaluate_matrix({model}, ctls, kinds, cfg);
        }();
        py::list out;
        for (const auto& a : rep.aggregates) {
          const Improvement* imp = nullptr;
          for (const auto& i : rep.improvements) {
            if (i.controller_id == a.controller_id && i.scenario == a.scenario) imp = &i;
          }
          out.append(aggregate_dict(a, imp));
        }
        return out;
      },
      py::arg("robot"), py::arg("gains"), py::arg("policy") = nullptr,
      py::arg("scenarios") = std::vector<std::string>{"none"}, py::arg("seeds") = 3, py::arg("episodes") = 1,
      py::arg("jobs") = 0);

  m.def("mae", &mae, py::arg("errors"), "Errors are a T x n array in radians; result in degrees.");
  m.def("rmse", &rmse, py::arg("errors"));
  m.def("max_error", &max_error, py::arg("errors"));
  m.def("std_dev", &std_dev, py::arg("errors"));
  m.def("per_joint_mae", &per_joint_mae, py::arg("errors"));

  m.def(
      "cli", [](const std::vector<std::string>& args) { return cli::dispatch(args); }, py::arg("args"),
      "Runs a metapid subcommand and returns its exit code.");
}
