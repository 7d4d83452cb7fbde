#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ccpo/checkpoint.hpp"
#include "ccpo/config.hpp"
#include "ccpo/error.hpp"
#include "ccpo/trainer.hpp"

namespace py = pybind11;
using namespace ccpo;

namespace {

std::string as_setting(const py::handle& v) {
  if (py::isinstance<py::bool_>(v)) return v.cast<bool>() ? "true" : "false";
  if (py::isinstance<py::float_>(v)) {
    // repr round-trips doubles exactly
    return py::repr(v).cast<std::string>();
  }
  return py::str(v).cast<std::string>();
}

KeyValues key_values(const py::dict& settings) {
  KeyValues kvs;
  for (const auto& [k, v] : settings) kvs.emplace_back(py::str(k).cast<std::string>(), as_setting(v));
  return kvs;
}

py::dict metrics_dict(const MetricsRecord& m) {
  py::dict d;
  d["cost_cents"] = m.cost_cents;
  d["coverage"] = m.coverage;
  d["avg_len"] = m.avg_len;
  d["set_size"] = m.set_size;
  d["n_episodes"] = m.n_episodes;
  return d;
}

struct Split {
  TraceCorpus train, calibration, test;
};

TraceCorpus with_traces(const TraceHeader& h, std::vector<Trace> traces) {
  TraceCorpus c;
  c.header = h;
  c.traces = std::move(traces);
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Conformal constrained policy optimization over pre-recorded two-agent traces";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_RuntimeError);

  m.def("config_keys", &config_keys, "Every key accepted by Config and config files.");

  py::class_<AppConfig>(m, "Config")
      .def(py::init([](const py::dict& settings) { return load_config({}, key_values(settings)); }), py::arg("settings") = py::dict())
      .def_static(
          "load",
          [](const std::filesystem::path& path, const py::dict& overrides) {
            return load_config(path, key_values(overrides));
          },
          py::arg("path"), py::arg("overrides") = py::dict())
      .def(
          "set",
          [](AppConfig& c, const std::string& key, const py::handle& value) {
            apply_setting(c, key, as_setting(value));
            validate(c);
          },
          py::arg("key"), py::arg("value"))
      .def_property_readonly("method", [](const AppConfig& c) { return std::string(to_string(c.run.method)); })
      .def_property_readonly("seed", [](const AppConfig& c) { return c.run.seed; })
      .def_property_readonly("alpha", [](const AppConfig& c) { return c.run.alpha; })
      .def_property_readonly("lam", [](const AppConfig& c) { return c.run.lambda; })
      .def_property_readonly("horizon", [](const AppConfig& c) { return c.run.horizon; })
      .def_property_readonly("iterations", [](const AppConfig& c) { return c.run.iterations; })
      .def_property_readonly("calibration_size", [](const AppConfig& c) { return c.data.calibration_size; })
      .def_property_readonly("test_size", [](const AppConfig& c) { return c.data.test_size; });

  py::class_<TraceCorpus>(m, "Corpus")
      .def_static("generate", [](const AppConfig& c) { return generate_synthetic(c.data.synthetic); }, py::arg("config"))
      .def_static("from_config", &load_corpus, py::arg("config"))
      .def_static("load", &load_traces, py::arg("path"))
      .def_static("parse", &parse_traces, py::arg("text"))
      .def("save", [](const TraceCorpus& c, const std::filesystem::path& p) { save_traces(p, c); }, py::arg("path"))
      .def("to_jsonl", &serialize_traces)
      .def("__len__", [](const TraceCorpus& c) { return c.traces.size(); })
      .def_property_readonly("horizon", [](const TraceCorpus& c) { return c.header.horizon; })
      .def_property_readonly("question_ids",
                             [](const TraceCorpus& c) {
                               std::vector<std::string> ids;
                               for (const auto& t : c.traces) ids.push_back(t.question_id);
                               return ids;
                             })
      .def(
          "split",
          [](const TraceCorpus& c, std::size_t calibration_size, std::size_t test_size) {
            DataSplit s = split_corpus(c.traces, calibration_size, test_size);
            return py::make_tuple(with_traces(c.header, std::move(s.train)),
                                  with_traces(c.header, std::move(s.calibration)),
                                  with_traces(c.header, std::move(s.test)));
          },
          py::arg("calibration_size"), py::arg("test_size"),
          "Returns (train, calibration, test); the tail of the corpus is test, the block before it calibration.");

  py::class_<TrainResult>(m, "TrainResult")
      .def_property_readonly("method", [](const TrainResult& r) { return std::string(to_string(r.state.method)); })
      .def_property_readonly("iteration", [](const TrainResult& r) { return r.state.iteration; })
      .def_property_readonly("kappa", [](const TrainResult& r) { return r.kappa; })
      .def_property_readonly("online_kappa", [](const TrainResult& r) { return r.online_kappa; })
      .def_property_readonly("fixed_rule",
                             [](const TrainResult& r) -> py::object {
                               if (!r.fixed_rule) return py::none();
                               return py::make_tuple(r.fixed_rule->lo, r.fixed_rule->hi);
                             })
      .def_property_readonly("calibration",
                             [](const TrainResult& r) {
                               py::dict d;
                               d["kappa"] = r.calibration.kappa;
                               d["n"] = r.calibration.n;
                               d["required"] = r.calibration.required;
                               d["coverage"] = r.calibration.coverage;
                               return d;
                             })
      .def_property_readonly("log_lines", [](const TrainResult& r) {
        std::vector<std::string> lines;
        for (const auto& l : r.logs) lines.push_back(to_json_line(l));
        return lines;
      });

  m.def(
      "train",
      [](const AppConfig& c, const TraceCorpus& train, const TraceCorpus& calibration) {
        py::gil_scoped_release release;
        if (c.run.method == Method::Ccpo) return run_ccpo(c.run, train.traces, calibration.traces);
        return run_baseline(c.run.method, c.run, train.traces, calibration.traces);
      },
      py::arg("config"), py::arg("train"), py::arg("calibration"),
      "Trains the configured method (or fits a baseline) and batch-calibrates its threshold.");

  m.def(
      "evaluate",
      [](const TrainResult& r, const AppConfig& c, const TraceCorpus& test, const std::string& method) {
        const Method mm = method.empty() ? r.state.method : method_from_string(method);
        MetricsRecord rec;
        {
          py::gil_scoped_release release;
          rec = evaluate_method(mm, r, test.traces, c.run);
        }
        return metrics_dict(rec);
      },
      py::arg("result"), py::arg("config"), py::arg("test"), py::arg("method") = "",
      "Cost (cents, total), coverage, average length and set size on the given traces.");

  m.def(
      "save_checkpoint",
      [](const TrainResult& r, const AppConfig& c, const std::filesystem::path& p) {
        save_checkpoint(p, make_checkpoint(r, c.run));
      },
      py::arg("result"), py::arg("config"), py::arg("path"));
  m.def(
      "load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p).result; }, py::arg("path"));
}
