#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "tokenlabel/error.hpp"
#include "tokenlabel/runspec.hpp"
#include "tokenlabel/training.hpp"

namespace py = pybind11;
using namespace tokenlabel;

namespace {

py::dict record_dict(const TrajectoryRecord& r) {
  py::list top;
  for (const auto& t : r.top_tokens) top.append(py::make_tuple(t.token, t.prob));
  py::dict d;
  d["step"] = r.step;
  d["acc"] = r.loss.acc;
  d["ent"] = r.loss.ent;
  d["kl"] = r.loss.kl;
  d["total"] = r.loss.total;
  d["argmax"] = r.argmax_token;
  d["p_max"] = r.p_max;
  d["top"] = top;
  return d;
}

}  // namespace

PYBIND11_MODULE(_tokenlabel, m) {
  m.doc() = "Single-token feature labels learned by gradient descent over the vocabulary";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<CapabilityError>(m, "CapabilityError", base.ptr());
  py::register_exception<TransportError>(m, "TransportError", base.ptr());

  m.def("split_tokens", [](const std::string& text) { return split_tokens(text); });
  m.def("softmax", [](std::vector<double> logits) {
    return softmax_label(LabelState{std::move(logits)}).probs;
  });
  m.def("entropy", [](std::vector<double> p) { return entropy_loss(ProbDist{std::move(p)}).value; });
  m.def("kl", [](std::vector<double> p, std::vector<double> q) {
    return kl_loss(ProbDist{std::move(p)}, PriorDist{ProbDist{std::move(q)}}).value;
  });
  m.def(
      "bce",
      [](const std::vector<int>& activations, const std::vector<double>& m) {
        Batch b;
        for (std::size_t t = 0; t < activations.size(); ++t) {
          b.items.push_back({0, t, static_cast<std::uint8_t>(activations[t] != 0)});
        }
        return accuracy_loss(b, m).value;
      },
      py::arg("activations"), py::arg("m"));

  py::class_<Corpus>(m, "Corpus")
      .def_property_readonly("vocab", [](const Corpus& c) { return c.vocab().tokens(); })
      .def_property_readonly("token_count", &Corpus::token_count)
      .def_property_readonly("active_count", &Corpus::active_count)
      .def_property_readonly("sentences", [](const Corpus& c) {
        std::vector<std::string> out;
        for (const auto& s : c.sentences()) out.push_back(s.text);
        return out;
      })
      .def_property_readonly("activations", [](const Corpus& c) {
        std::vector<int> out;
        for (const auto& r : c.activations()) out.push_back(r.activation);
        return out;
      });
  m.def(
      "load_corpus",
      [](const std::filesystem::path& file, const std::vector<std::string>& labels) {
        return load_corpus(file, labels);
      },
      py::arg("path"), py::arg("labels") = std::vector<std::string>{});
  m.def(
      "parse_corpus",
      [](const std::string& text, const std::vector<std::string>& labels) {
        return parse_corpus(text, labels);
      },
      py::arg("text"), py::arg("labels") = std::vector<std::string>{});

  m.def("validate", [](const std::filesystem::path& spec) { return validate_run_spec(spec).text(); },
        py::arg("spec"));

  m.def(
      "run",
      [](const std::filesystem::path& spec_file, std::optional<std::uint64_t> seed,
         std::optional<std::filesystem::path> output_dir) {
        RunSpec spec = load_run_spec(spec_file);
        RunOverrides overrides;
        overrides.seed = seed;
        overrides.output_dir = output_dir;
        apply_overrides(spec, overrides);
        std::ostringstream log;
        RunOutcome outcome;
        {
          py::gil_scoped_release release;
          outcome = execute_run(spec, log);
        }
        py::list trajectory;
        for (const auto& r : outcome.result.trajectory) trajectory.append(record_dict(r));
        py::dict d;
        d["exit_code"] = outcome.exit_code;
        d["stop_reason"] = std::string(stop_reason_name(outcome.result.stop_reason));
        d["error"] = outcome.result.error;
        d["output_dir"] = outcome.output_dir;
        d["trajectory"] = trajectory;
        d["log"] = log.str();
        return d;
      },
      py::arg("spec"), py::arg("seed") = py::none(), py::arg("output_dir") = py::none());
}
