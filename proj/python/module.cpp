#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "promptgrad/backward.hpp"
#include "promptgrad/templates.hpp"
#include "promptgrad/trainer.hpp"

namespace py = pybind11;
using namespace promptgrad;

namespace {

nlohmann::json to_json(const py::handle& obj) {
  if (obj.is_none()) return nullptr;
  if (py::isinstance<py::bool_>(obj)) return obj.cast<bool>();
  if (py::isinstance<py::int_>(obj)) return obj.cast<long long>();
  if (py::isinstance<py::float_>(obj)) return obj.cast<double>();
  if (py::isinstance<py::str>(obj)) return obj.cast<std::string>();
  if (py::isinstance<py::dict>(obj)) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& item : obj.cast<py::dict>())
      j[item.first.cast<std::string>()] = to_json(item.second);
    return j;
  }
  if (py::isinstance<py::list>(obj) || py::isinstance<py::tuple>(obj)) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& item : obj.cast<py::sequence>()) j.push_back(to_json(item));
    return j;
  }
  throw py::type_error("unsupported binding value type");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Textual-gradient prompt optimization over dataflow graphs";

  py::register_exception<Error>(m, "PromptgradError");

  py::enum_<ParameterKind>(m, "ParameterKind")
      .value("PROMPT", ParameterKind::kPrompt)
      .value("DEMOS", ParameterKind::kDemos)
      .value("INPUT", ParameterKind::kInput)
      .value("OUTPUT", ParameterKind::kOutput)
      .value("HYPERPARAM", ParameterKind::kHyperparam)
      .value("LOSS_OUTPUT", ParameterKind::kLossOutput);

  py::class_<ParamId>(m, "ParamId")
      .def_readonly("value", &ParamId::value)
      .def("__repr__",
           [](ParamId id) { return "ParamId(" + std::to_string(id.value) + ")"; });

  py::class_<Gradient>(m, "Gradient")
      .def(py::init([](const std::string& data_id, int call_index, ParamId source,
                       const std::string& content) {
             Gradient g;
             g.data_id = data_id;
             g.call_index = call_index;
             g.source_output_id = source;
             g.content = content;
             return g;
           }),
           py::arg("data_id"), py::arg("call_index"), py::arg("source"), py::arg("content"))
      .def_readonly("data_id", &Gradient::data_id)
      .def_readonly("call_index", &Gradient::call_index)
      .def_readonly("content", &Gradient::content);

  py::class_<Parameter>(m, "Parameter")
      .def_property_readonly("id", [](const Parameter& p) { return p.id; })
      .def_readonly("name", &Parameter::name)
      .def_readonly("kind", &Parameter::kind)
      .def_readonly("data", &Parameter::data)
      .def_readonly("requires_opt", &Parameter::requires_opt)
      .def_property_readonly("gradient_count",
                             [](const Parameter& p) { return p.gradients.size(); })
      .def_property_readonly("gradients", [](const Parameter& p) {
        std::vector<std::pair<std::string, int>> out;
        for (const auto& g : p.gradients) out.emplace_back(g.data_id, g.call_index);
        return out;
      });

  py::class_<ParameterGraph>(m, "ParameterGraph")
      .def(py::init<>())
      .def(
          "create_parameter",
          [](ParameterGraph& g, ParameterKind kind, const std::string& name,
             const std::string& role_desc, const std::string& data, bool requires_opt) {
            return g.create_parameter(kind, name, role_desc, data, requires_opt).id;
          },
          py::arg("kind"), py::arg("name"), py::arg("role_desc") = "", py::arg("data") = "",
          py::arg("requires_opt") = false)
      .def("connect", &ParameterGraph::connect)
      .def("add_skip_edge", &ParameterGraph::add_skip_edge)
      .def("record_gradient", &ParameterGraph::record_gradient)
      .def("zero_grad", &ParameterGraph::zero_grad)
      .def("reverse_topological_order",
           [](const ParameterGraph& g) {
             std::vector<uint32_t> out;
             for (ParamId id : g.reverse_topological_order()) out.push_back(id.value);
             return out;
           })
      .def("export_dot", &ParameterGraph::export_dot)
      .def("to_json", [](const ParameterGraph& g) { return g.to_json().dump(); })
      .def("param", py::overload_cast<ParamId>(&ParameterGraph::at),
           py::return_value_policy::reference_internal)
      .def("__len__", &ParameterGraph::size);

  m.def("exact_match",
        [](const std::string& pred, const std::string& gt) { return exact_match(pred, gt).value; });
  m.def("f1_score",
        [](const std::string& pred, const std::string& gt) { return f1_score(pred, gt).value; });
  m.def("normalize_answer", &normalize_answer);
  m.def("no_error_batch_probability", &no_error_batch_probability, py::arg("n_total"),
        py::arg("accuracy"), py::arg("batch"));

  m.def("template_asset", [](const std::string& id) { return tpl::asset(id).body; });
  m.def("template_ids", &tpl::asset_ids);
  m.def(
      "render_template",
      [](const std::string& id, const py::dict& bindings) {
        return tpl::render_template(tpl::asset(id), to_json(bindings));
      },
      py::arg("id"), py::arg("bindings"));

  m.def(
      "run_training",
      [](const std::string& config_path, const std::string& out_dir) {
        TrainerConfig config = TrainerConfig::from_file(config_path);
        UsageLedger ledger;
        OwnedBackends backends = make_backends(config, ledger);
        Trainer trainer(config, backends.view, &ledger);
        return trainer.run_training(out_dir).to_json().dump();
      },
      py::arg("config_path"), py::arg("out_dir") = "");
}
