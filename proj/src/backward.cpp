#include "promptgrad/backward.hpp"

#include <algorithm>
#include <cstring>
#include <map>
#include <regex>
#include <sstream>

#include "promptgrad/templates.hpp"
#include "promptgrad/text.hpp"

namespace promptgrad {
namespace {

constexpr const char* kSystemMarkerStart = "<START_OF_SYSTEM_PROMPT>";
constexpr const char* kSystemMarkerEnd = "<END_OF_SYSTEM_PROMPT>";

/// A predecessor receives gradients unless it is a fixed hyperparameter leaf;
/// INPUT/OUTPUT predecessors keep feedback flowing across component chains.
bool wants_gradient(const Parameter& p) {
  return !(p.kind == ParameterKind::kHyperparam && !p.requires_opt);
}

std::pair<std::string, std::string> split_system_user(const std::string& rendered) {
  size_t start = rendered.find(kSystemMarkerStart);
  size_t end = rendered.find(kSystemMarkerEnd);
  if (start == std::string::npos || end == std::string::npos || end < start)
    return {"You are a helpful assistant.", rendered};
  std::string system =
      trim_copy(rendered.substr(start + std::strlen(kSystemMarkerStart),
                                end - start - std::strlen(kSystemMarkerStart)));
  std::string user = trim_copy(rendered.substr(end + std::strlen(kSystemMarkerEnd)));
  if (user.empty()) user = "(empty)";
  return {system, user};
}

ModelRequest make_backward_request(const std::string& conversation_sec,
                                   const std::string& objective_sec,
                                   const BackwardOptions& opts) {
  std::string full = tpl::render_template(
      tpl::asset("FEEDBACK_ENGINE_TEMPLATE"),
      {{"conversation_sec", conversation_sec}, {"objective_instruction_sec", objective_sec}});
  auto [system, user] = split_system_user(full);
  ModelRequest req;
  req.role = ModelRole::kBackward;
  req.phase = Phase::kBackward;
  req.system_text = system;
  req.user_text = user;
  req.params = opts.params;
  return req;
}

std::string cycle_cue() {
  return trim_copy(tpl::asset("CYCLE_INSTRUCTION").body);
}

nlohmann::json peer_binding(const Parameter& p) {
  return {{"name", p.name},
          {"param_type", to_string(p.kind)},
          {"role_desc", p.role_desc},
          {"requires_opt", p.requires_opt},
          {"data", p.data}};
}

std::string render_peer_format(const ParameterGraph& graph, const std::vector<ParamId>& targets) {
  nlohmann::json list = nlohmann::json::array();
  for (ParamId t : targets) list.push_back({{"name", graph.at(t).name}});
  return tpl::render_template(tpl::asset("PEER_FEEDBACK_FORMAT"),
                              {{"target_count", static_cast<int>(targets.size())},
                               {"targets", list}});
}

std::map<std::string, std::string> parse_feedback_blocks(const std::string& text) {
  static const std::regex block_re(R"re(<FEEDBACK name="([^"]*)">([\s\S]*?)</FEEDBACK>)re");
  std::map<std::string, std::string> blocks;
  auto begin = std::sregex_iterator(text.begin(), text.end(), block_re);
  for (auto it = begin; it != std::sregex_iterator(); ++it)
    blocks[(*it)[1].str()] = trim_copy((*it)[2].str());
  return blocks;
}

/// Conversation rendering of a generator invocation: the non-peer inputs as a
/// JSON object plus the completion.
std::string render_llm_conversation(const ParameterGraph& graph, const Parameter& out,
                                    const std::vector<ParamId>& input_preds) {
  nlohmann::json input_obj = nlohmann::json::object();
  for (ParamId pid : input_preds) {
    const Parameter& p = graph.at(pid);
    if (p.kind == ParameterKind::kOutput) {
      try {
        input_obj[p.name] = nlohmann::json::parse(p.data);
        continue;
      } catch (const nlohmann::json::exception&) {
      }
    }
    input_obj[p.name] = p.data;
  }
  return tpl::render_template(tpl::asset("LLM_CONVERSATION_TEMPLATE"),
                              {{"input_value", input_obj.dump()},
                               {"llm_output", out.data},
                               {"gt", ""}});
}

int call_index_for(const Parameter& receiver, const Parameter& producer) {
  return receiver.is_output() && receiver.call_index > 0 ? receiver.call_index
                                                         : std::max(producer.call_index, 1);
}

struct EngineFailure : BackendError {
  using BackendError::BackendError;
};

ModelResponse engine_call(ModelBackend& backend, const ModelRequest& req,
                          const BackwardOptions& opts, const std::string& data_id,
                          std::set<std::string>* excluded) {
  try {
    return complete_with_retries(backend, req, opts.retries, opts.base_backoff_ms,
                                 fnv1a64(data_id));
  } catch (const BackendError&) {
    if (excluded) excluded->insert(data_id);
    throw;
  }
}

}  // namespace

bool deliver_gradient(ParameterGraph& graph, ParamId target, Gradient g) {
  bool fresh = graph.record_gradient(target, g);
  std::set<uint32_t> visited{target.value};
  std::vector<ParamId> frontier{target};
  while (!frontier.empty()) {
    ParamId cur = frontier.back();
    frontier.pop_back();
    for (ParamId skip_to : graph.skip_targets_of(cur)) {
      if (!visited.insert(skip_to.value).second) continue;
      graph.record_gradient(skip_to, g);
      frontier.push_back(skip_to);
    }
  }
  return fresh;
}

std::string render_variable_and_peers(const ParameterGraph& graph, ParamId variable,
                                      const std::vector<ParamId>& peers) {
  nlohmann::json peer_list = nlohmann::json::array();
  for (ParamId pid : peers) peer_list.push_back(peer_binding(graph.at(pid)));
  return tpl::render_template(tpl::asset("VARIABLE_AND_PEERS_INFO"),
                              {{"variable", peer_binding(graph.at(variable))},
                               {"peers", peer_list}});
}

bool has_cycle_gradients(const Parameter& param) {
  std::map<std::string, int> per_data;
  for (const auto& g : param.gradients)
    if (++per_data[g.data_id] > 1) return true;
  return false;
}

std::string render_gradients(const ParameterGraph& graph, const Parameter& param) {
  (void)graph;
  std::vector<const Gradient*> ordered;
  ordered.reserve(param.gradients.size());
  for (const auto& g : param.gradients) ordered.push_back(&g);
  std::stable_sort(ordered.begin(), ordered.end(), [](const Gradient* a, const Gradient* b) {
    if (a->data_id != b->data_id) return a->data_id < b->data_id;
    return a->call_index < b->call_index;
  });
  std::set<std::string> data_ids;
  for (const auto* g : ordered) data_ids.insert(g->data_id);

  std::ostringstream out;
  out << "Batch size: " << data_ids.size() << "\n";
  if (has_cycle_gradients(param)) out << cycle_cue() << "\n";
  int index = 0;
  for (const auto* g : ordered) {
    out << "\n" << ++index << ".\n";
    if (!g->context.conversation.empty())
      out << "<CONTEXT>\n" << trim_copy(g->context.conversation) << "</CONTEXT>\n\n";
    out << "<FEEDBACK>" << g->content << "</FEEDBACK>\n";
  }
  return out.str();
}

Gradient backward_loss(ParameterGraph& graph, ParamId loss_param, ModelBackend& backend,
                       const BackwardOptions& opts, std::set<std::string>* excluded) {
  Parameter& loss = graph.at(loss_param);
  if (loss.kind != ParameterKind::kLossOutput)
    throw GraphError("backward_loss expects a LOSS_OUTPUT parameter: " + loss.name);
  if (loss.predecessors.empty())
    throw GraphError("loss parameter has no predecessor: " + loss.name);
  Parameter& pred = graph.at(loss.predecessors.front());

  nlohmann::json payload = nlohmann::json::parse(loss.data);
  nlohmann::json inputs{{"y_pred", payload.at("pred")}, {"y_gt", payload.at("gt")}};
  std::string conversation_str = tpl::render_template(
      tpl::asset("LOSS_CONVERSATION_TEMPLATE_STRING"),
      {{"eval_fn_desc", payload.at("eval_fn_desc").get<std::string>()},
       {"input_str", inputs.dump()},
       {"response_value", format_number(payload.at("score").get<double>())},
       {"metadata", ""}});
  std::string conversation_sec = tpl::render_template(
      tpl::asset("LOSS_CONVERSATION_START_INSTRUCTION_STRING_FN"),
      {{"variable", {{"name", pred.name}, {"role_desc", pred.role_desc}, {"prompt_data", pred.data}}},
       {"conversation_str", conversation_str}});
  std::string objective =
      tpl::render_template(tpl::asset("OBJECTIVE_INSTRUCTION_BASE"), nlohmann::json::object());

  ModelRequest req = make_backward_request(conversation_sec, objective, opts);
  std::string data_id = loss.data_id;

  Gradient g;
  g.data_id = data_id;
  g.call_index = call_index_for(pred, loss);
  g.source_output_id = loss.id;
  g.score = loss.score;
  g.context = {conversation_str, loss.role_desc, pred.role_desc};
  try {
    g.content = engine_call(backend, req, opts, data_id, excluded).text;
  } catch (const BackendError& e) {
    g.content = std::string("[backward-engine-error] ") + e.what();
    deliver_gradient(graph, pred.id, g);
    throw;
  }
  deliver_gradient(graph, pred.id, g);
  return g;
}

std::vector<Gradient> backward_generator(ParameterGraph& graph, ParamId output_param,
                                         ModelBackend& backend, const BackwardOptions& opts,
                                         std::set<std::string>* excluded) {
  Parameter& out = graph.at(output_param);
  std::vector<Gradient> delivered;
  if (out.gradients.empty()) return delivered;

  std::vector<ParamId> peers;
  std::vector<ParamId> input_preds;
  for (ParamId pid : out.predecessors) {
    const Parameter& p = graph.at(pid);
    if (p.kind == ParameterKind::kPrompt || p.kind == ParameterKind::kDemos)
      peers.push_back(pid);
    else
      input_preds.push_back(pid);
  }
  std::vector<ParamId> targets;
  for (ParamId pid : out.predecessors)
    if (wants_gradient(graph.at(pid))) targets.push_back(pid);
  if (targets.empty()) return delivered;

  ParamId variable = peers.empty() ? out.predecessors.front() : peers.front();
  std::vector<ParamId> other_peers;
  for (ParamId pid : peers)
    if (pid != variable) other_peers.push_back(pid);

  std::string conversation_str = render_llm_conversation(graph, out, input_preds);
  std::string conversation_sec = tpl::render_template(
      tpl::asset("CONVERSATION_START_INSTRUCTION_CHAIN"),
      {{"variable_and_peers_info", render_variable_and_peers(graph, variable, other_peers)},
       {"system_variables", nlohmann::json::array()},
       {"conversation_str", conversation_str}});

  bool cyclic = graph.invocation_count(out.producer_name, out.data_id) > 1 ||
                has_cycle_gradients(out);
  std::string format_sec = targets.size() > 1 ? render_peer_format(graph, targets) : "";

  // Copy: delivery appends to parameter gradient lists while we iterate.
  std::vector<Gradient> incoming = out.gradients;
  for (const auto& g : incoming) {
    if (excluded && excluded->count(g.data_id)) continue;
    std::string objective = tpl::render_template(
        tpl::asset("OBJECTIVE_INSTRUCTION_CHAIN"),
        {{"response_desc", graph.at(g.source_output_id).role_desc},
         {"response_gradient", g.content},
         {"instruction_to_backward_engine", cyclic ? cycle_cue() : ""}});
    if (!format_sec.empty()) objective += "\n" + format_sec;

    ModelRequest req = make_backward_request(conversation_sec, objective, opts);
    std::string feedback;
    try {
      feedback = engine_call(backend, req, opts, g.data_id, excluded).text;
    } catch (const BackendError&) {
      if (!excluded) throw;
      continue;  // sample aborted, keep the rest of the batch alive
    }
    auto blocks = parse_feedback_blocks(feedback);
    for (ParamId tid : targets) {
      Parameter& target = graph.at(tid);
      auto it = blocks.find(target.name);
      Gradient ng;
      ng.data_id = g.data_id;
      ng.call_index = call_index_for(target, out);
      ng.source_output_id = out.id;
      ng.content = it != blocks.end() ? it->second : feedback;
      ng.context = {conversation_str, out.role_desc, target.role_desc};
      ng.score = g.score;
      deliver_gradient(graph, tid, ng);
      delivered.push_back(std::move(ng));
    }
  }
  return delivered;
}

std::vector<Gradient> backward_functional(ParameterGraph& graph, ParamId output_param,
                                          ModelBackend& backend, const BackwardOptions& opts,
                                          std::set<std::string>* excluded) {
  Parameter& out = graph.at(output_param);
  std::vector<Gradient> delivered;
  if (out.gradients.empty() || out.predecessors.empty()) return delivered;

  if (out.predecessors.size() == 1) {
    // Pass-through: bytes and (data_id, call_index) preserved, zero calls.
    ParamId pred = out.predecessors.front();
    std::vector<Gradient> incoming = out.gradients;
    for (const auto& g : incoming) {
      if (excluded && excluded->count(g.data_id)) continue;
      Gradient copy = g;
      copy.source_output_id = out.id;
      deliver_gradient(graph, pred, copy);
      delivered.push_back(std::move(copy));
    }
    return delivered;
  }

  std::vector<ParamId> targets;
  for (ParamId pid : out.predecessors)
    if (wants_gradient(graph.at(pid))) targets.push_back(pid);
  if (targets.empty()) return delivered;

  nlohmann::json inputs = nlohmann::json::array();
  for (ParamId pid : out.predecessors) {
    const Parameter& p = graph.at(pid);
    inputs.push_back({{"key", p.name},
                      {"value", {{"role_desc", p.role_desc}, {"prompt_data", p.data}}}});
  }
  std::string conversation_str = tpl::render_template(
      tpl::asset("GRAD_COMPONENT_CONVERSATION_TEMPLATE_STRING"),
      {{"component_desc", out.component_desc},
       {"inputs", inputs},
       {"response_value", out.data},
       {"metadata", ""}});
  std::string conversation_sec = tpl::render_template(
      tpl::asset("CONVERSATION_START_INSTRUCTION_CHAIN"),
      {{"variable_and_peers_info", render_variable_and_peers(graph, targets.front(), {})},
       {"system_variables", nlohmann::json::array()},
       {"conversation_str", conversation_str}});

  bool cyclic = has_cycle_gradients(out);
  std::string format_sec = targets.size() > 1 ? render_peer_format(graph, targets) : "";

  std::vector<Gradient> incoming = out.gradients;
  for (const auto& g : incoming) {
    if (excluded && excluded->count(g.data_id)) continue;
    const Parameter& source = graph.at(g.source_output_id);
    std::string objective = tpl::render_template(
        tpl::asset("OBJECTIVE_INSTRUCTION_CHAIN_COMPONENT"),
        {{"response_name", source.name},
         {"response_desc", source.role_desc},
         {"response_gradient", g.content},
         {"instruction_to_backward_engine", cyclic ? cycle_cue() : ""}});
    if (!format_sec.empty()) objective += "\n" + format_sec;

    ModelRequest req = make_backward_request(conversation_sec, objective, opts);
    std::string feedback;
    try {
      feedback = engine_call(backend, req, opts, g.data_id, excluded).text;
    } catch (const BackendError&) {
      if (!excluded) throw;
      continue;
    }
    auto blocks = parse_feedback_blocks(feedback);
    for (ParamId tid : targets) {
      Parameter& target = graph.at(tid);
      auto it = blocks.find(target.name);
      Gradient ng;
      ng.data_id = g.data_id;
      ng.call_index = call_index_for(target, out);
      ng.source_output_id = out.id;
      ng.content = it != blocks.end() ? it->second : feedback;
      ng.context = {conversation_str, out.role_desc, target.role_desc};
      ng.score = g.score;
      deliver_gradient(graph, tid, ng);
      delivered.push_back(std::move(ng));
    }
  }
  return delivered;
}

void accumulate_cyclic(ParameterGraph& graph, ParamId param,
                       const std::vector<Gradient>& incoming) {
  for (const auto& g : incoming) graph.record_gradient(param, g);
  Parameter& p = graph.at(param);
  std::stable_sort(p.gradients.begin(), p.gradients.end(),
                   [](const Gradient& a, const Gradient& b) {
                     if (a.data_id != b.data_id) return a.data_id < b.data_id;
                     return a.call_index < b.call_index;
                   });
}

BackwardReport run_backward(ParameterGraph& graph, ModelBackend& backend,
                            const BackwardOptions& opts,
                            const std::set<std::string>& skip_data_ids) {
  std::set<std::string> excluded = skip_data_ids;

  for (ParamId id : graph.reverse_topological_order()) {
    Parameter& p = graph.at(id);
    try {
      if (p.kind == ParameterKind::kLossOutput && p.producer == ProducerKind::kLoss) {
        if (!excluded.count(p.data_id)) backward_loss(graph, id, backend, opts, &excluded);
      } else if (p.kind == ParameterKind::kOutput && p.producer == ProducerKind::kGenerator) {
        backward_generator(graph, id, backend, opts, &excluded);
      } else if (p.kind == ParameterKind::kOutput && p.producer == ProducerKind::kFunctional) {
        backward_functional(graph, id, backend, opts, &excluded);
      }
    } catch (const BackendError&) {
      // the sample is already excluded; other samples continue
    }
  }
  for (ParamId id : graph.node_ids()) accumulate_cyclic(graph, id);

  BackwardReport report;
  for (const auto& d : excluded)
    if (!skip_data_ids.count(d)) report.aborted_data_ids.push_back(d);
  return report;
}

}  // namespace promptgrad
