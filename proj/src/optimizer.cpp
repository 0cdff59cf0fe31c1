#include "promptgrad/optimizer.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include "promptgrad/backward.hpp"
#include "promptgrad/templates.hpp"
#include "promptgrad/text.hpp"

namespace promptgrad {
namespace {

nlohmann::json system_variable_binding(const Parameter& p) {
  return {{"name", p.name},
          {"param_type", to_string(p.kind)},
          {"role_desc", p.role_desc},
          {"requires_opt", p.requires_opt},
          {"prompt_data", p.data}};
}

std::string render_history(const HistoryEntry& h) {
  return "value: " + h.value + "\neval_score: " + format_number(h.val_score);
}

std::string render_failed(const FailedProposal& f) {
  std::string out = "value: " + f.value;
  if (!f.method.empty()) out += "\nmethod: " + f.method;
  return out;
}

}  // namespace

Proposal parse_proposal(const std::string& raw) {
  auto fenced = extract_fenced_block(raw);
  if (!fenced)
    throw ProposalParseError("no fenced block: expected the JSON object inside triple backticks");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(*fenced);
  } catch (const nlohmann::json::exception& e) {
    throw ProposalParseError(std::string("malformed JSON payload: ") + e.what());
  }
  if (!j.is_object()) throw ProposalParseError("malformed JSON payload: not an object");
  for (const char* key : {"reasoning", "proposed_variable"}) {
    if (!j.contains(key) || !j[key].is_string())
      throw ProposalParseError(std::string("missing key: ") + key);
  }
  Proposal p;
  p.reasoning = j["reasoning"].get<std::string>();
  p.proposed_variable = j["proposed_variable"].get<std::string>();
  if (p.proposed_variable.empty()) throw ProposalParseError("empty proposed_variable");
  return p;
}

ModelRequest render_optimizer_request(ParameterGraph& graph, ParamId param,
                                      const std::vector<ParamId>& peers,
                                      const std::vector<ParamId>& system_params,
                                      const std::vector<HistoryEntry>& sh,
                                      const std::vector<FailedProposal>& ch,
                                      int steps_since_improvement, double best_score,
                                      const OptimizerOptions& opts) {
  Parameter& target = graph.at(param);
  if (!target.requires_opt)
    throw GraphError("propose() target is not optimizable: " + target.name);

  std::string system_prompt = tpl::render_template(
      tpl::asset("OPTIMIZER_SYSTEM_PROMPT"),
      {{"instruction_to_optimizer", opts.instruction_to_optimizer}});

  nlohmann::json sys_vars = nlohmann::json::array();
  for (ParamId pid : system_params)
    sys_vars.push_back(system_variable_binding(graph.at(pid)));
  nlohmann::json history = nlohmann::json::array();
  for (const auto& h : sh) history.push_back(render_history(h));
  nlohmann::json failed = nlohmann::json::array();
  for (const auto& f : ch) failed.push_back(render_failed(f));

  std::string variable_grad =
      target.gradients.empty() ? "" : render_gradients(graph, target);

  std::string full = tpl::render_template(
      tpl::asset("TEXT_GRAD_DESC_TEMPLATE"),
      {{"optimizer_system_prompt", system_prompt},
       {"steps", steps_since_improvement},
       {"variable_and_peers_info", render_variable_and_peers(graph, param, peers)},
       {"system_variables", sys_vars},
       {"past_history", history},
       {"failed_proposals", failed},
       {"best_score", format_number(best_score)},
       {"variable_grad", variable_grad},
       {"constraint_text", opts.constraints_enabled ? opts.constraint_text : ""},
       {"in_context_examples", opts.in_context_examples},
       {"variable_desc", target.role_desc}});

  ModelRequest req;
  req.role = ModelRole::kOptimizer;
  req.phase = Phase::kPropose;
  req.params = opts.params;
  const char* start = "<START_OF_SYSTEM_PROMPT>";
  const char* end = "<END_OF_SYSTEM_PROMPT>";
  size_t spos = full.find(start);
  size_t epos = full.find(end);
  if (spos != std::string::npos && epos != std::string::npos) {
    req.system_text =
        trim_copy(full.substr(spos + std::strlen(start), epos - spos - std::strlen(start)));
    req.user_text = trim_copy(full.substr(epos + std::strlen(end)));
  } else {
    req.system_text = system_prompt;
    req.user_text = full;
  }
  return req;
}

Proposal propose(ParameterGraph& graph, ParamId param, const std::vector<ParamId>& peers,
                 const std::vector<ParamId>& system_params,
                 const std::vector<HistoryEntry>& sh, const std::vector<FailedProposal>& ch,
                 int steps_since_improvement, double best_score, ModelBackend& backend,
                 const OptimizerOptions& opts) {
  ModelRequest req = render_optimizer_request(graph, param, peers, system_params, sh, ch,
                                              steps_since_improvement, best_score, opts);
  ModelResponse resp =
      complete_with_retries(backend, req, opts.retries, opts.base_backoff_ms);
  try {
    Proposal p = parse_proposal(resp.text);
    p.target_param = param;
    return p;
  } catch (const ProposalParseError& e) {
    ModelRequest reminder = req;
    reminder.user_text +=
        "\n\nYour previous reply could not be parsed (" + std::string(e.what()) +
        "). Respond with ONLY a JSON object enclosed in triple backticks, with string keys "
        "\"reasoning\" and \"proposed_variable\".";
    ModelResponse retry =
        complete_with_retries(backend, reminder, opts.retries, opts.base_backoff_ms);
    Proposal p = parse_proposal(retry.text);  // second failure escapes to the caller
    p.target_param = param;
    return p;
  }
}

RevertToken apply_proposal(ParameterGraph& graph, ParamId param, const Proposal& proposal) {
  if (proposal.target_param.valid() && proposal.target_param != param)
    throw GraphError("proposal targets a different parameter");
  Parameter& p = graph.at(param);
  RevertToken token{param, proposal.proposed_variable, p.data};
  p.data = proposal.proposed_variable;
  return token;
}

void revert(ParameterGraph& graph, const RevertToken& token) {
  Parameter& p = graph.at(token.param);
  if (p.data != token.expected_current)
    throw GraphError("stale revert token for parameter: " + p.name);
  p.data = token.prior;
}

void record_outcome(std::vector<HistoryEntry>& sh, std::vector<FailedProposal>& ch,
                    const Proposal& proposal, bool minibatch_ok,
                    std::optional<double> val_score, bool val_improved, int step,
                    size_t sh_capacity) {
  if (minibatch_ok && val_score && val_improved) {
    sh.push_back({proposal.proposed_variable, *val_score, step});
    std::stable_sort(sh.begin(), sh.end(),
                     [](const HistoryEntry& a, const HistoryEntry& b) {
                       return a.val_score > b.val_score;
                     });
    if (sh.size() > sh_capacity) sh.resize(sh_capacity);
  } else {
    ch.push_back({proposal.proposed_variable, proposal.reasoning, proposal.reasoning});
  }
}

}  // namespace promptgrad
