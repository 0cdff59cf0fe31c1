#include "promptgrad/pipelines.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "promptgrad/text.hpp"

namespace promptgrad {
namespace {

const char* kJsonAnswerFormat =
    "Your output should be formatted as a standard JSON instance with keys \"reasoning\" and "
    "\"answer\". Always enclose the JSON output in triple backticks.";
const char* kJsonQueryFormat =
    "Your output should be formatted as a standard JSON instance with keys \"reasoning\" and "
    "\"query\". Always enclose the JSON output in triple backticks.";

PipelineSpec one_llm_spec(std::string id, std::string task_instruction) {
  PipelineSpec s;
  s.id = std::move(id);
  s.prompts = {{"task_instruction", "Task instruction for the language model", std::move(task_instruction),
                true}};
  s.peer_groups = {{"task_instruction"}};
  s.extraction = ExtractionRule::after_marker("Answer:");
  s.metric = "em";
  return s;
}

PipelineSpec rag_spec(std::string id, bool two_query_generators, bool shared_query_generator) {
  PipelineSpec s;
  s.id = std::move(id);
  s.metric = "f1";
  s.extraction = ExtractionRule::json_field("answer");
  s.top_k = 2;
  if (two_query_generators) {
    s.prompts.push_back({"query_task_0",
                         "Task instruction for the first search-query generator",
                         "Write a simple search query that will help answer a complex question. "
                         "You will receive a context (may be empty) and a question. Think step by step.",
                         true});
    s.prompts.push_back({"query_format_0", "Output format for the first search-query generator",
                         kJsonQueryFormat, false});
    s.prompts.push_back({"query_task_1",
                         "Task instruction for the second search-query generator",
                         "Write a follow-up search query that uses the retrieved context to fill "
                         "the remaining gap in the question. Think step by step.",
                         true});
    s.prompts.push_back({"query_format_1", "Output format for the second search-query generator",
                         kJsonQueryFormat, false});
    s.peer_groups.push_back({"query_task_0", "query_format_0"});
    s.peer_groups.push_back({"query_task_1", "query_format_1"});
  } else if (shared_query_generator) {
    s.prompts.push_back({"query_task",
                         "Task instruction for the search-query generator, called once per hop",
                         "Write a simple search query that will help answer a complex question. "
                         "You will receive a context (may be empty) and a question. Think step by step.",
                         true});
    s.prompts.push_back({"query_format", "Output format for the search-query generator",
                         kJsonQueryFormat, false});
    s.peer_groups.push_back({"query_task", "query_format"});
  }
  s.prompts.push_back({"generator_task", "Task instruction for the final answer generator",
                       "Answer questions with short factoid answers. You will receive context and "
                       "a question. Think step by step.",
                       true});
  s.prompts.push_back({"generator_format", "Output format for the final answer generator",
                       kJsonAnswerFormat, false});
  s.peer_groups.push_back({"generator_task", "generator_format"});
  if (s.id == "vanilla_rag") s.top_k = 3;
  return s;
}

PipelineSpec agentic_spec() {
  PipelineSpec s;
  s.id = "agentic_rag";
  s.metric = "f1";
  s.extraction = ExtractionRule::raw();
  s.top_k = 2;
  s.max_agent_steps = 4;
  s.prompts = {
      {"planner_task_desc", "Task instruction for the agent to plan steps that answer a question",
       "You are an excellent task planner. Answer the input query using the tools provided below "
       "with maximum accuracy. Each step you will read the previous thought, Action(name, kwargs), "
       "and Observation(execution result of the action) and then provide the next Thought and "
       "Action. You will ALWAYS END WITH the 'finish' tool to conclude the task with an answer.",
       true},
      {"retriever_tool_doc", "Docstring of the retriever tool",
       "retriever(input: str): Retrieves the top documents for the input query from the corpus.",
       false},
      {"finish_tool_doc", "Docstring of the finish tool",
       "finish(answer: str): Finish the task with a final short factoid answer.", true},
      {"planner_format", "Output format for the planner",
       "Your output should be formatted as a standard JSON instance with keys \"thought\", "
       "\"name\", \"args\" and \"kwargs\". Always enclose the JSON output in triple backticks.",
       false},
  };
  s.peer_groups = {{"planner_task_desc", "retriever_tool_doc", "finish_tool_doc", "planner_format"}};
  s.skip_edges = {{"combine_history", "planner_task_desc"}};
  return s;
}

}  // namespace

std::vector<Sample> load_samples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset file: " + path);
  std::vector<Sample> samples;
  std::set<std::string> ids;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
    Sample s{j.at("id").get<std::string>(), j.at("question").get<std::string>(),
             j.at("answer").get<std::string>()};
    if (!ids.insert(s.id).second)
      throw ConfigError("duplicate sample id in dataset: " + s.id);
    samples.push_back(std::move(s));
  }
  return samples;
}

AgentAction agent_step(const std::string& planner_output) {
  AgentAction action;
  auto fenced = extract_fenced_block(planner_output);
  if (!fenced) {
    action.parse_error = "planner reply has no fenced JSON action";
    return action;
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(*fenced);
  } catch (const nlohmann::json::exception& e) {
    action.parse_error = std::string("planner action is not valid JSON: ") + e.what();
    return action;
  }
  if (!j.is_object() || !j.contains("name") || !j["name"].is_string()) {
    action.parse_error = "planner action is missing the tool name";
    return action;
  }
  action.thought = j.value("thought", "");
  action.name = j["name"].get<std::string>();
  if (j.contains("args")) action.args = j["args"];
  if (j.contains("kwargs")) action.kwargs = j["kwargs"];
  return action;
}

std::vector<std::string> Pipeline::known_ids() {
  return {"object_count", "trec", "vanilla_rag", "multihop_rag", "multihop_rag_cycle",
          "agentic_rag"};
}

PipelineSpec Pipeline::spec_for(const std::string& id) {
  if (id == "object_count")
    return one_llm_spec(
        "object_count",
        "You will answer a reasoning question. Think step by step. The last line of your "
        "response should be of the following format: 'Answer: $VALUE' where VALUE is a "
        "numerical value.");
  if (id == "trec")
    return one_llm_spec(
        "trec",
        "You will classify a question into one of 6 coarse classes: ABBR, DESC, ENTY, HUM, LOC, "
        "NUM. Think step by step. The last line of your response should be of the following "
        "format: 'Answer: $CLASS' where CLASS is one of the 6 classes.");
  if (id == "vanilla_rag") return rag_spec("vanilla_rag", false, false);
  if (id == "multihop_rag") return rag_spec("multihop_rag", true, false);
  if (id == "multihop_rag_cycle") return rag_spec("multihop_rag_cycle", false, true);
  if (id == "agentic_rag") return agentic_spec();
  throw ConfigError("unknown pipeline id: " + id);
}

Pipeline::Pipeline(PipelineSpec spec, const DocumentCorpus* corpus)
    : spec_(std::move(spec)), corpus_(corpus) {
  if (spec_.top_k > 0 && corpus_ == nullptr)
    throw ConfigError("pipeline '" + spec_.id + "' needs a document corpus");
}

std::map<std::string, std::string> Pipeline::initial_values() const {
  std::map<std::string, std::string> values;
  for (const auto& p : spec_.prompts) values[p.name] = p.initial_value;
  return values;
}

std::vector<std::string> Pipeline::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& p : spec_.prompts)
    if (p.trainable) names.push_back(p.name);
  return names;
}

std::vector<std::string> Pipeline::peer_names_of(const std::string& prompt_name) const {
  for (const auto& group : spec_.peer_groups) {
    if (std::find(group.begin(), group.end(), prompt_name) == group.end()) continue;
    std::vector<std::string> peers;
    for (const auto& n : group)
      if (n != prompt_name) peers.push_back(n);
    return peers;
  }
  return {};
}

Pipeline::Installed Pipeline::install(ParameterGraph& graph,
                                      const std::map<std::string, std::string>& values) const {
  Installed installed;
  for (const auto& decl : spec_.prompts) {
    auto it = values.find(decl.name);
    const std::string& value = it != values.end() ? it->second : decl.initial_value;
    Parameter& p = graph.create_parameter(ParameterKind::kPrompt, decl.name, decl.role_desc,
                                          value, decl.trainable);
    installed.prompts[decl.name] = p.id;
  }
  if (spec_.top_k > 0) {
    Parameter& k = graph.create_parameter(ParameterKind::kHyperparam, "top_k",
                                          "Number of documents the retriever returns",
                                          std::to_string(spec_.top_k), false);
    installed.top_k = k.id;
  }
  return installed;
}

std::vector<ParamId> Pipeline::peer_ids(const Installed& installed, size_t group) const {
  std::vector<ParamId> ids;
  for (const auto& name : spec_.peer_groups.at(group)) ids.push_back(installed.prompts.at(name));
  return ids;
}

TraceResult Pipeline::run_sample(ParameterGraph& graph, const Installed& installed,
                                 const Sample& sample, ModelBackend& forward_backend,
                                 const EvalFn& metric, const GenerationParams& params,
                                 Phase phase) const {
  TraceResult result;
  Parameter& question = graph.create_parameter(
      ParameterKind::kInput, "question__" + sample.id, "The question to answer", sample.question,
      false);
  const std::string eval_desc = metric_description(spec_.metric);

  auto finish = [&](Parameter& final_out, const std::string& extracted) -> TraceResult& {
    Parameter& loss = loss_forward(graph, eval_desc, final_out.id, extracted, sample.answer,
                                   metric, sample.id);
    result.final_output = final_out.id;
    result.loss = loss.id;
    result.extracted_answer = extracted;
    result.score = *loss.score;
    return result;
  };

  if (spec_.id == "object_count" || spec_.id == "trec") {
    Parameter& out = generator_forward(graph, {"llm", "The model's answer to the question"},
                                       peer_ids(installed, 0), {question.id}, forward_backend,
                                       sample.id, 1, params, phase);
    result.llm_calls = 1;
    return finish(out, extract_answer(out.data, spec_.extraction));
  }

  if (spec_.id == "vanilla_rag") {
    Parameter& context = retriever_forward(graph, *corpus_, question.id, sample.question,
                                           installed.top_k, sample.id, 1);
    Parameter& out = generator_forward(
        graph, {"generator", "The final answer generated from the retrieved context"},
        peer_ids(installed, 0), {question.id, context.id}, forward_backend, sample.id, 1, params,
        phase);
    result.llm_calls = 1;
    return finish(out, extract_answer(out.data, spec_.extraction));
  }

  if (spec_.id == "multihop_rag" || spec_.id == "multihop_rag_cycle") {
    const bool cycle = spec_.id == "multihop_rag_cycle";
    auto query_extract = ExtractionRule::json_field("query");

    Parameter& q1 = generator_forward(
        graph,
        {cycle ? "query_generator" : "query_generator_0",
         "The search query for the retriever"},
        peer_ids(installed, 0), {question.id}, forward_backend, sample.id, 1, params, phase);
    Parameter& r1 = retriever_forward(graph, *corpus_, q1.id,
                                      extract_answer(q1.data, query_extract), installed.top_k,
                                      sample.id, 1);
    Parameter& q2 = generator_forward(
        graph,
        {cycle ? "query_generator" : "query_generator_1",
         "The follow-up search query for the retriever"},
        peer_ids(installed, cycle ? 0 : 1), {question.id, r1.id}, forward_backend, sample.id,
        cycle ? 2 : 1, params, phase);
    Parameter& r2 = retriever_forward(graph, *corpus_, q2.id,
                                      extract_answer(q2.data, query_extract), installed.top_k,
                                      sample.id, 2);
    Parameter& combined = combine_lists(graph, r1.id, r2.id, sample.id);
    Parameter& out = generator_forward(
        graph, {"generator", "The final answer generated from the retrieved context"},
        peer_ids(installed, cycle ? 1 : 2), {question.id, combined.id}, forward_backend,
        sample.id, 1, params, phase);
    result.llm_calls = 3;
    return finish(out, extract_answer(out.data, spec_.extraction));
  }

  if (spec_.id == "agentic_rag") {
    std::vector<ParamId> history;  // planner outputs and observations, in step order
    std::string answer;
    bool finished = false;
    Parameter* last_planner = nullptr;
    for (int step = 1; step <= spec_.max_agent_steps && !finished; ++step) {
      std::vector<ParamId> inputs{question.id};
      for (ParamId h : history) inputs.push_back(h);
      Parameter& planner_out = generator_forward(
          graph, {"planner", "The planner's next thought and tool action"},
          peer_ids(installed, 0), inputs, forward_backend, sample.id, step, params, phase);
      result.llm_calls += 1;
      last_planner = &planner_out;
      history.push_back(planner_out.id);

      AgentAction action = agent_step(planner_out.data);
      if (!action.parse_error.empty() || (action.name != "retriever" && action.name != "finish")) {
        std::string err = !action.parse_error.empty()
                              ? action.parse_error
                              : "unknown tool: '" + action.name + "'";
        Parameter& obs = graph.create_parameter(
            ParameterKind::kOutput, "observation__" + sample.id + "_t" + std::to_string(step),
            "The execution result of the action", nlohmann::json({{"error", err}}).dump(), false);
        obs.producer = ProducerKind::kFunctional;
        obs.producer_name = "execute_action";
        obs.component_desc = "Executes the planner's tool action and returns the observation.";
        obs.data_id = sample.id;
        obs.call_index = step;
        graph.connect(planner_out.id, obs.id);
        history.push_back(obs.id);
        continue;
      }
      if (action.name == "finish") {
        answer = action.kwargs.contains("answer") && action.kwargs["answer"].is_string()
                     ? action.kwargs["answer"].get<std::string>()
                     : trim_copy(planner_out.data);
        finished = true;
        break;
      }
      std::string query = action.kwargs.contains("input") && action.kwargs["input"].is_string()
                              ? action.kwargs["input"].get<std::string>()
                              : sample.question;
      Parameter& obs = retriever_forward(graph, *corpus_, planner_out.id, query, installed.top_k,
                                         sample.id, step);
      history.push_back(obs.id);
    }
    if (!finished && last_planner != nullptr) answer = trim_copy(last_planner->data);

    Parameter& combined = graph.create_parameter(
        ParameterKind::kOutput, "combine_history_output__" + sample.id,
        "The final answer assembled from the agent step history", answer, false);
    combined.producer = ProducerKind::kFunctional;
    combined.producer_name = "combine_history";
    combined.component_desc = "Extracts the final answer from the agent step history.";
    combined.data_id = sample.id;
    combined.call_index = 1;
    for (ParamId h : history) graph.connect(h, combined.id);
    for (const auto& [from, to] : spec_.skip_edges)
      if (from == "combine_history") graph.add_skip_edge(combined.id, installed.prompts.at(to));

    return finish(combined, extract_answer(answer, spec_.extraction));
  }

  throw ConfigError("unknown pipeline id: " + spec_.id);
}

}  // namespace promptgrad
