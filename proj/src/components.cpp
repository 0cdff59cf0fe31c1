#include "promptgrad/components.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "promptgrad/text.hpp"

namespace promptgrad {
namespace {

std::string output_param_name(const std::string& component, const std::string& data_id,
                              int call_index) {
  std::string name = component + "_output__" + data_id;
  if (call_index > 1) name += "_t" + std::to_string(call_index);
  return name;
}

std::vector<std::string> overlap_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

}  // namespace

nlohmann::json RetrieverOutput::to_json() const {
  return {{"query", query}, {"documents", documents}, {"doc_indices", doc_indices}};
}

RetrieverOutput RetrieverOutput::from_json(const nlohmann::json& j) {
  RetrieverOutput out;
  out.query = j.at("query").get<std::vector<std::string>>();
  out.documents = j.at("documents").get<std::vector<std::string>>();
  out.doc_indices = j.at("doc_indices").get<std::vector<int>>();
  return out;
}

RetrieverOutput RetrieverOutput::parse(const std::string& data) {
  try {
    return from_json(nlohmann::json::parse(data));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("parameter does not hold a RetrieverOutput: ") + e.what());
  }
}

DocumentCorpus DocumentCorpus::load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus file: " + path);
  DocumentCorpus corpus;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    corpus.docs.push_back({j.at("id").get<std::string>(), j.at("title").get<std::string>(),
                           j.at("text").get<std::string>()});
  }
  return corpus;
}

std::string extract_answer(const std::string& raw_text, const ExtractionRule& rule) {
  switch (rule.kind) {
    case ExtractionRule::Kind::kRaw:
      return trim_copy(raw_text);
    case ExtractionRule::Kind::kAfterMarker: {
      size_t pos = raw_text.rfind(rule.arg);
      if (pos == std::string::npos) return trim_copy(raw_text);
      size_t start = pos + rule.arg.size();
      size_t eol = raw_text.find('\n', start);
      return trim_copy(raw_text.substr(start, eol == std::string::npos ? std::string::npos
                                                                       : eol - start));
    }
    case ExtractionRule::Kind::kJsonField: {
      auto fenced = extract_fenced_block(raw_text);
      const std::string body = fenced ? *fenced : trim_copy(raw_text);
      try {
        auto j = nlohmann::json::parse(body);
        if (j.is_object() && j.contains(rule.arg)) {
          const auto& v = j[rule.arg];
          return v.is_string() ? v.get<std::string>() : v.dump();
        }
      } catch (const nlohmann::json::exception&) {
        // fall through to the raw text
      }
      return trim_copy(raw_text);
    }
  }
  return trim_copy(raw_text);
}

Parameter& generator_forward(ParameterGraph& graph, const GeneratorSpec& spec,
                             const std::vector<ParamId>& prompt_params,
                             const std::vector<ParamId>& inputs, ModelBackend& backend,
                             const std::string& data_id, int call_index,
                             const GenerationParams& params, Phase phase) {
  for (size_t i = 0; i < prompt_params.size(); ++i) {
    const Parameter& p = graph.at(prompt_params[i]);
    if (p.kind != ParameterKind::kPrompt && p.kind != ParameterKind::kDemos)
      throw GraphError("generator peer must be PROMPT or DEMOS: " + p.name);
    for (size_t k = i + 1; k < prompt_params.size(); ++k)
      if (prompt_params[i] == prompt_params[k])
        throw GraphError("duplicate peer parameter: " + p.name);
  }

  std::string system_block;
  for (ParamId pid : prompt_params) {
    const Parameter& p = graph.at(pid);
    if (!system_block.empty()) system_block += "\n";
    system_block += p.data;
  }
  nlohmann::json input_obj = nlohmann::json::object();
  for (ParamId pid : inputs) {
    const Parameter& p = graph.at(pid);
    if (p.kind == ParameterKind::kOutput) {
      // structured payloads (e.g. retrieved context) embed as JSON
      try {
        input_obj[p.name] = nlohmann::json::parse(p.data);
        continue;
      } catch (const nlohmann::json::exception&) {
      }
    }
    input_obj[p.name] = p.data;
  }

  ModelRequest request;
  request.role = ModelRole::kForward;
  request.phase = phase;
  request.system_text = "You are a helpful assistant.";
  request.user_text = "<START_OF_SYSTEM_PROMPT>\n" + system_block +
                      "\n<END_OF_SYSTEM_PROMPT>\n<START_OF_USER>\n" + input_obj.dump() +
                      "\n<END_OF_USER>";
  request.params = params;

  GeneratorOutput out;
  try {
    ModelResponse resp = backend.complete(request);
    out.raw_text = resp.text;
    out.usage = resp.usage;
    if (auto fenced = extract_fenced_block(resp.text)) {
      try {
        out.parsed = nlohmann::json::parse(*fenced);
      } catch (const nlohmann::json::exception&) {
      }
    }
  } catch (const BackendError& e) {
    out.error = e.what();
  }

  Parameter& output = graph.create_parameter(
      ParameterKind::kOutput, output_param_name(spec.name, data_id, call_index),
      spec.output_role_desc, out.raw_text, false);
  output.producer = ProducerKind::kGenerator;
  output.producer_name = spec.name;
  output.data_id = data_id;
  output.call_index = call_index;
  output.error = out.error;
  for (ParamId pid : prompt_params) graph.connect(pid, output.id);
  for (ParamId pid : inputs) graph.connect(pid, output.id);
  graph.note_sample(data_id);
  return output;
}

GeneratorOutput generator_output_of(const Parameter& output_param) {
  GeneratorOutput out;
  out.raw_text = output_param.data;
  out.error = output_param.error;
  if (auto fenced = extract_fenced_block(out.raw_text)) {
    try {
      out.parsed = nlohmann::json::parse(*fenced);
    } catch (const nlohmann::json::exception&) {
    }
  }
  return out;
}

Parameter& retriever_forward(ParameterGraph& graph, const DocumentCorpus& corpus,
                             ParamId query_param, const std::string& query_text,
                             ParamId top_k_param, const std::string& data_id, int call_index) {
  if (corpus.docs.empty()) throw Error("retriever called with an empty corpus");
  const Parameter& top_k_p = graph.at(top_k_param);
  int top_k = 0;
  try {
    size_t used = 0;
    top_k = std::stoi(top_k_p.data, &used);
    if (used != top_k_p.data.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw Error("top_k is not an integer: '" + top_k_p.data + "'");
  }
  if (top_k <= 0 || top_k > static_cast<int>(corpus.docs.size()))
    throw Error("top_k out of range: " + std::to_string(top_k) + " for corpus of " +
                std::to_string(corpus.docs.size()));

  auto query_tokens = overlap_tokens(query_text);
  std::set<std::string> query_set(query_tokens.begin(), query_tokens.end());
  std::vector<std::pair<int, int>> scored;  // (-overlap, index) for stable ordering
  scored.reserve(corpus.docs.size());
  for (size_t i = 0; i < corpus.docs.size(); ++i) {
    auto doc_tokens = overlap_tokens(corpus.docs[i].title + " " + corpus.docs[i].text);
    std::set<std::string> doc_set(doc_tokens.begin(), doc_tokens.end());
    int overlap = 0;
    for (const auto& t : query_set) overlap += doc_set.count(t) ? 1 : 0;
    scored.emplace_back(-overlap, static_cast<int>(i));
  }
  std::sort(scored.begin(), scored.end());

  RetrieverOutput out;
  out.query = {query_text};
  for (int k = 0; k < top_k; ++k) {
    int idx = scored[k].second;
    out.documents.push_back(corpus.docs[idx].title + " | " + corpus.docs[idx].text);
    out.doc_indices.push_back(idx);
  }

  Parameter& output = graph.create_parameter(
      ParameterKind::kOutput, output_param_name("retriever", data_id, call_index),
      "Documents retrieved from the corpus for the query", out.to_json().dump(), false);
  output.producer = ProducerKind::kFunctional;
  output.producer_name = "retriever";
  output.component_desc =
      "Retrieves the top-k corpus documents ranked by lexical token overlap with the query.";
  output.data_id = data_id;
  output.call_index = call_index;
  graph.connect(query_param, output.id);
  graph.connect(top_k_param, output.id);
  graph.note_sample(data_id);
  return output;
}

Parameter& combine_lists(ParameterGraph& graph, ParamId ctx1, ParamId ctx2,
                         const std::string& data_id) {
  RetrieverOutput a = RetrieverOutput::parse(graph.at(ctx1).data);
  RetrieverOutput b = RetrieverOutput::parse(graph.at(ctx2).data);
  RetrieverOutput combined;
  for (const auto& q : a.query) combined.query.push_back(q);
  for (const auto& q : b.query) combined.query.push_back(q);
  std::set<std::string> seen;
  for (const auto& d : a.documents)
    if (seen.insert(d).second) combined.documents.push_back(d);
  for (const auto& d : b.documents)
    if (seen.insert(d).second) combined.documents.push_back(d);

  Parameter& output = graph.create_parameter(
      ParameterKind::kOutput, output_param_name("combine", data_id, 1),
      "The deduplicated union of the retrieved context lists", combined.to_json().dump(), false);
  output.producer = ProducerKind::kFunctional;
  output.producer_name = "combine";
  output.component_desc =
      "Merges two retrieved document lists, keeping first-seen order and dropping duplicates.";
  output.data_id = data_id;
  output.call_index = 1;
  graph.connect(ctx1, output.id);
  graph.connect(ctx2, output.id);
  graph.note_sample(data_id);
  return output;
}

Parameter& loss_forward(ParameterGraph& graph, const std::string& eval_desc, ParamId pred_param,
                        const std::string& pred_eval_input, const std::string& ground_truth,
                        const EvalFn& metric, const std::string& data_id) {
  EvalScore score = metric(pred_eval_input, ground_truth);
  nlohmann::json loss{{"eval_fn_desc", eval_desc},
                      {"pred", pred_eval_input},
                      {"gt", ground_truth},
                      {"score", score.value},
                      {"metric", score.metric_name}};
  Parameter& output =
      graph.create_parameter(ParameterKind::kLossOutput, output_param_name("loss", data_id, 1),
                             "Evaluation of the final output against the ground truth",
                             loss.dump(), false);
  output.producer = ProducerKind::kLoss;
  output.producer_name = "loss";
  output.data_id = data_id;
  output.call_index = 1;
  output.score = score.value;
  graph.connect(pred_param, output.id);
  graph.note_sample(data_id);
  return output;
}

}  // namespace promptgrad
