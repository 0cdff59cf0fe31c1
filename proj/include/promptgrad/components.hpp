#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptgrad/backend.hpp"
#include "promptgrad/graph.hpp"
#include "promptgrad/metrics.hpp"

namespace promptgrad {

struct GeneratorOutput {
  std::string raw_text;
  std::optional<nlohmann::json> parsed;
  TokenUsage usage;
  std::string error;
};

struct RetrieverOutput {
  std::vector<std::string> query;
  std::vector<std::string> documents;
  std::vector<int> doc_indices;

  nlohmann::json to_json() const;
  static RetrieverOutput from_json(const nlohmann::json& j);
  static RetrieverOutput parse(const std::string& data);  // throws Error on mismatch
};

struct Document {
  std::string id;
  std::string title;
  std::string text;
};

struct DocumentCorpus {
  std::vector<Document> docs;

  static DocumentCorpus load_jsonl(const std::string& path);
  size_t size() const { return docs.size(); }
};

/// Harness-side rule that pulls the final answer out of a model completion.
struct ExtractionRule {
  enum class Kind { kRaw, kAfterMarker, kJsonField };
  Kind kind = Kind::kRaw;
  std::string arg;  // marker text or JSON field name

  static ExtractionRule raw() { return {Kind::kRaw, ""}; }
  static ExtractionRule after_marker(std::string marker) {
    return {Kind::kAfterMarker, std::move(marker)};
  }
  static ExtractionRule json_field(std::string field) {
    return {Kind::kJsonField, std::move(field)};
  }
};

std::string extract_answer(const std::string& raw_text, const ExtractionRule& rule);

struct GeneratorSpec {
  std::string name;              // component instance name, e.g. "query_generator"
  std::string output_role_desc;  // what the output is used as downstream
};

/// Renders the node prompt from the peer subprompts plus the named inputs,
/// calls the backend once, and traces an OUTPUT parameter whose predecessors
/// are all peers and all inputs. Backend failures land in the output's error
/// field so the trace survives.
Parameter& generator_forward(ParameterGraph& graph, const GeneratorSpec& spec,
                             const std::vector<ParamId>& prompt_params,
                             const std::vector<ParamId>& inputs, ModelBackend& backend,
                             const std::string& data_id, int call_index,
                             const GenerationParams& params = {}, Phase phase = Phase::kForward);

GeneratorOutput generator_output_of(const Parameter& output_param);

/// Deterministic lexical retrieval: rank documents by distinct-token overlap
/// with the query, ties broken by corpus index.
Parameter& retriever_forward(ParameterGraph& graph, const DocumentCorpus& corpus,
                             ParamId query_param, const std::string& query_text,
                             ParamId top_k_param, const std::string& data_id, int call_index);

/// Functional node merging two RetrieverOutputs: first-seen-order
/// concatenation with duplicates removed.
Parameter& combine_lists(ParameterGraph& graph, ParamId ctx1, ParamId ctx2,
                         const std::string& data_id);

/// Evaluation-function loss node. Scores the extracted prediction against the
/// ground truth and stores the textual loss tuple on a LOSS_OUTPUT parameter.
Parameter& loss_forward(ParameterGraph& graph, const std::string& eval_desc, ParamId pred_param,
                        const std::string& pred_eval_input, const std::string& ground_truth,
                        const EvalFn& metric, const std::string& data_id);

}  // namespace promptgrad
