#pragma once

#include <map>
#include <string>
#include <vector>

#include "promptgrad/backward.hpp"
#include "promptgrad/components.hpp"

namespace promptgrad {

struct Sample {
  std::string id;
  std::string question;
  std::string answer;
};

std::vector<Sample> load_samples_jsonl(const std::string& path);

struct PromptDecl {
  std::string name;
  std::string role_desc;
  std::string initial_value;
  bool trainable = false;
};

struct PipelineSpec {
  std::string id;
  std::vector<PromptDecl> prompts;
  // prompt names per generator, in render order
  std::vector<std::vector<std::string>> peer_groups;
  ExtractionRule extraction;
  std::string metric = "em";
  int top_k = 0;  // 0 = no retriever
  // (producer component name, trainable prompt name) pairs
  std::vector<std::pair<std::string, std::string>> skip_edges;
  int max_agent_steps = 4;
};

/// Parsed planner action for the agent loop.
struct AgentAction {
  std::string thought;
  std::string name;
  nlohmann::json args = nlohmann::json::array();
  nlohmann::json kwargs = nlohmann::json::object();
  std::string parse_error;  // non-empty when the planner reply was unusable
};

/// Parses the fenced JSON action from a planner completion. Malformed output
/// yields an action whose parse_error carries the diagnostic; the agent loop
/// consumes the step and may recover.
AgentAction agent_step(const std::string& planner_output);

struct TraceResult {
  ParamId final_output;
  ParamId loss;
  std::string extracted_answer;
  double score = 0.0;
  int llm_calls = 0;
};

/// One of the benchmark workflow shapes, executable against any backend.
class Pipeline {
 public:
  static std::vector<std::string> known_ids();
  static PipelineSpec spec_for(const std::string& id);

  explicit Pipeline(PipelineSpec spec, const DocumentCorpus* corpus = nullptr);

  const PipelineSpec& spec() const { return spec_; }

  std::map<std::string, std::string> initial_values() const;
  std::vector<std::string> trainable_names() const;
  /// Peer prompt names sharing a generator with `prompt_name`, excluding it.
  std::vector<std::string> peer_names_of(const std::string& prompt_name) const;

  struct Installed {
    std::map<std::string, ParamId> prompts;
    ParamId top_k;
  };

  /// Creates the prompt and hyperparameter parameters with the given values.
  Installed install(ParameterGraph& graph,
                    const std::map<std::string, std::string>& values) const;

  /// Traces one sample through the workflow and scores it.
  TraceResult run_sample(ParameterGraph& graph, const Installed& installed, const Sample& sample,
                         ModelBackend& forward_backend, const EvalFn& metric,
                         const GenerationParams& params = {}, Phase phase = Phase::kForward) const;

 private:
  std::vector<ParamId> peer_ids(const Installed& installed, size_t group) const;

  PipelineSpec spec_;
  const DocumentCorpus* corpus_;
};

}  // namespace promptgrad
