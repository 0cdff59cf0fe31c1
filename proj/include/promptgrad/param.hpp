#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace promptgrad {

enum class ParameterKind : uint8_t {
  kPrompt,
  kDemos,
  kInput,
  kOutput,
  kHyperparam,
  kLossOutput,
};

const char* to_string(ParameterKind kind);
ParameterKind parameter_kind_from_string(const std::string& s);

/// Which component class produced an OUTPUT/LOSS_OUTPUT parameter. Drives the
/// backward rule dispatch.
enum class ProducerKind : uint8_t {
  kNone,       // user-created leaf (PROMPT/DEMOS/INPUT/HYPERPARAM)
  kGenerator,  // LLM call
  kFunctional, // retriever, deduplicator, other non-trainable transforms
  kLoss,       // evaluation-function loss node
};

struct ParamId {
  uint32_t value = UINT32_MAX;

  bool valid() const { return value != UINT32_MAX; }
  friend bool operator==(ParamId a, ParamId b) { return a.value == b.value; }
  friend bool operator!=(ParamId a, ParamId b) { return a.value != b.value; }
  friend bool operator<(ParamId a, ParamId b) { return a.value < b.value; }
};

uint64_t fnv1a64(std::string_view data);

struct GradientContext {
  std::string conversation;    // rendered inputs/outputs at the producing node
  std::string response_desc;   // role description of the successor output
  std::string parameter_desc;  // role description of the receiving parameter
};

struct Gradient {
  std::string data_id;
  int call_index = 1;       // invocation index t, 1-based
  ParamId source_output_id; // the successor output that produced this feedback
  std::string content;
  GradientContext context;
  std::optional<double> score;

  /// Identity key used for dedup: (data_id, call_index, source, content digest).
  struct Key {
    std::string data_id;
    int call_index;
    uint32_t source;
    uint64_t digest;
    friend bool operator==(const Key&, const Key&) = default;
  };
  Key key() const { return {data_id, call_index, source_output_id.value, fnv1a64(content)}; }
};

struct GradientKeyHash {
  size_t operator()(const Gradient::Key& k) const noexcept;
};

struct Parameter {
  ParamId id;
  std::string name;
  ParameterKind kind = ParameterKind::kPrompt;
  std::string role_desc;
  std::string data;
  bool requires_opt = false;
  std::vector<ParamId> predecessors;  // creation order
  std::vector<ParamId> successors;
  std::vector<Gradient> gradients;    // arrival order until time-sorted
  std::optional<double> score;        // LOSS_OUTPUT only

  // Trace metadata for OUTPUT/LOSS_OUTPUT parameters.
  ProducerKind producer = ProducerKind::kNone;
  std::string producer_name;   // component instance name
  std::string component_desc;  // functional component description
  std::string data_id;
  int call_index = 0;
  std::string error;           // non-empty when the producing call failed

  bool is_output() const {
    return kind == ParameterKind::kOutput || kind == ParameterKind::kLossOutput;
  }
};

}  // namespace promptgrad
