#pragma once

#include <set>
#include <string>
#include <vector>

#include "promptgrad/backend.hpp"
#include "promptgrad/graph.hpp"

namespace promptgrad {

struct BackwardOptions {
  GenerationParams params{1.0, 0.99, 2000, {}};
  int retries = 2;
  double base_backoff_ms = 25.0;
};

/// Records `g` on `target` and copies it verbatim along any declared skip
/// edges. Returns true when the gradient was new on the direct target.
bool deliver_gradient(ParameterGraph& graph, ParamId target, Gradient g);

/// VARIABLE_AND_PEERS_INFO rendering for `variable` with its peer subprompts.
std::string render_variable_and_peers(const ParameterGraph& graph, ParamId variable,
                                      const std::vector<ParamId>& peers);

/// True when any data id holds more than one gradient on this parameter,
/// i.e. the producing component sits on a cycle.
bool has_cycle_gradients(const Parameter& param);

/// The context/feedback block handed to the optimizer and inspectors:
/// batch-size header, the cycle cue when call indices repeat per data id,
/// then one <CONTEXT>/<FEEDBACK> section per gradient in time order.
std::string render_gradients(const ParameterGraph& graph, const Parameter& param);

/// Gradient for the final output node: the stored textual loss is rendered
/// into the feedback-engine prompt and the backend is queried once.
Gradient backward_loss(ParameterGraph& graph, ParamId loss_param, ModelBackend& backend,
                       const BackwardOptions& opts = {},
                       std::set<std::string>* excluded = nullptr);

/// Joint peer backward for an LLM node: one backend call per successor
/// gradient produces feedback for every predecessor at once. Per-peer blocks
/// are parsed from the response by name; unparseable responses broadcast.
std::vector<Gradient> backward_generator(ParameterGraph& graph, ParamId output_param,
                                         ModelBackend& backend, const BackwardOptions& opts = {},
                                         std::set<std::string>* excluded = nullptr);

/// Functional-node backward: single-predecessor nodes pass gradients through
/// verbatim with zero backend calls; multi-predecessor nodes get one
/// attribution call per incoming gradient.
std::vector<Gradient> backward_functional(ParameterGraph& graph, ParamId output_param,
                                          ModelBackend& backend, const BackwardOptions& opts = {},
                                          std::set<std::string>* excluded = nullptr);

/// Re-sorts time-sequential gradients: records any `incoming` entries (dedup
/// applies), then orders the parameter's gradients by (data_id, call_index),
/// keeping arrival order for ties.
void accumulate_cyclic(ParameterGraph& graph, ParamId param,
                       const std::vector<Gradient>& incoming = {});

struct BackwardReport {
  std::vector<std::string> aborted_data_ids;
};

/// Full reverse pass: visits nodes in reverse topological order and
/// dispatches on the producing component. Samples in `skip_data_ids` are left
/// untouched; engine failures abort only the affected sample.
BackwardReport run_backward(ParameterGraph& graph, ModelBackend& backend,
                            const BackwardOptions& opts = {},
                            const std::set<std::string>& skip_data_ids = {});

}  // namespace promptgrad
