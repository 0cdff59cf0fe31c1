#pragma once

#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptgrad/errors.hpp"
#include "promptgrad/param.hpp"

namespace promptgrad {

/// The dynamic runtime computation graph traced during a forward pass. Nodes
/// are typed parameters; edges follow data flow. Components called several
/// times in one run (cycles in the component graph) appear unrolled as one
/// OUTPUT parameter per invocation, so the parameter graph is always a DAG.
class ParameterGraph {
 public:
  ParameterGraph() = default;
  ParameterGraph(const ParameterGraph&) = delete;
  ParameterGraph& operator=(const ParameterGraph&) = delete;

  Parameter& create_parameter(ParameterKind kind, const std::string& name,
                              const std::string& role_desc, const std::string& data,
                              bool requires_opt);

  /// Adds pred -> succ. Rejects edges that would close a cycle, naming the
  /// back-edge in the diagnostic.
  void connect(ParamId pred, ParamId succ);

  /// Declares a direct gradient route: during backward, gradients arriving at
  /// `from` are also delivered to `to` verbatim. `to` must be optimizable.
  void add_skip_edge(ParamId from, ParamId to);

  /// Appends `g` to `param`'s gradient list if its identity key is new.
  /// Returns false (state unchanged) on duplicates. Safe under concurrent
  /// calls; arrival order is preserved.
  bool record_gradient(ParamId param, Gradient g);

  /// Clears every parameter's gradients. Prompt data is untouched. Idempotent.
  void zero_grad();

  /// Every node appears after all of its successors; ties broken by creation
  /// order, so the result is deterministic across runs.
  std::vector<ParamId> reverse_topological_order() const;

  std::string export_dot() const;

  /// Snapshot of nodes, edges and gradients for the trace inspector and
  /// checkpoints.
  nlohmann::json to_json() const;

  Parameter& at(ParamId id);
  const Parameter& at(ParamId id) const;
  Parameter& by_name(const std::string& name);
  const Parameter* find_by_name(const std::string& name) const;

  size_t size() const { return nodes_.size(); }
  /// Node ids in creation order.
  std::vector<ParamId> node_ids() const;

  const std::vector<std::pair<ParamId, ParamId>>& skip_edges() const { return skip_edges_; }
  std::vector<ParamId> skip_targets_of(ParamId from) const;

  void note_sample(const std::string& data_id) { sample_ids_.insert(data_id); }
  const std::set<std::string>& sample_ids() const { return sample_ids_; }

  /// Number of invocations of `producer_name` traced for `data_id`.
  int invocation_count(const std::string& producer_name, const std::string& data_id) const;

 private:
  bool reachable(ParamId from, ParamId to) const;

  std::vector<std::unique_ptr<Parameter>> nodes_;
  std::unordered_map<std::string, ParamId> by_name_;
  std::vector<std::pair<ParamId, ParamId>> skip_edges_;
  std::vector<std::unordered_set<Gradient::Key, GradientKeyHash>> seen_keys_;
  std::set<std::string> sample_ids_;
  mutable std::mutex mutex_;
};

}  // namespace promptgrad
