#include "promptgrad/graph.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace promptgrad {
namespace {

bool kind_allows_opt(ParameterKind kind) {
  return kind == ParameterKind::kPrompt || kind == ParameterKind::kDemos ||
         kind == ParameterKind::kHyperparam;
}

std::string dot_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out;
}

}  // namespace

Parameter& ParameterGraph::create_parameter(ParameterKind kind, const std::string& name,
                                            const std::string& role_desc,
                                            const std::string& data, bool requires_opt) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (by_name_.count(name))
    throw GraphError("duplicate parameter name: " + name);
  if (requires_opt && !kind_allows_opt(kind))
    throw GraphError("requires_opt=true is only valid for PROMPT/DEMOS/HYPERPARAM, got " +
                     std::string(to_string(kind)) + " for: " + name);
  auto p = std::make_unique<Parameter>();
  p->id = ParamId{static_cast<uint32_t>(nodes_.size())};
  p->name = name;
  p->kind = kind;
  p->role_desc = role_desc;
  p->data = data;
  p->requires_opt = requires_opt;
  by_name_.emplace(name, p->id);
  seen_keys_.emplace_back();
  nodes_.push_back(std::move(p));
  return *nodes_.back();
}

Parameter& ParameterGraph::at(ParamId id) {
  if (!id.valid() || id.value >= nodes_.size())
    throw GraphError("unknown parameter id");
  return *nodes_[id.value];
}

const Parameter& ParameterGraph::at(ParamId id) const {
  if (!id.valid() || id.value >= nodes_.size())
    throw GraphError("unknown parameter id");
  return *nodes_[id.value];
}

Parameter& ParameterGraph::by_name(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw GraphError("unknown parameter name: " + name);
  return at(it->second);
}

const Parameter* ParameterGraph::find_by_name(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : nodes_[it->second.value].get();
}

std::vector<ParamId> ParameterGraph::node_ids() const {
  std::vector<ParamId> ids;
  ids.reserve(nodes_.size());
  for (const auto& n : nodes_) ids.push_back(n->id);
  return ids;
}

bool ParameterGraph::reachable(ParamId from, ParamId to) const {
  if (from == to) return true;
  std::vector<ParamId> stack{from};
  std::unordered_set<uint32_t> seen{from.value};
  while (!stack.empty()) {
    ParamId cur = stack.back();
    stack.pop_back();
    for (ParamId succ : nodes_[cur.value]->successors) {
      if (succ == to) return true;
      if (seen.insert(succ.value).second) stack.push_back(succ);
    }
  }
  return false;
}

void ParameterGraph::connect(ParamId pred, ParamId succ) {
  std::lock_guard<std::mutex> lock(mutex_);
  Parameter& p = at(pred);
  Parameter& s = at(succ);
  if (reachable(succ, pred))
    throw GraphError("connect(" + p.name + " -> " + s.name +
                     ") would close a cycle: " + s.name + " already reaches " + p.name);
  if (std::find(s.predecessors.begin(), s.predecessors.end(), pred) != s.predecessors.end())
    return;  // set semantics
  s.predecessors.push_back(pred);
  p.successors.push_back(succ);
}

void ParameterGraph::add_skip_edge(ParamId from, ParamId to) {
  std::lock_guard<std::mutex> lock(mutex_);
  const Parameter& f = at(from);
  const Parameter& t = at(to);
  if (!t.requires_opt)
    throw GraphError("skip edge target must be optimizable: " + t.name);
  (void)f;
  skip_edges_.emplace_back(from, to);
}

std::vector<ParamId> ParameterGraph::skip_targets_of(ParamId from) const {
  std::vector<ParamId> out;
  for (const auto& [f, t] : skip_edges_)
    if (f == from) out.push_back(t);
  return out;
}

bool ParameterGraph::record_gradient(ParamId param, Gradient g) {
  std::lock_guard<std::mutex> lock(mutex_);
  Parameter& p = at(param);
  if (!seen_keys_[param.value].insert(g.key()).second) return false;
  p.gradients.push_back(std::move(g));
  return true;
}

void ParameterGraph::zero_grad() {
  std::lock_guard<std::mutex> lock(mutex_);
  for (auto& n : nodes_) n->gradients.clear();
  for (auto& keys : seen_keys_) keys.clear();
}

std::vector<ParamId> ParameterGraph::reverse_topological_order() const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::vector<size_t> pending(nodes_.size());
  std::set<uint32_t> ready;  // creation order == id order
  for (const auto& n : nodes_) {
    pending[n->id.value] = n->successors.size();
    if (n->successors.empty()) ready.insert(n->id.value);
  }
  std::vector<ParamId> order;
  order.reserve(nodes_.size());
  while (!ready.empty()) {
    uint32_t cur = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(ParamId{cur});
    for (ParamId pred : nodes_[cur]->predecessors) {
      if (--pending[pred.value] == 0) ready.insert(pred.value);
    }
  }
  if (order.size() != nodes_.size())
    throw GraphError("cycle detected in parameter graph");
  return order;
}

std::string ParameterGraph::export_dot() const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::ostringstream out;
  out << "digraph parameter_graph {\n";
  out << "  rankdir=TB;\n";
  for (const auto& n : nodes_) {
    out << "  p" << n->id.value << " [shape=box, label=\"" << dot_escape(n->name) << "\\n"
        << to_string(n->kind) << " opt=" << (n->requires_opt ? "true" : "false")
        << " grads=" << n->gradients.size() << "\"];\n";
  }
  for (const auto& n : nodes_) {
    for (ParamId succ : n->successors)
      out << "  p" << n->id.value << " -> p" << succ.value << ";\n";
  }
  for (const auto& [f, t] : skip_edges_)
    out << "  p" << f.value << " -> p" << t.value << " [style=dashed];\n";
  out << "}\n";
  return out.str();
}

nlohmann::json ParameterGraph::to_json() const {
  std::lock_guard<std::mutex> lock(mutex_);
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  j["edges"] = nlohmann::json::array();
  j["skip_edges"] = nlohmann::json::array();
  j["sample_ids"] = sample_ids_;
  for (const auto& n : nodes_) {
    nlohmann::json node{
        {"id", n->id.value},           {"name", n->name},
        {"kind", to_string(n->kind)},  {"role_desc", n->role_desc},
        {"data", n->data},             {"requires_opt", n->requires_opt},
        {"producer_name", n->producer_name},
    };
    if (n->score) node["score"] = *n->score;
    if (n->is_output()) {
      node["data_id"] = n->data_id;
      node["call_index"] = n->call_index;
      if (!n->error.empty()) node["error"] = n->error;
    }
    node["gradients"] = nlohmann::json::array();
    for (const auto& g : n->gradients) {
      nlohmann::json gj{{"data_id", g.data_id},
                        {"call_index", g.call_index},
                        {"source_output_id", g.source_output_id.value},
                        {"content", g.content},
                        {"response_desc", g.context.response_desc},
                        {"parameter_desc", g.context.parameter_desc}};
      if (g.score) gj["score"] = *g.score;
      node["gradients"].push_back(std::move(gj));
    }
    j["nodes"].push_back(std::move(node));
    for (ParamId succ : n->successors)
      j["edges"].push_back({n->id.value, succ.value});
  }
  for (const auto& [f, t] : skip_edges_) j["skip_edges"].push_back({f.value, t.value});
  return j;
}

int ParameterGraph::invocation_count(const std::string& producer_name,
                                     const std::string& data_id) const {
  std::lock_guard<std::mutex> lock(mutex_);
  int count = 0;
  for (const auto& n : nodes_)
    if (n->kind == ParameterKind::kOutput && n->producer_name == producer_name &&
        n->data_id == data_id)
      ++count;
  return count;
}

}  // namespace promptgrad
