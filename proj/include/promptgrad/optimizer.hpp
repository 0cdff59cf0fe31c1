#pragma once

#include <optional>
#include <string>
#include <vector>

#include "promptgrad/backend.hpp"
#include "promptgrad/graph.hpp"

namespace promptgrad {

/// One accepted prompt with its full-validation score. SH is kept sorted by
/// score descending and capacity-bounded.
struct HistoryEntry {
  std::string value;
  double val_score = 0.0;
  int step = 0;
};

/// A within-step proposal that failed one of the validation stages. CH is
/// cleared at the start of each training step.
struct FailedProposal {
  std::string value;
  std::string method;  // free-text edit-method tag, the optimizer's reasoning
  std::string reasoning;
};

struct Proposal {
  ParamId target_param;
  std::string reasoning;
  std::string proposed_variable;
};

struct RevertToken {
  ParamId param;
  std::string expected_current;  // value the apply installed
  std::string prior;
};

struct OptimizerOptions {
  GenerationParams params{1.0, 0.99, 2000, {}};
  int retries = 2;
  double base_backoff_ms = 25.0;
  bool constraints_enabled = true;
  std::string constraint_text =
      "YOU MUST ENSURE the new variable shares the same intent as the original variable.\n"
      "You can either rephrase the initial variable, or add more specific instructions based on "
      "the feedback.\n"
      "You can not change the variable to only fit on one sample if the batch size is larger "
      "than 1.";
  std::string in_context_examples;
  std::string instruction_to_optimizer;
};

/// Extracts the first triple-backtick-fenced block and parses it as a JSON
/// object with required string keys "reasoning" and "proposed_variable".
/// Throws ProposalParseError with a distinct message per failure mode.
Proposal parse_proposal(const std::string& raw);

/// Renders the textual-gradient-descent meta prompt (variable+peers, system
/// variables, SH, CH, gradients, constraints, steps counter), queries the
/// optimizer backend once, and parses the reply. A parse failure triggers a
/// single reprompt with a format reminder before the error escapes.
Proposal propose(ParameterGraph& graph, ParamId param, const std::vector<ParamId>& peers,
                 const std::vector<ParamId>& system_params,
                 const std::vector<HistoryEntry>& sh, const std::vector<FailedProposal>& ch,
                 int steps_since_improvement, double best_score, ModelBackend& backend,
                 const OptimizerOptions& opts = {});

/// The rendered (system, user) optimizer prompt, exposed for inspection.
ModelRequest render_optimizer_request(ParameterGraph& graph, ParamId param,
                                      const std::vector<ParamId>& peers,
                                      const std::vector<ParamId>& system_params,
                                      const std::vector<HistoryEntry>& sh,
                                      const std::vector<FailedProposal>& ch,
                                      int steps_since_improvement, double best_score,
                                      const OptimizerOptions& opts = {});

RevertToken apply_proposal(ParameterGraph& graph, ParamId param, const Proposal& proposal);

/// Restores the exact prior value. Throws on a stale token (the parameter no
/// longer holds the value the token installed).
void revert(ParameterGraph& graph, const RevertToken& token);

/// Accepted proposals (minibatch passed and validation improved) enter SH
/// sorted by score descending, truncated to `sh_capacity` keeping the best;
/// everything else lands in CH.
void record_outcome(std::vector<HistoryEntry>& sh, std::vector<FailedProposal>& ch,
                    const Proposal& proposal, bool minibatch_ok,
                    std::optional<double> val_score, bool val_improved, int step,
                    size_t sh_capacity);

}  // namespace promptgrad
