#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "promptgrad/optimizer.hpp"
#include "promptgrad/pipelines.hpp"

namespace promptgrad {

/// Probability that a batch of `n` samples drawn without replacement from a
/// dataset of `N` samples at the given accuracy contains no error sample.
/// Exact rational arithmetic; N*accuracy is rounded to the nearest integer.
double no_error_batch_probability(long long n_total, double accuracy, long long batch);

struct TrainerConfig {
  std::string pipeline_id;
  int batch_size = 4;
  int max_steps = 12;
  /// Samples scoring at or above this threshold skip the engine backward.
  /// Resolved to 1.0 (EM) or 0.5 (F1) when left negative.
  double error_threshold = -1.0;
  int max_proposals = 3;
  std::string train_path;
  std::string val_path;
  std::string test_path;
  std::string corpus_path;
  std::string metric;  // "em" | "f1"; empty = pipeline default
  uint64_t seed = 0;
  size_t sh_capacity = 5;
  bool accept_ties = false;
  int max_carry = 2;
  /// "all": propose for every trainable parameter each step (sequentially);
  /// "round_robin": one parameter per step, rotating.
  std::string proposal_policy = "all";

  std::string backend = "scripted";  // "scripted" | "http"
  std::string script_path;
  nlohmann::json http_backends;  // per-role HttpBackendConfig blocks

  GenerationParams forward_params{0.0, 0.99, 2000, {}};
  GenerationParams backward_params{1.0, 0.99, 2000, {}};
  GenerationParams optimizer_params{1.0, 0.99, 2000, {}};
  OptimizerOptions optimizer_options;

  static TrainerConfig from_json(const nlohmann::json& j);
  static TrainerConfig from_file(const std::string& path);
  void validate_fields() const;
  double resolved_threshold() const;
  std::string resolved_metric() const;
};

struct SelectiveAction {
  std::string data_id;
  double score = 0.0;
  bool full_backward = false;
};

/// Error-only gradient split: loss nodes under the threshold keep
/// their engine backward; the rest get one manual "You score ..." gradient on
/// the final output with zero backend calls. Returns one action per sample.
std::vector<SelectiveAction> selective_backward(ParameterGraph& graph, double threshold);

struct Checkpoint {
  int version = 1;
  std::string pipeline_id;
  int step = 0;
  double best_val = 0.0;
  std::map<std::string, std::string> prompts;
  std::map<std::string, std::vector<HistoryEntry>> sh;
  nlohmann::json usage;

  nlohmann::json to_json() const;
  static Checkpoint from_json(const nlohmann::json& j);
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

struct ProposalReport {
  int attempt = 0;  // 1-based within the step
  bool parse_failed = false;
  double minibatch_score = 0.0;
  bool passed_minibatch = false;
  std::optional<double> val_score;
  bool accepted = false;

  nlohmann::json to_json() const;
};

struct StepReport {
  int step = 0;
  std::vector<std::string> batch_ids;
  double batch_score_before = 0.0;
  int error_samples = 0;
  std::vector<ProposalReport> proposals;
  bool accepted = false;
  double best_val_after = 0.0;
  bool carried_forward = false;

  nlohmann::json to_json() const;
};

struct RunReport {
  std::string pipeline_id;
  uint64_t seed = 0;
  double start_val = 0.0;
  double start_test = 0.0;
  double best_val = 0.0;
  double final_test = 0.0;
  int steps_run = 0;
  long long proposals_attempted = 0;
  long long proposals_passed_minibatch = 0;
  long long proposals_accepted = 0;
  double minibatch_pass_rate = 0.0;
  double validation_pass_rate = 0.0;
  long long gated_full_val_evals = 0;
  std::vector<StepReport> steps;
  nlohmann::json usage;

  nlohmann::json to_json() const;
  std::string to_jsonl() const;  // run_start / step / run_summary lines
};

struct TrainerBackends {
  ModelBackend* forward = nullptr;
  ModelBackend* backward = nullptr;
  ModelBackend* optimizer = nullptr;
};

/// Builds scripted or HTTP backends per the config; all share `ledger`.
struct OwnedBackends {
  TrainerBackends view;
  std::vector<std::unique_ptr<ModelBackend>> owned;
};
OwnedBackends make_backends(const TrainerConfig& config, UsageLedger& ledger);

/// The minibatch training loop: zero-grad, forward, loss, selective backward,
/// then up to n_p proposals gated by two-stage validation. Prompts are only
/// kept when both the minibatch and the full validation set improve.
class Trainer {
 public:
  Trainer(TrainerConfig config, TrainerBackends backends, UsageLedger* ledger);

  RunReport run_training(const std::string& out_dir = "");

  /// Mean metric over `samples` with the given prompt values.
  double evaluate(const std::vector<Sample>& samples,
                  const std::map<std::string, std::string>& values, Phase phase);

  const std::map<std::string, std::string>& prompt_values() const { return values_; }
  void set_prompt_values(const std::map<std::string, std::string>& values);
  const Pipeline& pipeline() const { return *pipeline_; }
  const std::vector<Sample>& val_samples() const { return val_; }
  const std::vector<Sample>& test_samples() const { return test_; }

  Checkpoint best_checkpoint() const;

 private:
  StepReport train_step(int step, const std::vector<Sample>& batch);
  std::vector<Sample> next_batch();
  double batch_score(const std::vector<Sample>& batch,
                     const std::map<std::string, std::string>& values, Phase phase);
  bool improves(double candidate, double baseline) const;

  TrainerConfig config_;
  TrainerBackends backends_;
  UsageLedger* ledger_;
  std::unique_ptr<DocumentCorpus> corpus_;
  std::unique_ptr<Pipeline> pipeline_;
  EvalFn metric_;

  std::vector<Sample> train_, val_, test_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::vector<HistoryEntry>> sh_;
  std::map<std::string, std::vector<FailedProposal>> ch_;
  double best_val_ = 0.0;
  int best_step_ = 0;
  std::map<std::string, std::string> best_values_;
  int steps_since_improvement_ = 0;

  uint64_t rng_state_ = 0;
  std::vector<size_t> epoch_order_;
  size_t epoch_cursor_ = 0;
  std::vector<Sample> carried_batch_;
  int carry_count_ = 0;

  // pass-rate accounting (Table-style)
  long long attempted_ = 0, passed_minibatch_ = 0, accepted_ = 0, gated_val_evals_ = 0;
};

}  // namespace promptgrad
