#include "promptgrad/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <boost/multiprecision/cpp_int.hpp>

#include "promptgrad/http_backend.hpp"
#include "promptgrad/text.hpp"

namespace promptgrad {
namespace {

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void seeded_shuffle(std::vector<size_t>& indices, uint64_t& state) {
  for (size_t i = indices.size(); i > 1; --i)
    std::swap(indices[i - 1], indices[splitmix64(state) % i]);
}

boost::multiprecision::cpp_int binomial(long long n, long long k) {
  if (k < 0 || k > n) return 0;
  boost::multiprecision::cpp_int result = 1;
  for (long long i = 0; i < k; ++i) {
    result *= n - i;
    result /= i + 1;
  }
  return result;
}

}  // namespace

double no_error_batch_probability(long long n_total, double accuracy, long long batch) {
  if (accuracy < 0.0 || accuracy > 1.0)
    throw ConfigError("accuracy must be in [0, 1]");
  if (batch < 0 || n_total < 0) throw ConfigError("counts must be non-negative");
  if (batch > n_total)
    throw ConfigError("batch size exceeds dataset size: " + std::to_string(batch) + " > " +
                      std::to_string(n_total));
  long long correct = std::llround(static_cast<double>(n_total) * accuracy);
  boost::multiprecision::cpp_int num = binomial(correct, batch);
  boost::multiprecision::cpp_int den = binomial(n_total, batch);
  if (den == 0) return 1.0;  // batch == n_total == 0
  boost::multiprecision::cpp_rational ratio(num, den);
  return ratio.convert_to<double>();
}

std::vector<SelectiveAction> selective_backward(ParameterGraph& graph, double threshold) {
  std::vector<SelectiveAction> actions;
  for (ParamId id : graph.node_ids()) {
    Parameter& p = graph.at(id);
    if (p.kind != ParameterKind::kLossOutput || !p.score) continue;
    SelectiveAction action{p.data_id, *p.score, *p.score < threshold};
    if (!action.full_backward && !p.predecessors.empty()) {
      Parameter& pred = graph.at(p.predecessors.front());
      Gradient note;
      note.data_id = p.data_id;
      note.call_index = std::max(pred.call_index, 1);
      note.source_output_id = p.id;
      note.content = "You score " + format_number(*p.score);
      note.context = {"", p.role_desc, pred.role_desc};
      note.score = p.score;
      deliver_gradient(graph, pred.id, note);
    }
    actions.push_back(std::move(action));
  }
  return actions;
}

nlohmann::json Checkpoint::to_json() const {
  nlohmann::json sh_json = nlohmann::json::object();
  for (const auto& [name, entries] : sh) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : entries)
      list.push_back({{"value", e.value}, {"val_score", e.val_score}, {"step", e.step}});
    sh_json[name] = std::move(list);
  }
  return {{"version", version},   {"pipeline", pipeline_id}, {"step", step},
          {"best_val", best_val}, {"prompts", prompts},      {"sh", sh_json},
          {"usage", usage}};
}

Checkpoint Checkpoint::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("version"))
    throw ConfigError("corrupt checkpoint: missing version");
  Checkpoint c;
  if (j["version"].get<int>() != c.version)
    throw ConfigError("checkpoint version mismatch: got " + j["version"].dump());
  try {
    c.pipeline_id = j.at("pipeline").get<std::string>();
    c.step = j.at("step").get<int>();
    c.best_val = j.at("best_val").get<double>();
    c.prompts = j.at("prompts").get<std::map<std::string, std::string>>();
    for (const auto& [name, list] : j.at("sh").items()) {
      std::vector<HistoryEntry> entries;
      for (const auto& e : list)
        entries.push_back({e.at("value").get<std::string>(), e.at("val_score").get<double>(),
                           e.at("step").get<int>()});
      c.sh[name] = std::move(entries);
    }
    if (j.contains("usage")) c.usage = j["usage"];
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corrupt checkpoint: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  out << checkpoint.to_json().dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corrupt checkpoint: ") + e.what());
  }
  return Checkpoint::from_json(j);
}

TrainerConfig TrainerConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config json: ") + e.what());
  }
  TrainerConfig config = from_json(j);
  // dataset/script paths are relative to the config file
  std::filesystem::path base = std::filesystem::path(path).parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).string();
  };
  resolve(config.train_path);
  resolve(config.val_path);
  resolve(config.test_path);
  resolve(config.corpus_path);
  resolve(config.script_path);
  return config;
}

TrainerConfig TrainerConfig::from_json(const nlohmann::json& j) {
  TrainerConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].template get<std::decay_t<decltype(field)>>();
  };
  get("pipeline", c.pipeline_id);
  get("batch_size", c.batch_size);
  get("max_steps", c.max_steps);
  get("error_threshold", c.error_threshold);
  get("max_proposals", c.max_proposals);
  get("train_path", c.train_path);
  get("val_path", c.val_path);
  get("test_path", c.test_path);
  get("corpus_path", c.corpus_path);
  get("metric", c.metric);
  get("seed", c.seed);
  get("sh_capacity", c.sh_capacity);
  get("accept_ties", c.accept_ties);
  get("max_carry", c.max_carry);
  get("proposal_policy", c.proposal_policy);
  get("backend", c.backend);
  get("script_path", c.script_path);
  if (j.contains("http_backends")) c.http_backends = j["http_backends"];
  auto get_params = [&](const char* key, GenerationParams& p) {
    if (!j.contains(key)) return;
    const auto& block = j[key];
    if (block.contains("temperature")) p.temperature = block["temperature"].get<double>();
    if (block.contains("top_p")) p.top_p = block["top_p"].get<double>();
    if (block.contains("max_tokens")) p.max_tokens = block["max_tokens"].get<int>();
    if (block.contains("stop")) p.stop = block["stop"].get<std::string>();
  };
  get_params("forward_params", c.forward_params);
  get_params("backward_params", c.backward_params);
  get_params("optimizer_params", c.optimizer_params);
  if (j.contains("constraint_text"))
    c.optimizer_options.constraint_text = j["constraint_text"].get<std::string>();
  if (j.contains("constraints_enabled"))
    c.optimizer_options.constraints_enabled = j["constraints_enabled"].get<bool>();
  if (j.contains("in_context_examples"))
    c.optimizer_options.in_context_examples = j["in_context_examples"].get<std::string>();
  if (j.contains("instruction_to_optimizer"))
    c.optimizer_options.instruction_to_optimizer = j["instruction_to_optimizer"].get<std::string>();
  c.optimizer_options.params = c.optimizer_params;
  c.validate_fields();
  return c;
}

void TrainerConfig::validate_fields() const {
  if (pipeline_id.empty()) throw ConfigError("config: pipeline is required");
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (max_proposals < 1) throw ConfigError("config: max_proposals must be >= 1");
  if (max_steps < 0) throw ConfigError("config: max_steps must be >= 0");
  double tau = resolved_threshold();
  if (tau <= 0.0 || tau > 1.0)
    throw ConfigError("config: error_threshold must be in (0, 1]");
  if (backend != "scripted" && backend != "http")
    throw ConfigError("config: backend must be 'scripted' or 'http'");
  if (proposal_policy != "all" && proposal_policy != "round_robin")
    throw ConfigError("config: proposal_policy must be 'all' or 'round_robin'");
}

std::string TrainerConfig::resolved_metric() const {
  if (!metric.empty()) return metric;
  return Pipeline::spec_for(pipeline_id).metric;
}

double TrainerConfig::resolved_threshold() const {
  if (error_threshold >= 0.0) return error_threshold;
  return resolved_metric() == "em" ? 1.0 : 0.5;
}

OwnedBackends make_backends(const TrainerConfig& config, UsageLedger& ledger) {
  OwnedBackends result;
  if (config.backend == "scripted") {
    if (config.script_path.empty())
      throw ConfigError("scripted backend requires script_path");
    auto backend = std::make_unique<ScriptedBackend>(
        ScriptedBackend::load_jsonl_file(config.script_path), &ledger);
    result.view.forward = backend.get();
    result.view.backward = backend.get();
    result.view.optimizer = backend.get();
    result.owned.push_back(std::move(backend));
    return result;
  }
  auto block = [&](const char* role) {
    nlohmann::json j = config.http_backends.is_object() && config.http_backends.contains(role)
                           ? config.http_backends[role]
                           : nlohmann::json::object();
    return std::make_unique<HttpChatBackend>(HttpBackendConfig::from_json(j), &ledger);
  };
  auto fwd = block("forward");
  auto bwd = block("backward");
  auto opt = block("optimizer");
  result.view.forward = fwd.get();
  result.view.backward = bwd.get();
  result.view.optimizer = opt.get();
  result.owned.push_back(std::move(fwd));
  result.owned.push_back(std::move(bwd));
  result.owned.push_back(std::move(opt));
  return result;
}

nlohmann::json ProposalReport::to_json() const {
  nlohmann::json j{{"attempt", attempt},
                   {"parse_failed", parse_failed},
                   {"minibatch_score", minibatch_score},
                   {"passed_minibatch", passed_minibatch},
                   {"accepted", accepted}};
  if (val_score) j["val_score"] = *val_score;
  return j;
}

nlohmann::json StepReport::to_json() const {
  nlohmann::json props = nlohmann::json::array();
  for (const auto& p : proposals) props.push_back(p.to_json());
  return {{"step", step},
          {"batch_ids", batch_ids},
          {"batch_score_before", batch_score_before},
          {"error_samples", error_samples},
          {"proposals", props},
          {"accepted", accepted},
          {"best_val_after", best_val_after},
          {"carried_forward", carried_forward}};
}

nlohmann::json RunReport::to_json() const {
  nlohmann::json steps_json = nlohmann::json::array();
  for (const auto& s : steps) steps_json.push_back(s.to_json());
  return {{"pipeline", pipeline_id},
          {"seed", seed},
          {"start_val", start_val},
          {"start_test", start_test},
          {"best_val", best_val},
          {"final_test", final_test},
          {"steps_run", steps_run},
          {"proposals_attempted", proposals_attempted},
          {"proposals_passed_minibatch", proposals_passed_minibatch},
          {"proposals_accepted", proposals_accepted},
          {"minibatch_pass_rate", minibatch_pass_rate},
          {"validation_pass_rate", validation_pass_rate},
          {"gated_full_val_evals", gated_full_val_evals},
          {"steps", steps_json},
          {"usage", usage}};
}

std::string RunReport::to_jsonl() const {
  std::ostringstream out;
  nlohmann::json start{{"type", "run_start"},
                       {"pipeline", pipeline_id},
                       {"seed", seed},
                       {"start_val", start_val},
                       {"start_test", start_test}};
  out << start.dump() << "\n";
  for (const auto& s : steps) {
    nlohmann::json line = s.to_json();
    line["type"] = "step";
    out << line.dump() << "\n";
  }
  nlohmann::json summary = to_json();
  summary.erase("steps");
  summary["type"] = "run_summary";
  out << summary.dump() << "\n";
  return out.str();
}

Trainer::Trainer(TrainerConfig config, TrainerBackends backends, UsageLedger* ledger)
    : config_(std::move(config)), backends_(backends), ledger_(ledger) {
  config_.validate_fields();
  if (!config_.corpus_path.empty())
    corpus_ = std::make_unique<DocumentCorpus>(DocumentCorpus::load_jsonl(config_.corpus_path));
  PipelineSpec spec = Pipeline::spec_for(config_.pipeline_id);
  if (!config_.metric.empty()) spec.metric = config_.metric;
  pipeline_ = std::make_unique<Pipeline>(spec, corpus_.get());
  metric_ = metric_by_name(config_.resolved_metric());

  train_ = load_samples_jsonl(config_.train_path);
  val_ = load_samples_jsonl(config_.val_path);
  test_ = load_samples_jsonl(config_.test_path);
  if (train_.empty() || val_.empty() || test_.empty())
    throw ConfigError("datasets must be non-empty");

  values_ = pipeline_->initial_values();
  best_values_ = values_;
  rng_state_ = config_.seed * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull;
}

void Trainer::set_prompt_values(const std::map<std::string, std::string>& values) {
  for (const auto& [name, value] : values) values_[name] = value;
  best_values_ = values_;
}

double Trainer::evaluate(const std::vector<Sample>& samples,
                         const std::map<std::string, std::string>& values, Phase phase) {
  if (samples.empty()) throw ConfigError("evaluate called with an empty dataset");
  double total = 0.0;
  ParameterGraph graph;
  auto installed = pipeline_->install(graph, values);
  for (const auto& sample : samples) {
    TraceResult r = pipeline_->run_sample(graph, installed, sample, *backends_.forward, metric_,
                                          config_.forward_params, phase);
    total += r.score;
  }
  return total / static_cast<double>(samples.size());
}

double Trainer::batch_score(const std::vector<Sample>& batch,
                            const std::map<std::string, std::string>& values, Phase phase) {
  return evaluate(batch, values, phase);
}

bool Trainer::improves(double candidate, double baseline) const {
  return config_.accept_ties ? candidate >= baseline : candidate > baseline;
}

std::vector<Sample> Trainer::next_batch() {
  if (!carried_batch_.empty() && carry_count_ > 0) {
    auto batch = carried_batch_;
    return batch;
  }
  size_t batch_size = std::min<size_t>(config_.batch_size, train_.size());
  std::vector<Sample> batch;
  while (batch.size() < batch_size) {
    if (epoch_cursor_ >= epoch_order_.size()) {
      epoch_order_.resize(train_.size());
      for (size_t i = 0; i < train_.size(); ++i) epoch_order_[i] = i;
      seeded_shuffle(epoch_order_, rng_state_);
      epoch_cursor_ = 0;
    }
    batch.push_back(train_[epoch_order_[epoch_cursor_++]]);
  }
  return batch;
}

StepReport Trainer::train_step(int step, const std::vector<Sample>& batch) {
  StepReport report;
  report.step = step;
  for (const auto& s : batch) report.batch_ids.push_back(s.id);

  // ZeroGrad + Forward + Loss on a fresh trace of the batch.
  ParameterGraph graph;
  auto installed = pipeline_->install(graph, values_);
  graph.zero_grad();
  double total = 0.0;
  for (const auto& sample : batch) {
    TraceResult r = pipeline_->run_sample(graph, installed, sample, *backends_.forward, metric_,
                                          config_.forward_params, Phase::kForward);
    total += r.score;
  }
  report.batch_score_before = total / static_cast<double>(batch.size());

  // Selective backward: engine gradients only below the threshold.
  auto actions = selective_backward(graph, config_.resolved_threshold());
  std::set<std::string> skip;
  for (const auto& a : actions) {
    if (a.full_backward)
      report.error_samples += 1;
    else
      skip.insert(a.data_id);
  }
  BackwardOptions bw_opts;
  bw_opts.params = config_.backward_params;
  run_backward(graph, *backends_.backward, bw_opts, skip);

  auto all_trainables = pipeline_->trainable_names();
  for (const auto& name : all_trainables) ch_[name].clear();
  std::vector<std::string> targets = all_trainables;
  if (config_.proposal_policy == "round_robin" && !all_trainables.empty())
    targets = {all_trainables[(step - 1) % all_trainables.size()]};

  for (int attempt = 1; attempt <= config_.max_proposals && !report.accepted; ++attempt) {
    ProposalReport prop_report;
    prop_report.attempt = attempt;
    attempted_ += 1;

    std::vector<Proposal> proposals;
    bool parse_failed = false;
    bool backend_exhausted = false;
    for (const auto& name : targets) {
      ParamId pid = installed.prompts.at(name);
      std::vector<ParamId> peer_ids;
      for (const auto& peer : pipeline_->peer_names_of(name))
        peer_ids.push_back(installed.prompts.at(peer));
      std::vector<ParamId> system_ids;
      for (const auto& other : all_trainables) {
        if (other == name) continue;
        auto peers = pipeline_->peer_names_of(name);
        if (std::find(peers.begin(), peers.end(), other) != peers.end()) continue;
        system_ids.push_back(installed.prompts.at(other));
      }
      try {
        proposals.push_back(propose(graph, pid, peer_ids, system_ids, sh_[name], ch_[name],
                                    steps_since_improvement_, best_val_, *backends_.optimizer,
                                    config_.optimizer_options));
      } catch (const ProposalParseError&) {
        parse_failed = true;
        break;
      } catch (const UnscriptedRequestError&) {
        throw;  // broken fixture, fail loudly
      } catch (const BackendError&) {
        backend_exhausted = true;
        break;
      }
    }
    if (backend_exhausted) break;  // abort the step; prompts are untouched
    if (parse_failed) {
      prop_report.parse_failed = true;
      report.proposals.push_back(prop_report);
      continue;  // consumed one of the n_p attempts
    }

    std::vector<RevertToken> tokens;
    std::map<std::string, std::string> prior_values = values_;
    for (const auto& p : proposals) {
      tokens.push_back(apply_proposal(graph, p.target_param, p));
      values_[graph.at(p.target_param).name] = p.proposed_variable;
    }

    double candidate_batch = batch_score(batch, values_, Phase::kValidate);
    prop_report.minibatch_score = candidate_batch;
    prop_report.passed_minibatch = improves(candidate_batch, report.batch_score_before);

    bool accepted = false;
    std::optional<double> val_score;
    bool val_improved = false;
    if (prop_report.passed_minibatch) {
      passed_minibatch_ += 1;
      gated_val_evals_ += 1;
      val_score = evaluate(val_, values_, Phase::kValidate);
      prop_report.val_score = val_score;
      val_improved = improves(*val_score, best_val_);
      accepted = val_improved;
    }

    if (accepted) {
      accepted_ += 1;
      best_val_ = *val_score;
      best_step_ = step;
      best_values_ = values_;
      report.accepted = true;
      prop_report.accepted = true;
    } else {
      for (auto it = tokens.rbegin(); it != tokens.rend(); ++it) revert(graph, *it);
      values_ = prior_values;
    }
    for (const auto& p : proposals) {
      const std::string& name = graph.at(p.target_param).name;
      record_outcome(sh_[name], ch_[name], p, prop_report.passed_minibatch, val_score,
                     val_improved, step, config_.sh_capacity);
    }
    report.proposals.push_back(prop_report);
  }

  report.best_val_after = best_val_;
  return report;
}

Checkpoint Trainer::best_checkpoint() const {
  Checkpoint c;
  c.pipeline_id = config_.pipeline_id;
  c.step = best_step_;
  c.best_val = best_val_;
  c.prompts = best_values_;
  c.sh = sh_;
  if (ledger_) c.usage = ledger_->to_json();
  return c;
}

RunReport Trainer::run_training(const std::string& out_dir) {
  RunReport report;
  report.pipeline_id = config_.pipeline_id;
  report.seed = config_.seed;

  report.start_val = evaluate(val_, values_, Phase::kValidate);
  report.start_test = evaluate(test_, values_, Phase::kValidate);
  best_val_ = report.start_val;

  for (int step = 1; step <= config_.max_steps; ++step) {
    std::vector<Sample> batch = next_batch();
    StepReport step_report = train_step(step, batch);
    if (step_report.accepted) {
      steps_since_improvement_ = 0;
      carried_batch_.clear();
      carry_count_ = 0;
    } else {
      steps_since_improvement_ += 1;
      if (carry_count_ < config_.max_carry) {
        carried_batch_ = batch;
        carry_count_ += 1;
        step_report.carried_forward = true;
      } else {
        carried_batch_.clear();
        carry_count_ = 0;
      }
    }
    report.steps.push_back(std::move(step_report));
  }

  report.steps_run = static_cast<int>(report.steps.size());
  report.best_val = best_val_;
  report.final_test = evaluate(test_, best_values_, Phase::kValidate);
  report.proposals_attempted = attempted_;
  report.proposals_passed_minibatch = passed_minibatch_;
  report.proposals_accepted = accepted_;
  report.minibatch_pass_rate =
      attempted_ > 0 ? static_cast<double>(passed_minibatch_) / attempted_ : 0.0;
  report.validation_pass_rate =
      attempted_ > 0 ? static_cast<double>(accepted_) / attempted_ : 0.0;
  report.gated_full_val_evals = gated_val_evals_;
  if (ledger_) report.usage = ledger_->to_json();

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream run_out(out_dir + "/run_report.jsonl");
    if (!run_out) throw ConfigError("cannot write run report under: " + out_dir);
    run_out << report.to_jsonl();
    save_checkpoint(out_dir + "/checkpoint.json", best_checkpoint());
  }
  return report;
}

}  // namespace promptgrad
