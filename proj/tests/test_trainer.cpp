#include <doctest.h>

#include <fstream>

#include <cstdio>
#include <random>

#include "promptgrad/trainer.hpp"
#include "test_support.hpp"

using namespace promptgrad;
using promptgrad::testing::config_path;
using promptgrad::testing::entry;

namespace {

// Monte-Carlo oracle: draw `batch` samples without replacement, count draws
// where every sample lands in the correct pool.
double mc_no_error_probability(long long n_total, long long correct, long long batch,
                               int trials, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> pool(n_total);
  long long hits = 0;
  for (int t = 0; t < trials; ++t) {
    for (long long i = 0; i < n_total; ++i) pool[i] = i < correct ? 1 : 0;
    bool all = true;
    for (long long k = 0; k < batch; ++k) {
      long long j = k + static_cast<long long>(rng() % (n_total - k));
      std::swap(pool[k], pool[j]);
      if (pool[k] == 0) {
        all = false;
        break;
      }
    }
    if (all) ++hits;
  }
  return static_cast<double>(hits) / trials;
}

Trainer make_trainer(const std::string& config_name, OwnedBackends& backends,
                     UsageLedger& ledger) {
  TrainerConfig config = TrainerConfig::from_file(config_path(config_name));
  backends = make_backends(config, ledger);
  return Trainer(config, backends.view, &ledger);
}

}  // namespace

TEST_CASE("no-error-batch probability matches the closed form") {
  CHECK(no_error_batch_probability(50, 0.8, 4) == doctest::Approx(0.3968).epsilon(1e-4));
  CHECK(no_error_batch_probability(50, 0.5, 4) == doctest::Approx(0.0549).epsilon(1e-3));
  CHECK(no_error_batch_probability(50, 1.0, 4) == 1.0);
  CHECK(no_error_batch_probability(50, 0.0, 4) == 0.0);
  CHECK(no_error_batch_probability(10, 0.5, 6) == 0.0);  // batch larger than correct pool
  CHECK_THROWS_AS(no_error_batch_probability(10, 0.5, 11), ConfigError);
  CHECK_THROWS_AS(no_error_batch_probability(10, 1.5, 2), ConfigError);
}

TEST_CASE("no-error-batch probability agrees with a Monte-Carlo oracle within 3 sigma") {
  const int trials = 1000000;
  for (auto [n, acc, b] : {std::tuple<long long, double, long long>{50, 0.8, 4},
                           {50, 0.5, 4}}) {
    double exact = no_error_batch_probability(n, acc, b);
    double sampled = mc_no_error_probability(n, std::llround(n * acc), b, trials, 12345);
    double sigma = std::sqrt(exact * (1.0 - exact) / trials);
    CHECK(std::abs(sampled - exact) <= 3.0 * sigma);
  }
}

TEST_CASE("selective backward splits the batch at the threshold") {
  ParameterGraph g;
  Parameter& prompt = g.create_parameter(ParameterKind::kPrompt, "task", "", "v", true);
  std::vector<ParamId> outputs;
  int i = 0;
  for (double score : {1.0, 1.0, 0.0, 1.0}) {
    std::string id = "s" + std::to_string(++i);
    Parameter& out = g.create_parameter(ParameterKind::kOutput, "out__" + id, "", "x", false);
    out.producer = ProducerKind::kGenerator;
    out.data_id = id;
    out.call_index = 1;
    g.connect(prompt.id, out.id);
    loss_forward(g, "em", out.id, score == 1.0 ? "y" : "x", "y", exact_match, id);
    outputs.push_back(out.id);
  }

  auto actions = selective_backward(g, 1.0);
  REQUIRE(actions.size() == 4);
  int full = 0, noted = 0;
  for (const auto& a : actions) a.full_backward ? ++full : ++noted;
  CHECK(full == 1);
  CHECK(noted == 3);
  // the three correct outputs carry the manual note
  for (size_t k = 0; k < outputs.size(); ++k) {
    const Parameter& out = g.at(outputs[k]);
    if (k == 2) {
      CHECK(out.gradients.empty());
    } else {
      REQUIRE(out.gradients.size() == 1);
      CHECK(out.gradients.front().content.rfind("You score", 0) == 0);
      CHECK(out.gradients.front().content == "You score 1.0");
    }
  }

  SUBCASE("correct samples consume zero engine calls through run_backward") {
    UsageLedger ledger;
    ScriptedBackend backend({entry(ModelRole::kBackward, {}, "fb")}, &ledger);
    std::set<std::string> skip;
    for (const auto& a : actions)
      if (!a.full_backward) skip.insert(a.data_id);
    run_backward(g, backend, {}, skip);
    // loss backward (1) + generator backward for the error sample (1)
    CHECK(ledger.by_role(ModelRole::kBackward).requests == 2);
    int prompt_grads_error = 0;
    for (const auto& gr : g.at(prompt.id).gradients)
      if (gr.data_id == "s3") ++prompt_grads_error;
    CHECK(prompt_grads_error == 1);
  }
}

TEST_CASE("all-correct batch issues no loss-engine calls") {
  ParameterGraph g;
  Parameter& prompt = g.create_parameter(ParameterKind::kPrompt, "task", "", "v", true);
  for (int i = 1; i <= 3; ++i) {
    std::string id = "s" + std::to_string(i);
    Parameter& out = g.create_parameter(ParameterKind::kOutput, "out__" + id, "", "y", false);
    out.producer = ProducerKind::kGenerator;
    out.data_id = id;
    g.connect(prompt.id, out.id);
    loss_forward(g, "em", out.id, "y", "y", exact_match, id);
  }
  UsageLedger ledger;
  ScriptedBackend backend({}, &ledger);
  auto actions = selective_backward(g, 1.0);
  std::set<std::string> skip;
  for (const auto& a : actions)
    if (!a.full_backward) skip.insert(a.data_id);
  run_backward(g, backend, {}, skip);
  CHECK(ledger.total().requests == 0);
}

TEST_CASE("checkpoints round-trip and reject corruption") {
  Checkpoint c;
  c.pipeline_id = "object_count";
  c.step = 4;
  c.best_val = 0.75;
  c.prompts = {{"task_instruction", "exact bytes \xe2\x9c\x93"}};
  c.sh["task_instruction"] = {{"value v", 0.75, 4}};
  std::string path = std::string("/tmp/promptgrad_ckpt_") + std::to_string(::getpid()) + ".json";
  save_checkpoint(path, c);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.prompts == c.prompts);
  CHECK(back.best_val == c.best_val);
  CHECK(back.sh["task_instruction"].front().val_score == 0.75);
  std::remove(path.c_str());

  SUBCASE("corrupt file") {
    std::string bad = path + ".bad";
    std::ofstream(bad) << "{ not json";
    CHECK_THROWS_AS(load_checkpoint(bad), ConfigError);
    std::remove(bad.c_str());
  }
  SUBCASE("version mismatch") {
    CHECK_THROWS_WITH_AS(Checkpoint::from_json({{"version", 99}}),
                         doctest::Contains("version"), ConfigError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint("/no/such/file"), ConfigError); }
}

TEST_CASE("scripted improvement run: determinism, monotonicity, checkpoint replay") {
  UsageLedger ledger1;
  OwnedBackends b1;
  Trainer t1 = make_trainer("object_count_improve.json", b1, ledger1);
  RunReport r1 = t1.run_training();

  CHECK(r1.start_val == doctest::Approx(0.5));
  CHECK(r1.best_val == doctest::Approx(1.0));
  CHECK(r1.final_test == doctest::Approx(1.0));
  CHECK(r1.steps_run == 3);
  CHECK(r1.proposals_accepted == 1);

  // accepted full-val scores strictly increase over the run
  double last = r1.start_val;
  for (const auto& step : r1.steps)
    for (const auto& p : step.proposals)
      if (p.accepted) {
        CHECK(*p.val_score > last);
        last = *p.val_score;
      }

  SUBCASE("same seed, byte-identical reports") {
    UsageLedger ledger2;
    OwnedBackends b2;
    Trainer t2 = make_trainer("object_count_improve.json", b2, ledger2);
    RunReport r2 = t2.run_training();
    CHECK(r1.to_jsonl() == r2.to_jsonl());
  }

  SUBCASE("loading the checkpoint reproduces the stored validation score") {
    Checkpoint best = t1.best_checkpoint();
    UsageLedger ledger3;
    OwnedBackends b3;
    Trainer fresh = make_trainer("object_count_improve.json", b3, ledger3);
    fresh.set_prompt_values(best.prompts);
    double val = fresh.evaluate(fresh.val_samples(), fresh.prompt_values(), Phase::kValidate);
    CHECK(val == doctest::Approx(best.best_val));
  }
}

TEST_CASE("zero steps: the report is just the start accuracies") {
  TrainerConfig config = TrainerConfig::from_file(config_path("object_count_improve.json"));
  config.max_steps = 0;
  UsageLedger ledger;
  OwnedBackends backends = make_backends(config, ledger);
  Trainer trainer(config, backends.view, &ledger);
  RunReport report = trainer.run_training();
  CHECK(report.steps_run == 0);
  CHECK(report.best_val == report.start_val);
  CHECK(report.final_test == report.start_test);
  CHECK(report.proposals_attempted == 0);
}

TEST_CASE("two-stage gating scenarios") {
  SUBCASE("all proposals worse on the minibatch: zero full validations") {
    UsageLedger ledger;
    OwnedBackends backends;
    Trainer trainer = make_trainer("gating_worse.json", backends, ledger);
    auto initial = trainer.prompt_values();
    RunReport report = trainer.run_training();
    CHECK(report.gated_full_val_evals == 0);
    CHECK(report.proposals_attempted == 3);
    CHECK(report.proposals_passed_minibatch == 0);
    CHECK(trainer.prompt_values() == initial);  // revert safety, byte-equal
  }
  SUBCASE("minibatch improves, full val regresses: exactly one full validation, reverted") {
    UsageLedger ledger;
    OwnedBackends backends;
    Trainer trainer = make_trainer("gating_overfit.json", backends, ledger);
    auto initial = trainer.prompt_values();
    RunReport report = trainer.run_training();
    CHECK(report.gated_full_val_evals == 1);
    CHECK(report.proposals_passed_minibatch == 1);
    CHECK(report.proposals_accepted == 0);
    CHECK(trainer.prompt_values() == initial);
    // the rejected batch is carried forward to the next step
    CHECK(report.steps.front().carried_forward);
  }
}

TEST_CASE("rejected steps carry the batch forward, bounded by max_carry") {
  TrainerConfig config = TrainerConfig::from_file(config_path("gating_worse.json"));
  config.max_steps = 4;  // 1 fresh + 2 carries + 1 fresh again
  UsageLedger ledger;
  OwnedBackends backends = make_backends(config, ledger);
  Trainer trainer(config, backends.view, &ledger);
  RunReport report = trainer.run_training();
  REQUIRE(report.steps.size() == 4);
  CHECK(report.steps[0].carried_forward);
  CHECK(report.steps[1].batch_ids == report.steps[0].batch_ids);
  CHECK(report.steps[2].batch_ids == report.steps[0].batch_ids);
  CHECK_FALSE(report.steps[2].carried_forward);  // carry budget exhausted
}

TEST_CASE("round-robin proposal policy targets one parameter per step") {
  TrainerConfig config = TrainerConfig::from_file(config_path("multihop_cycle.json"));
  config.proposal_policy = "round_robin";
  config.max_steps = 2;
  config.max_proposals = 1;
  UsageLedger ledger;
  OwnedBackends backends = make_backends(config, ledger);
  Trainer trainer(config, backends.view, &ledger);
  RunReport report = trainer.run_training();
  // one optimizer call per step instead of one per trainable parameter
  CHECK(ledger.by_phase(Phase::kPropose).requests == 2);
  CHECK(report.steps_run == 2);
  CHECK_THROWS_AS(TrainerConfig::from_json(
                      {{"pipeline", "object_count"}, {"proposal_policy", "sometimes"}}),
                  ConfigError);
}

TEST_CASE("optimizer backend exhaustion aborts the step with prompts intact") {
  struct DeadOptimizer : ModelBackend {
    ScriptedBackend inner;
    explicit DeadOptimizer(std::vector<ScriptEntry> entries) : inner(std::move(entries)) {}
    ModelResponse complete(const ModelRequest& r) override {
      if (r.role == ModelRole::kOptimizer) throw BackendError("rate limited forever");
      return inner.complete(r);
    }
  };
  TrainerConfig config = TrainerConfig::from_file(config_path("gating_overfit.json"));
  DeadOptimizer backend(ScriptedBackend::load_jsonl_file(config.script_path));
  UsageLedger ledger;
  Trainer trainer(config, {&backend, &backend, &backend}, &ledger);
  auto initial = trainer.prompt_values();
  RunReport report = trainer.run_training();
  CHECK(report.proposals_accepted == 0);
  CHECK(trainer.prompt_values() == initial);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(TrainerConfig::from_json({{"pipeline", "object_count"}, {"batch_size", 0}}),
                  ConfigError);
  CHECK_THROWS_AS(TrainerConfig::from_json({{"pipeline", "object_count"}, {"max_proposals", 0}}),
                  ConfigError);
  CHECK_THROWS_AS(TrainerConfig::from_json({{"batch_size", 4}}), ConfigError);
  CHECK_THROWS_AS(TrainerConfig::from_json(
                      {{"pipeline", "object_count"}, {"error_threshold", 1.5}}),
                  ConfigError);
  TrainerConfig em = TrainerConfig::from_json({{"pipeline", "object_count"}});
  CHECK(em.resolved_threshold() == 1.0);
  TrainerConfig f1 = TrainerConfig::from_json({{"pipeline", "vanilla_rag"}});
  CHECK(f1.resolved_threshold() == 0.5);
  CHECK(f1.batch_size == 4);
  CHECK(f1.max_steps == 12);
  CHECK(f1.max_proposals == 3);
  CHECK(f1.sh_capacity == 5);
}

TEST_CASE("evaluate is deterministic and rejects empty datasets") {
  UsageLedger ledger;
  OwnedBackends backends;
  Trainer trainer = make_trainer("object_count_improve.json", backends, ledger);
  double a = trainer.evaluate(trainer.val_samples(), trainer.prompt_values(), Phase::kValidate);
  double b = trainer.evaluate(trainer.val_samples(), trainer.prompt_values(), Phase::kValidate);
  CHECK(a == b);
  CHECK_THROWS_AS(trainer.evaluate({}, trainer.prompt_values(), Phase::kValidate), ConfigError);
}
