#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "promptgrad/trainer.hpp"

namespace {

using namespace promptgrad;

struct CommonArgs {
  std::string pipeline;
  std::string config_path;
  std::string backend;
  std::string script_path;
  int64_t seed = -1;
};

TrainerConfig load_config(const CommonArgs& args) {
  TrainerConfig config = TrainerConfig::from_file(args.config_path);
  if (!args.pipeline.empty()) config.pipeline_id = args.pipeline;
  if (!args.backend.empty()) config.backend = args.backend;
  if (!args.script_path.empty()) config.script_path = args.script_path;
  if (args.seed >= 0) config.seed = static_cast<uint64_t>(args.seed);
  config.validate_fields();
  return config;
}

int cmd_train(const CommonArgs& args, const std::string& out_dir) {
  TrainerConfig config = load_config(args);
  UsageLedger ledger;
  OwnedBackends backends = make_backends(config, ledger);
  Trainer trainer(config, backends.view, &ledger);
  RunReport report = trainer.run_training(out_dir);
  std::cout << "pipeline: " << report.pipeline_id << "\n"
            << "start_val: " << report.start_val << "  start_test: " << report.start_test << "\n"
            << "best_val: " << report.best_val << "  final_test: " << report.final_test << "\n"
            << "minibatch_pass_rate: " << report.minibatch_pass_rate
            << "  validation_pass_rate: " << report.validation_pass_rate << "\n"
            << "report: " << out_dir << "/run_report.jsonl\n"
            << "checkpoint: " << out_dir << "/checkpoint.json\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint_path,
             const std::string& split) {
  TrainerConfig config = load_config(args);
  Checkpoint checkpoint = load_checkpoint(checkpoint_path);
  if (checkpoint.pipeline_id != config.pipeline_id)
    throw ConfigError("checkpoint pipeline '" + checkpoint.pipeline_id +
                      "' does not match config pipeline '" + config.pipeline_id + "'");
  UsageLedger ledger;
  OwnedBackends backends = make_backends(config, ledger);
  Trainer trainer(config, backends.view, &ledger);
  trainer.set_prompt_values(checkpoint.prompts);
  const auto& samples = split == "val" ? trainer.val_samples() : trainer.test_samples();
  double score = trainer.evaluate(samples, trainer.prompt_values(), Phase::kValidate);
  std::printf("%s accuracy: %.4f (checkpoint best_val %.4f)\n", split.c_str(), score,
              checkpoint.best_val);
  return 0;
}

int cmd_export_graph(const CommonArgs& args, const std::string& sample_id,
                     const std::string& out_path) {
  TrainerConfig config = load_config(args);
  UsageLedger ledger;
  OwnedBackends backends = make_backends(config, ledger);
  Trainer trainer(config, backends.view, &ledger);

  const Sample* sample = nullptr;
  std::vector<Sample> all = load_samples_jsonl(config.train_path);
  for (const auto& extra : {config.val_path, config.test_path}) {
    auto more = load_samples_jsonl(extra);
    all.insert(all.end(), more.begin(), more.end());
  }
  for (const auto& s : all)
    if (s.id == sample_id) {
      sample = &s;
      break;
    }
  if (sample == nullptr) throw ConfigError("sample id not found in any split: " + sample_id);

  ParameterGraph graph;
  auto installed = trainer.pipeline().install(graph, trainer.prompt_values());
  trainer.pipeline().run_sample(graph, installed, *sample, *backends.view.forward,
                                metric_by_name(config.resolved_metric()), config.forward_params);
  std::ofstream out(out_path);
  if (!out) throw ConfigError("cannot write: " + out_path);
  out << graph.export_dot();
  std::cout << "wrote " << out_path << " (" << graph.size() << " nodes)\n";
  return 0;
}

int cmd_prob(long long n_total, double accuracy, long long batch) {
  std::printf("%.4f\n", no_error_batch_probability(n_total, accuracy, batch));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Textual-gradient prompt optimization over dataflow graphs"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string out_dir = ".";
  std::string checkpoint_path, split = "val", sample_id, out_path;
  long long n_total = 0, batch = 0;
  double accuracy = 0.0;

  auto add_common = [&](CLI::App* cmd, bool config_required = true) {
    cmd->add_option("--pipeline", common.pipeline, "Pipeline id");
    auto* opt = cmd->add_option("--config", common.config_path, "Trainer config JSON");
    if (config_required) opt->required();
    cmd->add_option("--backend", common.backend, "Backend kind: scripted|http");
    cmd->add_option("--script", common.script_path, "Script JSONL for the scripted backend");
    cmd->add_option("--seed", common.seed, "Run seed");
  };

  auto* train = app.add_subcommand("train", "Run the training loop");
  add_common(train);
  train->add_option("--out-dir", out_dir, "Directory for run_report.jsonl and checkpoint.json");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint JSON")->required();
  eval->add_option("--split", split, "val|test")
      ->check(CLI::IsMember({"val", "test"}));

  auto* export_graph = app.add_subcommand("export-graph", "Trace one sample and write DOT");
  add_common(export_graph);
  export_graph->add_option("--sample-id", sample_id, "Sample id to trace")->required();
  export_graph->add_option("--out", out_path, "Output .dot path")->required();

  auto* prob = app.add_subcommand("prob", "No-error-batch probability");
  prob->add_option("--n-total", n_total, "Dataset size")->required();
  prob->add_option("--accuracy", accuracy, "Dataset accuracy in [0,1]")->required();
  prob->add_option("--batch", batch, "Batch size")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train(common, out_dir);
    if (eval->parsed()) return cmd_eval(common, checkpoint_path, split);
    if (export_graph->parsed()) return cmd_export_graph(common, sample_id, out_path);
    if (prob->parsed()) return cmd_prob(n_total, accuracy, batch);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
