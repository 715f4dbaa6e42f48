#include <CLI11.hpp>

#include <iostream>

#include <c10/util/Exception.h>

#include "cli.hpp"
#include "dscm/error.hpp"

namespace dscm::cli {

namespace {

template <typename T>
void override_option(CLI::App* cmd, nlohmann::json& overrides, const std::string& flag, const std::string& key,
                     const std::string& help) {
  cmd->add_option_function<T>(flag, [&overrides, key](const T& v) { overrides[key] = v; }, help);
}

void add_inference_options(CLI::App* cmd, InferOptions& o, bool needs_data = true) {
  cmd->add_option("--checkpoint", o.checkpoint, "Mechanism checkpoint directory")->required();
  auto* data = cmd->add_option("--data", o.data, "Dataset directory");
  if (needs_data) data->required();
  cmd->add_option("--out", o.out, "Output directory")->required();
  cmd->add_option("--split", o.split, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  cmd->add_option("--mode", o.mode, "Abduction mode")->check(CLI::IsMember({"spatial", "semantic", "dynamic"}));
  cmd->add_option("--omega", o.omega, "Guidance scale (default: checkpoint config)");
  cmd->add_option("--eta", o.eta, "CTA step size for dynamic abduction (default: checkpoint config)");
  cmd->add_option("--steps", o.steps, "DDIM steps S (default: checkpoint config)");
  cmd->add_option("--particles", o.particles, "Latent particles for semantic abduction")->check(CLI::PositiveNumber);
  cmd->add_option("--count", o.count, "Number of samples")->check(CLI::PositiveNumber);
  cmd->add_option("--offset", o.offset, "Index of the first sample")->check(CLI::NonNegativeNumber);
  cmd->add_option("--batch-size", o.batch_size, "Inference batch size")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", o.seed, "Seed");
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Deep structural causal models with diffusion image mechanisms", "dscm"};
  app.require_subcommand(1);

  GenerateOptions gen;
  auto* g = app.add_subcommand("generate-data", "Generate the synthetic Morpho-MNIST dataset");
  g->add_option("--source", gen.source, "Directory with MNIST idx files")->required();
  g->add_option("--out", gen.out, "Output dataset directory")->required();
  g->add_option("--variant", gen.variant, "grayscale or colour")
      ->check(CLI::IsMember({"grayscale", "colour", "color"}));
  g->add_option("--seed", gen.seed, "Seed");
  g->add_option("--train", gen.train, "Training samples")->check(CLI::NonNegativeNumber);
  g->add_option("--val", gen.val, "Validation samples")->check(CLI::NonNegativeNumber);
  g->add_option("--test", gen.test, "Test samples")->check(CLI::NonNegativeNumber);

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Train a diffusion image mechanism");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--config", tr.config, "Mechanism config JSON");
  override_option<std::string>(t, tr.overrides, "--mechanism", "mechanism", "spatial or semantic");
  override_option<std::string>(t, tr.overrides, "--scm", "scm", "SCM preset providing the condition");
  override_option<int64_t>(t, tr.overrides, "--epochs", "epochs", "Training epochs");
  override_option<int64_t>(t, tr.overrides, "--batch-size", "batch_size", "Batch size");
  override_option<double>(t, tr.overrides, "--lr", "learning_rate", "Learning rate");
  override_option<double>(t, tr.overrides, "--p-null", "p_null", "Condition dropout probability");
  override_option<double>(t, tr.overrides, "--omega", "omega", "Default guidance scale");
  override_option<int64_t>(t, tr.overrides, "--z-dim", "z_dim", "Semantic latent size");
  override_option<double>(t, tr.overrides, "--beta", "beta", "KL weight");
  override_option<int64_t>(t, tr.overrides, "--timesteps", "timesteps", "Diffusion timesteps T");
  override_option<int64_t>(t, tr.overrides, "--base-channels", "base_channels", "UNet base width");
  override_option<std::vector<int64_t>>(t, tr.overrides, "--channel-mult", "channel_mult", "UNet multipliers");
  override_option<double>(t, tr.overrides, "--ema", "ema_decay", "EMA decay");
  override_option<std::uint64_t>(t, tr.overrides, "--seed", "seed", "Seed");
  t->add_option("--limit", tr.limit, "Use only the first N training samples");
  t->add_option("--checkpoint-every", tr.checkpoint_every, "Epochs between checkpoints");
  t->add_option("--log-every", tr.log_every, "Steps between log lines (0 disables)");
  t->add_flag("--resume", tr.resume, "Continue an existing checkpoint");

  ClassifierOptions cl;
  auto* c = app.add_subcommand("train-classifier", "Train the digit classifier used for effectiveness");
  c->add_option("--data", cl.data, "Dataset directory")->required();
  c->add_option("--out", cl.out, "Output directory")->required();
  c->add_option("--epochs", cl.epochs, "Epochs")->check(CLI::PositiveNumber);
  c->add_option("--batch-size", cl.batch_size, "Batch size")->check(CLI::PositiveNumber);
  c->add_option("--lr", cl.learning_rate, "Learning rate");
  c->add_option("--seed", cl.seed, "Seed");
  c->add_option("--limit", cl.limit, "Use only the first N training samples");
  c->add_flag("--shuffle-labels", cl.shuffle_labels, "Permute training labels (sanity check)");

  InferOptions cf;
  auto* k = app.add_subcommand("counterfactual", "Abduct, intervene and predict counterfactual images");
  add_inference_options(k, cf);
  k->add_option("--do", cf.intervention, "Interventions as node=value");

  InferOptions ev;
  std::vector<std::string> attributes;
  auto* e = app.add_subcommand("evaluate", "Counterfactual soundness report");
  add_inference_options(e, ev);
  e->add_option("--classifier", ev.classifier, "Digit classifier directory");
  e->add_option("--attributes", attributes, "Intervened attributes (default: image parents)");

  MediateOptions md;
  auto* m = app.add_subcommand("mediate", "Direct, indirect and total effects of an intervention");
  add_inference_options(m, md.infer);
  m->add_option("--node", md.node, "Intervened node")->required();
  m->add_option("--value", md.value, "Intervention value")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*g) return cmd_generate_data(gen);
    if (*t) return cmd_train(tr);
    if (*c) return cmd_train_classifier(cl);
    if (*k) return cmd_counterfactual(cf);
    if (*e) return cmd_evaluate(ev, attributes);
    if (*m) return cmd_mediate(md);
  } catch (const ArgumentError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 3;
  } catch (const c10::Error& err) {
    std::cerr << "error: " << err.what_without_backtrace() << '\n';
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 3;
  }
  return 2;
}

int run(const std::vector<std::string>& args) {
  std::vector<char*> argv;
  std::string name = "dscm";
  argv.push_back(name.data());
  std::vector<std::string> copy = args;
  for (auto& a : copy) argv.push_back(a.data());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace dscm::cli
