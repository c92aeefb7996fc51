// calseg <command> [flags]
#include <iostream>

#include <CLI11.hpp>

#include "calseg/commands.hpp"

int main(int argc, char** argv) {
  using namespace calseg;
  CLI::App app{"Calcium-imaging neuron segmentation pipeline"};
  app.require_subcommand(1);

  SimulateArgs sim;
  std::string sim_config;
  auto* simulate = app.add_subcommand("simulate", "Generate synthetic blocks and truth masks");
  simulate->add_option("--config", sim_config, "Pipeline config JSON");
  simulate->add_option("--out", sim.out, "Output directory")->required();
  simulate->add_option("--blocks", sim.blocks, "Number of blocks")->required();
  simulate->add_option("--seed", sim.seed, "Random seed")->required();

  std::string in_dir, out_dir;
  auto* features = app.add_subcommand("features", "Variance and neighbour-correlation feature stacks");
  features->add_option("--in", in_dir, "Block directory")->required();
  features->add_option("--out", out_dir, "Output directory")->required();

  auto* make_gt = app.add_subcommand("make-gt", "Otsu ground-truth masks from variance maps");
  make_gt->add_option("--in", in_dir, "Block directory")->required();
  make_gt->add_option("--out", out_dir, "Output directory")->required();

  TrainArgs tr;
  std::string train_config;
  auto* train = app.add_subcommand("train", "Train the Bayesian U-Net");
  train->add_option("--features", tr.features, "Feature directory")->required();
  train->add_option("--labels", tr.labels, "Label mask directory")->required();
  train->add_option("--config", train_config, "Pipeline config JSON");
  train->add_option("--out", tr.out, "Checkpoint path")->required();
  train->add_option("--seed", tr.seed, "Random seed")->required();
  train->add_option("--half", tr.half, "Train on one half of the training split")
      ->check(CLI::IsMember({"first", "second"}));

  PredictArgs pr;
  std::string split_file;
  auto* predict = app.add_subcommand("predict", "Monte Carlo ensemble prediction");
  predict->add_option("--ckpt", pr.ckpt, "Checkpoint")->required();
  predict->add_option("--features", pr.features, "Feature directory")->required();
  predict->add_option("--out", pr.out, "Output directory")->required();
  predict->add_option("--samples", pr.samples, "Ensemble size")->capture_default_str();
  predict->add_option("--seed", pr.seed, "Random seed")->required();
  predict->add_option("--threshold", pr.threshold, "Binarization threshold")->capture_default_str();
  predict->add_option("--split", split_file, "Split file from train; predicts its test blocks only");

  std::string pred_dir, truth_dir, report;
  auto* evaluate = app.add_subcommand("evaluate", "Segmentation metrics against truth masks");
  evaluate->add_option("--pred", pred_dir, "Prediction directory")->required();
  evaluate->add_option("--truth", truth_dir, "Truth mask directory")->required();
  evaluate->add_option("--report", report, "Report JSON path")->required();

  std::string run1, run2;
  auto* repro = app.add_subcommand("repro", "Agreement between two prediction runs");
  repro->add_option("--run1", run1, "First run directory")->required();
  repro->add_option("--run2", run2, "Second run directory")->required();
  repro->add_option("--report", report, "Report JSON path")->required();

  RenderArgs rd;
  auto* render = app.add_subcommand("render", "PNG views of one block's results");
  render->add_option("--block", rd.block, "Block file")->required();
  render->add_option("--prob", rd.prob, "Probability map")->required();
  render->add_option("--uncert", rd.uncert, "Uncertainty map")->required();
  render->add_option("--truth", rd.truth, "Truth mask")->required();
  render->add_option("--out", rd.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (*simulate) {
    if (!sim_config.empty()) sim.config = sim_config;
    return cmd_simulate(sim, std::cerr);
  }
  if (*features) return cmd_features(in_dir, out_dir, std::cerr);
  if (*make_gt) return cmd_make_gt(in_dir, out_dir, std::cerr);
  if (*train) {
    if (!train_config.empty()) tr.config = train_config;
    return cmd_train(tr, std::cerr);
  }
  if (*predict) {
    if (!split_file.empty()) pr.split = split_file;
    return cmd_predict(pr, std::cerr);
  }
  if (*evaluate) return cmd_evaluate(pred_dir, truth_dir, report, std::cerr);
  if (*repro) return cmd_repro(run1, run2, report, std::cerr);
  if (*render) return cmd_render(rd, std::cerr);
  return kExitUsage;
}
