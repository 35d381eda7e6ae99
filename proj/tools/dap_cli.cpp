#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dap/error.hpp"
#include "dap/fileio.hpp"
#include "dap/harness.hpp"

namespace {

struct Flags {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::size_t> images;
  bool balanced = false;
  std::optional<double> k;
  std::string explainers;
  std::string variant;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::string optimizer;
  bool uniform_prior = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration");
  cmd->add_option("--checkpoint", f.checkpoint, "model checkpoint path (default <out>/model.ckpt)");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "run seed (image selection, random explainer; model and shuffle seed for train)");
}

void add_eval(CLI::App* cmd, Flags& f) {
  cmd->add_option("--images", f.images, "number of eval images");
  cmd->add_flag("--balanced", f.balanced, "equal image count per class");
  cmd->add_option("--k", f.k, "top-k fraction of patches");
  cmd->add_option("--explainers", f.explainers, "comma-separated subset of dap,rollout,gmar,gradcam,random,oracle");
  cmd->add_option("--variant", f.variant, "prior injection: pairwise|uniform|target|final|source");
  cmd->add_option("--steps", f.steps, "patches per deletion/insertion step");
  cmd->add_flag("--uniform-prior", f.uniform_prior, "replace the Grad-CAM prior with ones");
}

dap::RunConfig build_config(const std::string& command, const Flags& f) {
  dap::RunConfig cfg;
  if (!f.config.empty()) {
    try {
      nlohmann::json::parse(dap::read_file(f.config)).get_to(cfg);
    } catch (const nlohmann::json::parse_error& e) {
      throw dap::ConfigError(std::string("cannot parse ") + f.config + ": " + e.what());
    }
  }
  cfg.command = command;
  if (!f.checkpoint.empty()) cfg.checkpoint = f.checkpoint;
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (f.images) cfg.num_images = *f.images;
  if (f.balanced) cfg.balanced = true;
  if (f.k) cfg.k_fraction = *f.k;
  if (!f.explainers.empty()) cfg.explainers = dap::parse_explainer_list(f.explainers);
  if (!f.variant.empty()) cfg.variant = dap::parse_variant(f.variant);
  if (f.steps) cfg.steps = *f.steps;
  if (f.uniform_prior) cfg.uniform_prior = true;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.lr) cfg.train.lr = *f.lr;
  if (!f.optimizer.empty()) cfg.train.optimizer = f.optimizer == "sgd" ? dap::Optimizer::kSgd : dap::Optimizer::kAdam;
  if (f.seed) {
    cfg.seed = *f.seed;
    if (command == "train") {
      cfg.model.seed = *f.seed;
      cfg.train.seed = *f.seed;
    }
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decision-aware attention propagation for vision transformers"};
  app.require_subcommand(1);
  Flags flags;

  auto* train = app.add_subcommand("train", "train the toy ViT and write a checkpoint");
  add_common(train, flags);
  train->add_option("--epochs", flags.epochs, "training epochs");
  train->add_option("--lr", flags.lr, "learning rate");
  train->add_option("--optimizer", flags.optimizer, "adam or sgd (momentum)")->check(CLI::IsMember({"adam", "sgd"}));

  auto* explain = app.add_subcommand("explain", "write heatmaps, layer maps and sidecars");
  auto* evaluate = app.add_subcommand("evaluate", "compute metrics per explainer");
  auto* ablate = app.add_subcommand("ablate", "compare prior injection variants");
  auto* curves = app.add_subcommand("curves", "deletion, mass and alignment curves");
  for (auto* cmd : {explain, evaluate, ablate, curves}) {
    add_common(cmd, flags);
    add_eval(cmd, flags);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string command = app.get_subcommands().front()->get_name();
    const dap::RunConfig cfg = build_config(command, flags);
    const dap::CommandResult result = dap::run_command(cfg);
    std::cout << result.summary.dump(2) << "\n";
    if (!result.failures.empty())
      std::cerr << result.failures.size() << " item(s) failed; see " << (cfg.out_dir / command / "failures.json").string()
                << "\n";
    return result.exit_code;
  } catch (const dap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dap::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
