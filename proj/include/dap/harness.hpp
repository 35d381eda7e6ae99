#pragma once

// Command implementations shared by the CLI and the acceptance suite: train a
// model, emit explanations, evaluate metrics, run the injection ablation and
// export curves. Every artifact carries the config hash and seed.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dap/data.hpp"
#include "dap/explain.hpp"
#include "dap/propagation.hpp"
#include "dap/vit.hpp"
#include "json.hpp"

namespace dap {

struct RunConfig {
  std::string command;
  std::filesystem::path checkpoint;
  std::filesystem::path out_dir = "out";
  DatasetSpec dataset;
  ViTConfig model;
  TrainOptions train;
  std::vector<std::string> explainers = {"dap", "rollout", "gmar", "gradcam"};
  InjectionVariant variant = InjectionVariant::kPairwise;
  double k_fraction = 0.1;
  std::size_t num_images = 200;
  bool balanced = false;
  std::uint64_t seed = 0;  // image selection and the random explainer
  std::size_t steps = 1;   // patches per perturbation step
  bool uniform_prior = false;
  std::size_t threads = 0;  // 0: DAP_THREADS or hardware concurrency

  void validate() const;  // throws ConfigError
  std::filesystem::path checkpoint_path() const;  // default: <out>/model.ckpt
};

// Includes everything except the output directory, checkpoint path and
// thread count, none of which affect results.
void to_json(nlohmann::json& j, const RunConfig& cfg);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, RunConfig& cfg);

// FNV-1a of the canonical JSON form, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// Worker count: cfg.threads, else DAP_THREADS, else hardware concurrency.
std::size_t worker_count(const RunConfig& cfg);

// Eval-split indices to process. Balanced selection takes num_images /
// num_classes per class and requires divisibility.
std::vector<std::size_t> select_images(const RunConfig& cfg);

std::string image_id(std::size_t index);

struct Failure {
  std::string image_id;
  std::string method;
  std::string reason;
};

void to_json(nlohmann::json& j, const Failure& f);

struct CommandResult {
  int exit_code = 0;
  std::vector<Failure> failures;
  nlohmann::json summary;
  std::vector<std::filesystem::path> artifacts;
};

CommandResult cmd_train(const RunConfig& cfg);
CommandResult cmd_explain(const RunConfig& cfg);
CommandResult cmd_evaluate(const RunConfig& cfg);
CommandResult cmd_ablate(const RunConfig& cfg);
CommandResult cmd_curves(const RunConfig& cfg);
CommandResult run_command(const RunConfig& cfg);

// 3-decimal fixed formatting used in tables.
std::string format3(double v);

}  // namespace dap
