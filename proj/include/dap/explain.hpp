#pragma once

// Explainer registry and the end-to-end attribution pipeline: forward pass,
// target selection, one backward pass for the chosen class, prior
// construction and propagation.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dap/data.hpp"
#include "dap/heatmap.hpp"
#include "dap/propagation.hpp"
#include "dap/vit.hpp"

namespace dap {

// Methods that produce attributions from the model.
std::span<const std::string_view> model_explainers();
// Harness-only references: seeded random saliency and the ground-truth box.
std::span<const std::string_view> reference_explainers();
bool is_explainer(std::string_view name);
// Parses a comma-separated list; throws InputError on unknown names or duplicates.
std::vector<std::string> parse_explainer_list(std::string_view csv);

struct ExplainOptions {
  InjectionVariant variant = InjectionVariant::kPairwise;
  bool uniform_prior = false;  // dap: replace the Grad-CAM prior with ones
  std::uint64_t seed = 0;      // random explainer
};

struct Explanation {
  std::string method;
  std::size_t target_class = 0;
  Heatmap heatmap;
  std::vector<std::vector<double>> layer_maps;  // empty for non-propagating methods
  std::vector<double> prior;                    // dap only, length P + 1
};

// Forward pass plus per-class gradients, cached so that several explainers
// and target classes share one forward.
class ImageContext {
 public:
  ImageContext(const ViTParams& params, const Image& image, std::size_t image_index = 0,
               std::optional<PatchBox> object_box = std::nullopt);

  const ForwardTrace& trace() const { return trace_; }
  std::size_t predicted_class() const { return trace_.predicted_class; }
  // Highest-scoring class other than `target` (lowest index on ties).
  std::size_t runner_up(std::size_t target) const;
  std::size_t runner_up() const { return runner_up(predicted_class()); }
  const GradientBundle& gradients(std::size_t target);

  Explanation explain(std::string_view method, std::size_t target, const ExplainOptions& options = {});

 private:
  const ViTParams& params_;
  std::size_t image_index_;
  std::optional<PatchBox> object_box_;
  ForwardTrace trace_;
  std::vector<std::optional<GradientBundle>> grads_;
};

// Stand-alone helpers behind the registry.
Heatmap random_heatmap(std::size_t num_patches, std::uint64_t seed, std::size_t image_index);
Heatmap box_heatmap(const PatchBox& box, std::size_t grid_side);

}  // namespace dap
