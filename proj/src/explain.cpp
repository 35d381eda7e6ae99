#include "dap/explain.hpp"

#include <algorithm>
#include <array>

#include "dap/error.hpp"
#include "dap/prior.hpp"
#include "dap/random.hpp"

namespace dap {

namespace {

constexpr std::array<std::string_view, 4> kModelExplainers = {"dap", "rollout", "gmar", "gradcam"};
constexpr std::array<std::string_view, 2> kReferenceExplainers = {"random", "oracle"};

}  // namespace

std::span<const std::string_view> model_explainers() { return kModelExplainers; }
std::span<const std::string_view> reference_explainers() { return kReferenceExplainers; }

bool is_explainer(std::string_view name) {
  return std::find(kModelExplainers.begin(), kModelExplainers.end(), name) != kModelExplainers.end() ||
         std::find(kReferenceExplainers.begin(), kReferenceExplainers.end(), name) != kReferenceExplainers.end();
}

std::vector<std::string> parse_explainer_list(std::string_view csv) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const std::size_t comma = std::min(csv.find(',', start), csv.size());
    std::string name(csv.substr(start, comma - start));
    name.erase(0, name.find_first_not_of(" \t"));
    name.erase(name.find_last_not_of(" \t") + 1);
    if (name.empty()) throw InputError("empty explainer name in '" + std::string(csv) + "'");
    if (!is_explainer(name)) throw InputError("unknown explainer '" + name + "'");
    if (std::find(out.begin(), out.end(), name) != out.end()) throw InputError("explainer '" + name + "' listed twice");
    out.push_back(std::move(name));
    start = comma + 1;
  }
  return out;
}

Heatmap random_heatmap(std::size_t num_patches, std::uint64_t seed, std::size_t image_index) {
  Rng rng(derive_seed(seed, 0x52414e444f4dULL, image_index));
  std::vector<double> values(num_patches);
  for (double& v : values) v = rng.uniform();
  return Heatmap(std::move(values), square_side(num_patches));
}

Heatmap box_heatmap(const PatchBox& box, std::size_t grid_side) {
  std::vector<double> values(grid_side * grid_side, 0.0);
  for (std::size_t p = 0; p < values.size(); ++p)
    if (box.contains(p, grid_side)) values[p] = 1.0;
  return Heatmap(std::move(values), grid_side);
}

ImageContext::ImageContext(const ViTParams& params, const Image& image, std::size_t image_index,
                           std::optional<PatchBox> object_box)
    : params_(params),
      image_index_(image_index),
      object_box_(object_box),
      trace_(forward(params, image)),
      grads_(params.config.num_classes) {}

std::size_t ImageContext::runner_up(std::size_t target) const {
  const auto& z = trace_.logits;
  if (z.size() < 2) throw InputError("runner-up class needs at least two classes");
  std::size_t best = target == 0 ? 1 : 0;
  for (std::size_t c = 0; c < z.size(); ++c)
    if (c != target && z[c] > z[best]) best = c;
  return best;
}

const GradientBundle& ImageContext::gradients(std::size_t target) {
  if (target >= grads_.size()) throw InputError("target class " + std::to_string(target) + " out of range");
  if (!grads_[target]) grads_[target] = backward_class_score(params_, trace_, target);
  return *grads_[target];
}

Explanation ImageContext::explain(std::string_view method, std::size_t target, const ExplainOptions& options) {
  if (target >= params_.config.num_classes)
    throw InputError("target class " + std::to_string(target) + " out of range");
  Explanation out;
  out.method = std::string(method);
  out.target_class = target;
  const std::size_t patches = trace_.attention.num_patches();

  if (method == "dap") {
    DecisionPrior prior = options.uniform_prior
                              ? uniform_prior(patches, target)
                              : build_prior(gradcam_token_importance(trace_, gradients(target)), target);
    auto result = propagate(trace_.attention, prior, options.variant);
    out.heatmap = std::move(result.final_heatmap);
    out.layer_maps = std::move(result.layer_maps);
    out.prior = std::move(prior.values);
  } else if (method == "rollout") {
    auto result = attention_rollout(trace_.attention);
    out.heatmap = std::move(result.final_heatmap);
    out.layer_maps = std::move(result.layer_maps);
  } else if (method == "gmar") {
    auto result = gmar_rollout(trace_.attention, gradients(target).attention_grads);
    out.heatmap = std::move(result.final_heatmap);
    out.layer_maps = std::move(result.layer_maps);
  } else if (method == "gradcam") {
    out.heatmap = gradcam_heatmap(gradcam_token_importance(trace_, gradients(target)));
  } else if (method == "random") {
    out.heatmap = random_heatmap(patches, options.seed, image_index_);
  } else if (method == "oracle") {
    if (!object_box_) throw InputError("oracle explainer needs a ground-truth box");
    out.heatmap = box_heatmap(*object_box_, square_side(patches));
  } else {
    throw InputError("unknown explainer '" + std::string(method) + "'");
  }
  return out;
}

}  // namespace dap
