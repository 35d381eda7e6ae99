#pragma once

// Explanation-quality metrics: perturbation curves (deletion / insertion),
// class sensitivity, top-k sufficiency, top-k mass and layer-wise alignment.
// Top-k selection always happens on the patch grid; the selection is then
// expanded to pixels along the patch partition.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dap/data.hpp"
#include "dap/heatmap.hpp"
#include "dap/image.hpp"
#include "json.hpp"

namespace dap {

// Probability the model assigns to `target` for `image`. Must be safe to call
// concurrently.
using ConfidenceFn = std::function<double(const Image& image, std::size_t target)>;

struct PatchMask {
  std::vector<std::size_t> selected;  // patch indices, in selection order
  std::size_t grid_side = 0;
  std::size_t patch_size = 0;
  std::vector<std::uint8_t> pixel_mask;  // (grid_side * patch_size)^2, row-major
};

// k = max(1, round(k_fraction * P)); throws InputError unless 0 < k_fraction <= 1.
std::size_t topk_count(std::size_t num_patches, double k_fraction);

// Patch indices by descending score; ties go to the lower index.
std::vector<std::size_t> saliency_order(std::span<const double> scores);

PatchMask topk_select(const Heatmap& heatmap, double k_fraction, std::size_t image_size);

// Zeroes every pixel outside the mask (all channels).
Image apply_mask(const Image& image, const PatchMask& mask);

struct PerturbationCurve {
  std::vector<double> fractions;
  std::vector<double> confidences;
  double auc = 0.0;
};

double trapezoid_auc(std::span<const double> x, std::span<const double> y);

// Zero-masks patches in descending saliency order, step_patches at a time,
// recording confidence before the first step and after the last.
PerturbationCurve deletion_curve(const ConfidenceFn& model, const Image& image, const Heatmap& heatmap,
                                 std::size_t target, std::size_t step_patches = 1);

// Starts from the all-zero image and reveals patches in descending saliency order.
PerturbationCurve insertion_curve(const ConfidenceFn& model, const Image& image, const Heatmap& heatmap,
                                  std::size_t target, std::size_t step_patches = 1);

// 1 - rho_s / 2
double class_sensitivity(const Heatmap& map_pred, const Heatmap& map_alt);

// p(target | top-k patches kept) / p(target | image)
double token_contribution_consistency(const ConfidenceFn& model, const Image& image, const Heatmap& heatmap,
                                      std::size_t target, double k_fraction);

// Top-k mass over total mass; k/P when the total mass is zero.
double attention_flow_sparsity(const Heatmap& heatmap, double k_fraction);

std::vector<double> layer_decision_alignment(std::span<const std::vector<double>> layer_maps,
                                             std::span<const double> reference);

// Cumulative share of total mass over patches sorted by descending score;
// entry i covers the top (i + 1) patches.
std::vector<double> cumulative_mass_curve(std::span<const double> scores);

// Whether the highest-scoring patch (lowest index on ties) lies in the box.
bool pointing_hit(const Heatmap& heatmap, const PatchBox& box);

struct MetricReport {
  std::string image_id;
  std::string method;
  std::size_t target_class = 0;
  std::size_t alt_class = 0;
  double del_auc = 0.0;
  double ins_auc = 0.0;
  double cs = 0.0;
  double cs_rho = 0.0;  // raw Spearman behind cs
  double tcc = 0.0;
  double afs = 0.0;
  std::vector<double> lda_per_layer;
  bool pointing = false;
};

void to_json(nlohmann::json& j, const MetricReport& r);

// Rounds to 6 decimals so serialized reports are stable.
double round6(double v);

// CSV with columns step,fraction,confidence.
std::string curve_csv(const PerturbationCurve& curve, std::string_view header_comment = {});

}  // namespace dap
