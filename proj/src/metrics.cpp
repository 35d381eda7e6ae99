#include "dap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dap/error.hpp"
#include "dap/tensor.hpp"

namespace dap {

std::size_t topk_count(std::size_t num_patches, double k_fraction) {
  if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw InputError("k_fraction must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::llround(k_fraction * static_cast<double>(num_patches)));
  return std::clamp<std::size_t>(k, 1, num_patches);
}

std::vector<std::size_t> saliency_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

namespace {

std::size_t patch_size_for(std::size_t grid_side, std::size_t image_size) {
  if (grid_side == 0 || image_size % grid_side != 0)
    throw ShapeError("image size " + std::to_string(image_size) + " is not a multiple of the patch grid " +
                     std::to_string(grid_side));
  return image_size / grid_side;
}

PatchMask mask_from_patches(std::span<const std::size_t> patches, std::size_t grid_side, std::size_t image_size) {
  PatchMask mask;
  mask.grid_side = grid_side;
  mask.patch_size = patch_size_for(grid_side, image_size);
  mask.selected.assign(patches.begin(), patches.end());
  mask.pixel_mask.assign(image_size * image_size, 0);
  const std::size_t ps = mask.patch_size;
  for (std::size_t p : patches) {
    const std::size_t py = p / grid_side;
    const std::size_t px = p % grid_side;
    for (std::size_t y = py * ps; y < (py + 1) * ps; ++y)
      for (std::size_t x = px * ps; x < (px + 1) * ps; ++x) mask.pixel_mask[y * image_size + x] = 1;
  }
  return mask;
}

void require_square_image(const Image& image, const Heatmap& heatmap) {
  if (image.height != image.width) throw ShapeError("perturbation metrics need square images");
  if (heatmap.values.size() != heatmap.grid_side * heatmap.grid_side) throw ShapeError("heatmap is not on a square grid");
}

std::vector<std::size_t> checkpoints(std::size_t total, std::size_t step) {
  if (step == 0) throw InputError("step_patches must be at least 1");
  std::vector<std::size_t> counts;
  for (std::size_t c = 0; c < total; c += step) counts.push_back(c);
  counts.push_back(total);
  return counts;
}

double checked_confidence(const ConfidenceFn& model, const Image& image, std::size_t target) {
  double p = 0.0;
  try {
    p = model(image, target);
  } catch (const std::exception& e) {
    throw EvaluationError(std::string("confidence oracle failed: ") + e.what());
  }
  if (!std::isfinite(p) || p < 0.0 || p > 1.0) throw EvaluationError("confidence oracle returned a value outside [0, 1]");
  return p;
}

PerturbationCurve perturbation_curve(const ConfidenceFn& model, const Image& image, const Heatmap& heatmap,
                                     std::size_t target, std::size_t step_patches, bool insertion) {
  require_square_image(image, heatmap);
  const std::size_t total = heatmap.values.size();
  const auto order = saliency_order(heatmap.values);
  const auto counts = checkpoints(total, step_patches);
  const std::size_t ps = patch_size_for(heatmap.grid_side, image.width);
  const std::size_t g = heatmap.grid_side;

  Image current = insertion ? Image(image.channels, image.height, image.width, 0.0f) : image;
  PerturbationCurve curve;
  std::size_t done = 0;
  for (std::size_t count : counts) {
    for (; done < count; ++done) {
      const std::size_t p = order[done];
      const std::size_t py = p / g;
      const std::size_t px = p % g;
      for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t y = py * ps; y < (py + 1) * ps; ++y)
          for (std::size_t x = px * ps; x < (px + 1) * ps; ++x)
            current.at(c, y, x) = insertion ? image.at(c, y, x) : 0.0f;
    }
    curve.fractions.push_back(static_cast<double>(count) / static_cast<double>(total));
    curve.confidences.push_back(checked_confidence(model, current, target));
  }
  curve.auc = trapezoid_auc(curve.fractions, curve.confidences);
  return curve;
}

}  // namespace

PatchMask topk_select(const Heatmap& heatmap, double k_fraction, std::size_t image_size) {
  const std::size_t k = topk_count(heatmap.values.size(), k_fraction);
  auto order = saliency_order(heatmap.values);
  order.resize(k);
  return mask_from_patches(order, heatmap.grid_side, image_size);
}

Image apply_mask(const Image& image, const PatchMask& mask) {
  if (image.height * image.width != mask.pixel_mask.size()) throw ShapeError("mask does not match image");
  Image out = image;
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x)
        if (!mask.pixel_mask[y * image.width + x]) out.at(c, y, x) = 0.0f;
  return out;
}

double trapezoid_auc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("curve axes differ in length");
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return area;
}

PerturbationCurve deletion_curve(const ConfidenceFn& model, const Image& image, const Heatmap& heatmap,
                                 std::size_t target, std::size_t step_patches) {
  return perturbation_curve(model, image, heatmap, target, step_patches, false);
}

PerturbationCurve insertion_curve(const ConfidenceFn& model, const Image& image, const Heatmap& heatmap,
                                  std::size_t target, std::size_t step_patches) {
  return perturbation_curve(model, image, heatmap, target, step_patches, true);
}

double class_sensitivity(const Heatmap& map_pred, const Heatmap& map_alt) {
  if (map_pred.values.size() != map_alt.values.size()) throw ShapeError("class sensitivity maps differ in length");
  return 1.0 - spearman(map_pred.values, map_alt.values) / 2.0;
}

double token_contribution_consistency(const ConfidenceFn& model, const Image& image, const Heatmap& heatmap,
                                      std::size_t target, double k_fraction) {
  require_square_image(image, heatmap);
  const double original = checked_confidence(model, image, target);
  if (!(original > 0.0)) throw EvaluationError("original confidence is zero; TCC is undefined");
  const auto mask = topk_select(heatmap, k_fraction, image.width);
  const double kept = checked_confidence(model, apply_mask(image, mask), target);
  return kept / original;
}

double attention_flow_sparsity(const Heatmap& heatmap, double k_fraction) {
  const std::size_t total = heatmap.values.size();
  const std::size_t k = topk_count(total, k_fraction);
  double sum = 0.0;
  for (double v : heatmap.values) {
    if (v < 0.0) throw InputError("attention flow sparsity needs a nonnegative map");
    sum += v;
  }
  if (!(sum > 0.0)) return static_cast<double>(k) / static_cast<double>(total);
  const auto order = saliency_order(heatmap.values);
  double top = 0.0;
  for (std::size_t i = 0; i < k; ++i) top += heatmap.values[order[i]];
  return top / sum;
}

std::vector<double> layer_decision_alignment(std::span<const std::vector<double>> layer_maps,
                                             std::span<const double> reference) {
  std::vector<double> out;
  out.reserve(layer_maps.size());
  for (const auto& m : layer_maps) {
    if (m.size() != reference.size()) throw ShapeError("layer map length differs from the reference");
    out.push_back(spearman(m, reference));
  }
  return out;
}

std::vector<double> cumulative_mass_curve(std::span<const double> scores) {
  const auto order = saliency_order(scores);
  double total = 0.0;
  for (double v : scores) total += v;
  std::vector<double> out(scores.size());
  if (!(total > 0.0)) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<double>(i + 1) / static_cast<double>(out.size());
    return out;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    acc += scores[order[i]];
    out[i] = acc / total;
  }
  out.back() = 1.0;
  return out;
}

bool pointing_hit(const Heatmap& heatmap, const PatchBox& box) {
  if (heatmap.values.empty()) throw InputError("empty heatmap");
  const auto best = static_cast<std::size_t>(std::max_element(heatmap.values.begin(), heatmap.values.end()) -
                                             heatmap.values.begin());
  return box.contains(best, heatmap.grid_side);
}

double round6(double v) { return std::round(v * 1e6) / 1e6; }

void to_json(nlohmann::json& j, const MetricReport& r) {
  std::vector<double> lda;
  for (double v : r.lda_per_layer) lda.push_back(round6(v));
  j = nlohmann::json{{"image_id", r.image_id},
                     {"method", r.method},
                     {"target_class", r.target_class},
                     {"alt_class", r.alt_class},
                     {"del_auc", round6(r.del_auc)},
                     {"ins_auc", round6(r.ins_auc)},
                     {"cs", round6(r.cs)},
                     {"cs_rho", round6(r.cs_rho)},
                     {"tcc", round6(r.tcc)},
                     {"afs", round6(r.afs)},
                     {"lda_per_layer", lda},
                     {"pointing", r.pointing}};
}

std::string curve_csv(const PerturbationCurve& curve, std::string_view header_comment) {
  std::string out;
  if (!header_comment.empty()) {
    out += "# ";
    out += header_comment;
    out += '\n';
  }
  out += "step,fraction,confidence\n";
  char buf[96];
  for (std::size_t i = 0; i < curve.fractions.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f\n", i, curve.fractions[i], curve.confidences[i]);
    out += buf;
  }
  return out;
}

}  // namespace dap
