#pragma once

// Gradient-derived decision prior: Grad-CAM token importance over patch
// tokens, min-max scaled, with the class-token entry pinned to 1.

#include <cstddef>
#include <vector>

#include "dap/heatmap.hpp"
#include "dap/tensor.hpp"
#include "dap/vit.hpp"

namespace dap {

struct TokenImportance {
  std::vector<double> scores;  // length P, post-ReLU
  std::size_t grid_side = 0;  // 0 when the token count is not a perfect square
};

struct DecisionPrior {
  std::vector<double> values;  // length P + 1, values[0] == 1
  std::size_t target_class = 0;

  std::size_t num_patches() const { return values.empty() ? 0 : values.size() - 1; }
};

// s_j = ReLU(sum_c alpha_c * f_jc), alpha_c = mean_j grad_jc. Both matrices
// are P x channels.
TokenImportance gradcam_token_importance(const Matrix& features, const Matrix& grads);

// Uses the trace's Grad-CAM feature site and the bundle's gradient there.
TokenImportance gradcam_token_importance(const ForwardTrace& trace, const GradientBundle& grads);

// d = [1, minmax(s)]; a constant s yields all ones.
DecisionPrior build_prior(const TokenImportance& s, std::size_t target);

DecisionPrior uniform_prior(std::size_t num_patches, std::size_t target = 0);

// Grad-CAM as a standalone explainer: min-max scaled s on the patch grid.
Heatmap gradcam_heatmap(const TokenImportance& s);

}  // namespace dap
