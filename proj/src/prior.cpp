#include "dap/prior.hpp"

#include <algorithm>

#include "dap/error.hpp"

namespace dap {

TokenImportance gradcam_token_importance(const Matrix& features, const Matrix& grads) {
  if (features.rows() != grads.rows() || features.cols() != grads.cols())
    throw ShapeError("Grad-CAM features and gradients must have the same shape");
  const std::size_t tokens = features.rows();
  const std::size_t channels = features.cols();
  std::vector<double> alpha(channels, 0.0);
  for (std::size_t j = 0; j < tokens; ++j)
    for (std::size_t c = 0; c < channels; ++c) alpha[c] += static_cast<double>(grads(j, c));
  for (double& a : alpha) a /= static_cast<double>(tokens);

  TokenImportance out;
  std::size_t side = 0;
  while ((side + 1) * (side + 1) <= tokens) ++side;
  out.grid_side = side * side == tokens ? side : 0;
  out.scores.resize(tokens);
  for (std::size_t j = 0; j < tokens; ++j) {
    double cam = 0.0;
    for (std::size_t c = 0; c < channels; ++c) cam += alpha[c] * static_cast<double>(features(j, c));
    out.scores[j] = std::max(cam, 0.0);
  }
  return out;
}

TokenImportance gradcam_token_importance(const ForwardTrace& trace, const GradientBundle& grads) {
  return gradcam_token_importance(trace.gradcam_features(), grads.feature_grad);
}

DecisionPrior build_prior(const TokenImportance& s, std::size_t target) {
  if (s.scores.empty()) throw ShapeError("token importance is empty");
  DecisionPrior d;
  d.target_class = target;
  d.values.reserve(s.scores.size() + 1);
  d.values.push_back(1.0);
  const auto scaled = min_max_scaled(s.scores, 1.0);
  d.values.insert(d.values.end(), scaled.begin(), scaled.end());
  return d;
}

DecisionPrior uniform_prior(std::size_t num_patches, std::size_t target) {
  return DecisionPrior{std::vector<double>(num_patches + 1, 1.0), target};
}

Heatmap gradcam_heatmap(const TokenImportance& s) {
  return Heatmap(min_max_scaled(s.scores, 1.0), square_side(s.scores.size()));
}

}  // namespace dap
