#include "dap/propagation.hpp"

#include <cmath>
#include <cstdio>

#include "dap/error.hpp"

namespace dap {

std::string_view variant_name(InjectionVariant v) {
  switch (v) {
    case InjectionVariant::kUniform: return "uniform";
    case InjectionVariant::kTargetOnly: return "target_only";
    case InjectionVariant::kSourceOnly: return "source_only";
    case InjectionVariant::kFinalOnly: return "final_only";
    case InjectionVariant::kPairwise: return "pairwise";
  }
  return "unknown";
}

InjectionVariant parse_variant(std::string_view name) {
  if (name == "pairwise") return InjectionVariant::kPairwise;
  if (name == "uniform") return InjectionVariant::kUniform;
  if (name == "target" || name == "target_only") return InjectionVariant::kTargetOnly;
  if (name == "source" || name == "source_only") return InjectionVariant::kSourceOnly;
  if (name == "final" || name == "final_only") return InjectionVariant::kFinalOnly;
  throw InputError("unknown injection variant '" + std::string(name) + "'");
}

MatrixD weighted_head_sum(const AttentionStack& stack, std::size_t layer, std::span<const double> weights) {
  if (layer >= stack.num_layers()) throw InputError("layer index out of range");
  if (weights.size() != stack.num_heads()) throw ShapeError("one weight per head required");
  const std::size_t n = stack.num_tokens();
  MatrixD out(n, n);
  for (std::size_t h = 0; h < stack.num_heads(); ++h) {
    const Matrix& a = stack.at(layer, h);
    const double w = weights[h];
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += w * static_cast<double>(a.data()[i]);
  }
  return out;
}

MatrixD head_average(const AttentionStack& stack, std::size_t layer) {
  const std::vector<double> weights(stack.num_heads(), 1.0 / static_cast<double>(stack.num_heads()));
  return weighted_head_sum(stack, layer, weights);
}

MatrixD residual_transition(const MatrixD& a) {
  if (!a.is_square()) throw ShapeError("residual transition needs a square matrix");
  MatrixD out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) out(i, i) += 1.0;
  return out;
}

MatrixD dap_transition(const MatrixD& a_tilde, std::span<const double> prior, InjectionVariant variant) {
  if (!a_tilde.is_square()) throw ShapeError("transition must be square");
  if (prior.size() != a_tilde.rows())
    throw ShapeError("prior length " + std::to_string(prior.size()) + " does not match " +
                     std::to_string(a_tilde.rows()) + " tokens");
  MatrixD t = a_tilde;
  const std::size_t n = t.rows();
  switch (variant) {
    case InjectionVariant::kUniform:
    case InjectionVariant::kFinalOnly:
      break;
    case InjectionVariant::kPairwise:
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) t(i, j) *= prior[i] * prior[j];
      break;
    case InjectionVariant::kSourceOnly:
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) t(i, j) *= prior[j];
      break;
    case InjectionVariant::kTargetOnly:
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) t(i, j) *= prior[i];
      break;
  }
  return row_normalize(t, DegenerateRows::kUniform);
}

namespace {

template <typename Mixer>
PropagationResult propagate_with(const AttentionStack& stack, std::span<const double> prior,
                                 InjectionVariant variant, Mixer&& mix_heads, PropagationTrace* trace) {
  if (stack.empty()) throw InputError("attention stack has no layers");
  const std::size_t n = stack.num_tokens();
  const std::size_t patches = n - 1;
  const std::size_t side = square_side(patches);
  if (prior.size() != n) throw ShapeError("prior length does not match token count");

  PropagationResult result;
  result.layer_maps.reserve(stack.num_layers());
  MatrixD relevance = MatrixD::identity(n);
  if (trace) {
    trace->transitions.clear();
    trace->relevance.clear();
  }
  for (std::size_t l = 0; l < stack.num_layers(); ++l) {
    const MatrixD transition = dap_transition(residual_transition(mix_heads(l)), prior, variant);
    relevance = matmul(transition, relevance);
    auto row = relevance.row(0);
    result.layer_maps.emplace_back(row.begin() + 1, row.end());
    if (trace) {
      trace->transitions.push_back(transition);
      trace->relevance.push_back(relevance);
    }
  }
  std::vector<double> final_scores = result.layer_maps.back();
  if (variant == InjectionVariant::kFinalOnly) {
    for (std::size_t j = 0; j < patches; ++j) final_scores[j] *= prior[j + 1];
  }
  result.final_heatmap = Heatmap(std::move(final_scores), side);
  return result;
}

}  // namespace

PropagationResult propagate(const AttentionStack& stack, const DecisionPrior& prior, InjectionVariant variant,
                            PropagationTrace* trace) {
  return propagate_with(
      stack, prior.values, variant, [&](std::size_t l) { return head_average(stack, l); }, trace);
}

PropagationResult attention_rollout(const AttentionStack& stack, PropagationTrace* trace) {
  return propagate(stack, uniform_prior(stack.num_patches()), InjectionVariant::kUniform, trace);
}

std::vector<double> gmar_head_weights(std::span<const Matrix> head_grads) {
  std::vector<double> norms(head_grads.size(), 0.0);
  double total = 0.0;
  for (std::size_t h = 0; h < head_grads.size(); ++h) {
    for (float g : head_grads[h].data()) norms[h] += std::abs(static_cast<double>(g));
    total += norms[h];
  }
  if (!(total > 0.0)) return std::vector<double>(head_grads.size(), 1.0 / static_cast<double>(head_grads.size()));
  for (double& w : norms) w /= total;
  return norms;
}

PropagationResult gmar_rollout(const AttentionStack& stack, std::span<const Matrix> head_grads,
                               PropagationTrace* trace) {
  const std::size_t heads = stack.num_heads();
  if (head_grads.size() != stack.num_layers() * heads)
    throw ShapeError("GMAR needs one gradient matrix per layer and head");
  for (const auto& g : head_grads) {
    if (g.rows() != stack.num_tokens() || g.cols() != stack.num_tokens())
      throw ShapeError("GMAR gradient shape does not match attention");
  }
  const auto prior = uniform_prior(stack.num_patches());
  return propagate_with(
      stack, prior.values, InjectionVariant::kUniform,
      [&](std::size_t l) {
        const auto weights = gmar_head_weights(head_grads.subspan(l * heads, heads));
        return weighted_head_sum(stack, l, weights);
      },
      trace);
}

std::string layer_maps_csv(const PropagationResult& result, std::string_view header_comment) {
  std::string out;
  if (!header_comment.empty()) {
    out += "# ";
    out += header_comment;
    out += '\n';
  }
  out += "layer,patch_index,score\n";
  char buf[96];
  for (std::size_t l = 0; l < result.layer_maps.size(); ++l) {
    const auto& m = result.layer_maps[l];
    for (std::size_t j = 0; j < m.size(); ++j) {
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%.6f\n", l + 1, j, m[j]);
      out += buf;
    }
  }
  return out;
}

}  // namespace dap
