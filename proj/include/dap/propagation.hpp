#pragma once

// Decision-aware attention propagation and the rollout-family baselines.
//
// Per layer: heads are mixed into A^l, the residual is added (A^l + I), the
// decision prior modulates the entries, rows are normalized into T^l, and the
// relevance matrix is updated as R^l = T^l R^{l-1} starting from R^0 = I.
// The class-token row of R^L (patch entries) is the attribution map.
// All propagation arithmetic is double precision.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dap/attention.hpp"
#include "dap/heatmap.hpp"
#include "dap/prior.hpp"
#include "dap/tensor.hpp"

namespace dap {

enum class InjectionVariant { kUniform, kTargetOnly, kSourceOnly, kFinalOnly, kPairwise };

std::string_view variant_name(InjectionVariant v);

// Accepts "pairwise", "uniform", "target", "source", "final" and the
// "*_only" spellings.
InjectionVariant parse_variant(std::string_view name);

struct PropagationResult {
  Heatmap final_heatmap;
  // Class-row patch scores after each layer (L entries, ungated).
  std::vector<std::vector<double>> layer_maps;
};

// Optional capture of every T^l and R^l for inspection.
struct PropagationTrace {
  std::vector<MatrixD> transitions;
  std::vector<MatrixD> relevance;
};

MatrixD head_average(const AttentionStack& stack, std::size_t layer);

// sum_h weights[h] * A^{l,h}
MatrixD weighted_head_sum(const AttentionStack& stack, std::size_t layer, std::span<const double> weights);

// A + I, not renormalized.
MatrixD residual_transition(const MatrixD& a);

// Prior modulation followed by row normalization (all-zero rows become uniform).
MatrixD dap_transition(const MatrixD& a_tilde, std::span<const double> prior, InjectionVariant variant);

PropagationResult propagate(const AttentionStack& stack, const DecisionPrior& prior, InjectionVariant variant,
                            PropagationTrace* trace = nullptr);

PropagationResult attention_rollout(const AttentionStack& stack, PropagationTrace* trace = nullptr);

// Per-head L1 norms of the target-logit gradients normalized to sum to one;
// uniform when every norm in the layer is zero.
std::vector<double> gmar_head_weights(std::span<const Matrix> head_grads);

// head_grads holds L*H gradient matrices indexed layer * H + head.
PropagationResult gmar_rollout(const AttentionStack& stack, std::span<const Matrix> head_grads,
                               PropagationTrace* trace = nullptr);

// CSV (layer, patch_index, score) of every layer map, layers numbered from 1.
std::string layer_maps_csv(const PropagationResult& result, std::string_view header_comment = {});

}  // namespace dap
