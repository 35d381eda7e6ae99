#pragma once

// Desk-scale Vision Transformer: pre-norm blocks, GELU MLP, learned positional
// embeddings, class-token readout. Forward captures every post-softmax
// attention map; backward is written by hand.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dap/attention.hpp"
#include "dap/data.hpp"
#include "dap/image.hpp"
#include "dap/tensor.hpp"
#include "json.hpp"

namespace dap {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t num_classes = 4;
  std::uint64_t seed = 42;

  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_side() * grid_side(); }
  std::size_t num_tokens() const { return num_patches() + 1; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const;  // throws ConfigError

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

void to_json(nlohmann::json& j, const ViTConfig& cfg);
void from_json(const nlohmann::json& j, ViTConfig& cfg);

template <typename T>
struct BasicBlockParams {
  BasicMatrix<T> ln1_gamma, ln1_beta;  // 1 x D
  BasicMatrix<T> qkv_weight;           // D x 3D, columns [q | k | v], heads contiguous
  BasicMatrix<T> qkv_bias;             // 1 x 3D
  BasicMatrix<T> proj_weight;          // D x D
  BasicMatrix<T> proj_bias;            // 1 x D
  BasicMatrix<T> ln2_gamma, ln2_beta;  // 1 x D
  BasicMatrix<T> mlp_weight1;          // D x M
  BasicMatrix<T> mlp_bias1;            // 1 x M
  BasicMatrix<T> mlp_weight2;          // M x D
  BasicMatrix<T> mlp_bias2;            // 1 x D
};

template <typename T>
struct BasicViTParams {
  ViTConfig config;
  BasicMatrix<T> patch_weight;  // patch_dim x D
  BasicMatrix<T> patch_bias;    // 1 x D
  BasicMatrix<T> class_token;   // 1 x D
  BasicMatrix<T> pos_embed;     // (P+1) x D
  std::vector<BasicBlockParams<T>> blocks;
  BasicMatrix<T> norm_gamma, norm_beta;  // 1 x D
  BasicMatrix<T> head_weight;            // D x K
  BasicMatrix<T> head_bias;              // 1 x K

  // Every tensor with a stable dotted name, in serialization order.
  std::vector<std::pair<std::string, BasicMatrix<T>*>> named_tensors();
  std::vector<std::pair<std::string, const BasicMatrix<T>*>> named_tensors() const;

  // Same layout, all zeros.
  BasicViTParams zeros_like() const;

  template <typename U>
  BasicViTParams<U> cast() const;

  std::size_t parameter_count() const;
};

using ViTParams = BasicViTParams<float>;

ViTParams init_params(const ViTConfig& cfg);

// FNV-1a over every tensor's bytes in named_tensors() order.
std::uint64_t params_checksum(const ViTParams& params);

template <typename T>
struct BasicBlockCache {
  BasicMatrix<T> input;                  // N x D residual stream entering the block
  BasicMatrix<T> ln1_out;                // N x D
  std::vector<T> ln1_mean, ln1_rstd;     // N
  BasicMatrix<T> qkv;                    // N x 3D
  std::vector<BasicMatrix<T>> attention; // H of N x N, post-softmax
  BasicMatrix<T> context;                // N x D, concatenated head outputs
  BasicMatrix<T> mid;                    // N x D, input + attention branch
  BasicMatrix<T> ln2_out;                // N x D
  std::vector<T> ln2_mean, ln2_rstd;
  BasicMatrix<T> hidden_pre;             // N x M before GELU
  BasicMatrix<T> hidden;                 // N x M after GELU
};

template <typename T>
struct BasicForwardTrace {
  std::vector<T> logits;
  AttentionStack attention;
  std::size_t predicted_class = 0;

  // Retained activations; empty when the forward ran in inference mode.
  BasicMatrix<T> patches;  // P x patch_dim
  std::vector<BasicBlockCache<T>> blocks;
  BasicMatrix<T> final_stream;  // N x D output of the last block
  BasicMatrix<T> final_norm;    // 1 x D normalized class token
  T final_mean{0}, final_rstd{0};

  bool has_activations() const { return !blocks.empty(); }

  // Grad-CAM feature site: patch rows of the last block's first LayerNorm
  // output (P x D), i.e. the features the final attention layer consumes.
  BasicMatrix<T> gradcam_features() const;
};

using ForwardTrace = BasicForwardTrace<float>;

template <typename T>
struct BasicForwardOptions {
  bool retain_activations = true;
  // Added to the Grad-CAM feature site (P x D) before it is consumed; used by
  // finite-difference checks.
  const BasicMatrix<T>* feature_offset = nullptr;
};

template <typename T>
BasicForwardTrace<T> forward(const BasicViTParams<T>& params, const Image& image,
                             const BasicForwardOptions<T>& options = {});

// Softmax class probabilities, no activations retained.
std::vector<double> predict_probabilities(const ViTParams& params, const Image& image);

template <typename T>
struct BasicGradientBundle {
  std::size_t class_index = 0;
  BasicMatrix<T> feature_grad;                  // P x D at the Grad-CAM site
  std::vector<BasicMatrix<T>> attention_grads;  // index layer * H + head, N x N
  std::optional<BasicViTParams<T>> param_grads;

  const BasicMatrix<T>& attention_grad(std::size_t layer, std::size_t head, std::size_t heads) const {
    return attention_grads[layer * heads + head];
  }
};

using GradientBundle = BasicGradientBundle<float>;

// Gradients of sum_c upstream[c] * logits[c].
template <typename T>
BasicGradientBundle<T> backward(const BasicViTParams<T>& params, const BasicForwardTrace<T>& trace,
                                std::span<const T> upstream, bool with_param_grads);

// Gradients of logits[class_idx].
template <typename T>
BasicGradientBundle<T> backward_class_score(const BasicViTParams<T>& params,
                                            const BasicForwardTrace<T>& trace, std::size_t class_idx,
                                            bool with_param_grads = false);

enum class Optimizer { kSgd, kAdam };

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 5e-4;
  double momentum = 0.9;  // Adam: first-moment decay
  Optimizer optimizer = Optimizer::kAdam;
  std::size_t batch_size = 16;
  double grad_clip = 0.0;  // global gradient-norm limit per step; 0 disables
  std::uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const TrainOptions& o);
void from_json(const nlohmann::json& j, TrainOptions& o);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  ViTParams params;
  std::vector<EpochLog> log;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

double evaluate_accuracy(const ViTParams& params, std::span<const Sample> samples);

// Cross-entropy minibatch training with Adam or SGD with momentum. Throws
// TrainingError on a non-finite loss.
TrainResult train(const ViTConfig& cfg, std::span<const Sample> train_set,
                  std::span<const Sample> val_set, const TrainOptions& options);

TrainResult train(const ViTConfig& cfg, const DatasetSpec& dataset, const TrainOptions& options);

// Checkpoint: "DAPCKPT1", u64 LE manifest length, UTF-8 JSON manifest (config
// plus {name, shape, offset} per tensor), then a little-endian float32 blob.
std::string serialize_checkpoint(const ViTParams& params);
ViTParams deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const ViTParams& params, const std::filesystem::path& path);
ViTParams load_checkpoint(const std::filesystem::path& path);

}  // namespace dap
