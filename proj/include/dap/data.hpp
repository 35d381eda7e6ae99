#pragma once

// Synthetic shape-localization dataset. Every sample is a pure function of
// (DatasetSpec, split, index), so splits can be regenerated anywhere.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dap/image.hpp"
#include "json.hpp"

namespace dap {

enum class ShapeKind { kSquare, kDisk, kCross, kTriangle, kRing, kDiamond };

inline constexpr std::size_t kMaxShapeClasses = 6;

std::string_view shape_name(ShapeKind kind);

enum class Split { kTrain, kVal, kEval };

std::string_view split_name(Split split);

// Inclusive rectangle in patch coordinates.
struct PatchBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool contains(std::size_t patch_index, std::size_t grid_side) const {
    const std::size_t px = patch_index % grid_side;
    const std::size_t py = patch_index / grid_side;
    return px >= x0 && px <= x1 && py >= y0 && py <= y1;
  }
  std::size_t area() const { return (x1 - x0 + 1) * (y1 - y0 + 1); }

  friend bool operator==(const PatchBox&, const PatchBox&) = default;
};

struct DatasetSpec {
  std::size_t num_classes = 4;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 4;  // only used to express object boxes in patch units
  std::size_t min_object = 13;
  std::size_t max_object = 16;
  double background = 0.2;
  double noise_std = 0.1;
  std::uint64_t seed = 7;
  std::size_t train_size = 4000;
  std::size_t val_size = 400;
  std::size_t eval_size = 400;

  std::size_t split_size(Split split) const;
  std::size_t grid_side() const { return image_size / patch_size; }
  void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const DatasetSpec& spec);
void from_json(const nlohmann::json& j, DatasetSpec& spec);

struct Sample {
  Image image;
  std::size_t label = 0;
  PatchBox object_box;
  std::size_t index = 0;
  // Per-pixel object membership (height x width).
  std::vector<std::uint8_t> object_mask;
};

// Labels of a split: each class appears floor(n/k) or ceil(n/k) times (exactly
// n/k when divisible), in a seeded order.
std::vector<std::size_t> split_labels(const DatasetSpec& spec, Split split);

Sample generate_sample(const DatasetSpec& spec, Split split, std::size_t index);

std::vector<Sample> generate_split(const DatasetSpec& spec, Split split);

// Stream over one split; yields samples in index order.
class SampleStream {
 public:
  SampleStream(DatasetSpec spec, Split split);
  bool has_next() const { return next_ < labels_.size(); }
  Sample next();

 private:
  DatasetSpec spec_;
  Split split_;
  std::vector<std::size_t> labels_;
  std::size_t next_ = 0;
};

// FNV-1a over the float bytes of every image plus labels.
std::uint64_t split_checksum(const std::vector<Sample>& samples);

// Spec plus per-split checksums.
nlohmann::json dataset_manifest(const DatasetSpec& spec);

std::string hex64(std::uint64_t v);

// FNV-1a, 64-bit.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace dap
