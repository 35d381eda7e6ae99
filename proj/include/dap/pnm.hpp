#pragma once

// Binary PGM (P5) / PPM (P6) images and heatmap rendering.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dap/heatmap.hpp"
#include "dap/image.hpp"

namespace dap {

// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct PnmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> bytes;

  friend bool operator==(const PnmImage& a, const PnmImage& b) {
    return a.width == b.width && a.height == b.height && a.channels == b.channels && a.bytes == b.bytes;
  }
};

using HeatmapImage = PnmImage;

enum class Interpolation { kNearest, kBilinear };

// `comment` (no newlines) is emitted as a '#' line in the header when non-empty.
std::string encode_pnm(const PnmImage& img, std::string_view comment = {});
PnmImage decode_pnm(std::string_view bytes);

void write_pnm(const std::filesystem::path& path, const PnmImage& img, std::string_view comment = {});
PnmImage read_pnm(const std::filesystem::path& path);

PnmImage to_pnm(const Image& img);
Image from_pnm(const PnmImage& img);

void write_image(const std::filesystem::path& path, const Image& img, std::string_view comment = {});
Image read_image(const std::filesystem::path& path);

// Min-max scales the map to [0, 255] and upsamples it to image_size. A
// constant map renders as uniform mid-gray (128).
HeatmapImage render_heatmap(const Heatmap& map, std::size_t image_size,
                            Interpolation mode = Interpolation::kBilinear);

}  // namespace dap
