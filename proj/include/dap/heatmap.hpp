#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace dap {

// Patch attribution scores on a grid_side x grid_side patch grid, row-major.
struct Heatmap {
  std::vector<double> values;
  std::size_t grid_side = 0;

  Heatmap() = default;
  Heatmap(std::vector<double> v, std::size_t side);

  std::size_t size() const noexcept { return values.size(); }
  std::span<const double> view() const noexcept { return values; }

  friend bool operator==(const Heatmap&, const Heatmap&) = default;
};

// Min-max scaling to [0, 1]. A constant input maps to `flat_value` everywhere.
std::vector<double> min_max_scaled(std::span<const double> v, double flat_value = 1.0);

// Side length of a square grid holding n cells; throws ShapeError otherwise.
std::size_t square_side(std::size_t n);

}  // namespace dap
