#include "dap/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dap/attention.hpp"
#include "dap/error.hpp"

namespace dap {

Heatmap::Heatmap(std::vector<double> v, std::size_t side) : values(std::move(v)), grid_side(side) {
  if (values.size() != grid_side * grid_side) {
    throw ShapeError("heatmap of " + std::to_string(values.size()) + " values on a " +
                     std::to_string(grid_side) + "-wide grid");
  }
}

std::vector<double> min_max_scaled(std::span<const double> v, double flat_value) {
  std::vector<double> out(v.begin(), v.end());
  if (out.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double mn = *lo;
  const double range = *hi - *lo;
  if (!(range > 0.0)) {
    std::fill(out.begin(), out.end(), flat_value);
    return out;
  }
  for (double& x : out) x = (x - mn) / range;
  return out;
}

std::size_t square_side(std::size_t n) {
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) throw ShapeError(std::to_string(n) + " is not a perfect square");
  return side;
}

AttentionStack::AttentionStack(std::size_t layers, std::size_t heads, std::size_t tokens)
    : layers_(layers), heads_(heads), tokens_(tokens), maps_(layers * heads, Matrix(tokens, tokens)) {}

Matrix& AttentionStack::at(std::size_t layer, std::size_t head) {
  if (layer >= layers_ || head >= heads_) throw InputError("attention index out of range");
  return maps_[layer * heads_ + head];
}

const Matrix& AttentionStack::at(std::size_t layer, std::size_t head) const {
  if (layer >= layers_ || head >= heads_) throw InputError("attention index out of range");
  return maps_[layer * heads_ + head];
}

}  // namespace dap
