#pragma once

#include <cstddef>
#include <vector>

#include "dap/tensor.hpp"

namespace dap {

// Post-softmax attention maps A^{l,h}, each (tokens x tokens), captured during
// one forward pass. Token 0 is the class token.
class AttentionStack {
 public:
  AttentionStack() = default;
  AttentionStack(std::size_t layers, std::size_t heads, std::size_t tokens);

  std::size_t num_layers() const noexcept { return layers_; }
  std::size_t num_heads() const noexcept { return heads_; }
  std::size_t num_tokens() const noexcept { return tokens_; }
  std::size_t num_patches() const noexcept { return tokens_ == 0 ? 0 : tokens_ - 1; }
  bool empty() const noexcept { return layers_ == 0; }

  Matrix& at(std::size_t layer, std::size_t head);
  const Matrix& at(std::size_t layer, std::size_t head) const;

 private:
  std::size_t layers_ = 0;
  std::size_t heads_ = 0;
  std::size_t tokens_ = 0;
  std::vector<Matrix> maps_;
};

}  // namespace dap
