#pragma once

// Dense row-major matrices and the handful of numeric kernels shared by the
// model, the propagation code and the metrics.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "dap/error.hpp"

namespace dap {

template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data);
  BasicMatrix(std::initializer_list<std::initializer_list<T>> rows);

  static BasicMatrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_square() const noexcept { return rows_ == cols_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  void fill(T value);

  template <typename U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const BasicMatrix& a, const BasicMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

// What row_normalize does with a row whose sum is not positive.
enum class DegenerateRows {
  kThrow,    // DegenerateRowError
  kUniform,  // an all-zero row becomes 1/n; negative sums still throw
};

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

// a^T * b
template <typename T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

// a * b^T
template <typename T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

template <typename T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a);

template <typename T>
BasicMatrix<T> row_normalize(const BasicMatrix<T>& m, DegenerateRows policy = DegenerateRows::kThrow);

// Numerically stable softmax applied to every row in place.
template <typename T>
void softmax_rows(BasicMatrix<T>& m);

template <typename T>
bool all_finite(std::span<const T> values);

// Largest |row_sum - 1| over all rows.
template <typename T>
double max_row_sum_deviation(const BasicMatrix<T>& m);

template <typename T>
double max_abs_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

double max_abs_diff(std::span<const double> a, std::span<const double> b);

// Raw kernels on row-major buffers. out (m x n) += a (m x k) * b (k x n).
template <typename T>
void gemm_acc(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m,
              std::size_t k, std::size_t n);
// out (k x n) += a^T * b, a is (m x k), b is (m x n).
template <typename T>
void gemm_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m,
                 std::size_t k, std::size_t n);
// out (m x n) += a * b^T, a is (m x k), b is (n x k).
template <typename T>
void gemm_nt_acc(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m,
                 std::size_t k, std::size_t n);

// Fractional (average) ranks, 1-based.
std::vector<double> average_ranks(std::span<const double> values);

double pearson(std::span<const double> a, std::span<const double> b);

// Spearman rank correlation with average ranks for ties. Returns 0 when either
// input has zero rank variance.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace dap
