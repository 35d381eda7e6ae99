#include "dap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

namespace dap {

namespace {

std::string dims(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
void require_finite(const BasicMatrix<T>& m, const char* op) {
  if (!all_finite<T>(m.data())) throw InputError(std::string(op) + ": non-finite value");
}

}  // namespace

template <typename T>
BasicMatrix<T>::BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix " + dims(rows_, cols_) + " given " + std::to_string(data_.size()) +
                     " values");
  }
}

template <typename T>
BasicMatrix<T>::BasicMatrix(std::initializer_list<std::initializer_list<T>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

template <typename T>
BasicMatrix<T> BasicMatrix<T>::identity(std::size_t n) {
  BasicMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
  return m;
}

template <typename T>
void BasicMatrix<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

namespace {

typedef float VecF __attribute__((vector_size(64)));
typedef double VecD __attribute__((vector_size(64)));

template <typename T>
struct VecOf;
template <>
struct VecOf<float> {
  using type = VecF;
};
template <>
struct VecOf<double> {
  using type = VecD;
};
template <typename T>
using Vec = typename VecOf<T>::type;

template <typename T>
inline Vec<T> load_vec(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T>
inline void store_vec(T* p, const Vec<T>& v) {
  std::memcpy(p, &v, sizeof(v));
}

// Register-blocked R x (V * lanes) tile. Each element still sums over p in
// order, so results match the plain loop bit for bit.
template <typename T, std::size_t R, std::size_t V>
void gemm_tile(const T* a, const T* b, T* out, std::size_t k, std::size_t n) {
  constexpr std::size_t lanes = sizeof(Vec<T>) / sizeof(T);
  Vec<T> acc[R][V];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < V; ++v) acc[r][v] = load_vec(out + r * n + v * lanes);
  for (std::size_t p = 0; p < k; ++p) {
    Vec<T> bv[V];
    for (std::size_t v = 0; v < V; ++v) bv[v] = load_vec(b + p * n + v * lanes);
    for (std::size_t r = 0; r < R; ++r) {
      const T av = a[r * k + p];
      for (std::size_t v = 0; v < V; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < V; ++v) store_vec(out + r * n + v * lanes, acc[r][v]);
}

template <typename T>
void gemm_edge(const T* a, const T* b, T* out, std::size_t rows, std::size_t cols, std::size_t k,
               std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* orow = out + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[r * k + p];
      const T* brow = b + p * n;
      for (std::size_t c = 0; c < cols; ++c) orow[c] += av * brow[c];
    }
  }
}

}  // namespace

template <typename T>
void gemm_acc(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m,
              std::size_t k, std::size_t n) {
  constexpr std::size_t R = 4;
  constexpr std::size_t lanes = sizeof(Vec<T>) / sizeof(T);
  std::size_t i = 0;
  for (; i + R <= m; i += R) {
    std::size_t j = 0;
    for (; j + 2 * lanes <= n; j += 2 * lanes)
      gemm_tile<T, R, 2>(a.data() + i * k, b.data() + j, out.data() + i * n + j, k, n);
    for (; j + lanes <= n; j += lanes)
      gemm_tile<T, R, 1>(a.data() + i * k, b.data() + j, out.data() + i * n + j, k, n);
    if (j < n) gemm_edge<T>(a.data() + i * k, b.data() + j, out.data() + i * n + j, R, n - j, k, n);
  }
  if (i < m) gemm_edge<T>(a.data() + i * k, b.data(), out.data() + i * n, m - i, n, k, n);
}

template <typename T>
void gemm_tn_acc(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m,
                 std::size_t k, std::size_t n) {
  // out (k x n) += a^T b with a (m x k): transpose a, then a plain product.
  std::vector<T> at(k * m);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < k; ++i) at[i * m + r] = a[r * k + i];
  gemm_acc<T>(at, b, out, k, m, n);
}

template <typename T>
void gemm_nt_acc(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m,
                 std::size_t k, std::size_t n) {
  // Transpose b once so the inner loop streams contiguous rows.
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_acc<T>(a, bt, out, m, k, n);
}

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul " + dims(a.rows(), a.cols()) + " * " + dims(b.rows(), b.cols()));
  }
  BasicMatrix<T> out(a.rows(), b.cols());
  gemm_acc<T>(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  require_finite(out, "matmul");
  return out;
}

template <typename T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn " + dims(a.rows(), a.cols()) + " * " + dims(b.rows(), b.cols()));
  }
  BasicMatrix<T> out(a.cols(), b.cols());
  gemm_tn_acc<T>(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  return out;
}

template <typename T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt " + dims(a.rows(), a.cols()) + " * " + dims(b.rows(), b.cols()));
  }
  BasicMatrix<T> out(a.rows(), b.rows());
  gemm_nt_acc<T>(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.rows());
  return out;
}

template <typename T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("add " + dims(a.rows(), a.cols()) + " + " + dims(b.rows(), b.cols()));
  }
  BasicMatrix<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
BasicMatrix<T> row_normalize(const BasicMatrix<T>& m, DegenerateRows policy) {
  BasicMatrix<T> out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = out.row(i);
    T sum{0};
    for (T v : row) sum += v;
    if (!(sum > T{0})) {
      const bool all_zero = std::all_of(row.begin(), row.end(), [](T v) { return v == T{0}; });
      if (policy == DegenerateRows::kUniform && all_zero) {
        std::fill(row.begin(), row.end(), T{1} / static_cast<T>(row.size()));
        continue;
      }
      throw DegenerateRowError("row " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
    for (T& v : row) v /= sum;
  }
  require_finite(out, "row_normalize");
  return out;
}

template <typename T>
void softmax_rows(BasicMatrix<T>& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum{0};
    for (T& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    const T inv = T{1} / sum;
    for (T& v : row) v *= inv;
  }
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
double max_row_sum_deviation(const BasicMatrix<T>& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sum = 0.0;
    for (T v : m.row(i)) sum += static_cast<double>(v);
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  return worst;
}

template <typename T>
double max_abs_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_abs_diff shape mismatch");
  return max_abs_diff(std::span<const double>(a.template cast<double>().storage()),
                      std::span<const double>(b.template cast<double>().storage()));
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // positions i..j-1 share the mean of ranks i+1..j
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = rank;
    i = j;
  }
  return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("pearson length mismatch");
  if (a.size() < 2) throw InputError("pearson needs at least two samples");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("spearman length mismatch");
  if (a.size() < 2) throw InputError("spearman needs at least two samples");
  if (!all_finite(a) || !all_finite(b)) throw InputError("spearman: non-finite input");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

#define DAP_INSTANTIATE(T)                                                                       \
  template class BasicMatrix<T>;                                                                 \
  template BasicMatrix<T> matmul(const BasicMatrix<T>&, const BasicMatrix<T>&);                  \
  template BasicMatrix<T> matmul_tn(const BasicMatrix<T>&, const BasicMatrix<T>&);               \
  template BasicMatrix<T> matmul_nt(const BasicMatrix<T>&, const BasicMatrix<T>&);               \
  template BasicMatrix<T> add(const BasicMatrix<T>&, const BasicMatrix<T>&);                     \
  template BasicMatrix<T> transpose(const BasicMatrix<T>&);                                      \
  template BasicMatrix<T> row_normalize(const BasicMatrix<T>&, DegenerateRows);                  \
  template void softmax_rows(BasicMatrix<T>&);                                                   \
  template bool all_finite(std::span<const T>);                                                  \
  template double max_row_sum_deviation(const BasicMatrix<T>&);                                  \
  template double max_abs_diff(const BasicMatrix<T>&, const BasicMatrix<T>&);                    \
  template void gemm_acc(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,      \
                         std::size_t, std::size_t);                                              \
  template void gemm_tn_acc(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,   \
                            std::size_t, std::size_t);                                           \
  template void gemm_nt_acc(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,   \
                            std::size_t, std::size_t);

DAP_INSTANTIATE(float)
DAP_INSTANTIATE(double)

#undef DAP_INSTANTIATE

}  // namespace dap
