#include "xldg/numcore/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace xldg::num {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {
void check_extents(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_to_string(shape));
    }
  }
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_to_string(shape_) + " needs " +
                         std::to_string(shape_size(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() needs a one-element tensor, got " +
                         shape_to_string(shape_));
  }
  return data_[0];
}

void Tensor::fill(double value) {
  for (auto& x : data_) x = value;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) +
                         " to " + shape_to_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

bool Tensor::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileVecs = 2;
constexpr std::size_t kTileCols = 4 * kTileVecs;

using Vec4 = double __attribute__((vector_size(32)));

// Full kTileRows x kTileCols tile of c += a * b, accumulated in registers.
inline void gemm_tile(std::size_t k, std::size_t n, const double* __restrict a,
                      const double* __restrict b, double* __restrict c) {
  Vec4 acc[kTileRows][kTileVecs];
  for (std::size_t r = 0; r < kTileRows; ++r) {
    for (std::size_t v = 0; v < kTileVecs; ++v) std::memcpy(&acc[r][v], c + r * n + 4 * v, sizeof(Vec4));
  }
  for (std::size_t p = 0; p < k; ++p) {
    Vec4 bv[kTileVecs];
    for (std::size_t v = 0; v < kTileVecs; ++v) std::memcpy(&bv[v], b + p * n + 4 * v, sizeof(Vec4));
    for (std::size_t r = 0; r < kTileRows; ++r) {
      const double av = a[r * k + p];
      const Vec4 as = {av, av, av, av};
      for (std::size_t v = 0; v < kTileVecs; ++v) acc[r][v] += as * bv[v];
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r) {
    for (std::size_t v = 0; v < kTileVecs; ++v) std::memcpy(c + r * n + 4 * v, &acc[r][v], sizeof(Vec4));
  }
}

inline void gemm_edge(std::size_t rows, std::size_t cols, std::size_t k, std::size_t n,
                      const double* __restrict a, const double* __restrict b,
                      double* __restrict c) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[r * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < cols; ++j) c[r * n + j] += av * bp[j];
    }
  }
}

std::vector<double> transpose(std::size_t rows, std::size_t cols, const double* src) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  }
  return out;
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a,
             const double* __restrict b, double* __restrict c) {
  const std::size_t m_full = m - m % kTileRows;
  const std::size_t n_full = n - n % kTileCols;
  for (std::size_t i = 0; i < m_full; i += kTileRows) {
    for (std::size_t j = 0; j < n_full; j += kTileCols) {
      gemm_tile(k, n, a + i * k, b + j, c + i * n + j);
    }
    if (n_full < n) gemm_edge(kTileRows, n - n_full, k, n, a + i * k, b + n_full, c + i * n + n_full);
  }
  if (m_full < m) gemm_edge(m - m_full, n, k, n, a + m_full * k, b, c + m_full * n);
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a,
             const double* __restrict b, double* __restrict c) {
  const auto bt = transpose(n, k, b);
  gemm_nn(m, k, n, a, bt.data(), c);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a,
             const double* __restrict b, double* __restrict c) {
  const auto at = transpose(m, k, a);
  gemm_nn(k, m, n, at.data(), b, c);
}

}  // namespace xldg::num
