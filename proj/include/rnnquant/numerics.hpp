// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices, elementwise activations, and the seeded generator
// that every stochastic component draws from.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rnnquant/errors.hpp"

namespace rnnquant {

/// Dense row-major matrix of doubles. Column vectors are n x 1 matrices.
///
/// Every constructor rejects non-finite entries, so a Matrix obtained from
/// any library operation never holds NaN or Inf.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(rows_, cols_));
    }
    check_finite();
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix column(std::vector<double> values) {
    const std::size_t n = values.size();
    return Matrix(n, 1, std::move(values));
  }

  static Matrix column(std::initializer_list<double> values) {
    return column(std::vector<double>(values));
  }

  static Matrix filled(std::size_t rows, std::size_t cols, double value) {
    return Matrix(rows, cols, std::vector<double>(rows * cols, value));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape() const { return shape_string(rows_, cols_); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols_, cols_); }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(*this, o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  void set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

  bool operator==(const Matrix& o) const = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

  static void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
      throw DimensionError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
  }

 private:
  void check_finite() const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i])) {
        throw DataError("non-finite matrix entry at flat index " + std::to_string(i));
      }
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// SplitMix64 generator (Steele, Lea & Flood 2014). The output sequence is
/// fully specified by the 64-bit seed and is identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) by rejection, free of modulo bias.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Fisher-Yates; independent of the standard library's shuffle algorithm.
  template <typename T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Scalar activations

namespace scalar {

inline constexpr double kBelowOne = 1.0 - 0x1.0p-53;  // largest double < 1
inline constexpr double kAboveZero = std::numeric_limits<double>::denorm_min();

/// Branch-stable logistic, clamped to the open interval (0, 1).
inline double sigmoid(double x) noexcept {
  double y;
  if (x >= 0.0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    y = e / (1.0 + e);
  }
  return std::clamp(y, kAboveZero, kBelowOne);
}

/// tanh clamped to the open interval (-1, 1).
inline double tanh(double x) noexcept { return std::clamp(std::tanh(x), -kBelowOne, kBelowOne); }

inline double relu(double x) noexcept { return x > 0.0 ? x : 0.0; }

}  // namespace scalar

// ---------------------------------------------------------------------------
// Matrix operations

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape mismatch " + a.shape() + " x " + b.shape());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  Matrix::require_same_shape(a, b, "hadamard");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  Matrix::require_same_shape(a, b, "add");
  Matrix out = a;
  out += b;
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename F>
Matrix map(const Matrix& x, F&& f) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

inline Matrix sigmoid(const Matrix& x) { return map(x, scalar::sigmoid); }
inline Matrix tanh_act(const Matrix& x) { return map(x, scalar::tanh); }
inline Matrix relu(const Matrix& x) { return map(x, scalar::relu); }

/// Glorot/Xavier uniform initialisation: U(-a, a) with a = sqrt(6 / (rows + cols)).
inline Matrix glorot_init(std::size_t rows, std::size_t cols, Rng& rng) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("glorot_init: zero dimension " + Matrix::shape_string(rows, cols));
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix out(rows, cols);
  for (double& v : out.data()) v = rng.uniform(-bound, bound);
  return out;
}

inline double sum_squares(const Matrix& m) noexcept {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return s;
}

// ---------------------------------------------------------------------------
// Unchecked kernels for the recurrent hot paths. Callers guarantee shapes.

namespace kernel {

/// out += W[:, col0 : col0 + v.size()] * v
inline void gemv_acc(const Matrix& w, std::size_t col0, std::span<const double> v,
                     std::span<double> out) noexcept {
  const std::size_t n = v.size();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double* row = w.data().data() + i * w.cols() + col0;
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * v[j];
    out[i] += acc;
  }
}

/// out += W[:, col0 : col0 + out.size()]^T * d
inline void gemv_t_acc(const Matrix& w, std::size_t col0, std::span<const double> d,
                       std::span<double> out) noexcept {
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double di = d[i];
    if (di == 0.0) continue;
    const double* row = w.data().data() + i * w.cols() + col0;
    for (std::size_t j = 0; j < n; ++j) out[j] += row[j] * di;
  }
}

/// G[:, col0 : col0 + v.size()] += d * v^T
inline void outer_acc(Matrix& g, std::size_t col0, std::span<const double> d,
                      std::span<const double> v) noexcept {
  const std::size_t n = v.size();
  for (std::size_t i = 0; i < g.rows(); ++i) {
    const double di = d[i];
    if (di == 0.0) continue;
    double* row = g.data().data() + i * g.cols() + col0;
    for (std::size_t j = 0; j < n; ++j) row[j] += di * v[j];
  }
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) noexcept {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

}  // namespace kernel

}  // namespace rnnquant
