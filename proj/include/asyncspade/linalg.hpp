// Copyright 2026 The AsyncSpade Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "asyncspade/errors.hpp"

namespace asyncspade {

/// Row-major dense matrix. Entries must be finite when constructed from data.
template <typename T>
class DenseMatrix {
 public:
  using value_type = T;

  DenseMatrix() = default;

  DenseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T{0}) {}

  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    for (const T& x : data_) {
      if (!std::isfinite(static_cast<double>(x))) throw ShapeError("DenseMatrix: non-finite entry");
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Contiguous (batch, heads, tokens, head_dim) tensor of 32-bit reals.
/// Element (b, h, t, d) lives at ((b*H + h)*T + t)*D + d.
struct Tensor4 {
  std::array<std::size_t, 4> dims{0, 0, 0, 0};
  std::vector<float> data;

  Tensor4() = default;
  explicit Tensor4(std::array<std::size_t, 4> d) : dims(d), data(d[0] * d[1] * d[2] * d[3], 0.0f) {}
  Tensor4(std::array<std::size_t, 4> d, std::vector<float> values) : dims(d), data(std::move(values)) {
    if (data.size() != dims[0] * dims[1] * dims[2] * dims[3]) throw ShapeError("Tensor4: data length mismatch");
  }

  std::size_t batch() const noexcept { return dims[0]; }
  std::size_t heads() const noexcept { return dims[1]; }
  std::size_t tokens() const noexcept { return dims[2]; }
  std::size_t head_dim() const noexcept { return dims[3]; }

  std::size_t index(std::size_t b, std::size_t h, std::size_t t, std::size_t d) const noexcept {
    return ((b * dims[1] + h) * dims[2] + t) * dims[3] + d;
  }

  std::span<const float> vec(std::size_t b, std::size_t h, std::size_t t) const {
    return {data.data() + index(b, h, t, 0), dims[3]};
  }
  std::span<float> vec(std::size_t b, std::size_t h, std::size_t t) {
    return {data.data() + index(b, h, t, 0), dims[3]};
  }

  bool operator==(const Tensor4&) const = default;
};

enum class Transpose { kNo, kYes };

/// Dense product a * b (or a * b^T). Accumulates in double with a fixed i-j-k loop order.
template <typename T>
DenseMatrix<T> matmul(const DenseMatrix<T>& a, const DenseMatrix<T>& b, Transpose transpose_b = Transpose::kNo) {
  const bool bt = transpose_b == Transpose::kYes;
  const std::size_t inner_b = bt ? b.cols() : b.rows();
  const std::size_t n = bt ? b.rows() : b.cols();
  if (a.cols() != inner_b) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " + std::to_string(inner_b));
  }
  DenseMatrix<T> out(a.rows(), n);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) {
        acc += static_cast<double>(a(i, k)) * static_cast<double>(bt ? b(j, k) : b(k, j));
      }
      out(i, j) = static_cast<T>(acc);
    }
  }
  return out;
}

/// out[m x n] = a[m x k] * b[n x k]^T for raw row-major float buffers, double accumulation.
inline void multiply_abt(std::span<const float> a, std::size_t m, std::size_t k, std::span<const float> b,
                         std::size_t n, std::span<double> out) {
  if (a.size() < m * k || b.size() < n * k || out.size() < m * n) throw ShapeError("multiply_abt: buffer too small");
  for (std::size_t i = 0; i < m; ++i) {
    const float* ai = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* bj = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t x = 0; x < k; ++x) acc += static_cast<double>(ai[x]) * static_cast<double>(bj[x]);
      out[i * n + j] = acc;
    }
  }
}

/// Solves g * x = b for symmetric positive-definite g via Cholesky (g = L L^T).
/// b may hold several right-hand sides as columns.
inline DenseMatrix<double> solve_spd(const DenseMatrix<double>& g, const DenseMatrix<double>& b) {
  const std::size_t n = g.rows();
  if (g.cols() != n) throw ShapeError("solve_spd: matrix is not square");
  if (b.rows() != n) throw ShapeError("solve_spd: right-hand side has " + std::to_string(b.rows()) + " rows, expected " + std::to_string(n));

  double scale = 1.0;
  for (double x : g.data()) scale = std::max(scale, std::abs(x));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(g(i, j) - g(j, i)) > 1e-9 * scale) throw ShapeError("solve_spd: matrix is not symmetric");
    }
  }

  DenseMatrix<double> l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = g(j, j);
    for (std::size_t k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
    if (!(pivot > 0.0)) {
      throw NotPositiveDefiniteError("solve_spd: non-positive pivot at column " + std::to_string(j));
    }
    const double d = std::sqrt(pivot);
    l(j, j) = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = g(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / d;
    }
  }

  DenseMatrix<double> x(n, b.cols());
  std::vector<double> y(n);
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = b(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
      y[i] = s / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
      x(ii, c) = s / l(ii, ii);
    }
  }
  return x;
}

namespace detail {

inline std::vector<double> softmax_impl(std::span<const double> v, const std::vector<bool>* mask) {
  std::vector<double> out(v.size(), 0.0);
  double max_v = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw ContractError("softmax: non-finite input");
    if (mask && !(*mask)[i]) continue;
    max_v = std::max(max_v, v[i]);
    any = true;
  }
  if (!any) throw EmptySupportError("softmax: every entry is masked");
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    out[i] = std::exp(v[i] - max_v);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

}  // namespace detail

/// Numerically stable softmax (max-subtracted).
inline std::vector<double> softmax(std::span<const double> v) { return detail::softmax_impl(v, nullptr); }

/// Softmax over the entries where mask is true; masked entries come out exactly 0.
inline std::vector<double> softmax(std::span<const double> v, const std::vector<bool>& mask) {
  if (mask.size() != v.size()) throw ShapeError("softmax: mask length mismatch");
  return detail::softmax_impl(v, &mask);
}

/// Indices of the k largest scores, returned in ascending index order.
/// Equal scores prefer the larger index (the more recent token).
inline std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  if (k > scores.size()) {
    throw BoundError("top_k: k=" + std::to_string(k) + " exceeds length " + std::to_string(scores.size()));
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a > b);
  };
  if (k < idx.size()) {
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace asyncspade
