/* Copyright 2026 The L4Q Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace l4q {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Dense row-major matrix. Activations are stored as (features x tokens), with
// sequence and batch dimensions flattened into the column dimension.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline void require_same_shape(std::size_t r0, std::size_t c0, std::size_t r1,
                               std::size_t c1, const char* what) {
  if (r0 != r1 || c0 != c1) {
    throw ShapeError(std::string(what) + ": shape " + std::to_string(r0) +
                     "x" + std::to_string(c0) + " vs " + std::to_string(r1) +
                     "x" + std::to_string(c1));
  }
}

// Upper bound on worker threads for matmul, read from L4Q_THREADS.
inline std::size_t max_threads() {
  static const std::size_t n = [] {
    const char* env = std::getenv("L4Q_THREADS");
    if (env == nullptr) return std::size_t{1};
    const long v = std::strtol(env, nullptr, 10);
    return v > 0 ? static_cast<std::size_t>(v) : std::size_t{1};
  }();
  return n;
}

namespace detail {

// Rows [begin, end) of lhs * rhs. Each output element is accumulated in double
// over k in increasing order, independent of how rows are split across threads.
template <typename T>
void matmul_rows(const Matrix<T>& lhs, const Matrix<T>& rhs, Matrix<T>& out,
                 std::size_t begin, std::size_t end) {
  const std::size_t inner = lhs.cols();
  const std::size_t n = rhs.cols();
  std::vector<double> acc(n);
  for (std::size_t i = begin; i < end; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const auto a = lhs.row(i);
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = static_cast<double>(a[k]);
      if (aik == 0.0) continue;
      const auto b = rhs.row(k);
      for (std::size_t j = 0; j < n; ++j) acc[j] += aik * static_cast<double>(b[j]);
    }
    auto o = out.row(i);
    for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<T>(acc[j]);
  }
}

}  // namespace detail

template <typename T>
Matrix<T> matmul(const Matrix<T>& lhs, const Matrix<T>& rhs) {
  if (lhs.cols() != rhs.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(lhs.cols()) +
                     " and " + std::to_string(rhs.rows()) + " differ");
  }
  Matrix<T> out(lhs.rows(), rhs.cols());
  const std::size_t work = lhs.rows() * lhs.cols() * rhs.cols();
  const std::size_t threads = std::min(max_threads(), lhs.rows());
  if (threads <= 1 || work < (std::size_t{1} << 18)) {
    detail::matmul_rows(lhs, rhs, out, 0, lhs.rows());
    return out;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (lhs.rows() + threads - 1) / threads;
  for (std::size_t begin = 0; begin < lhs.rows(); begin += chunk) {
    const std::size_t end = std::min(lhs.rows(), begin + chunk);
    pool.emplace_back([&, begin, end] {
      detail::matmul_rows(lhs, rhs, out, begin, end);
    });
  }
  return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& m) {
  Matrix<T> out(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
  return out;
}

template <typename T>
Matrix<T> operator+(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
  Matrix<T> out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return out;
}

template <typename T>
Matrix<T> operator-(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
  Matrix<T> out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return out;
}

template <typename T>
Matrix<T> scaled(const Matrix<T>& a, T factor) {
  Matrix<T> out = a;
  for (auto& v : out.values()) v *= factor;
  return out;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "hadamard");
  Matrix<T> out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return out;
}

template <typename T>
double sum(const Matrix<T>& m) {
  double s = 0.0;
  for (T v : m.values()) s += static_cast<double>(v);
  return s;
}

template <typename T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "max_abs_diff");
  double d = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i)
    d = std::max(d, std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i])));
  return d;
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](T v) { return std::isfinite(v); });
}

// Counter-based generator: output k is splitmix64(seed + k * golden), so the
// stream depends only on (seed, counter) and is identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Derive an independent stream, e.g. one per dataset or layer.
  Rng fork(std::uint64_t salt) { return Rng(next_u64() ^ (salt * 0xD1B54A32D192ED03ULL)); }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

template <typename T>
Matrix<T> randn(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  if (!(stddev >= 0.0)) throw Error("randn: negative standard deviation");
  Matrix<T> out(rows, cols);
  for (auto& v : out.values()) v = static_cast<T>(stddev * rng.normal());
  return out;
}

template <typename T>
Matrix<T> rand_uniform(Rng& rng, std::size_t rows, std::size_t cols, double lo,
                       double hi) {
  Matrix<T> out(rows, cols);
  for (auto& v : out.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return out;
}

}  // namespace l4q
