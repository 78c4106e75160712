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

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "l4q/numerics.hpp"

namespace l4q {

class QuantError : public Error {
 public:
  using Error::Error;
};

enum class Rounding { kHalfToEven };

// Uniform signed quantizer for n-bit codes in [q_n, q_p].
struct QuantSpec {
  int n_bits = 4;
  std::size_t group_size = 128;
  Rounding rounding = Rounding::kHalfToEven;

  QuantSpec() = default;
  QuantSpec(int bits, std::size_t group) : n_bits(bits), group_size(group) {
    validate();
  }

  int q_n() const { return -(1 << (n_bits - 1)); }
  int q_p() const { return (1 << (n_bits - 1)) - 1; }

  void validate() const {
    if (n_bits < 2 || n_bits > 8) {
      throw QuantError("n_bits must be in [2, 8], got " + std::to_string(n_bits));
    }
    if (group_size == 0) throw QuantError("group_size must be positive");
  }

  void check_columns(std::size_t cols) const {
    if (cols % group_size != 0) {
      throw QuantError("group_size " + std::to_string(group_size) +
                       " does not divide input dimension " + std::to_string(cols));
    }
  }

  bool operator==(const QuantSpec&) const = default;
};

// One (scale, bias) pair per run of group_size consecutive elements along each
// row. Group g of row r covers columns [g * group_size, (g + 1) * group_size).
template <typename T>
struct GroupParams {
  std::size_t rows = 0;
  std::size_t groups_per_row = 0;
  std::vector<T> scales;
  std::vector<T> biases;

  GroupParams() = default;
  GroupParams(std::size_t r, std::size_t gpr, T scale = T(1), T bias = T(0))
      : rows(r), groups_per_row(gpr), scales(r * gpr, scale), biases(r * gpr, bias) {}

  std::size_t count() const { return rows * groups_per_row; }
  std::size_t index(std::size_t row, std::size_t col, std::size_t group_size) const {
    return row * groups_per_row + col / group_size;
  }

  void check(std::size_t w_rows, std::size_t w_cols, const QuantSpec& spec) const {
    spec.check_columns(w_cols);
    if (rows != w_rows || groups_per_row != w_cols / spec.group_size ||
        scales.size() != count() || biases.size() != count()) {
      throw ShapeError("group params " + std::to_string(rows) + "x" +
                       std::to_string(groups_per_row) + " do not match weight " +
                       std::to_string(w_rows) + "x" + std::to_string(w_cols) +
                       " with group size " + std::to_string(spec.group_size));
    }
    for (T s : scales) {
      if (!(s > T(0))) throw QuantError("quantization scale must be positive");
    }
  }

  template <typename U>
  GroupParams<U> cast() const {
    GroupParams<U> out;
    out.rows = rows;
    out.groups_per_row = groups_per_row;
    out.scales.assign(scales.begin(), scales.end());
    out.biases.assign(biases.begin(), biases.end());
    return out;
  }

  bool operator==(const GroupParams&) const = default;
};

struct QuantCodes {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int8_t> values;

  std::int8_t operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  bool operator==(const QuantCodes&) const = default;
};

// The pre-round value w = (W - b) / s. Every range test goes through this one
// expression so that initialization, quantization and error metrics agree
// bit-for-bit on which elements are clipped.
template <typename T>
inline T scaled_value(T w, T scale, T bias) {
  return (w - bias) / scale;
}

template <typename T>
inline bool in_range(T w_scaled, const QuantSpec& spec) {
  return w_scaled >= static_cast<T>(spec.q_n()) && w_scaled <= static_cast<T>(spec.q_p());
}

template <typename T>
inline std::int8_t quantize_value(T w_scaled, const QuantSpec& spec) {
  const T clamped = std::clamp(w_scaled, static_cast<T>(spec.q_n()),
                               static_cast<T>(spec.q_p()));
  return static_cast<std::int8_t>(std::nearbyint(clamped));
}

template <typename T>
QuantCodes quantize(const Matrix<T>& w, const GroupParams<T>& params,
                    const QuantSpec& spec) {
  params.check(w.rows(), w.cols(), spec);
  QuantCodes codes{w.rows(), w.cols(), std::vector<std::int8_t>(w.size())};
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const std::size_t g = params.index(r, c, spec.group_size);
      codes.values[r * w.cols() + c] =
          quantize_value(scaled_value(w(r, c), params.scales[g], params.biases[g]), spec);
    }
  }
  return codes;
}

template <typename T>
Matrix<T> dequantize(const QuantCodes& codes, const GroupParams<T>& params,
                     std::size_t group_size) {
  if (group_size == 0 || codes.cols % group_size != 0 || params.rows != codes.rows ||
      params.groups_per_row != codes.cols / group_size ||
      params.scales.size() != params.count() || params.biases.size() != params.count()) {
    throw ShapeError("dequantize: group params do not match codes shape");
  }
  Matrix<T> out(codes.rows, codes.cols);
  for (std::size_t r = 0; r < codes.rows; ++r) {
    for (std::size_t c = 0; c < codes.cols; ++c) {
      const std::size_t g = params.index(r, c, group_size);
      out(r, c) = static_cast<T>(codes(r, c)) * params.scales[g] + params.biases[g];
    }
  }
  return out;
}

// Codes are laid out as a little-endian bit stream: code k occupies bits
// [k * n, (k + 1) * n). For n = 4 this puts the first code in the low nibble.
inline std::size_t packed_size(std::size_t count, int n_bits) {
  return (count * static_cast<std::size_t>(n_bits) + 7) / 8;
}

inline std::vector<std::uint8_t> pack(std::span<const std::int8_t> codes,
                                      const QuantSpec& spec) {
  spec.validate();
  const unsigned n = static_cast<unsigned>(spec.n_bits);
  const unsigned mask = (1u << n) - 1u;
  std::vector<std::uint8_t> out(packed_size(codes.size(), spec.n_bits), 0);
  std::size_t bit = 0;
  for (std::int8_t code : codes) {
    if (code < spec.q_n() || code > spec.q_p()) {
      throw QuantError("pack: code " + std::to_string(code) + " outside [" +
                       std::to_string(spec.q_n()) + ", " + std::to_string(spec.q_p()) + "]");
    }
    const unsigned u = static_cast<unsigned>(code) & mask;
    const std::size_t byte = bit / 8;
    const unsigned shift = bit % 8;
    out[byte] |= static_cast<std::uint8_t>(u << shift);
    if (shift + n > 8) out[byte + 1] |= static_cast<std::uint8_t>(u >> (8 - shift));
    bit += n;
  }
  return out;
}

inline std::vector<std::int8_t> unpack(std::span<const std::uint8_t> bytes,
                                       const QuantSpec& spec, std::size_t count) {
  spec.validate();
  const std::size_t need = packed_size(count, spec.n_bits);
  if (bytes.size() < need) {
    throw QuantError("unpack: truncated stream, need " + std::to_string(need) +
                     " bytes, have " + std::to_string(bytes.size()));
  }
  if (bytes.size() > need) {
    throw QuantError("unpack: " + std::to_string(bytes.size() - need) + " trailing bytes");
  }
  const unsigned n = static_cast<unsigned>(spec.n_bits);
  const unsigned mask = (1u << n) - 1u;
  const unsigned sign = 1u << (n - 1);
  std::vector<std::int8_t> out(count);
  std::size_t bit = 0;
  for (std::size_t k = 0; k < count; ++k, bit += n) {
    const std::size_t byte = bit / 8;
    const unsigned shift = bit % 8;
    unsigned u = static_cast<unsigned>(bytes[byte]) >> shift;
    if (shift + n > 8) u |= static_cast<unsigned>(bytes[byte + 1]) << (8 - shift);
    u &= mask;
    const int v = (u & sign) ? static_cast<int>(u) - static_cast<int>(1u << n)
                             : static_cast<int>(u);
    out[k] = static_cast<std::int8_t>(v);
  }
  return out;
}

// Bit-packed codes together with everything needed to dequantize them.
template <typename T>
struct PackedQuantTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  QuantSpec spec;
  GroupParams<T> params;
  std::vector<std::uint8_t> packed;

  static PackedQuantTensor from_codes(const QuantCodes& codes, GroupParams<T> params,
                                      const QuantSpec& spec) {
    PackedQuantTensor t;
    t.rows = codes.rows;
    t.cols = codes.cols;
    t.spec = spec;
    t.params = std::move(params);
    t.packed = pack(codes.values, spec);
    return t;
  }

  QuantCodes codes() const {
    return QuantCodes{rows, cols, unpack(packed, spec, rows * cols)};
  }

  Matrix<T> dequantized() const { return dequantize(codes(), params, spec.group_size); }

  bool operator==(const PackedQuantTensor&) const = default;
};

struct QuantErrors {
  double quant = 0.0;
  double clip = 0.0;
};

// L1 quantization error, and the part of it coming from clamped elements.
template <typename T>
QuantErrors quant_errors(const Matrix<T>& w, const GroupParams<T>& params,
                         const QuantSpec& spec) {
  params.check(w.rows(), w.cols(), spec);
  QuantErrors e;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const std::size_t g = params.index(r, c, spec.group_size);
      const T s = params.scales[g];
      const T b = params.biases[g];
      const T ws = scaled_value(w(r, c), s, b);
      const T wq = static_cast<T>(quantize_value(ws, spec)) * s + b;
      const double err = std::abs(static_cast<double>(w(r, c)) - static_cast<double>(wq));
      e.quant += err;
      if (!in_range(ws, spec)) e.clip += err;
    }
  }
  return e;
}

template <typename T>
double quant_error(const Matrix<T>& w, const GroupParams<T>& params, const QuantSpec& spec) {
  return quant_errors(w, params, spec).quant;
}

template <typename T>
double clip_error(const Matrix<T>& w, const GroupParams<T>& params, const QuantSpec& spec) {
  return quant_errors(w, params, spec).clip;
}

}  // namespace l4q
