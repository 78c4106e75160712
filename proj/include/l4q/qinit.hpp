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
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "l4q/quantizer.hpp"

namespace l4q {

enum class InitScheme { kLsqPlus, kSymm, kAsymm, kL4Q };

inline constexpr std::array<InitScheme, 4> kAllInitSchemes = {
    InitScheme::kLsqPlus, InitScheme::kSymm, InitScheme::kAsymm, InitScheme::kL4Q};

inline std::string_view to_string(InitScheme s) {
  switch (s) {
    case InitScheme::kLsqPlus: return "lsq+";
    case InitScheme::kSymm: return "symm";
    case InitScheme::kAsymm: return "asymm";
    case InitScheme::kL4Q: return "l4q";
  }
  return "?";
}

inline std::optional<InitScheme> parse_init_scheme(std::string_view name) {
  for (InitScheme s : kAllInitSchemes)
    if (to_string(s) == name) return s;
  if (name == "lsqplus" || name == "lsq") return InitScheme::kLsqPlus;
  return std::nullopt;
}

// Scale floor for groups whose range collapses to zero.
inline constexpr double kScaleFloor = 1e-8;

template <typename T>
struct GroupInit {
  T scale;
  T bias;
  bool degenerate = false;
};

namespace detail {

// Grow the scale by single ulps until every element maps inside [q_n, q_p]
// under the exact floating-point expression used by the quantizer.
template <typename T, typename BiasFn>
void widen_until_unclipped(std::span<const T> values, T& scale, T& bias,
                           const QuantSpec& spec, BiasFn bias_for) {
  for (int iter = 0; iter < 64; ++iter) {
    bias = bias_for(scale);
    const bool ok = std::all_of(values.begin(), values.end(), [&](T v) {
      return in_range(scaled_value(v, scale, bias), spec);
    });
    if (ok) return;
    scale = std::nextafter(scale, std::numeric_limits<T>::infinity());
  }
}

}  // namespace detail

template <typename T>
GroupInit<T> init_group(std::span<const T> group, InitScheme scheme, const QuantSpec& spec) {
  if (group.empty()) throw QuantError("init_group: empty group");
  const auto [lo_it, hi_it] = std::minmax_element(group.begin(), group.end());
  const T lo = *lo_it;
  const T hi = *hi_it;
  const T qn = static_cast<T>(spec.q_n());
  const T qp = static_cast<T>(spec.q_p());
  const T half_range = static_cast<T>(1 << (spec.n_bits - 1));

  T scale = T(0);
  switch (scheme) {
    case InitScheme::kLsqPlus: {
      double mean = 0.0;
      for (T v : group) mean += static_cast<double>(v);
      mean /= static_cast<double>(group.size());
      double var = 0.0;
      for (T v : group) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
      const double sigma = std::sqrt(var / static_cast<double>(group.size()));
      scale = static_cast<T>(std::max(std::abs(mean - 3.0 * sigma), std::abs(mean + 3.0 * sigma)) /
                             static_cast<double>(half_range));
      break;
    }
    case InitScheme::kSymm: {
      const T max_abs = std::max(std::abs(lo), std::abs(hi));
      scale = max_abs / half_range;
      break;
    }
    case InitScheme::kAsymm:
      scale = (hi - lo) / (qp - qn);
      break;
    case InitScheme::kL4Q:
      scale = std::max(std::abs(lo / qn), std::abs(hi / qp));
      break;
  }

  GroupInit<T> out{scale, T(0), false};
  if (!(scale >= static_cast<T>(kScaleFloor)) || !std::isfinite(scale)) {
    out.scale = static_cast<T>(kScaleFloor);
    out.degenerate = true;
  }

  switch (scheme) {
    case InitScheme::kAsymm:
      detail::widen_until_unclipped(group, out.scale, out.bias, spec,
                                    [&](T s) { return hi - s * qp; });
      break;
    case InitScheme::kL4Q:
      detail::widen_until_unclipped(group, out.scale, out.bias, spec, [](T) { return T(0); });
      break;
    default:
      break;
  }
  return out;
}

template <typename T>
struct MatrixInit {
  GroupParams<T> params;
  std::vector<std::size_t> degenerate_groups;
};

template <typename T>
MatrixInit<T> init_matrix(const Matrix<T>& w, InitScheme scheme, const QuantSpec& spec) {
  spec.check_columns(w.cols());
  const std::size_t gpr = w.cols() / spec.group_size;
  MatrixInit<T> out{GroupParams<T>(w.rows(), gpr), {}};
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    for (std::size_t g = 0; g < gpr; ++g) {
      const auto init = init_group<T>(row.subspan(g * spec.group_size, spec.group_size),
                                      scheme, spec);
      const std::size_t idx = r * gpr + g;
      out.params.scales[idx] = init.scale;
      out.params.biases[idx] = init.bias;
      if (init.degenerate) out.degenerate_groups.push_back(idx);
    }
  }
  return out;
}

}  // namespace l4q
