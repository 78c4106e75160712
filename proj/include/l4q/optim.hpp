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
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "l4q/layers.hpp"
#include "l4q/qinit.hpp"

namespace l4q {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Moment buffers keyed by parameter name. Decoupled weight decay is applied
// to LoRA, weight and head tensors only; scales and biases are never decayed.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return step_; }

  template <typename T>
  void step(const std::vector<ParamSlot<T>>& params, double lr) {
    if (!(lr >= 0.0)) throw Error("adamw: learning rate must be nonnegative");
    for (const auto& p : params) {
      if (p.grad.size() != p.value.size()) {
        throw ShapeError("adamw: gradient for '" + p.name + "' has " +
                         std::to_string(p.grad.size()) + " entries, parameter has " +
                         std::to_string(p.value.size()));
      }
      for (T g : p.grad) {
        if (std::isnan(g)) throw Error("adamw: NaN gradient in parameter '" + p.name + "'");
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& p : params) {
      auto& st = moments_[p.name];
      if (st.m.size() != p.value.size()) {
        st.m.assign(p.value.size(), 0.0);
        st.v.assign(p.value.size(), 0.0);
      }
      const bool decay = p.kind != ParamKind::kScale && p.kind != ParamKind::kBias;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double m_hat = st.m[i] / bc1;
        const double v_hat = st.v[i] / bc2;
        double w = static_cast<double>(p.value[i]);
        double update = m_hat / (std::sqrt(v_hat) + cfg_.eps);
        if (decay) update += cfg_.weight_decay * w;
        w -= lr * update;
        if (p.kind == ParamKind::kScale) w = std::max(w, kScaleFloor);
        p.value[i] = static_cast<T>(w);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

// Linear warmup over the first ceil(warmup_frac * total) steps, then cosine
// decay to zero over the remainder.
class LrSchedule {
 public:
  LrSchedule(double base_lr, std::int64_t total_steps, double warmup_frac = 0.10)
      : base_lr_(base_lr), total_(total_steps) {
    if (total_steps < 0) throw Error("lr schedule: total_steps must be nonnegative");
    if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0))
      throw Error("lr schedule: warmup_frac must be in [0, 1]");
    warmup_ = static_cast<std::int64_t>(
        std::ceil(warmup_frac * static_cast<double>(total_steps) - 1e-9));
    warmup_ = std::clamp<std::int64_t>(warmup_, 0, total_steps);
  }

  double base_lr() const { return base_lr_; }
  std::int64_t total_steps() const { return total_; }
  std::int64_t warmup_steps() const { return warmup_; }

  double at(std::int64_t step) const {
    if (step < 0 || step >= total_) {
      throw Error("lr schedule: step " + std::to_string(step) + " outside [0, " +
                  std::to_string(total_) + ")");
    }
    if (step < warmup_) return base_lr_ * static_cast<double>(step) / static_cast<double>(warmup_);
    const double decay_len = static_cast<double>(total_ - warmup_);
    const double t = static_cast<double>(step - warmup_);
    return base_lr_ * 0.5 * (1.0 + std::cos(std::numbers::pi * t / decay_len));
  }

 private:
  double base_lr_;
  std::int64_t total_;
  std::int64_t warmup_ = 0;
};

inline double lr_at(std::int64_t step, const LrSchedule& schedule) { return schedule.at(step); }

}  // namespace l4q
