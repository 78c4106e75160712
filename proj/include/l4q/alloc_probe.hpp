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
#include <cstddef>
#include <utility>

#include "l4q/numerics.hpp"

namespace l4q {

// Counts live weight-gradient buffers (dL/dW_q) and the high-water mark.
class AllocProbe {
 public:
  void acquire(std::size_t bytes) {
    ++live_count_;
    live_bytes_ += bytes;
    peak_count_ = std::max(peak_count_, live_count_);
    peak_bytes_ = std::max(peak_bytes_, live_bytes_);
  }

  void release(std::size_t bytes) {
    --live_count_;
    live_bytes_ -= bytes;
  }

  // Clears the peaks but keeps currently-live buffers on the books.
  void reset_peak() {
    peak_count_ = live_count_;
    peak_bytes_ = live_bytes_;
  }

  std::size_t live_count() const { return live_count_; }
  std::size_t peak_count() const { return peak_count_; }
  std::size_t live_bytes() const { return live_bytes_; }
  std::size_t peak_bytes() const { return peak_bytes_; }

 private:
  std::size_t live_count_ = 0;
  std::size_t peak_count_ = 0;
  std::size_t live_bytes_ = 0;
  std::size_t peak_bytes_ = 0;
};

// A matrix whose lifetime is reported to an AllocProbe.
template <typename T>
class ScratchMatrix {
 public:
  ScratchMatrix() = default;
  ScratchMatrix(AllocProbe* probe, Matrix<T> m) : probe_(probe), m_(std::move(m)) {
    if (probe_ != nullptr) probe_->acquire(bytes());
  }
  ScratchMatrix(const ScratchMatrix&) = delete;
  ScratchMatrix& operator=(const ScratchMatrix&) = delete;
  ScratchMatrix(ScratchMatrix&& other) noexcept
      : probe_(std::exchange(other.probe_, nullptr)), m_(std::move(other.m_)) {}
  ScratchMatrix& operator=(ScratchMatrix&& other) noexcept {
    if (this != &other) {
      reset();
      probe_ = std::exchange(other.probe_, nullptr);
      m_ = std::move(other.m_);
    }
    return *this;
  }
  ~ScratchMatrix() { reset(); }

  void reset() {
    if (probe_ != nullptr) probe_->release(bytes());
    probe_ = nullptr;
    m_ = Matrix<T>();
  }

  const Matrix<T>& get() const { return m_; }
  bool held() const { return !m_.empty(); }

 private:
  std::size_t bytes() const { return m_.size() * sizeof(T); }

  AllocProbe* probe_ = nullptr;
  Matrix<T> m_;
};

}  // namespace l4q
