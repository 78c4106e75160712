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

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l4q/alloc_probe.hpp"
#include "l4q/numerics.hpp"
#include "l4q/quantizer.hpp"

namespace l4q {

// Low-rank adapter contributing alpha * B * A to a weight of shape (o x i).
template <typename T>
struct LoraAdapter {
  Matrix<T> A;  // r x i
  Matrix<T> B;  // o x r
  T alpha = T(1);

  std::size_t rank() const { return A.rows(); }

  void check(std::size_t out, std::size_t in) const {
    if (A.rows() == 0 || A.rows() != B.cols() || A.cols() != in || B.rows() != out) {
      throw ShapeError("lora adapter A " + std::to_string(A.rows()) + "x" +
                       std::to_string(A.cols()) + ", B " + std::to_string(B.rows()) + "x" +
                       std::to_string(B.cols()) + " does not fit a " + std::to_string(out) +
                       "x" + std::to_string(in) + " weight");
    }
  }

  // alpha * B * A
  Matrix<T> delta() const { return scaled(matmul(B, A), alpha); }

  template <typename U>
  LoraAdapter<U> cast() const {
    return {A.template cast<U>(), B.template cast<U>(), static_cast<U>(alpha)};
  }
};

// A ~ N(0, a_std), B = 0, so the adapter starts as an exact no-op.
template <typename T>
LoraAdapter<T> make_lora(Rng& rng, std::size_t rank, std::size_t in, std::size_t out,
                         T alpha, double a_std = 0.02) {
  if (rank == 0) throw Error("lora rank must be at least 1");
  return {randn<T>(rng, rank, in, a_std), Matrix<T>(out, rank), alpha};
}

template <typename T>
struct LayerGrads {
  Matrix<T> dA;
  Matrix<T> dB;
  std::vector<T> ds;
  std::vector<T> db;
  Matrix<T> dW;  // only for layers that train the full weight
  Matrix<T> dX;  // gradient with respect to the layer input
};

enum class ParamKind { kLora, kWeight, kScale, kBias, kHead };

// A trainable tensor paired with the gradient from the latest backward.
template <typename T>
struct ParamSlot {
  std::string name;
  std::span<T> value;
  std::span<const T> grad;
  ParamKind kind;
};

using RangeMask = Matrix<std::uint8_t>;

// ---------------------------------------------------------------------------
// Elementwise quantizer derivatives (straight-through estimator).

// 1 iff q_n <= w <= q_p; the rounding function passes gradients only there.
template <typename T>
RangeMask ste_mask(const Matrix<T>& w_pre, const QuantSpec& spec) {
  RangeMask m(w_pre.rows(), w_pre.cols());
  auto out = m.values();
  auto in = w_pre.values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in_range(in[i], spec) ? 1 : 0;
  return m;
}

template <typename T>
inline T dwq_ds_value(T w, std::int8_t code, const QuantSpec& spec) {
  if (w < static_cast<T>(spec.q_n())) return static_cast<T>(spec.q_n());
  if (w > static_cast<T>(spec.q_p())) return static_cast<T>(spec.q_p());
  return static_cast<T>(code) - w;
}

template <typename T>
inline T dwq_db_value(T w, const QuantSpec& spec) {
  return in_range(w, spec) ? T(0) : T(1);
}

// dW_q/ds per element: -w + code inside the range, q_n / q_p when clamped.
template <typename T>
Matrix<T> dwq_ds(const Matrix<T>& w_pre, const QuantCodes& codes, const QuantSpec& spec) {
  require_same_shape(w_pre.rows(), w_pre.cols(), codes.rows, codes.cols, "dwq_ds");
  Matrix<T> out(w_pre.rows(), w_pre.cols());
  auto o = out.values();
  auto w = w_pre.values();
  for (std::size_t i = 0; i < w.size(); ++i) o[i] = dwq_ds_value(w[i], codes.values[i], spec);
  return out;
}

// dW_q/db per element: 0 inside the range, 1 when clamped.
template <typename T>
Matrix<T> dwq_db(const Matrix<T>& w_pre, const QuantSpec& spec) {
  Matrix<T> out(w_pre.rows(), w_pre.cols());
  auto o = out.values();
  auto w = w_pre.values();
  for (std::size_t i = 0; i < w.size(); ++i) o[i] = dwq_db_value(w[i], spec);
  return out;
}

// State retained by a quantizing forward for the matching backward.
template <typename T>
struct QuantForward {
  Matrix<T> w_pre;  // (W - b) / s before clamping
  QuantCodes codes;
  RangeMask mask;
  Matrix<T> wq;  // codes * s + b
};

template <typename T>
QuantForward<T> quantize_forward(const Matrix<T>& w, const GroupParams<T>& params,
                                 const QuantSpec& spec) {
  params.check(w.rows(), w.cols(), spec);
  QuantForward<T> f{Matrix<T>(w.rows(), w.cols()),
                    QuantCodes{w.rows(), w.cols(), std::vector<std::int8_t>(w.size())},
                    RangeMask(w.rows(), w.cols()), Matrix<T>(w.rows(), w.cols())};
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const std::size_t g = params.index(r, c, spec.group_size);
      const T s = params.scales[g];
      const T b = params.biases[g];
      const T ws = scaled_value(w(r, c), s, b);
      const std::int8_t code = quantize_value(ws, spec);
      const std::size_t i = r * w.cols() + c;
      f.w_pre.values()[i] = ws;
      f.codes.values[i] = code;
      f.mask.values()[i] = in_range(ws, spec) ? 1 : 0;
      f.wq.values()[i] = static_cast<T>(code) * s + b;
    }
  }
  return f;
}

// Group sums of dL/dW_q * dW_q/ds and dL/dW_q * dW_q/db.
template <typename T>
void quant_param_grads(const Matrix<T>& dwq, const QuantForward<T>& f,
                       const GroupParams<T>& params, const QuantSpec& spec,
                       std::vector<T>& ds, std::vector<T>& db) {
  std::vector<double> s_acc(params.count(), 0.0);
  std::vector<double> b_acc(params.count(), 0.0);
  for (std::size_t r = 0; r < dwq.rows(); ++r) {
    for (std::size_t c = 0; c < dwq.cols(); ++c) {
      const std::size_t g = params.index(r, c, spec.group_size);
      const std::size_t i = r * dwq.cols() + c;
      const T gw = dwq.values()[i];
      const T w = f.w_pre.values()[i];
      s_acc[g] += static_cast<double>(gw * dwq_ds_value(w, f.codes.values[i], spec));
      b_acc[g] += static_cast<double>(gw * dwq_db_value(w, spec));
    }
  }
  ds.assign(s_acc.begin(), s_acc.end());
  db.assign(b_acc.begin(), b_acc.end());
}

template <typename T>
Matrix<T> masked(const Matrix<T>& m, const RangeMask& mask) {
  Matrix<T> out = m;
  auto o = out.values();
  auto k = mask.values();
  for (std::size_t i = 0; i < o.size(); ++i)
    if (k[i] == 0) o[i] = T(0);
  return out;
}

// ---------------------------------------------------------------------------
// Plain LoRA.

template <typename T>
Matrix<T> lora_forward(const Matrix<T>& w0, const LoraAdapter<T>& adapter, const Matrix<T>& x) {
  adapter.check(w0.rows(), w0.cols());
  const Matrix<T> ax = matmul(adapter.A, x);
  return matmul(w0, x) + scaled(matmul(adapter.B, ax), adapter.alpha);
}

template <typename T>
std::pair<Matrix<T>, Matrix<T>> lora_backward(const LoraAdapter<T>& adapter,
                                              const Matrix<T>& x, const Matrix<T>& dy) {
  const Matrix<T> ax = matmul(adapter.A, x);
  const Matrix<T> d_ax = matmul(transpose(adapter.B), dy);
  return {scaled(matmul(d_ax, transpose(x)), adapter.alpha),
          scaled(matmul(dy, transpose(ax)), adapter.alpha)};
}

// ---------------------------------------------------------------------------
// Layer interface used by the trainer.

template <typename T>
struct QuantizedLinear {
  PackedQuantTensor<T> weight;
  std::optional<LoraAdapter<T>> adapter;  // present only in mixed-precision form
};

template <typename T>
class LinearLayer {
 public:
  virtual ~LinearLayer() = default;

  virtual std::string_view kind() const = 0;
  virtual std::size_t in_features() const = 0;
  virtual std::size_t out_features() const = 0;

  virtual Matrix<T> forward(const Matrix<T>& x) = 0;
  // Consumes the forward cache; gradients stay valid until the next backward.
  virtual const LayerGrads<T>& backward(const Matrix<T>& dy) = 0;
  virtual std::vector<ParamSlot<T>> parameters() = 0;

  // The high-precision weight that gets quantized, and its quantizer state.
  virtual std::optional<QuantErrors> quant_metrics() const { return std::nullopt; }
  virtual std::optional<QuantizedLinear<T>> quantized_form() const { return std::nullopt; }

  // Frees weight-gradient buffers that outlive backward.
  virtual void release_scratch() {}

  void attach_probe(AllocProbe* probe) { probe_ = probe; }

  // Test hook: keep the dL/dW_q scratch alive after backward returns.
  void set_retain_scratch(bool retain) { retain_scratch_ = retain; }

 protected:
  void require_cache(bool present) const {
    if (!present) throw Error(std::string(kind()) + ": backward called without a cached forward");
  }

  AllocProbe* probe_ = nullptr;
  bool retain_scratch_ = false;
  LayerGrads<T> grads_;
};

// Y = W0 X + alpha B A X with W0 frozen.
template <typename T>
class LoraLayer final : public LinearLayer<T> {
 public:
  LoraLayer(Matrix<T> w0, LoraAdapter<T> adapter) : w0_(std::move(w0)), adapter_(std::move(adapter)) {
    adapter_.check(w0_.rows(), w0_.cols());
  }

  std::string_view kind() const override { return "lora"; }
  std::size_t in_features() const override { return w0_.cols(); }
  std::size_t out_features() const override { return w0_.rows(); }

  const Matrix<T>& base_weight() const { return w0_; }
  LoraAdapter<T>& adapter() { return adapter_; }
  const LoraAdapter<T>& adapter() const { return adapter_; }

  Matrix<T> forward(const Matrix<T>& x) override {
    require_same_shape(x.rows(), 0, w0_.cols(), 0, "lora forward input");
    ax_ = matmul(adapter_.A, x);
    x_ = x;
    return matmul(w0_, x) + scaled(matmul(adapter_.B, *ax_), adapter_.alpha);
  }

  const LayerGrads<T>& backward(const Matrix<T>& dy) override {
    this->require_cache(x_.has_value());
    const T a = adapter_.alpha;
    const Matrix<T> d_ax = matmul(transpose(adapter_.B), dy);
    this->grads_.dA = scaled(matmul(d_ax, transpose(*x_)), a);
    this->grads_.dB = scaled(matmul(dy, transpose(*ax_)), a);
    this->grads_.dX =
        matmul(transpose(w0_), dy) + scaled(matmul(transpose(adapter_.A), d_ax), a);
    x_.reset();
    ax_.reset();
    return this->grads_;
  }

  std::vector<ParamSlot<T>> parameters() override {
    return {{"A", adapter_.A.values(), this->grads_.dA.values(), ParamKind::kLora},
            {"B", adapter_.B.values(), this->grads_.dB.values(), ParamKind::kLora}};
  }

 private:
  Matrix<T> w0_;
  LoraAdapter<T> adapter_;
  std::optional<Matrix<T>> x_;
  std::optional<Matrix<T>> ax_;
};

// Shared quantizer state for layers that learn scales and biases.
template <typename T>
struct QuantState {
  GroupParams<T> params;
  QuantSpec spec;
  bool freeze_bias = false;
};

// Full LSQ-style QAT: the weight, scales and biases are all trained.
template <typename T>
class LsqLayer final : public LinearLayer<T> {
 public:
  LsqLayer(Matrix<T> w, QuantState<T> q) : w_(std::move(w)), q_(std::move(q)) {
    q_.params.check(w_.rows(), w_.cols(), q_.spec);
  }

  std::string_view kind() const override { return "lsq"; }
  std::size_t in_features() const override { return w_.cols(); }
  std::size_t out_features() const override { return w_.rows(); }

  const Matrix<T>& weight() const { return w_; }
  const GroupParams<T>& qparams() const { return q_.params; }
  const QuantSpec& spec() const { return q_.spec; }

  Matrix<T> forward(const Matrix<T>& x) override {
    require_same_shape(x.rows(), 0, w_.cols(), 0, "lsq forward input");
    fwd_ = quantize_forward(w_, q_.params, q_.spec);
    x_ = x;
    return matmul(fwd_->wq, x);
  }

  const LayerGrads<T>& backward(const Matrix<T>& dy) override {
    this->require_cache(x_.has_value());
    // Kept until release_scratch(): in full QAT dL/dW_q is the weight gradient.
    dwq_ = ScratchMatrix<T>(this->probe_, matmul(dy, transpose(*x_)));
    quant_param_grads(dwq_.get(), *fwd_, q_.params, q_.spec, this->grads_.ds, this->grads_.db);
    this->grads_.dW = masked(dwq_.get(), fwd_->mask);
    this->grads_.dX = matmul(transpose(fwd_->wq), dy);
    x_.reset();
    fwd_.reset();
    return this->grads_;
  }

  std::vector<ParamSlot<T>> parameters() override {
    std::vector<ParamSlot<T>> p{
        {"W", w_.values(), this->grads_.dW.values(), ParamKind::kWeight},
        {"s", q_.params.scales, this->grads_.ds, ParamKind::kScale}};
    if (!q_.freeze_bias) p.push_back({"b", q_.params.biases, this->grads_.db, ParamKind::kBias});
    return p;
  }

  std::optional<QuantErrors> quant_metrics() const override {
    return quant_errors(w_, q_.params, q_.spec);
  }

  std::optional<QuantizedLinear<T>> quantized_form() const override {
    return QuantizedLinear<T>{
        PackedQuantTensor<T>::from_codes(quantize(w_, q_.params, q_.spec), q_.params, q_.spec),
        std::nullopt};
  }

  void release_scratch() override { dwq_.reset(); }

 private:
  Matrix<T> w_;
  QuantState<T> q_;
  std::optional<Matrix<T>> x_;
  std::optional<QuantForward<T>> fwd_;
  ScratchMatrix<T> dwq_;
};

// Quantize-then-add: Y = W_q(W0) X + alpha B A X. The quantized base and the
// adapter stay separate, so the trained layer is mixed precision.
template <typename T>
class QatLoraLayer final : public LinearLayer<T> {
 public:
  QatLoraLayer(Matrix<T> w0, LoraAdapter<T> adapter, QuantState<T> q)
      : w0_(std::move(w0)), adapter_(std::move(adapter)), q_(std::move(q)) {
    adapter_.check(w0_.rows(), w0_.cols());
    q_.params.check(w0_.rows(), w0_.cols(), q_.spec);
  }

  std::string_view kind() const override { return "qat-lora"; }
  std::size_t in_features() const override { return w0_.cols(); }
  std::size_t out_features() const override { return w0_.rows(); }

  const Matrix<T>& base_weight() const { return w0_; }
  LoraAdapter<T>& adapter() { return adapter_; }
  const LoraAdapter<T>& adapter() const { return adapter_; }
  GroupParams<T>& qparams() { return q_.params; }
  const GroupParams<T>& qparams() const { return q_.params; }
  const QuantSpec& spec() const { return q_.spec; }

  Matrix<T> forward(const Matrix<T>& x) override {
    require_same_shape(x.rows(), 0, w0_.cols(), 0, "qat-lora forward input");
    fwd_ = quantize_forward(w0_, q_.params, q_.spec);
    ax_ = matmul(adapter_.A, x);
    x_ = x;
    return matmul(fwd_->wq, x) + scaled(matmul(adapter_.B, *ax_), adapter_.alpha);
  }

  const LayerGrads<T>& backward(const Matrix<T>& dy) override {
    this->require_cache(x_.has_value());
    const T a = adapter_.alpha;
    // The weight gradient is a standalone tensor here and stays resident until
    // the optimizer step, as it would in a framework-level QAT-LoRA.
    dwq_ = ScratchMatrix<T>(this->probe_, matmul(dy, transpose(*x_)));
    quant_param_grads(dwq_.get(), *fwd_, q_.params, q_.spec, this->grads_.ds, this->grads_.db);
    const Matrix<T> d_ax = matmul(transpose(adapter_.B), dy);
    this->grads_.dA = scaled(matmul(d_ax, transpose(*x_)), a);
    this->grads_.dB = scaled(matmul(dy, transpose(*ax_)), a);
    this->grads_.dX =
        matmul(transpose(fwd_->wq), dy) + scaled(matmul(transpose(adapter_.A), d_ax), a);
    x_.reset();
    ax_.reset();
    fwd_.reset();
    return this->grads_;
  }

  std::vector<ParamSlot<T>> parameters() override {
    std::vector<ParamSlot<T>> p{
        {"A", adapter_.A.values(), this->grads_.dA.values(), ParamKind::kLora},
        {"B", adapter_.B.values(), this->grads_.dB.values(), ParamKind::kLora},
        {"s", q_.params.scales, this->grads_.ds, ParamKind::kScale}};
    if (!q_.freeze_bias) p.push_back({"b", q_.params.biases, this->grads_.db, ParamKind::kBias});
    return p;
  }

  std::optional<QuantErrors> quant_metrics() const override {
    return quant_errors(w0_, q_.params, q_.spec);
  }

  std::optional<QuantizedLinear<T>> quantized_form() const override {
    return QuantizedLinear<T>{
        PackedQuantTensor<T>::from_codes(quantize(w0_, q_.params, q_.spec), q_.params, q_.spec),
        adapter_};
  }

  void release_scratch() override { dwq_.reset(); }

 private:
  Matrix<T> w0_;
  LoraAdapter<T> adapter_;
  QuantState<T> q_;
  std::optional<Matrix<T>> x_;
  std::optional<Matrix<T>> ax_;
  std::optional<QuantForward<T>> fwd_;
  ScratchMatrix<T> dwq_;
};

// Add-then-quantize: W_comb = W0 + alpha B A is quantized as a whole, so the
// trained layer is a single low-bit weight. Backward reuses one dL/dW_q buffer
// for the scale/bias gradients and the range-gated LoRA gradients, then drops it.
template <typename T>
class L4qLayer final : public LinearLayer<T> {
 public:
  L4qLayer(Matrix<T> w0, LoraAdapter<T> adapter, QuantState<T> q)
      : w0_(std::move(w0)), adapter_(std::move(adapter)), q_(std::move(q)) {
    adapter_.check(w0_.rows(), w0_.cols());
    q_.params.check(w0_.rows(), w0_.cols(), q_.spec);
  }

  std::string_view kind() const override { return "l4q"; }
  std::size_t in_features() const override { return w0_.cols(); }
  std::size_t out_features() const override { return w0_.rows(); }

  const Matrix<T>& base_weight() const { return w0_; }
  LoraAdapter<T>& adapter() { return adapter_; }
  const LoraAdapter<T>& adapter() const { return adapter_; }
  GroupParams<T>& qparams() { return q_.params; }
  const GroupParams<T>& qparams() const { return q_.params; }
  const QuantSpec& spec() const { return q_.spec; }
  bool has_cache() const { return x_.has_value(); }

  Matrix<T> combined_weight() const { return w0_ + adapter_.delta(); }
  QuantCodes codes() const { return quantize(combined_weight(), q_.params, q_.spec); }
  Matrix<T> quantized_weight() const { return dequantize(codes(), q_.params, q_.spec.group_size); }

  Matrix<T> forward(const Matrix<T>& x) override {
    require_same_shape(x.rows(), 0, w0_.cols(), 0, "l4q forward input");
    fwd_ = quantize_forward(combined_weight(), q_.params, q_.spec);
    x_ = x;
    return matmul(fwd_->wq, x);
  }

  const LayerGrads<T>& backward(const Matrix<T>& dy) override {
    this->require_cache(x_.has_value());
    const T a = adapter_.alpha;
    ScratchMatrix<T> dwq(this->probe_, matmul(dy, transpose(*x_)));
    quant_param_grads(dwq.get(), *fwd_, q_.params, q_.spec, this->grads_.ds, this->grads_.db);
    const Matrix<T> gated = masked(dwq.get(), fwd_->mask);
    this->grads_.dA = scaled(matmul(transpose(adapter_.B), gated), a);
    this->grads_.dB = scaled(matmul(gated, transpose(adapter_.A)), a);
    this->grads_.dX = matmul(transpose(fwd_->wq), dy);
    x_.reset();
    fwd_.reset();
    if (this->retain_scratch_) retained_ = std::move(dwq);
    return this->grads_;
  }

  std::vector<ParamSlot<T>> parameters() override {
    std::vector<ParamSlot<T>> p{
        {"A", adapter_.A.values(), this->grads_.dA.values(), ParamKind::kLora},
        {"B", adapter_.B.values(), this->grads_.dB.values(), ParamKind::kLora},
        {"s", q_.params.scales, this->grads_.ds, ParamKind::kScale}};
    if (!q_.freeze_bias) p.push_back({"b", q_.params.biases, this->grads_.db, ParamKind::kBias});
    return p;
  }

  std::optional<QuantErrors> quant_metrics() const override {
    return quant_errors(combined_weight(), q_.params, q_.spec);
  }

  std::optional<QuantizedLinear<T>> quantized_form() const override {
    return QuantizedLinear<T>{PackedQuantTensor<T>::from_codes(codes(), q_.params, q_.spec),
                              std::nullopt};
  }

  void release_scratch() override { retained_.reset(); }

 private:
  Matrix<T> w0_;
  LoraAdapter<T> adapter_;
  QuantState<T> q_;
  std::optional<Matrix<T>> x_;
  std::optional<QuantForward<T>> fwd_;
  ScratchMatrix<T> retained_;
};

// ---------------------------------------------------------------------------
// Group-constrained adapter whose product folds into the quantization biases.

// Sums the inputs of each quantization group: (i x n) -> (i / group_size x n).
template <typename T>
Matrix<T> group_pool(const Matrix<T>& x, std::size_t group_size) {
  if (group_size == 0 || x.rows() % group_size != 0)
    throw ShapeError("group_pool: group size does not divide input dimension");
  Matrix<T> out(x.rows() / group_size, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto src = x.row(r);
    auto dst = out.row(r / group_size);
    for (std::size_t c = 0; c < x.cols(); ++c) dst[c] += src[c];
  }
  return out;
}

// b'[o, g] = b[o, g] - alpha * (B A)[o, g]; scales are unchanged.
template <typename T>
GroupParams<T> qalora_merge(const LoraAdapter<T>& adapter, const GroupParams<T>& params) {
  if (adapter.A.cols() != params.groups_per_row || adapter.B.rows() != params.rows ||
      adapter.A.rows() != adapter.B.cols()) {
    throw ShapeError("qalora_merge: adapter input dimension " + std::to_string(adapter.A.cols()) +
                     " must equal groups per row " + std::to_string(params.groups_per_row));
  }
  const Matrix<T> ba = matmul(adapter.B, adapter.A);
  GroupParams<T> out = params;
  for (std::size_t i = 0; i < out.count(); ++i) out.biases[i] -= adapter.alpha * ba.values()[i];
  return out;
}

// Frozen quantized base plus a group-pooled adapter entering with the
// zero-point sign: Y = W_q X - alpha B A pool(X). Merging is then exact.
template <typename T>
class QaLoraLayer final : public LinearLayer<T> {
 public:
  QaLoraLayer(const Matrix<T>& w0, LoraAdapter<T> adapter, GroupParams<T> params, QuantSpec spec)
      : adapter_(std::move(adapter)), params_(std::move(params)), spec_(spec) {
    codes_ = quantize(w0, params_, spec_);
    wq_ = dequantize(codes_, params_, spec_.group_size);
    adapter_.check(w0.rows(), w0.cols() / spec_.group_size);
  }

  std::string_view kind() const override { return "qa-lora"; }
  std::size_t in_features() const override { return wq_.cols(); }
  std::size_t out_features() const override { return wq_.rows(); }

  LoraAdapter<T>& adapter() { return adapter_; }
  const LoraAdapter<T>& adapter() const { return adapter_; }
  const GroupParams<T>& qparams() const { return params_; }
  const QuantCodes& codes() const { return codes_; }
  const QuantSpec& spec() const { return spec_; }

  Matrix<T> forward(const Matrix<T>& x) override {
    require_same_shape(x.rows(), 0, wq_.cols(), 0, "qa-lora forward input");
    xp_ = group_pool(x, spec_.group_size);
    axp_ = matmul(adapter_.A, *xp_);
    return matmul(wq_, x) - scaled(matmul(adapter_.B, *axp_), adapter_.alpha);
  }

  const LayerGrads<T>& backward(const Matrix<T>& dy) override {
    this->require_cache(xp_.has_value());
    const T a = -adapter_.alpha;
    const Matrix<T> d_axp = matmul(transpose(adapter_.B), dy);
    this->grads_.dA = scaled(matmul(d_axp, transpose(*xp_)), a);
    this->grads_.dB = scaled(matmul(dy, transpose(*axp_)), a);
    const Matrix<T> d_xp = scaled(matmul(transpose(adapter_.A), d_axp), a);
    Matrix<T> dx = matmul(transpose(wq_), dy);
    for (std::size_t r = 0; r < dx.rows(); ++r) {
      const auto src = d_xp.row(r / spec_.group_size);
      auto dst = dx.row(r);
      for (std::size_t c = 0; c < dx.cols(); ++c) dst[c] += src[c];
    }
    this->grads_.dX = std::move(dx);
    xp_.reset();
    axp_.reset();
    return this->grads_;
  }

  std::vector<ParamSlot<T>> parameters() override {
    return {{"A", adapter_.A.values(), this->grads_.dA.values(), ParamKind::kLora},
            {"B", adapter_.B.values(), this->grads_.dB.values(), ParamKind::kLora}};
  }

  GroupParams<T> merged_params() const { return qalora_merge(adapter_, params_); }

  std::optional<QuantizedLinear<T>> quantized_form() const override {
    return QuantizedLinear<T>{PackedQuantTensor<T>::from_codes(codes_, merged_params(), spec_),
                              std::nullopt};
  }

 private:
  LoraAdapter<T> adapter_;
  GroupParams<T> params_;
  QuantSpec spec_;
  QuantCodes codes_;
  Matrix<T> wq_;
  std::optional<Matrix<T>> xp_;
  std::optional<Matrix<T>> axp_;
};

// Round-to-nearest quantized weight with nothing trainable.
template <typename T>
class FrozenQuantLayer final : public LinearLayer<T> {
 public:
  FrozenQuantLayer(const Matrix<T>& w0, GroupParams<T> params, QuantSpec spec)
      : w0_(w0), params_(std::move(params)), spec_(spec) {
    codes_ = quantize(w0, params_, spec_);
    wq_ = dequantize(codes_, params_, spec_.group_size);
  }

  std::string_view kind() const override { return "ptq-frozen"; }
  std::size_t in_features() const override { return wq_.cols(); }
  std::size_t out_features() const override { return wq_.rows(); }

  Matrix<T> forward(const Matrix<T>& x) override {
    require_same_shape(x.rows(), 0, wq_.cols(), 0, "ptq forward input");
    cached_ = true;
    return matmul(wq_, x);
  }

  const LayerGrads<T>& backward(const Matrix<T>& dy) override {
    this->require_cache(cached_);
    this->grads_.dX = matmul(transpose(wq_), dy);
    cached_ = false;
    return this->grads_;
  }

  std::vector<ParamSlot<T>> parameters() override { return {}; }

  std::optional<QuantErrors> quant_metrics() const override {
    return quant_errors(w0_, params_, spec_);
  }

  std::optional<QuantizedLinear<T>> quantized_form() const override {
    return QuantizedLinear<T>{PackedQuantTensor<T>::from_codes(codes_, params_, spec_),
                              std::nullopt};
  }

 private:
  Matrix<T> w0_;
  GroupParams<T> params_;
  QuantSpec spec_;
  QuantCodes codes_;
  Matrix<T> wq_;
  bool cached_ = false;
};

}  // namespace l4q
