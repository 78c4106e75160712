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
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "l4q/alloc_probe.hpp"
#include "l4q/layers.hpp"
#include "l4q/optim.hpp"
#include "l4q/qinit.hpp"

namespace l4q {

enum class Method { kLora, kLsqQat, kQatLora, kL4Q, kQaLora, kPtqFrozen };

inline constexpr std::array<Method, 6> kAllMethods = {Method::kLora,  Method::kLsqQat,
                                                      Method::kQatLora, Method::kL4Q,
                                                      Method::kQaLora, Method::kPtqFrozen};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::kLora: return "lora";
    case Method::kLsqQat: return "lsq-qat";
    case Method::kQatLora: return "qat-lora";
    case Method::kL4Q: return "l4q";
    case Method::kQaLora: return "qa-lora";
    case Method::kPtqFrozen: return "ptq-frozen";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view name) {
  for (Method m : kAllMethods)
    if (to_string(m) == name) return m;
  return std::nullopt;
}

inline bool uses_adapter(Method m) { return m != Method::kLsqQat && m != Method::kPtqFrozen; }
inline bool is_quantized(Method m) { return m != Method::kLora; }

enum class TaskKind { kRegression, kClassification };

inline std::string_view to_string(TaskKind k) {
  return k == TaskKind::kRegression ? "regression" : "classification";
}

inline std::optional<TaskKind> parse_task(std::string_view name) {
  if (name == "regression") return TaskKind::kRegression;
  if (name == "classification") return TaskKind::kClassification;
  return std::nullopt;
}

struct TaskShape {
  std::size_t input_dim = 64;
  std::size_t hidden_dim = 64;
  std::size_t output_dim = 8;
  std::size_t layers = 2;
  std::size_t samples = 1024;
  std::size_t group_size = 32;  // outliers are injected per group of this size
  std::size_t shift_rank = 4;   // rank of the gap between teacher and base
};

struct TrainConfig {
  Method method = Method::kL4Q;
  TaskKind task = TaskKind::kRegression;
  int n_bits = 4;
  std::size_t group_size = 32;
  std::size_t rank = 4;
  double alpha = 1.0;
  InitScheme init = InitScheme::kL4Q;
  double lr = 1e-2;
  double qparam_lr_scale = 1.0;
  AdamWConfig adam;
  double warmup_frac = 0.10;
  std::int64_t steps = 1000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool freeze_bias = false;
  std::int64_t eval_every = 10;
  TaskShape shape;

  void validate() const {
    QuantSpec(n_bits, group_size).validate();
    if (uses_adapter(method) && rank == 0) throw Error("config: rank must be >= 1 for " +
                                                       std::string(to_string(method)));
    if (shape.layers < 1 || shape.layers > 4) throw Error("config: layers must be in [1, 4]");
    if (shape.input_dim % group_size != 0 || shape.hidden_dim % group_size != 0)
      throw Error("config: group_size must divide input_dim and hidden_dim");
    if (batch_size == 0 || batch_size > shape.samples)
      throw Error("config: batch_size must be in [1, samples]");
    if (steps < 0) throw Error("config: steps must be nonnegative");
    if (eval_every < 1) throw Error("config: eval_every must be >= 1");
    if (!(lr >= 0.0)) throw Error("config: lr must be nonnegative");
  }
};

// Synthetic fine-tuning problem. A hidden teacher network produces targets;
// the "pretrained" base differs from the teacher by a low-rank shift per
// layer, so low-rank adaptation can close the gap while quantization opens it.
template <typename T>
struct Task {
  TaskKind kind = TaskKind::kRegression;
  TaskShape shape;
  Matrix<T> inputs;                 // input_dim x samples
  Matrix<T> targets;                // output_dim x samples (regression)
  std::vector<std::size_t> labels;  // classification
  std::vector<Matrix<T>> base_weights;
  Matrix<T> head_weight;
  std::vector<T> head_bias;
};

namespace detail {

template <typename T>
Matrix<T> with_outliers(Rng& rng, std::size_t rows, std::size_t cols, double stddev,
                        std::size_t group_size) {
  Matrix<T> w = randn<T>(rng, rows, cols, stddev);
  // One salient weight in about a fifth of the groups.
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t g = 0; g + group_size <= cols; g += group_size)
      if (rng.uniform() < 0.2) {
        const std::size_t c = g + rng.below(group_size);
        w(r, c) = static_cast<T>(stddev * (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(6.0, 10.0));
      }
  return w;
}

template <typename T>
Matrix<T> tanh_of(const Matrix<T>& z) {
  Matrix<T> h = z;
  for (auto& v : h.values()) v = std::tanh(v);
  return h;
}

template <typename T>
Matrix<T> add_bias(Matrix<T> y, const std::vector<T>& bias) {
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (auto& v : y.row(r)) v += bias[r];
  return y;
}

}  // namespace detail

template <typename T>
Task<T> make_task(TaskKind kind, std::uint64_t seed, TaskShape shape = {}) {
  Rng rng(seed ^ 0x5DEECE66DULL);
  Task<T> task;
  task.kind = kind;
  task.shape = shape;

  Matrix<T> x = randn<T>(rng, shape.input_dim, shape.samples, 1.0);
  // Heavy-tailed input channels: every eighth feature is amplified.
  for (std::size_t r = 0; r < shape.input_dim; r += 8)
    for (auto& v : x.row(r)) v *= static_cast<T>(3.0);
  task.inputs = x;

  std::vector<Matrix<T>> teacher;
  std::size_t in = shape.input_dim;
  for (std::size_t l = 0; l < shape.layers; ++l) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(in));
    teacher.push_back(detail::with_outliers<T>(rng, shape.hidden_dim, in, sd, shape.group_size));
    const Matrix<T> u = randn<T>(rng, shape.hidden_dim, shape.shift_rank, 1.0);
    const Matrix<T> v = randn<T>(rng, shape.shift_rank, in, 1.0);
    const double shift_sd = 0.6 * sd / std::sqrt(static_cast<double>(shape.shift_rank));
    task.base_weights.push_back(teacher.back() - scaled(matmul(u, v), static_cast<T>(shift_sd)));
    in = shape.hidden_dim;
  }
  const double head_sd = 1.0 / std::sqrt(static_cast<double>(shape.hidden_dim));
  const Matrix<T> head = randn<T>(rng, shape.output_dim, shape.hidden_dim, head_sd);
  std::vector<T> head_bias(shape.output_dim);
  for (auto& b : head_bias) b = static_cast<T>(0.1 * rng.normal());
  task.head_weight = head;
  task.head_bias = head_bias;

  Matrix<T> h = x;
  for (const auto& w : teacher) h = detail::tanh_of(matmul(w, h));
  const Matrix<T> y = detail::add_bias(matmul(head, h), head_bias);
  if (kind == TaskKind::kRegression) {
    task.targets = y;
  } else {
    task.labels.resize(shape.samples);
    for (std::size_t n = 0; n < shape.samples; ++n) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < y.rows(); ++k)
        if (y(k, n) > y(best, n)) best = k;
      task.labels[n] = best;
    }
  }
  return task;
}

// Fraction of groups whose largest deviation exceeds `ratio` population
// standard deviations.
template <typename T>
double outlier_group_fraction(const Matrix<T>& w, std::size_t group_size, double ratio = 4.0) {
  std::size_t hits = 0, total = 0;
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t g = 0; g + group_size <= w.cols(); g += group_size) {
      const auto grp = w.row(r).subspan(g, group_size);
      double mean = 0.0;
      for (T v : grp) mean += static_cast<double>(v);
      mean /= static_cast<double>(group_size);
      double var = 0.0, dev = 0.0;
      for (T v : grp) {
        const double d = static_cast<double>(v) - mean;
        var += d * d;
        dev = std::max(dev, std::abs(d));
      }
      const double sd = std::sqrt(var / static_cast<double>(group_size));
      ++total;
      if (sd > 0.0 && dev / sd > ratio) ++hits;
    }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// Unquantized output projection, trained by every method.
template <typename T>
class DenseHead {
 public:
  DenseHead(Matrix<T> w, std::vector<T> b) : w_(std::move(w)), b_(std::move(b)) {}

  const Matrix<T>& weight() const { return w_; }
  const std::vector<T>& bias() const { return b_; }

  Matrix<T> forward(const Matrix<T>& h) {
    h_ = h;
    return detail::add_bias(matmul(w_, h), b_);
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    dw_ = matmul(dy, transpose(h_));
    db_.assign(b_.size(), T(0));
    for (std::size_t r = 0; r < dy.rows(); ++r) {
      double acc = 0.0;
      for (T v : dy.row(r)) acc += static_cast<double>(v);
      db_[r] = static_cast<T>(acc);
    }
    return matmul(transpose(w_), dy);
  }

  std::vector<ParamSlot<T>> parameters() {
    return {{"head.W", w_.values(), dw_.values(), ParamKind::kHead},
            {"head.b", b_, db_, ParamKind::kHead}};
  }

 private:
  Matrix<T> w_;
  std::vector<T> b_;
  Matrix<T> h_;
  Matrix<T> dw_;
  std::vector<T> db_;
};

// Stack of quantization-wrapped linear layers with tanh in between, followed
// by the unquantized head.
template <typename T>
class ToyModel {
 public:
  ToyModel(std::vector<std::unique_ptr<LinearLayer<T>>> layers, DenseHead<T> head)
      : layers_(std::move(layers)), head_(std::move(head)) {
    for (auto& l : layers_) l->attach_probe(&probe_);
  }

  ToyModel(ToyModel&& other) noexcept
      : layers_(std::move(other.layers_)), head_(std::move(other.head_)),
        probe_(other.probe_), activations_(std::move(other.activations_)) {
    for (auto& l : layers_) l->attach_probe(&probe_);
  }
  ToyModel& operator=(ToyModel&&) = delete;

  std::size_t depth() const { return layers_.size(); }
  LinearLayer<T>& layer(std::size_t i) { return *layers_[i]; }
  const LinearLayer<T>& layer(std::size_t i) const { return *layers_[i]; }
  DenseHead<T>& head() { return head_; }
  const DenseHead<T>& head() const { return head_; }
  AllocProbe& probe() { return probe_; }
  const AllocProbe& probe() const { return probe_; }

  Matrix<T> forward(const Matrix<T>& x) {
    activations_.clear();
    Matrix<T> h = x;
    for (auto& l : layers_) {
      h = detail::tanh_of(l->forward(h));
      activations_.push_back(h);
    }
    return head_.forward(h);
  }

  // Layers are processed one at a time, last to first.
  void backward(const Matrix<T>& d_out) {
    Matrix<T> dh = head_.backward(d_out);
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const Matrix<T>& h = activations_[i];
      auto dz = dh;
      auto dzv = dz.values();
      auto hv = h.values();
      for (std::size_t e = 0; e < dzv.size(); ++e) dzv[e] *= T(1) - hv[e] * hv[e];
      dh = layers_[i]->backward(dz).dX;
    }
    activations_.clear();
  }

  std::vector<ParamSlot<T>> parameters() {
    std::vector<ParamSlot<T>> all;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (auto p : layers_[i]->parameters()) {
        p.name = "layer" + std::to_string(i) + "." + p.name;
        all.push_back(std::move(p));
      }
    for (auto p : head_.parameters()) all.push_back(std::move(p));
    return all;
  }

  // Trainable entries outside the head.
  std::size_t trainable_layer_params() {
    std::size_t n = 0;
    for (auto& l : layers_)
      for (const auto& p : l->parameters()) n += p.value.size();
    return n;
  }

  void release_scratch() {
    for (auto& l : layers_) l->release_scratch();
  }

  std::optional<QuantErrors> quant_metrics() const {
    QuantErrors total;
    bool any = false;
    for (const auto& l : layers_)
      if (auto e = l->quant_metrics()) {
        total.quant += e->quant;
        total.clip += e->clip;
        any = true;
      }
    if (!any) return std::nullopt;
    return total;
  }

 private:
  std::vector<std::unique_ptr<LinearLayer<T>>> layers_;
  DenseHead<T> head_;
  AllocProbe probe_;
  std::vector<Matrix<T>> activations_;
};

template <typename T>
std::unique_ptr<LinearLayer<T>> make_layer(const TrainConfig& cfg, const Matrix<T>& w0, Rng& rng) {
  const QuantSpec spec(cfg.n_bits, cfg.group_size);
  const T alpha = static_cast<T>(cfg.alpha);
  switch (cfg.method) {
    case Method::kLora:
      return std::make_unique<LoraLayer<T>>(w0, make_lora<T>(rng, cfg.rank, w0.cols(), w0.rows(), alpha));
    case Method::kLsqQat:
      return std::make_unique<LsqLayer<T>>(
          w0, QuantState<T>{init_matrix(w0, cfg.init, spec).params, spec, cfg.freeze_bias});
    case Method::kQatLora:
      return std::make_unique<QatLoraLayer<T>>(
          w0, make_lora<T>(rng, cfg.rank, w0.cols(), w0.rows(), alpha),
          QuantState<T>{init_matrix(w0, cfg.init, spec).params, spec, cfg.freeze_bias});
    case Method::kL4Q:
      return std::make_unique<L4qLayer<T>>(
          w0, make_lora<T>(rng, cfg.rank, w0.cols(), w0.rows(), alpha),
          QuantState<T>{init_matrix(w0, cfg.init, spec).params, spec, cfg.freeze_bias});
    case Method::kQaLora:
      return std::make_unique<QaLoraLayer<T>>(
          w0, make_lora<T>(rng, cfg.rank, w0.cols() / cfg.group_size, w0.rows(), alpha),
          init_matrix(w0, cfg.init, spec).params, spec);
    case Method::kPtqFrozen:
      return std::make_unique<FrozenQuantLayer<T>>(w0, init_matrix(w0, cfg.init, spec).params, spec);
  }
  throw Error("unknown method");
}

template <typename T>
ToyModel<T> build_model(const TrainConfig& cfg, const Task<T>& task) {
  Rng rng(cfg.seed ^ 0xA5A5A5A5ULL);
  std::vector<std::unique_ptr<LinearLayer<T>>> layers;
  for (const auto& w0 : task.base_weights) layers.push_back(make_layer<T>(cfg, w0, rng));
  return ToyModel<T>(std::move(layers), DenseHead<T>(task.head_weight, task.head_bias));
}

struct LossGrad {
  double loss = 0.0;
};

// Mean squared error over all outputs, or mean softmax cross-entropy.
template <typename T>
double loss_and_grad(const Task<T>& task, const Matrix<T>& out, std::span<const std::size_t> idx,
                     Matrix<T>* grad) {
  const std::size_t n = idx.size();
  if (grad != nullptr) *grad = Matrix<T>(out.rows(), out.cols());
  double loss = 0.0;
  if (task.kind == TaskKind::kRegression) {
    const double denom = static_cast<double>(out.rows() * n);
    for (std::size_t k = 0; k < out.rows(); ++k)
      for (std::size_t j = 0; j < n; ++j) {
        const double d = static_cast<double>(out(k, j)) - static_cast<double>(task.targets(k, idx[j]));
        loss += d * d;
        if (grad != nullptr) (*grad)(k, j) = static_cast<T>(2.0 * d / denom);
      }
    return loss / denom;
  }
  for (std::size_t j = 0; j < n; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < out.rows(); ++k) mx = std::max(mx, static_cast<double>(out(k, j)));
    double z = 0.0;
    for (std::size_t k = 0; k < out.rows(); ++k) z += std::exp(static_cast<double>(out(k, j)) - mx);
    const std::size_t y = task.labels[idx[j]];
    loss += std::log(z) + mx - static_cast<double>(out(y, j));
    if (grad != nullptr)
      for (std::size_t k = 0; k < out.rows(); ++k) {
        const double p = std::exp(static_cast<double>(out(k, j)) - mx) / z;
        (*grad)(k, j) = static_cast<T>((p - (k == y ? 1.0 : 0.0)) / static_cast<double>(n));
      }
  }
  return loss / static_cast<double>(n);
}

template <typename T>
Matrix<T> gather_columns(const Matrix<T>& m, std::span<const std::size_t> idx) {
  Matrix<T> out(m.rows(), idx.size());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t j = 0; j < idx.size(); ++j) out(r, j) = m(r, idx[j]);
  return out;
}

template <typename T>
double evaluate(ToyModel<T>& model, const Task<T>& task) {
  std::vector<std::size_t> all(task.inputs.cols());
  std::iota(all.begin(), all.end(), 0);
  return loss_and_grad<T>(task, model.forward(task.inputs), all, nullptr);
}

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double eval_loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t scratch_peak_count = 0;
  std::size_t scratch_peak_bytes = 0;
};

struct RunReport {
  TrainConfig config;
  std::vector<StepRecord> steps;
  double init_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  std::optional<QuantErrors> init_errors;
  std::optional<QuantErrors> post_errors;
  std::size_t peak_scratch_count = 0;
  std::size_t peak_scratch_bytes = 0;
  std::size_t trainable_layer_params = 0;
  std::size_t base_weight_params = 0;

  // First step whose evaluation loss is at or below `target`, if any.
  std::optional<std::int64_t> first_step_reaching(double target) const {
    for (const auto& s : steps)
      if (!std::isnan(s.eval_loss) && s.eval_loss <= target) return s.step + 1;
    return std::nullopt;
  }
};

template <typename T>
struct TrainResult {
  RunReport report;
  ToyModel<T> model;
};

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const Task<T>& task) {
  cfg.validate();
  ToyModel<T> model = build_model<T>(cfg, task);
  RunReport report;
  report.config = cfg;
  report.trainable_layer_params = model.trainable_layer_params();
  for (const auto& w : task.base_weights) report.base_weight_params += w.size();
  report.init_errors = model.quant_metrics();
  report.init_eval_loss = evaluate(model, task);

  AdamW opt(cfg.adam);
  const LrSchedule schedule(cfg.lr, cfg.steps, cfg.warmup_frac);
  Rng shuffle_rng(cfg.seed ^ 0x51A7ULL);
  std::vector<std::size_t> order(task.inputs.cols());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    if (cursor + cfg.batch_size > order.size()) {
      for (std::size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[shuffle_rng.below(i + 1)]);
      cursor = 0;
    }
    const std::span<const std::size_t> idx(order.data() + cursor, cfg.batch_size);
    cursor += cfg.batch_size;

    model.probe().reset_peak();
    const Matrix<T> out = model.forward(gather_columns(task.inputs, idx));
    Matrix<T> grad;
    const double loss = loss_and_grad<T>(task, out, idx, &grad);
    if (!std::isfinite(loss)) {
      throw Error("training diverged at step " + std::to_string(step) + " (loss " +
                  std::to_string(loss) + ", method " + std::string(to_string(cfg.method)) + ")");
    }
    model.backward(grad);

    const double lr = schedule.at(step);
    // Scale and bias steps are a fixed fraction of the main step.
    std::vector<ParamSlot<T>> qparams, others;
    for (auto& p : model.parameters())
      (p.kind == ParamKind::kScale || p.kind == ParamKind::kBias ? qparams : others).push_back(p);
    opt.step(others, lr);
    if (!qparams.empty()) opt.step(qparams, lr * cfg.qparam_lr_scale);
    model.release_scratch();

    StepRecord rec{step, loss, lr, std::numeric_limits<double>::quiet_NaN(),
                   model.probe().peak_count(), model.probe().peak_bytes()};
    report.peak_scratch_count = std::max(report.peak_scratch_count, rec.scratch_peak_count);
    report.peak_scratch_bytes = std::max(report.peak_scratch_bytes, rec.scratch_peak_bytes);
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) rec.eval_loss = evaluate(model, task);
    report.steps.push_back(rec);
  }
  report.final_eval_loss = cfg.steps == 0 ? report.init_eval_loss : report.steps.back().eval_loss;
  report.post_errors = model.quant_metrics();
  return {std::move(report), std::move(model)};
}

// True iff no more than one dL/dW_q buffer was ever live at once.
inline bool probe_assert_flushed(const AllocProbe& probe) { return probe.peak_count() == 1; }

}  // namespace l4q
