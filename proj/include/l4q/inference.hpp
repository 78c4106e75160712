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
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "l4q/layers.hpp"
#include "l4q/quantizer.hpp"
#include "l4q/trainer.hpp"

namespace l4q {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::array<char, 4> kCheckpointMagic = {'L', '4', 'Q', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layers are stored as packed codes with 32-bit scales and biases. A layer
// with an adapter is mixed precision; otherwise it is fully quantized.
struct Checkpoint {
  std::vector<QuantizedLinear<float>> layers;
  Matrix<float> head_weight;
  std::vector<float> head_bias;

  bool fully_quantized() const {
    return std::none_of(layers.begin(), layers.end(),
                        [](const auto& l) { return l.adapter.has_value(); });
  }
  bool operator==(const Checkpoint& o) const {
    if (layers.size() != o.layers.size() || head_weight != o.head_weight || head_bias != o.head_bias)
      return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& a = layers[i];
      const auto& b = o.layers[i];
      if (!(a.weight == b.weight) || a.adapter.has_value() != b.adapter.has_value()) return false;
      if (a.adapter && (a.adapter->A != b.adapter->A || a.adapter->B != b.adapter->B ||
                        a.adapter->alpha != b.adapter->alpha))
        return false;
    }
    return true;
  }
};

inline bool mergeable(Method m) { return m != Method::kQatLora && m != Method::kLora; }

// Builds the checkpoint for a trained model. Methods whose adapter cannot be
// folded into the low-bit weights are refused when a fully-quantized export
// is requested.
template <typename T>
Checkpoint export_checkpoint(const ToyModel<T>& model, Method method, bool fully_quantized) {
  if (method == Method::kLora)
    throw CheckpointError("export: lora is an unquantized method and has no quantized checkpoint");
  if (fully_quantized && !mergeable(method)) {
    throw CheckpointError("export: " + std::string(to_string(method)) +
                          " is a mixed-precision method; its adapter cannot be merged into the "
                          "quantized weights");
  }
  Checkpoint ck;
  for (std::size_t i = 0; i < model.depth(); ++i) {
    auto q = model.layer(i).quantized_form();
    if (!q) throw CheckpointError("export: layer " + std::to_string(i) + " has no quantized form");
    QuantizedLinear<float> layer;
    layer.weight.rows = q->weight.rows;
    layer.weight.cols = q->weight.cols;
    layer.weight.spec = q->weight.spec;
    layer.weight.params = q->weight.params.template cast<float>();
    layer.weight.packed = q->weight.packed;
    if (q->adapter) layer.adapter = q->adapter->template cast<float>();
    ck.layers.push_back(std::move(layer));
  }
  ck.head_weight = model.head().weight().template cast<float>();
  ck.head_bias.assign(model.head().bias().begin(), model.head().bias().end());
  return ck;
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> vs) {
    for (float v : vs) f32(v);
  }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::vector<float> f32s(std::size_t n, const char* what) {
    need(n * 4, what);
    std::vector<float> v(n);
    for (auto& x : v) x = f32(what);
    return v;
  }
  std::vector<std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> v(in_.begin() + pos_, in_.begin() + pos_ + n);
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n)
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline std::size_t dim(std::uint32_t v, const char* what) {
  if (v == 0 || v > (1u << 20)) throw CheckpointError(std::string("checkpoint: bad ") + what);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kCheckpointMagic.data()), 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.layers.size()));
  for (const auto& l : ck.layers) {
    const auto& t = l.weight;
    w.u32(static_cast<std::uint32_t>(t.rows));
    w.u32(static_cast<std::uint32_t>(t.cols));
    w.u32(static_cast<std::uint32_t>(t.spec.n_bits));
    w.u32(static_cast<std::uint32_t>(t.spec.group_size));
    w.u64(t.packed.size());
    w.bytes(t.packed);
    w.f32s(t.params.scales);
    w.f32s(t.params.biases);
    w.u32(l.adapter ? 1 : 0);
    if (l.adapter) {
      w.u32(static_cast<std::uint32_t>(l.adapter->rank()));
      w.f32(l.adapter->alpha);
      w.f32s(l.adapter->A.values());
      w.f32s(l.adapter->B.values());
    }
  }
  w.u32(static_cast<std::uint32_t>(ck.head_weight.rows()));
  w.u32(static_cast<std::uint32_t>(ck.head_weight.cols()));
  w.f32s(ck.head_weight.values());
  w.f32s(ck.head_bias);
  return w.take();
}

inline Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin()))
    throw CheckpointError("checkpoint: bad magic (not an L4Q1 file)");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t n_layers = r.u32("layer count");
  if (n_layers > 64) throw CheckpointError("checkpoint: bad layer count");
  Checkpoint ck;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    QuantizedLinear<float> l;
    auto& t = l.weight;
    t.rows = detail::dim(r.u32("rows"), "rows");
    t.cols = detail::dim(r.u32("cols"), "cols");
    const std::uint32_t bits = r.u32("n_bits");
    const std::uint32_t gs = r.u32("group_size");
    try {
      t.spec = QuantSpec(static_cast<int>(bits), gs);
      t.spec.check_columns(t.cols);
    } catch (const Error& e) {
      throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    const std::uint64_t plen = r.u64("packed length");
    if (plen != packed_size(t.rows * t.cols, t.spec.n_bits))
      throw CheckpointError("checkpoint: packed length does not match layer shape");
    t.packed = r.bytes(plen, "packed codes");
    t.params = GroupParams<float>(t.rows, t.cols / t.spec.group_size);
    t.params.scales = r.f32s(t.params.count(), "scales");
    t.params.biases = r.f32s(t.params.count(), "biases");
    try {
      t.params.check(t.rows, t.cols, t.spec);
      (void)t.codes();
    } catch (const Error& e) {
      throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    const std::uint32_t has_adapter = r.u32("adapter flag");
    if (has_adapter > 1) throw CheckpointError("checkpoint: bad adapter flag");
    if (has_adapter) {
      const std::size_t rank = detail::dim(r.u32("rank"), "rank");
      LoraAdapter<float> a;
      a.alpha = r.f32("alpha");
      a.A = Matrix<float>(rank, t.cols, r.f32s(rank * t.cols, "adapter A"));
      a.B = Matrix<float>(t.rows, rank, r.f32s(t.rows * rank, "adapter B"));
      l.adapter = std::move(a);
    }
    if (i > 0 && t.cols != ck.layers.back().weight.rows)
      throw CheckpointError("checkpoint: layer " + std::to_string(i) + " input width mismatch");
    ck.layers.push_back(std::move(l));
  }
  const std::size_t hr = detail::dim(r.u32("head rows"), "head rows");
  const std::size_t hc = detail::dim(r.u32("head cols"), "head cols");
  ck.head_weight = Matrix<float>(hr, hc, r.f32s(hr * hc, "head weight"));
  ck.head_bias = r.f32s(hr, "head bias");
  if (!ck.layers.empty() && hc != ck.layers.back().weight.rows)
    throw CheckpointError("checkpoint: head width mismatch");
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after head");
  return ck;
}

inline void save(const Checkpoint& ck, const std::string& path) {
  const auto bytes = serialize(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing " + path);
}

inline Checkpoint load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                        std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

// Decodes one weight row at a time and multiplies without materializing the
// dequantized matrix. Accumulation order matches matmul().
template <typename T>
Matrix<T> fused_forward(const PackedQuantTensor<T>& layer, const Matrix<T>& x) {
  if (x.rows() != layer.cols)
    throw ShapeError("fused_forward: input has " + std::to_string(x.rows()) + " rows, layer has " +
                     std::to_string(layer.cols) + " columns");
  const QuantSpec& spec = layer.spec;
  if (layer.packed.size() != packed_size(layer.rows * layer.cols, spec.n_bits))
    throw QuantError("fused_forward: packed buffer has wrong length");
  const std::size_t n = x.cols();
  const unsigned bits = static_cast<unsigned>(spec.n_bits);
  const std::uint32_t mask = (1u << bits) - 1u;
  const std::uint32_t sign = 1u << (bits - 1);
  Matrix<T> out(layer.rows, n);
  std::vector<T> wrow(layer.cols);
  std::vector<double> acc(n);
  std::size_t bit = 0;
  for (std::size_t r = 0; r < layer.rows; ++r) {
    for (std::size_t c = 0; c < layer.cols; ++c, bit += bits) {
      const std::size_t byte = bit >> 3;
      const unsigned shift = static_cast<unsigned>(bit & 7u);
      std::uint32_t u = static_cast<std::uint32_t>(layer.packed[byte]) >> shift;
      if (shift + bits > 8) u |= static_cast<std::uint32_t>(layer.packed[byte + 1]) << (8 - shift);
      u &= mask;
      const int code = static_cast<int>(u ^ sign) - static_cast<int>(sign);
      const std::size_t g = layer.params.index(r, c, spec.group_size);
      wrow[c] = static_cast<T>(code) * layer.params.scales[g] + layer.params.biases[g];
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < layer.cols; ++k) {
      const double w = static_cast<double>(wrow[k]);
      if (w == 0.0) continue;
      const auto xr = x.row(k);
      for (std::size_t j = 0; j < n; ++j) acc[j] += w * static_cast<double>(xr[j]);
    }
    auto o = out.row(r);
    for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<T>(acc[j]);
  }
  return out;
}

// One layer: fused low-bit product, plus the separate adapter path when the
// layer is mixed precision.
inline Matrix<float> layer_forward(const QuantizedLinear<float>& l, const Matrix<float>& x) {
  Matrix<float> y = fused_forward(l.weight, x);
  if (l.adapter) {
    l.adapter->check(l.weight.rows, l.weight.cols);
    y = y + scaled(matmul(l.adapter->B, matmul(l.adapter->A, x)), l.adapter->alpha);
  }
  return y;
}

inline Matrix<float> checkpoint_forward(const Checkpoint& ck, const Matrix<float>& x) {
  Matrix<float> h = x;
  for (const auto& l : ck.layers) h = detail::tanh_of(layer_forward(l, h));
  return detail::add_bias(matmul(ck.head_weight, h), ck.head_bias);
}

enum class InferencePath { kFullyQuantized, kMixed };

inline std::string_view to_string(InferencePath p) {
  return p == InferencePath::kFullyQuantized ? "fully-quantized" : "mixed";
}

inline InferencePath path_for(Method m) {
  return mergeable(m) ? InferencePath::kFullyQuantized : InferencePath::kMixed;
}

struct LayerDims {
  std::size_t in = 0;
  std::size_t out = 0;
  int n_bits = 4;
  std::size_t group_size = 32;
};

struct CostModel {
  std::uint64_t macs = 0;
  std::uint64_t bytes_read = 0;

  CostModel& operator+=(const CostModel& o) {
    macs += o.macs;
    bytes_read += o.bytes_read;
    return *this;
  }
  bool operator==(const CostModel&) const = default;
};

// Counts follow the 2*o*i convention per token (multiply and add). Bytes are
// packed weights, 32-bit scale and bias per group, 32-bit activations in, and
// 32-bit adapter weights and intermediate for the mixed path.
inline CostModel flops(InferencePath path, const LayerDims& d, std::size_t rank, std::uint64_t tokens) {
  if (d.in == 0 || d.out == 0) throw ShapeError("flops: dimensions must be positive");
  CostModel c;
  c.macs = 2ULL * d.out * d.in * tokens;
  const std::uint64_t groups = d.out * (d.in / std::max<std::size_t>(d.group_size, 1));
  c.bytes_read = packed_size(d.in * d.out, d.n_bits) + 8ULL * groups + 4ULL * d.in * tokens;
  if (path == InferencePath::kMixed) {
    c.macs += 2ULL * rank * (d.in + d.out) * tokens;
    c.bytes_read += 4ULL * rank * (d.in + d.out) + 4ULL * rank * tokens;
  }
  return c;
}

inline CostModel flops(Method m, const LayerDims& d, std::size_t rank, std::uint64_t tokens) {
  return flops(path_for(m), d, rank, tokens);
}

inline CostModel flops(InferencePath path, const Checkpoint& ck, std::size_t rank, std::uint64_t tokens) {
  CostModel total;
  for (const auto& l : ck.layers) {
    const LayerDims d{l.weight.cols, l.weight.rows, l.weight.spec.n_bits, l.weight.spec.group_size};
    total += flops(path, d, rank, tokens);
  }
  return total;
}

// A mixed-precision twin of a fully-quantized checkpoint: same low-bit
// weights plus a rank-r adapter on every layer, for timing comparisons.
inline Checkpoint with_adapters(const Checkpoint& ck, std::size_t rank, std::uint64_t seed) {
  Checkpoint mixed = ck;
  Rng rng(seed);
  for (auto& l : mixed.layers) {
    auto a = make_lora<float>(rng, rank, l.weight.cols, l.weight.rows, 1.0f);
    a.B = randn<float>(rng, l.weight.rows, rank, 0.02);
    l.adapter = std::move(a);
  }
  return mixed;
}

inline Checkpoint without_adapters(const Checkpoint& ck) {
  Checkpoint f = ck;
  for (auto& l : f.layers) l.adapter.reset();
  return f;
}

struct BenchRow {
  InferencePath path;
  std::size_t batch = 0;
  double tokens_per_sec = 0.0;
  double min_s = 0.0;
  double median_s = 0.0;
  double max_s = 0.0;
  CostModel cost;
};

inline const std::vector<std::size_t> kBenchBatches = {1, 2, 4, 8, 16, 32, 64};

// Wall-clock timings of the fully-quantized checkpoint and its mixed twin.
// Paths run one after the other, never concurrently.
inline std::vector<BenchRow> bench(const Checkpoint& ck, std::span<const std::size_t> batches,
                                   std::size_t rank = 4, int repeats = 5, std::uint64_t seed = 0) {
  if (repeats < 1) throw Error("bench: repeats must be >= 1");
  if (ck.layers.empty()) throw Error("bench: checkpoint has no layers");
  const Checkpoint fq = without_adapters(ck);
  const Checkpoint mixed = with_adapters(fq, rank, seed);
  Rng rng(seed ^ 0xBE7CULL);
  std::vector<BenchRow> rows;
  for (InferencePath path : {InferencePath::kFullyQuantized, InferencePath::kMixed}) {
    const Checkpoint& model = path == InferencePath::kFullyQuantized ? fq : mixed;
    for (std::size_t batch : batches) {
      const Matrix<float> x = randn<float>(rng, model.layers.front().weight.cols, batch, 1.0);
      (void)checkpoint_forward(model, x);
      std::vector<double> times;
      for (int k = 0; k < repeats; ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto y = checkpoint_forward(model, x);
        const auto t1 = std::chrono::steady_clock::now();
        if (!all_finite(y)) throw Error("bench: non-finite output");
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
      }
      std::sort(times.begin(), times.end());
      BenchRow row{path, batch, 0.0, times.front(), times[times.size() / 2], times.back(),
                   flops(path, model, rank, batch)};
      row.tokens_per_sec = row.median_s > 0.0 ? static_cast<double>(batch) / row.median_s : 0.0;
      rows.push_back(row);
    }
  }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "path,batch,tokens_per_sec,min,median,max\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%.6g,%.9g,%.9g,%.9g\n", std::string(to_string(r.path)).c_str(),
                  r.batch, r.tokens_per_sec, r.min_s, r.median_s, r.max_s);
    out += buf;
  }
  return out;
}

inline std::string flops_csv(const std::vector<BenchRow>& rows) {
  std::string out = "path,batch,macs,bytes_read\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%llu,%llu\n", std::string(to_string(r.path)).c_str(), r.batch,
                  static_cast<unsigned long long>(r.cost.macs),
                  static_cast<unsigned long long>(r.cost.bytes_read));
    out += buf;
  }
  return out;
}

}  // namespace l4q
