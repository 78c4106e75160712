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

// Acceptance checks. Prints one PASS or FAIL line per criterion and exits
// nonzero if any criterion fails. Tolerances are fixed below.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "l4q/inference.hpp"
#include "l4q/layers.hpp"
#include "l4q/qinit.hpp"
#include "l4q/quantizer.hpp"
#include "l4q/trainer.hpp"
#include "support/gradient_oracle.hpp"

namespace {

using namespace l4q;
using testing::Instance;
using testing::Kind;

constexpr double kGradTol = 1e-5;
constexpr double kGradSeconds = 60.0;
constexpr int kGradInstances = 20;
constexpr double kExactTol = 1e-12;
constexpr int kInitSeeds = 100;
constexpr double kOrderingFraction = 0.90;
constexpr double kExportTol = 1e-6;
constexpr int kExportInputs = 100;
constexpr double kMergeTol = 1e-10;
constexpr int kEfficacySeeds = 5;
constexpr int kEfficacyWins = 4;
constexpr double kReachFraction = 0.5;
constexpr double kEfficacySeconds = 600.0;
constexpr int kCodecCases = 1000;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// 1. Analytic gradients against central differences, every layer kind.
Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  int failures = 0;
  for (Kind k : {Kind::kLora, Kind::kLsq, Kind::kQatLora, Kind::kL4Q, Kind::kQaLora})
    for (int seed = 0; seed < kGradInstances; ++seed) {
      const auto p = testing::make_instance(k, 9000 + seed);
      const auto r = testing::check_against_oracle(p);
      for (double e : {r.dA, r.dB, r.ds, r.db, r.dW, r.dX}) {
        worst = std::max(worst, e);
        failures += !(e < kGradTol);
      }
    }
  const double dt = seconds_since(t0);
  return {failures == 0 && dt < kGradSeconds,
          fmt("5 kinds x %d instances, worst rel err %.2e (< %.0e), %.1f s (< %.0f s)", kGradInstances, worst,
              kGradTol, dt, kGradSeconds)};
}

// 2. Gating, alpha = 0 reduction, QAT-LoRA vs L4Q.
Outcome identities() {
  using testing::mat;
  int gating_bad = 0, reduction_bad = 0, distinct_bad = 0, clipped_total = 0;
  for (int seed = 0; seed < kGradInstances; ++seed) {
    const auto p = testing::make_instance(Kind::kL4Q, 9100 + seed);
    const QuantSpec spec(p.bits, p.group);
    const auto w0 = mat(p.out, p.in, p.w0);
    const auto x = mat(p.in, p.tokens, p.x);
    const auto dy = mat(p.out, p.tokens, p.g);
    LoraAdapter<double> ad{mat(p.rank, p.in, p.a), mat(p.out, p.rank, p.b), p.alpha};

    // Upstream gradient supported only on clipped weights must not reach A or B.
    L4qLayer<double> layer(w0, ad, {testing::params_of(p), spec, false});
    layer.forward(x);
    const auto wc = layer.combined_weight();
    Matrix<double> x_unit(p.in, p.in, 0.0);
    for (std::size_t i = 0; i < p.in; ++i) x_unit(i, i) = 1.0;
    L4qLayer<double> probe(w0, ad, {testing::params_of(p), spec, false});
    probe.forward(x_unit);
    Matrix<double> dy_clip(p.out, p.in, 0.0);
    const auto params = testing::params_of(p);
    for (std::size_t o = 0; o < p.out; ++o)
      for (std::size_t i = 0; i < p.in; ++i) {
        const std::size_t g = params.index(o, i, p.group);
        if (!in_range(scaled_value(wc(o, i), params.scales[g], params.biases[g]), spec)) {
          dy_clip(o, i) = 1.0 + static_cast<double>(o + i);
          ++clipped_total;
        }
      }
    const auto gc = probe.backward(dy_clip);
    for (double v : gc.dA.values()) gating_bad += v != 0.0;
    for (double v : gc.dB.values()) gating_bad += v != 0.0;

    L4qLayer<double> l4q0(w0, {ad.A, ad.B, 0.0}, {testing::params_of(p), spec, false});
    LsqLayer<double> lsq(w0, {testing::params_of(p), spec, false});
    reduction_bad += !(l4q0.forward(x) == lsq.forward(x));
    const auto g1 = l4q0.backward(dy);
    const auto g2 = lsq.backward(dy);
    reduction_bad += !(g1.ds == g2.ds && g1.db == g2.db);

    QatLoraLayer<double> qat(w0, ad, {testing::params_of(p), spec, false});
    L4qLayer<double> l4q(w0, ad, {testing::params_of(p), spec, false});
    distinct_bad += !(max_abs_diff(qat.forward(x), l4q.forward(x)) > kExactTol);
    LoraAdapter<double> zero{ad.A, Matrix<double>(p.out, p.rank), p.alpha};
    QatLoraLayer<double> qat0(w0, zero, {testing::params_of(p), spec, false});
    L4qLayer<double> l4qz(w0, zero, {testing::params_of(p), spec, false});
    distinct_bad += !(qat0.forward(x) == l4qz.forward(x));
  }
  return {gating_bad == 0 && reduction_bad == 0 && distinct_bad == 0 && clipped_total > 0,
          fmt("%d instances: gating violations %d over %d clipped weights, reduction mismatches %d, "
              "qat-lora/l4q distinction failures %d",
              kGradInstances, gating_bad, clipped_total, reduction_bad, distinct_bad)};
}

// 3. Initial clip errors on heavy-tailed tensors, then clip ordering after training.
Outcome init_properties() {
  const QuantSpec spec(4, 32);
  int zero_bad = 0, positive_bad = 0;
  for (int seed = 0; seed < kInitSeeds; ++seed) {
    const auto task = make_task<double>(TaskKind::kRegression, seed);
    for (const auto& w : task.base_weights) {
      for (InitScheme s : {InitScheme::kL4Q, InitScheme::kAsymm})
        zero_bad += clip_error(w, init_matrix(w, s, spec).params, spec) != 0.0;
      for (InitScheme s : {InitScheme::kLsqPlus, InitScheme::kSymm})
        positive_bad += !(clip_error(w, init_matrix(w, s, spec).params, spec) > 0.0);
    }
  }
  int vs_asymm = 0, vs_lsq = 0, both = 0;
  for (int seed = 0; seed < kInitSeeds; ++seed) {
    TrainConfig c;
    c.seed = static_cast<std::uint64_t>(seed);
    c.steps = 1000;
    c.eval_every = c.steps;  // only the final evaluation; the trajectory is unchanged
    const auto task = make_task<float>(c.task, c.seed, c.shape);
    double clip[3];
    const InitScheme schemes[3] = {InitScheme::kL4Q, InitScheme::kAsymm, InitScheme::kLsqPlus};
    for (int i = 0; i < 3; ++i) {
      c.init = schemes[i];
      clip[i] = train<float>(c, task).report.post_errors->clip;
    }
    vs_asymm += clip[0] <= clip[1];
    vs_lsq += clip[0] <= clip[2];
    both += clip[0] <= clip[1] && clip[0] <= clip[2];
  }
  const double frac = static_cast<double>(both) / kInitSeeds;
  return {zero_bad == 0 && positive_bad == 0 && frac >= kOrderingFraction,
          fmt("init: l4q/asymm nonzero clip %d, lsq+/symm zero clip %d; post-training l4q<=asymm %d/%d, "
              "l4q<=lsq+ %d/%d, both %d/%d (need >= %.0f%%)",
              zero_bad, positive_bad, vs_asymm, kInitSeeds, vs_lsq, kInitSeeds, both, kInitSeeds,
              100 * kOrderingFraction)};
}

// 4. One live weight-gradient buffer during backward; exact trainable count.
Outcome memory_contract() {
  TrainConfig c;
  c.shape.layers = 4;
  c.steps = 20;
  const auto task = make_task<float>(c.task, c.seed, c.shape);
  auto model = build_model<float>(c, task);
  const auto out = model.forward(gather_columns<float>(task.inputs, std::vector<std::size_t>{0, 1, 2, 3}));
  model.probe().reset_peak();
  model.backward(Matrix<float>(out.rows(), out.cols(), 1.0f));
  const bool single = probe_assert_flushed(model.probe());
  const std::size_t peak_backward = model.probe().peak_count();

  std::size_t expected = 0;
  for (const auto& w : task.base_weights)
    expected += c.rank * w.cols() + w.rows() * c.rank + 2 * w.rows() * (w.cols() / c.group_size);
  const std::size_t counted = model.trainable_layer_params();

  const auto run = train<float>(c, task).report;
  return {single && run.peak_scratch_count == 1 && counted == expected,
          fmt("4-layer l4q backward peak %zu, training-run peak %zu, trainable %zu == %zu (base weights %zu)",
              peak_backward, run.peak_scratch_count, counted, expected, run.base_weight_params)};
}

// 5. Exported checkpoint forward, QA-LoRA merge, QAT-LoRA refusal.
Outcome quantized_equivalence() {
  TrainConfig c;
  c.steps = 200;
  const auto task = make_task<float>(c.task, c.seed, c.shape);
  auto res = train<float>(c, task);
  const auto path = (std::filesystem::temp_directory_path() / "l4q_acceptance.l4q").string();
  save(export_checkpoint(res.model, Method::kL4Q, true), path);
  const Checkpoint ck = load(path);
  std::filesystem::remove(path);
  Rng rng(77);
  double export_gap = 0.0;
  for (int i = 0; i < kExportInputs; ++i) {
    const auto x = randn<float>(rng, c.shape.input_dim, 1, 1.0);
    export_gap = std::max(export_gap, max_abs_diff(checkpoint_forward(ck, x), res.model.forward(x)));
  }

  double merge_gap = 0.0;
  for (int seed = 0; seed < kGradInstances; ++seed) {
    const auto p = testing::make_instance(Kind::kQaLora, 9200 + seed);
    auto layer = testing::build(p);
    const auto x = testing::mat(p.in, p.tokens, p.x);
    const auto merged = layer->quantized_form();
    merge_gap = std::max(merge_gap, max_abs_diff(matmul(merged->weight.dequantized(), x), layer->forward(x)));
  }

  bool refused = false;
  TrainConfig q = c;
  q.method = Method::kQatLora;
  q.steps = 5;
  auto qat = train<float>(q, task);
  try {
    export_checkpoint(qat.model, Method::kQatLora, true);
  } catch (const CheckpointError& e) {
    refused = std::string(e.what()).find("mixed-precision method") != std::string::npos;
  }
  return {export_gap < kExportTol && merge_gap < kMergeTol && refused,
          fmt("file vs training forward max diff %.2e (< %.0e) on %d inputs, qa-lora merge diff %.2e (< %.0e), "
              "qat-lora fully-quantized export %s",
              export_gap, kExportTol, kExportInputs, merge_gap, kMergeTol, refused ? "refused" : "NOT refused")};
}

// 6. L4Q against the frozen round-to-nearest baseline.
Outcome efficacy() {
  const auto t0 = std::chrono::steady_clock::now();
  std::string detail;
  bool pass = true;
  for (int bits : {4, 3}) {
    int wins = 0, fast = 0;
    for (int seed = 0; seed < kEfficacySeeds; ++seed) {
      TrainConfig c;
      c.n_bits = bits;
      c.seed = static_cast<std::uint64_t>(seed);
      const auto task = make_task<float>(c.task, c.seed, c.shape);
      c.method = Method::kPtqFrozen;
      const double ptq = train<float>(c, task).report.final_eval_loss;
      c.method = Method::kL4Q;
      const auto l4q = train<float>(c, task).report;
      wins += l4q.final_eval_loss < ptq;
      const auto reach = l4q.first_step_reaching(ptq);
      fast += reach && static_cast<double>(*reach) <= kReachFraction * static_cast<double>(c.steps);
    }
    pass = pass && wins >= kEfficacyWins && fast >= kEfficacyWins;
    detail += fmt("%d-bit: lower loss %d/%d, reached baseline within half the steps %d/%d; ", bits, wins,
                  kEfficacySeeds, fast, kEfficacySeeds);
  }
  const double dt = seconds_since(t0);
  return {pass && dt < kEfficacySeconds, detail + fmt("%.0f s (< %.0f s)", dt, kEfficacySeconds)};
}

// 7. Cost model gap and the timing table.
Outcome inference_cost() {
  Rng rng(5);
  int bad = 0, cases = 0;
  for (std::size_t in : {32, 64, 256, 4096})
    for (std::size_t out : {16, 64, 4096})
      for (std::size_t r : {1, 4, 16, 64})
        for (std::uint64_t tokens : {1, 7, 64, 2048}) {
          const LayerDims d{in, out, 4, 16};
          const auto fq = flops(InferencePath::kFullyQuantized, d, r, tokens);
          const auto mx = flops(InferencePath::kMixed, d, r, tokens);
          bad += !(fq.macs < mx.macs) || mx.macs - fq.macs != 2ULL * r * (in + out) * tokens;
          ++cases;
        }
  TrainConfig c;
  c.method = Method::kPtqFrozen;
  const auto task = make_task<float>(c.task, c.seed, c.shape);
  const auto ck = export_checkpoint(build_model<float>(c, task), c.method, true);
  const auto rows = bench(ck, kBenchBatches, 4, 3);
  const auto path = (std::filesystem::temp_directory_path() / "l4q_acceptance_bench.csv").string();
  {
    std::ofstream f(path);
    f << bench_csv(rows);
  }
  int mixed_rows = 0, fq_rows = 0;
  bool ordered = true;
  for (const auto& r : rows) {
    (r.path == InferencePath::kMixed ? mixed_rows : fq_rows)++;
    ordered = ordered && r.min_s <= r.median_s && r.median_s <= r.max_s;
  }
  const auto& b64m = rows.back();
  const auto& b64f = rows[kBenchBatches.size() - 1];
  const bool table_ok = fq_rows == 7 && mixed_rows == 7 && ordered && rows.front().batch == 1 && b64m.batch == 64;
  return {bad == 0 && table_ok,
          fmt("%d dims cases, %d gap mismatches; bench rows %d+%d written to %s; batch 64 median %.2e s fully-quantized, "
              "%.2e s mixed (reported only)",
              cases, bad, fq_rows, mixed_rows, path.c_str(), b64f.median_s, b64m.median_s)};
}

// 8. Bit-packing and checkpoint roundtrips.
Outcome codec() {
  Rng rng(31);
  int bad = 0;
  for (int bits = 2; bits <= 8; ++bits) {
    const QuantSpec spec(bits, 1);
    for (int k = 0; k < kCodecCases; ++k) {
      const std::size_t n = rng.below(200);
      std::vector<std::int8_t> codes(n);
      for (auto& v : codes)
        v = static_cast<std::int8_t>(spec.q_n() + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.q_p() - spec.q_n() + 1))));
      bad += unpack(pack(codes, spec), spec, n) != codes;
    }
  }
  TrainConfig c;
  c.steps = 30;
  int ck_bad = 0;
  for (Method m : {Method::kL4Q, Method::kQaLora, Method::kQatLora}) {
    c.method = m;
    const auto task = make_task<float>(c.task, c.seed, c.shape);
    auto res = train<float>(c, task);
    const auto ck = export_checkpoint(res.model, m, mergeable(m));
    const auto path = (std::filesystem::temp_directory_path() / "l4q_acceptance_codec.l4q").string();
    save(ck, path);
    const auto back = load(path);
    ck_bad += !(back == ck) || serialize(back) != serialize(ck);
    std::filesystem::remove(path);
  }
  return {bad == 0 && ck_bad == 0,
          fmt("pack/unpack widths 2-8 x %d cases: %d mismatches; checkpoint save/load mismatches %d/3", kCodecCases,
              bad, ck_bad)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"gating and reduction identities", identities},
      {"initialization properties", init_properties},
      {"memory contract", memory_contract},
      {"fully-quantized equivalence", quantized_equivalence},
      {"training efficacy ordering", efficacy},
      {"inference cost gap", inference_cost},
      {"codec exactness", codec},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %zu %s: %s | %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
