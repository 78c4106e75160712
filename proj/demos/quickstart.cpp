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

// Trains a small L4Q model next to the frozen round-to-nearest baseline,
// exports the fully-quantized checkpoint and runs it back.

#include <cstdio>
#include <filesystem>

#include "l4q/inference.hpp"
#include "l4q/trainer.hpp"

int main() {
  using namespace l4q;

  TrainConfig cfg;
  cfg.steps = 300;
  cfg.n_bits = 4;
  const auto task = make_task<float>(cfg.task, cfg.seed, cfg.shape);

  cfg.method = Method::kPtqFrozen;
  const auto baseline = train<float>(cfg, task).report;

  cfg.method = Method::kL4Q;
  auto l4q = train<float>(cfg, task);
  const auto& r = l4q.report;

  std::printf("ptq-frozen  eval loss %.5f -> %.5f\n", baseline.init_eval_loss, baseline.final_eval_loss);
  std::printf("l4q         eval loss %.5f -> %.5f\n", r.init_eval_loss, r.final_eval_loss);
  std::printf("l4q clip error %.3f -> %.3f, quant error %.3f -> %.3f\n", r.init_errors->clip,
              r.post_errors->clip, r.init_errors->quant, r.post_errors->quant);
  std::printf("trainable layer params %zu of %zu base weights, peak dWq buffers %zu\n",
              r.trainable_layer_params, r.base_weight_params, r.peak_scratch_count);

  const auto path = (std::filesystem::temp_directory_path() / "quickstart.l4q").string();
  save(export_checkpoint(l4q.model, Method::kL4Q, true), path);
  const Checkpoint ck = load(path);
  std::printf("checkpoint %s: %ju bytes\n", path.c_str(),
              static_cast<std::uintmax_t>(std::filesystem::file_size(path)));

  Rng rng(1);
  const auto x = randn<float>(rng, cfg.shape.input_dim, 8, 1.0);
  std::printf("file vs in-memory forward, max abs diff %.3g\n",
              max_abs_diff(checkpoint_forward(ck, x), l4q.model.forward(x)));

  const auto fq = flops(InferencePath::kFullyQuantized, ck, cfg.rank, 1);
  const auto mixed = flops(InferencePath::kMixed, ck, cfg.rank, 1);
  std::printf("per token: %llu MACs fully quantized, %llu with a separate adapter path\n",
              static_cast<unsigned long long>(fq.macs), static_cast<unsigned long long>(mixed.macs));
  std::filesystem::remove(path);
  return 0;
}
