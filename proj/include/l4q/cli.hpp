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

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "l4q/inference.hpp"
#include "l4q/qinit.hpp"
#include "l4q/trainer.hpp"

namespace l4q::cli {

// Bad flags, bad config keys or values. Reported with exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  std::istringstream in(text);
  in >> value;
  if (in.fail() || !in.eof()) throw UsageError("config: bad value '" + text + "' for " + key);
  if constexpr (std::is_unsigned_v<T>) {
    if (text.find('-') != std::string::npos) throw UsageError("config: " + key + " must be nonnegative");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw UsageError("config: bad boolean '" + text + "' for " + key);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Sets one configuration key. Unknown keys are rejected.
inline void apply(TrainConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_number;
  if (key == "method") {
    auto m = parse_method(v);
    if (!m) throw UsageError("config: unknown method '" + v + "'");
    c.method = *m;
  } else if (key == "task") {
    auto t = parse_task(v);
    if (!t) throw UsageError("config: unknown task '" + v + "'");
    c.task = *t;
  } else if (key == "init") {
    auto s = parse_init_scheme(v);
    if (!s) throw UsageError("config: unknown init scheme '" + v + "'");
    c.init = *s;
  } else if (key == "n_bits") {
    c.n_bits = parse_number<int>(key, v);
  } else if (key == "group_size") {
    c.group_size = parse_number<std::size_t>(key, v);
    c.shape.group_size = c.group_size;
  } else if (key == "rank") {
    c.rank = parse_number<std::size_t>(key, v);
  } else if (key == "alpha") {
    c.alpha = parse_number<double>(key, v);
  } else if (key == "lr") {
    c.lr = parse_number<double>(key, v);
  } else if (key == "qparam_lr_scale") {
    c.qparam_lr_scale = parse_number<double>(key, v);
  } else if (key == "weight_decay") {
    c.adam.weight_decay = parse_number<double>(key, v);
  } else if (key == "beta1") {
    c.adam.beta1 = parse_number<double>(key, v);
  } else if (key == "beta2") {
    c.adam.beta2 = parse_number<double>(key, v);
  } else if (key == "eps") {
    c.adam.eps = parse_number<double>(key, v);
  } else if (key == "warmup_frac") {
    c.warmup_frac = parse_number<double>(key, v);
  } else if (key == "total_steps" || key == "steps") {
    c.steps = parse_number<std::int64_t>(key, v);
  } else if (key == "batch_size") {
    c.batch_size = parse_number<std::size_t>(key, v);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "freeze_bias") {
    c.freeze_bias = detail::parse_bool(key, v);
  } else if (key == "eval_every") {
    c.eval_every = parse_number<std::int64_t>(key, v);
  } else if (key == "layers") {
    c.shape.layers = parse_number<std::size_t>(key, v);
  } else if (key == "input_dim") {
    c.shape.input_dim = parse_number<std::size_t>(key, v);
  } else if (key == "hidden_dim") {
    c.shape.hidden_dim = parse_number<std::size_t>(key, v);
  } else if (key == "output_dim") {
    c.shape.output_dim = parse_number<std::size_t>(key, v);
  } else if (key == "samples") {
    c.shape.samples = parse_number<std::size_t>(key, v);
  } else {
    throw UsageError("config: unknown key '" + key + "'");
  }
}

// key = value lines; '#' starts a comment.
inline std::vector<std::pair<std::string, std::string>> read_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
    auto key = detail::trim(line.substr(0, eq));
    auto value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw UsageError("config line " + std::to_string(lineno) + ": empty key or value");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read config file " + path);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// Every key, one per line, in a form read_config_text accepts.
inline std::string snapshot(const TrainConfig& c) {
  std::ostringstream s;
  s << "method = " << to_string(c.method) << "\n"
    << "task = " << to_string(c.task) << "\n"
    << "n_bits = " << c.n_bits << "\n"
    << "group_size = " << c.group_size << "\n"
    << "rank = " << c.rank << "\n"
    << "alpha = " << fmt_double(c.alpha) << "\n"
    << "init = " << to_string(c.init) << "\n"
    << "lr = " << fmt_double(c.lr) << "\n"
    << "qparam_lr_scale = " << fmt_double(c.qparam_lr_scale) << "\n"
    << "weight_decay = " << fmt_double(c.adam.weight_decay) << "\n"
    << "beta1 = " << fmt_double(c.adam.beta1) << "\n"
    << "beta2 = " << fmt_double(c.adam.beta2) << "\n"
    << "eps = " << fmt_double(c.adam.eps) << "\n"
    << "warmup_frac = " << fmt_double(c.warmup_frac) << "\n"
    << "steps = " << c.steps << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "seed = " << c.seed << "\n"
    << "freeze_bias = " << (c.freeze_bias ? "true" : "false") << "\n"
    << "eval_every = " << c.eval_every << "\n"
    << "layers = " << c.shape.layers << "\n"
    << "input_dim = " << c.shape.input_dim << "\n"
    << "hidden_dim = " << c.shape.hidden_dim << "\n"
    << "output_dim = " << c.shape.output_dim << "\n"
    << "samples = " << c.shape.samples << "\n";
  return s.str();
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

// Output directory that records every file it writes. Timing files are
// listed without size or hash since their contents vary between runs.
class RunDir {
 public:
  explicit RunDir(std::string root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec) throw Error("cannot create output directory " + root_ + ": " + ec.message());
  }

  std::string path(const std::string& name) const { return (std::filesystem::path(root_) / name).string(); }

  void write(const std::string& name, const std::string& content, bool timing = false) {
    std::ofstream f(path(name), std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path(name));
    f << content;
    if (!f) throw Error("failed writing " + path(name));
    record(name, content, timing);
  }

  // For files produced by other writers.
  void adopt(const std::string& name) {
    std::ifstream f(path(name), std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    record(name, s.str(), false);
  }

  void finish() {
    std::string m = "# name\tbytes\tsha256\n";
    for (const auto& [name, line] : entries_) m += name + "\t" + line + "\n";
    std::ofstream f(path("manifest.txt"), std::ios::binary | std::ios::trunc);
    f << m;
    if (!f) throw Error("failed writing manifest");
  }

 private:
  void record(const std::string& name, const std::string& content, bool timing) {
    entries_[name] = timing ? std::string("-\t-") : std::to_string(content.size()) + "\t" + sha256_hex(content);
  }

  std::string root_;
  std::map<std::string, std::string> entries_;
};

inline std::string loss_csv(const RunReport& r) {
  std::string out = "step,loss,lr,eval_loss,scratch_peak_count,scratch_peak_bytes\n";
  for (const auto& s : r.steps) {
    out += std::to_string(s.step) + "," + fmt_double(s.loss) + "," + fmt_double(s.lr) + "," +
           (std::isnan(s.eval_loss) ? std::string() : fmt_double(s.eval_loss)) + "," +
           std::to_string(s.scratch_peak_count) + "," + std::to_string(s.scratch_peak_bytes) + "\n";
  }
  return out;
}

inline std::string summary_text(const RunReport& r) {
  std::ostringstream s;
  const auto& c = r.config;
  s << "method " << to_string(c.method) << "\n"
    << "task " << to_string(c.task) << "\n"
    << "n_bits " << c.n_bits << "\n"
    << "group_size " << c.group_size << "\n"
    << "steps " << c.steps << "\n"
    << "seed " << c.seed << "\n"
    << "init_eval_loss " << fmt_double(r.init_eval_loss) << "\n"
    << "final_eval_loss " << fmt_double(r.final_eval_loss) << "\n";
  if (r.init_errors && r.post_errors) {
    s << "init_quant_error " << fmt_double(r.init_errors->quant) << "\n"
      << "init_clip_error " << fmt_double(r.init_errors->clip) << "\n"
      << "post_quant_error " << fmt_double(r.post_errors->quant) << "\n"
      << "post_clip_error " << fmt_double(r.post_errors->clip) << "\n";
  }
  s << "peak_scratch_count " << r.peak_scratch_count << "\n"
    << "peak_scratch_bytes " << r.peak_scratch_bytes << "\n"
    << "trainable_layer_params " << r.trainable_layer_params << "\n"
    << "base_weight_params " << r.base_weight_params << "\n";
  return s.str();
}

// Flags shared by every subcommand. Values are routed through apply() so
// flags and config files are validated identically.
struct CommonFlags {
  std::string config_path;
  std::string out;
  std::optional<std::string> seed, method, bits, group_size, rank, alpha, init, steps, lr;
  bool freeze_bias = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value configuration file");
    cmd->add_option("--out", out, "output directory")->required();
    cmd->add_option("--seed", seed, "random seed");
    cmd->add_option("--method", method, "lora|lsq-qat|qat-lora|l4q|qa-lora|ptq-frozen");
    cmd->add_option("--bits", bits, "weight bit width (2-8)");
    cmd->add_option("--group-size", group_size, "quantization group size");
    cmd->add_option("--rank", rank, "adapter rank");
    cmd->add_option("--alpha", alpha, "adapter scaling");
    cmd->add_option("--init", init, "lsq+|symm|asymm|l4q");
    cmd->add_option("--steps", steps, "training steps");
    cmd->add_option("--lr", lr, "peak learning rate");
    cmd->add_flag("--freeze-bias", freeze_bias, "keep quantization biases fixed");
  }

  TrainConfig resolve() const {
    TrainConfig c;
    if (!config_path.empty())
      for (const auto& [k, v] : read_config_text(read_text_file(config_path))) apply(c, k, v);
    const std::pair<const char*, const std::optional<std::string>*> overrides[] = {
        {"seed", &seed}, {"method", &method}, {"n_bits", &bits}, {"group_size", &group_size},
        {"rank", &rank}, {"alpha", &alpha},   {"init", &init},   {"steps", &steps},
        {"lr", &lr}};
    for (const auto& [key, value] : overrides)
      if (value->has_value()) apply(c, key, **value);
    if (freeze_bias) c.freeze_bias = true;
    try {
      c.validate();
    } catch (const UsageError&) {
      throw;
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

inline int cmd_train(const CommonFlags& f, std::ostream& out) {
  const TrainConfig c = f.resolve();
  RunDir dir(f.out);
  dir.write("resolved_config.txt", snapshot(c));
  const auto task = make_task<float>(c.task, c.seed, c.shape);
  auto res = train<float>(c, task);
  dir.write("loss.csv", loss_csv(res.report));
  dir.write("summary.txt", summary_text(res.report));
  if (is_quantized(c.method)) {
    save(export_checkpoint(res.model, c.method, mergeable(c.method)), dir.path("checkpoint.l4q"));
    dir.adopt("checkpoint.l4q");
  }
  dir.finish();
  out << to_string(c.method) << ": eval loss " << fmt_double(res.report.init_eval_loss) << " -> "
      << fmt_double(res.report.final_eval_loss) << "\n";
  return 0;
}

inline std::vector<InitScheme> parse_schemes(const std::string& text) {
  if (text == "all") return {kAllInitSchemes.begin(), kAllInitSchemes.end()};
  std::vector<InitScheme> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto s = parse_init_scheme(detail::trim(item));
    if (!s) throw UsageError("unknown init scheme '" + item + "'");
    out.push_back(*s);
  }
  if (out.empty()) throw UsageError("--schemes is empty");
  return out;
}

// Initial errors of each scheme on the heavy-tailed base weights of the task.
inline int cmd_init_compare(const CommonFlags& f, const std::string& schemes, std::ostream& out) {
  const TrainConfig c = f.resolve();
  const auto list = parse_schemes(schemes);
  RunDir dir(f.out);
  dir.write("resolved_config.txt", snapshot(c) + "schemes = " + schemes + "\n");
  const auto task = make_task<double>(c.task, c.seed, c.shape);
  const QuantSpec spec(c.n_bits, c.group_size);
  std::string csv = "scheme,n_bits,group_size,quant_error,clip_error,degenerate_groups\n";
  for (InitScheme s : list) {
    QuantErrors total;
    std::size_t degenerate = 0;
    for (const auto& w : task.base_weights) {
      const auto init = init_matrix(w, s, spec);
      const auto e = quant_errors(w, init.params, spec);
      total.quant += e.quant;
      total.clip += e.clip;
      degenerate += init.degenerate_groups.size();
    }
    csv += std::string(to_string(s)) + "," + std::to_string(c.n_bits) + "," +
           std::to_string(c.group_size) + "," + fmt_double(total.quant) + "," + fmt_double(total.clip) +
           "," + std::to_string(degenerate) + "\n";
  }
  dir.write("init_compare.csv", csv);
  dir.finish();
  out << csv;
  return 0;
}

inline int cmd_export(const CommonFlags& f, bool fully_quantized, std::ostream& out) {
  const TrainConfig c = f.resolve();
  if (c.method == Method::kLora)
    throw CheckpointError("export: lora is an unquantized method and has no quantized checkpoint");
  if (fully_quantized && !mergeable(c.method)) {
    throw CheckpointError("export: " + std::string(to_string(c.method)) +
                          " is a mixed-precision method; its adapter cannot be merged into the "
                          "quantized weights");
  }
  RunDir dir(f.out);
  dir.write("resolved_config.txt",
            snapshot(c) + "fully_quantized = " + (fully_quantized ? "true" : "false") + "\n");
  const auto task = make_task<float>(c.task, c.seed, c.shape);
  auto res = train<float>(c, task);
  const auto ck = export_checkpoint(res.model, c.method, fully_quantized);
  save(ck, dir.path("checkpoint.l4q"));
  dir.adopt("checkpoint.l4q");
  dir.finish();
  out << "wrote " << dir.path("checkpoint.l4q") << " ("
      << (ck.fully_quantized() ? "fully quantized" : "mixed precision") << ")\n";
  return 0;
}

// Without a checkpoint, benchmarks the untrained round-to-nearest model.
inline int cmd_bench(const CommonFlags& f, const std::string& checkpoint, int repeats, std::ostream& out) {
  TrainConfig c = f.resolve();
  Checkpoint ck;
  if (!checkpoint.empty()) {
    ck = load(checkpoint);
  } else {
    c.method = Method::kPtqFrozen;
    const auto task = make_task<float>(c.task, c.seed, c.shape);
    ck = export_checkpoint(build_model<float>(c, task), c.method, true);
  }
  RunDir dir(f.out);
  dir.write("resolved_config.txt", snapshot(c) + "checkpoint = " + checkpoint + "\n");
  const std::size_t rank = c.rank == 0 ? 4 : c.rank;
  const auto rows = bench(ck, kBenchBatches, rank, repeats, c.seed);
  dir.write("bench.csv", bench_csv(rows), true);
  dir.write("flops.csv", flops_csv(rows));
  dir.finish();
  out << bench_csv(rows);
  return 0;
}

inline int cmd_eval(const CommonFlags& f, const std::string& checkpoint, std::ostream& out) {
  const TrainConfig c = f.resolve();
  if (checkpoint.empty()) throw UsageError("eval: --checkpoint is required");
  const Checkpoint ck = load(checkpoint);
  const auto task = make_task<float>(c.task, c.seed, c.shape);
  if (ck.layers.empty() || ck.layers.front().weight.cols != task.shape.input_dim ||
      ck.head_weight.rows() != task.shape.output_dim)
    throw Error("eval: checkpoint shape does not match the configured task");
  RunDir dir(f.out);
  dir.write("resolved_config.txt", snapshot(c) + "checkpoint = " + checkpoint + "\n");
  const Matrix<float> y = checkpoint_forward(ck, task.inputs);
  std::vector<std::size_t> all(task.inputs.cols());
  std::iota(all.begin(), all.end(), 0);
  const double loss = loss_and_grad<float>(task, y, all, nullptr);
  std::string text = "loss " + fmt_double(loss) + "\n";
  if (task.kind == TaskKind::kClassification) {
    std::size_t hits = 0;
    for (std::size_t n = 0; n < y.cols(); ++n) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < y.rows(); ++k)
        if (y(k, n) > y(best, n)) best = k;
      hits += best == task.labels[n];
    }
    text += "accuracy " + fmt_double(static_cast<double>(hits) / static_cast<double>(y.cols())) + "\n";
  }
  dir.write("eval.txt", text);
  dir.finish();
  out << text;
  return 0;
}

// Returns the process exit code: 0 success, 1 runtime failure, 2 usage error.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Quantization-aware low-rank fine-tuning toolkit", "l4q"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string schemes = "all";
  std::string checkpoint;
  bool fully_quantized = false;
  int repeats = 5;

  auto* train_cmd = app.add_subcommand("train", "train on the synthetic task and save a checkpoint");
  auto* init_cmd = app.add_subcommand("init-compare", "compare initial quantization errors per scheme");
  auto* export_cmd = app.add_subcommand("export", "train, then write a quantized checkpoint");
  auto* bench_cmd = app.add_subcommand("bench", "time fully-quantized vs mixed inference");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the task");
  for (auto* cmd : {train_cmd, init_cmd, export_cmd, bench_cmd, eval_cmd}) flags.attach(cmd);
  init_cmd->add_option("--schemes", schemes, "all, or a comma list of schemes");
  export_cmd->add_flag("--fully-quantized", fully_quantized, "require a fully-quantized checkpoint");
  bench_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");
  bench_cmd->add_option("--repeats", repeats, "timed repetitions per batch size")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(flags, out);
    if (*init_cmd) return cmd_init_compare(flags, schemes, out);
    if (*export_cmd) return cmd_export(flags, fully_quantized, out);
    if (*bench_cmd) return cmd_bench(flags, checkpoint, repeats, out);
    if (*eval_cmd) return cmd_eval(flags, checkpoint, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace l4q::cli
