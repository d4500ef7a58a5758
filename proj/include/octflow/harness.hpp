#pragma once
// Plumbing behind the command-line tool: one flat run configuration, model
// construction from it, the inference benchmark, and exit codes.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "octflow/config.hpp"
#include "octflow/dataset.hpp"
#include "octflow/estimator.hpp"
#include "octflow/projection.hpp"
#include "octflow/trainer.hpp"

namespace octflow {

struct BenchConfig {
  int width = 128;
  int height = 128;
  int runs = 100;
  int warmup = 5;
  double budget_ms = 40.0;  // 25 volumes per second
  std::uint64_t seed = 0;

  void validate() const {
    if (width < 1 || height < 1) throw ConfigError("bench size must be positive");
    if (runs < 100) throw ConfigError("bench needs at least 100 timed runs, got " + std::to_string(runs));
    if (warmup < 0) throw ConfigError("bench warmup must be >= 0");
    if (!(budget_ms >= 0)) throw ConfigError("bench budget must be >= 0");
  }
};

struct RunConfig {
  // paths; resolved to absolute form before a command runs
  std::string data, out, model, source, target, csv;

  int bases = 4;
  int width = 512;
  int height = 512;
  AugmentConfig aug;

  std::string kind = "classical";
  int stages = 4;
  std::uint64_t model_seed = 0;
  ClassicalLateralParams lateral;
  ClassicalDepthParams depth;

  TrainConfig train;
  bool resume = true;

  std::string split = "test";
  EvalOptions eval;

  BenchConfig bench;

  void resolve_paths() {
    for (std::string* p : {&data, &out, &model, &source, &target, &csv})
      if (!p->empty()) *p = std::filesystem::absolute(*p).lexically_normal().string();
  }
};

inline void bind(Settings& s, RunConfig& c) {
  s.bind("io.data", c.data);
  s.bind("io.out", c.out);
  s.bind("io.model", c.model);
  s.bind("io.source", c.source);
  s.bind("io.target", c.target);
  s.bind("io.csv", c.csv);

  s.bind("data.bases", c.bases);
  s.bind("data.width", c.width);
  s.bind("data.height", c.height);
  s.bind("aug.translation_sigma_vox", c.aug.translation_sigma_vox);
  s.bind("aug.rotation_sigma_rad", c.aug.rotation_sigma_rad);
  s.bind("aug.depth_translation_sigma_vox", c.aug.depth_translation_sigma_vox);
  s.bind("aug.noise_sigma", c.aug.noise_sigma);
  s.bind("aug.pairs_per_base", c.aug.pairs_per_base);
  s.bind("aug.seed", c.aug.seed);
  s.bind("aug.min_overlap", c.aug.min_overlap);
  s.bind("aug.max_retries", c.aug.max_retries);

  s.bind("model.kind", c.kind);
  s.bind("model.stages", c.stages);
  s.bind("model.seed", c.model_seed);
  s.bind("lateral.window_radius", c.lateral.window_radius);
  s.bind("lateral.iterations", c.lateral.iterations);
  s.bind("lateral.max_condition", c.lateral.max_condition);
  s.bind("lateral.presmooth_radius", c.lateral.presmooth_radius);
  s.bind("lateral.max_step", c.lateral.max_step);
  s.bind("lateral.min_eigen", c.lateral.min_eigen);
  s.bind("lateral.median_radius", c.lateral.median_radius);
  s.bind("depth.radius", c.depth.radius);

  s.bind("train.epochs", c.train.epochs);
  s.bind("train.batch_size", c.train.batch_size);
  s.bind("train.lr", c.train.lr);
  s.bind("train.patience", c.train.patience);
  s.bind("train.seed", c.train.seed);
  s.bind("train.max_steps", c.train.max_steps);
  s.bind("train.resume", c.resume);
  s.bind("loss.alpha", c.train.weights.alpha);
  s.bind("loss.beta", c.train.weights.beta);
  s.bind("loss.gamma", c.train.weights.gamma);

  s.bind("eval.split", c.split);
  s.bind("eval.margin", c.eval.margin);
  s.bind("eval.pitch_um", c.eval.pitch_um);

  s.bind("bench.width", c.bench.width);
  s.bind("bench.height", c.bench.height);
  s.bind("bench.runs", c.bench.runs);
  s.bind("bench.warmup", c.bench.warmup);
  s.bind("bench.budget_ms", c.bench.budget_ms);
  s.bind("bench.seed", c.bench.seed);
}

inline std::string dump_config(RunConfig c) {
  Settings s;
  bind(s, c);
  return s.dump().str();
}

inline PipelineModel make_model(const RunConfig& c) {
  switch (parse_stage_kind(c.kind)) {
    case StageKind::classical: return PipelineModel::classical(c.stages, c.lateral, c.depth);
    case StageKind::convolutional: return PipelineModel::convolutional(c.stages, c.model_seed);
  }
  throw ConfigError("unknown estimator kind '" + c.kind + "'");
}

// A trained model directory when one is given, otherwise a fresh model.
inline PipelineModel model_for(const RunConfig& c) { return c.model.empty() ? make_model(c) : load_model(c.model); }

// Depth maps are read directly; volumes go through the arg-max projection.
inline DepthMap read_depth_input(const std::filesystem::path& p) {
  const Bytes b = read_file(p);
  try {
    if (b.size() >= 4 && std::equal(b.begin(), b.begin() + 4, "OCTV")) return argmax_projection(decode_volume(b));
    return decode_depth_map(b);
  } catch (const FormatError& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

// ---- benchmark -------------------------------------------------------------

struct BenchReport {
  std::vector<double> ms;
  double mean = 0.0, p50 = 0.0, p90 = 0.0, p99 = 0.0, max = 0.0;
  int over_budget = 0;
  double budget_ms = 0.0;
  std::uint64_t flow_hash = 0;  // of the first timed run
  bool deterministic = true;    // every run produced the same bytes
};

inline std::uint64_t fnv1a(std::span<const float> v) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* p = reinterpret_cast<const std::uint8_t*>(v.data()), *e = p + v.size_bytes(); p != e; ++p)
    h = (h ^ *p) * 1099511628211ULL;
  return h;
}

// Nearest-rank percentile of an ascending sample.
inline double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * sorted.size()));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

// The benchmark pair: a generated base map under a moderate motion.
inline PairSample bench_pair(const BenchConfig& cfg) {
  const DepthMap base = generate_base_map(cfg.width, cfg.height, cfg.seed);
  const AffineParams a{5.0, -3.0, 4.0, 0.03};  // tx, ty, tz, omega
  return synthesize_pair(base, a, 0.0, cfg.seed);
}

inline BenchReport run_bench(PipelineModel& m, const BenchConfig& cfg) {
  cfg.validate();
  const PairSample p = bench_pair(cfg);
  for (int i = 0; i < cfg.warmup; ++i) run_pipeline(m, p.source, p.target);
  BenchReport r;
  r.budget_ms = cfg.budget_ms;
  for (int i = 0; i < cfg.runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const PipelineResult res = run_pipeline(m, p.source, p.target);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    r.ms.push_back(ms);
    // at the budget counts as over: a zero budget flags every run
    if (ms >= cfg.budget_ms) ++r.over_budget;
    const std::uint64_t h = fnv1a(res.flow.data());
    if (i == 0) r.flow_hash = h;
    else if (h != r.flow_hash) r.deterministic = false;
  }
  std::vector<double> sorted = r.ms;
  std::sort(sorted.begin(), sorted.end());
  r.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / sorted.size();
  r.p50 = percentile(sorted, 50);
  r.p90 = percentile(sorted, 90);
  r.p99 = percentile(sorted, 99);
  r.max = sorted.back();
  return r;
}

inline std::string bench_text(const BenchReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "runs %zu  mean %.2f ms  p50 %.2f  p90 %.2f  p99 %.2f  max %.2f\n"
                "budget %.2f ms: %d over, mean %s budget\n"
                "flow hash %016llx (%s)\n",
                r.ms.size(), r.mean, r.p50, r.p90, r.p99, r.max, r.budget_ms, r.over_budget,
                r.mean < r.budget_ms ? "within" : "over", static_cast<unsigned long long>(r.flow_hash),
                r.deterministic ? "identical across runs" : "VARIES across runs");
  return buf;
}

// ---- exit codes --------------------------------------------------------------

enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitConfig = 2,     // bad flags, keys or values
  kExitIo = 3,         // missing or unreadable files, corrupt formats
  kExitNumerical = 4,  // non-finite training, nothing left to evaluate
  kExitInput = 5,      // inputs with unusable dimensions or values
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kExitIo;
  if (dynamic_cast<const TrainingError*>(&e) || dynamic_cast<const EvaluationError*>(&e)) return kExitNumerical;
  if (dynamic_cast<const DomainError*>(&e)) return kExitInput;
  return kExitOther;
}

}  // namespace octflow
