#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "octflow/harness.hpp"

namespace fs = std::filesystem;
using namespace octflow;

namespace {

void write_text(const fs::path& p, const std::string& text) {
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// Every command leaves the configuration it ran with next to its output, so
// `--config` on that file alone repeats the run.
void record_config(const fs::path& p, const std::string& command, const RunConfig& c) {
  write_text(p, "# octflow " + command + "\n" + dump_config(c));
}

void require_dir(const std::string& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string(what) + " directory not given");
  if (!fs::is_directory(p)) throw IoError(std::string(what) + " directory does not exist: " + p);
}

void require_set(const std::string& v, const char* what) {
  if (v.empty()) throw ConfigError(std::string(what) + " not given");
}

Split split_named(const std::string& s) { return parse_split(s); }

int cmd_gen(const RunConfig& c) {
  require_dir(c.out, "output");
  std::vector<DepthMap> bases;
  for (int b = 0; b < c.bases; ++b)
    bases.push_back(generate_base_map(c.width, c.height, c.aug.seed * 1000 + static_cast<std::uint64_t>(b)));
  const DatasetManifest m = build_dataset(bases, c.aug, c.out);
  record_config(fs::path(c.out) / "run.cfg", "gen", c);
  std::size_t retried = 0;
  for (const auto& p : m.pairs) retried += p.retries > 0;
  std::printf("%zu pairs at %dx%d: train %zu, val %zu, test %zu (%zu redrawn for overlap)\n", m.pairs.size(), m.width,
              m.height, m.count(Split::train), m.count(Split::val), m.count(Split::test), retried);
  return kExitOk;
}

int cmd_train(const RunConfig& c) {
  require_dir(c.data, "data");
  require_dir(c.out, "output");
  if (parse_stage_kind(c.kind) != StageKind::convolutional)
    throw ConfigError("train needs model.kind = convolutional (classical stages have no parameters)");
  const DatasetManifest m = load_manifest(c.data);
  const TrainingData data{load_split(c.data, m, Split::train), load_split(c.data, m, Split::val)};
  const fs::path out(c.out);
  const bool resume = c.resume && fs::exists(out / kModelManifest);
  PipelineModel model = resume ? load_model(out) : make_model(c);
  if (resume)
    std::printf("resuming: %d lateral and %d depth stages already trained\n", trained_count(model, kTrainedF),
                trained_count(model, kTrainedD));
  record_config(out / "run.cfg", "train", c);
  const PipelineTraining log = train_pipeline(model, data, c.train, &out);
  for (const auto& [name, r] : log.stages)
    std::printf("stage %s: %zu epochs, %ld steps, best epoch %d, val loss %.6f%s\n", name.c_str(), r.history.size(),
                r.steps, r.best_epoch, r.best_val_loss, r.stopped_early ? " (early stop)" : "");
  if (log.stages.empty()) std::printf("nothing left to train\n");
  std::printf("model (%s) in %s\n", model.weights.unsupervised() ? "unsupervised" : "semi-supervised", out.c_str());
  return kExitOk;
}

int cmd_infer(const RunConfig& c) {
  require_set(c.source, "source input");
  require_set(c.target, "target input");
  require_set(c.out, "output flow file");
  PipelineModel model = model_for(c);
  const DepthMap a = read_depth_input(c.source), b = read_depth_input(c.target);
  const PipelineResult r = run_pipeline(model, a, b);
  save_flow(c.out, r.flow);
  record_config(c.out + ".cfg", "infer", c);
  double lateral = 0.0, dz = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < r.flow.height(); ++y)
    for (int x = 0; x < r.flow.width(); ++x) {
      if (!r.valid(x, y)) continue;
      lateral += std::hypot(r.flow.at(0, x, y), r.flow.at(1, x, y));
      dz += r.flow.at(2, x, y);
      ++n;
    }
  if (n) lateral /= n, dz /= n;
  std::printf("flow %dx%d written to %s\nvalid %.1f%%  mean lateral magnitude %.4f vox  mean dz %.4f vox\n",
              r.flow.width(), r.flow.height(), c.out.c_str(), 100.0 * n / r.valid.size(), lateral, dz);
  return kExitOk;
}

int cmd_eval(const RunConfig& c) {
  require_dir(c.data, "data");
  PipelineModel model = model_for(c);
  const DatasetManifest m = load_manifest(c.data);
  std::vector<EvalReport> reports;
  if (c.split == "all") {
    for (Split s : {Split::train, Split::val, Split::test})
      if (m.count(s)) reports.push_back(evaluate_dataset(model, c.data, m, s, c.eval));
  } else {
    reports.push_back(evaluate_dataset(model, c.data, m, split_named(c.split), c.eval));
  }
  std::fputs(eval_table(reports).c_str(), stdout);
  const std::string csv = eval_csv(reports);
  if (c.csv.empty()) {
    std::fputs(csv.c_str(), stdout);
  } else {
    write_text(c.csv, csv);
    record_config(c.csv + ".cfg", "eval", c);
  }
  return kExitOk;
}

int cmd_bench(const RunConfig& c) {
  PipelineModel model = model_for(c);
  const BenchReport r = run_bench(model, c.bench);
  const std::string text = bench_text(r);
  std::fputs(text.c_str(), stdout);
  if (!c.out.empty()) {
    require_dir(c.out, "output");
    write_text(fs::path(c.out) / "bench.txt", text);
    record_config(fs::path(c.out) / "run.cfg", "bench", c);
  }
  return kExitOk;
}

struct Command {
  CLI::App* app;
  int (*run)(const RunConfig&);
  const char* kind_default;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"octflow: 2.5D scene flow between OCT depth maps"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // key -> value given on the command line

  auto common = [&](CLI::App* sc) {
    sc->add_option("--config", config_file, "Config file of `key = value` lines");
    sc->add_option("--set", sets, "Override one key: key=value (repeatable)");
  };
  auto flag = [&](CLI::App* sc, const std::string& name, const std::string& key, const std::string& help) {
    sc->add_option(name, flags[key], help + " [" + key + "]");
  };
  auto model_flags = [&](CLI::App* sc) {
    flag(sc, "--model", "io.model", "Trained model directory (default: a fresh model of --kind)");
    flag(sc, "--kind", "model.kind", "Estimator kind: classical | convolutional");
    flag(sc, "--stages", "model.stages", "Number of scale stages S");
  };

  std::vector<Command> commands;

  auto* gen = app.add_subcommand("gen", "Generate a procedural dataset");
  common(gen);
  flag(gen, "--out", "io.out", "Output directory (must exist)");
  flag(gen, "--bases", "data.bases", "Number of base maps");
  flag(gen, "--pairs-per-base", "aug.pairs_per_base", "Pairs per base map");
  flag(gen, "--seed", "aug.seed", "Dataset seed");
  flag(gen, "--width", "data.width", "Map width");
  flag(gen, "--height", "data.height", "Map height");
  flag(gen, "--translation-sigma", "aug.translation_sigma_vox", "Lateral translation std (voxels)");
  flag(gen, "--rotation-sigma", "aug.rotation_sigma_rad", "Rotation std (radians)");
  flag(gen, "--tz-sigma", "aug.depth_translation_sigma_vox", "Depth translation std (voxels)");
  flag(gen, "--noise-sigma", "aug.noise_sigma", "Noise std as a fraction of the depth range");
  commands.push_back({gen, cmd_gen, nullptr});

  auto* train = app.add_subcommand("train", "Train convolutional stages coarse to fine");
  common(train);
  flag(train, "--data", "io.data", "Dataset directory");
  flag(train, "--out", "io.out", "Model output directory (must exist); resumes a partial run found there");
  flag(train, "--stages", "model.stages", "Number of scale stages S");
  flag(train, "--model-seed", "model.seed", "Weight initialization seed");
  flag(train, "--epochs", "train.epochs", "Epochs per stage");
  flag(train, "--batch-size", "train.batch_size", "Pairs per optimizer step");
  flag(train, "--lr", "train.lr", "Adam learning rate");
  flag(train, "--patience", "train.patience", "Early-stopping patience (epochs)");
  flag(train, "--max-steps", "train.max_steps", "Optimizer step cap per stage (0 = none)");
  flag(train, "--seed", "train.seed", "Shuffling and dropout seed");
  flag(train, "--alpha", "loss.alpha", "Endpoint-error weight (0 = unsupervised)");
  flag(train, "--beta", "loss.beta", "Reconstruction weight");
  flag(train, "--gamma", "loss.gamma", "Smoothness weight");
  commands.push_back({train, cmd_train, "convolutional"});

  auto* infer = app.add_subcommand("infer", "Estimate flow between two depth maps or volumes");
  common(infer);
  model_flags(infer);
  flag(infer, "--source", "io.source", "Frame t (.zmap depth map or OCTV volume)");
  flag(infer, "--target", "io.target", "Frame t+1");
  flag(infer, "--out", "io.out", "Output flow file (SF25)");
  commands.push_back({infer, cmd_infer, nullptr});

  auto* eval = app.add_subcommand("eval", "Endpoint-error report over a dataset split");
  common(eval);
  model_flags(eval);
  flag(eval, "--data", "io.data", "Dataset directory");
  flag(eval, "--split", "eval.split", "train | val | test | all");
  flag(eval, "--margin", "eval.margin", "Border pixels to ignore");
  flag(eval, "--csv", "io.csv", "Write the CSV report here (default: stdout)");
  commands.push_back({eval, cmd_eval, nullptr});

  auto* bench = app.add_subcommand("bench", "Time inference on a generated pair");
  common(bench);
  model_flags(bench);
  flag(bench, "--width", "bench.width", "Map width");
  flag(bench, "--height", "bench.height", "Map height");
  flag(bench, "--runs", "bench.runs", "Timed runs (>= 100)");
  flag(bench, "--warmup", "bench.warmup", "Untimed warmup runs");
  flag(bench, "--budget-ms", "bench.budget_ms", "Per-pair budget in milliseconds");
  flag(bench, "--seed", "bench.seed", "Seed of the generated pair");
  flag(bench, "--out", "io.out", "Directory for the report and config");
  commands.push_back({bench, cmd_bench, nullptr});

  auto* print = app.add_subcommand("print-config", "Print every configuration key with its value");
  common(print);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg;
    const Command* cmd = nullptr;
    for (const auto& c : commands)
      if (c.app->parsed()) cmd = &c;
    if (cmd && cmd->kind_default) cfg.kind = cmd->kind_default;

    Settings settings;
    bind(settings, cfg);
    if (!config_file.empty()) settings.apply(KeyValues::load(config_file));
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      settings.set(std::string(detail::trim(s.substr(0, eq))), std::string(detail::trim(s.substr(eq + 1))));
    }
    for (const auto& [key, value] : flags)
      if (!value.empty()) settings.set(key, value);
    cfg.resolve_paths();

    if (!cmd) {
      std::fputs(dump_config(cfg).c_str(), stdout);
      return kExitOk;
    }
    return cmd->run(cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "octflow: %s\n", e.what());
    return exit_code_for(e);
  }
}
