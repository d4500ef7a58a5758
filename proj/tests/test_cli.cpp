#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "octflow/harness.hpp"
#include "support.hpp"

using namespace octflow;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun cli(const std::string& args) {
  const std::string cmd = std::string(OCTFLOW_CLI) + " " + args + " 2>&1";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kSmallGen = "--bases 3 --pairs-per-base 2 --width 32 --height 32 --translation-sigma 2 "
                        "--rotation-sigma 0.02 --tz-sigma 2 --noise-sigma 0";

}  // namespace

TEST(Cli, PrintConfigListsDefaultsAndRoundTrips) {
  const CliRun r = cli("print-config");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("train.epochs = 200"), std::string::npos);
  EXPECT_NE(r.out.find("aug.pairs_per_base = 1024"), std::string::npos);
  EXPECT_NE(r.out.find("bench.budget_ms = 40"), std::string::npos);
  const auto dir = fixtures::scratch_dir("cli_print");
  std::ofstream(dir / "all.cfg") << r.out;
  const CliRun again = cli("print-config --config " + (dir / "all.cfg").string());
  EXPECT_EQ(again.code, 0);
  EXPECT_EQ(again.out, r.out);
}

TEST(Cli, ConfigErrorsHaveTheirOwnExitCode) {
  EXPECT_EQ(cli("gen --set no.such.key=1").code, kExitConfig);
  EXPECT_EQ(cli("gen --bases many").code, kExitConfig);
  EXPECT_EQ(cli("gen --set train.epochs").code, kExitConfig);
  EXPECT_EQ(cli("frobnicate").code, kExitConfig);
  EXPECT_EQ(cli("").code, kExitConfig);
  EXPECT_EQ(cli("bench --runs 5").code, kExitConfig);
  EXPECT_EQ(cli("print-config --config /nonexistent/x.cfg").code, kExitIo);
}

TEST(Cli, GenCountsPairsAndNeedsOutputDir) {
  const auto dir = fixtures::scratch_dir("cli_gen");
  const CliRun r = cli("gen --out " + dir.string() + " " + kSmallGen);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("6 pairs"), std::string::npos) << r.out;
  EXPECT_EQ(load_manifest(dir).pairs.size(), 6u);
  EXPECT_EQ(cli("gen --out " + (dir / "missing").string() + " " + kSmallGen).code, kExitIo);
}

TEST(Cli, GenIsReproducibleFromItsRecordedConfig) {
  const auto a = fixtures::scratch_dir("cli_gen_a"), b = fixtures::scratch_dir("cli_gen_b");
  ASSERT_EQ(cli("gen --out " + a.string() + " " + kSmallGen).code, 0);
  ASSERT_TRUE(fs::exists(a / "run.cfg"));
  const CliRun r = cli("gen --config " + (a / "run.cfg").string() + " --out " + b.string());
  ASSERT_EQ(r.code, 0) << r.out;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().filename() == "run.cfg") continue;
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
  }
}

TEST(Cli, InferOnIdenticalInputsGivesNearZeroFlow) {
  const auto dir = fixtures::scratch_dir("cli_infer");
  save_depth_map(dir / "z.zmap", generate_base_map(64, 64, 3));
  const CliRun r = cli("infer --source " + (dir / "z.zmap").string() + " --target " + (dir / "z.zmap").string() +
                    " --out " + (dir / "f.sf25").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const FlowField f = load_flow(dir / "f.sf25");
  ASSERT_EQ(f.channels(), 3);
  double mag = 0;
  for (int y = 0; y < f.height(); ++y)
    for (int x = 0; x < f.width(); ++x) mag += std::hypot(f.at(0, x, y), f.at(1, x, y));
  EXPECT_LT(mag / (f.width() * f.height()), 0.1);
  EXPECT_TRUE(fs::exists(dir / "f.sf25.cfg"));
}

TEST(Cli, InferReadsVolumes) {
  const auto dir = fixtures::scratch_dir("cli_infer_vol");
  Volume v(32, 32, 16);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) v(x, y, (x * 3 + y * 5) % 16) = 1.0F;
  save_volume(dir / "v.octv", v);
  const CliRun r = cli("infer --stages 2 --source " + (dir / "v.octv").string() + " --target " +
                    (dir / "v.octv").string() + " --out " + (dir / "f.sf25").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(load_flow(dir / "f.sf25").width(), 32);
  EXPECT_EQ(cli("infer --source " + (dir / "none").string() + " --target x --out y").code, kExitIo);
}

TEST(Cli, EvalOnPerfectFixtureGivesZeroRow) {
  const auto dir = fixtures::scratch_dir("cli_eval");
  ASSERT_EQ(cli("gen --out " + dir.string() +
                " --bases 3 --pairs-per-base 2 --width 32 --height 32 --translation-sigma 0 --rotation-sigma 0 "
                "--tz-sigma 0 --noise-sigma 0")
                .code,
            0);
  const CliRun r = cli("eval --stages 2 --data " + dir.string() + " --csv " + (dir / "eval.csv").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = slurp(dir / "eval.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kEvalCsvHeader);
  EXPECT_EQ(csv.substr(csv.find('\n') + 1, 13), "test,0,0,0,0,");
  // every pixel excluded -> nothing to evaluate
  EXPECT_EQ(cli("eval --stages 2 --margin 16 --data " + dir.string()).code, kExitNumerical);
}

TEST(Cli, TrainAlphaZeroRecordsUnsupervisedRun) {
  const auto data = fixtures::scratch_dir("cli_train_data"), out = fixtures::scratch_dir("cli_train_out");
  ASSERT_EQ(cli("gen --out " + data.string() + " " + kSmallGen).code, 0);
  const CliRun r = cli("train --data " + data.string() + " --out " + out.string() +
                    " --stages 2 --epochs 1 --batch-size 2 --alpha 0");
  ASSERT_EQ(r.code, 0) << r.out;
  const KeyValues kv = KeyValues::load(out / kModelManifest);
  EXPECT_EQ(kv.at("mode"), "unsupervised");
  EXPECT_EQ(kv.at("trained.d_stages"), "2");
  EXPECT_TRUE(fs::exists(out / "history_f0.csv"));
  EXPECT_EQ(cli("eval --model " + out.string() + " --data " + data.string()).code, 0);
  // resuming with other weights is refused
  EXPECT_EQ(cli("train --data " + data.string() + " --out " + out.string() + " --alpha 1").code, kExitConfig);
  EXPECT_EQ(cli("train --set model.kind=classical --data " + data.string() + " --out " + out.string()).code,
            kExitConfig);
}

TEST(Cli, BenchReportsAgainstBudgetDeterministically) {
  const CliRun a = cli("bench --budget-ms 0");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_NE(a.out.find("100 over"), std::string::npos) << a.out;
  EXPECT_NE(a.out.find("identical across runs"), std::string::npos) << a.out;
  const CliRun b = cli("bench --budget-ms 0");
  const auto hash = [](const std::string& s) { return s.substr(s.find("flow hash"), 26); };
  EXPECT_EQ(hash(a.out), hash(b.out));
}
