#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "gradcases.hpp"
#include "octflow/autodiff/checkpoint.hpp"
#include "octflow/autodiff/graph.hpp"
#include "octflow/autodiff/optim.hpp"

using namespace octflow;
using namespace octflow::ad;
using fixtures::check_gradients;
using fixtures::GraphD;
using fixtures::random_tensor;
using fixtures::TensorD;

constexpr double kGradTolerance = fixtures::kGradTolerance;
constexpr int kSeeds = fixtures::kGradSeeds;
using fixtures::Builder;
using fixtures::op_cases;


TEST(GradientCheck, EveryOpKindAgainstFiniteDifferences) {
  for (const auto& c : op_cases()) {
    for (int seed = 0; seed < kSeeds; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      auto [builder, values] = c.make(rng);
      const auto r = check_gradients(builder, values, rng, c.training);
      EXPECT_LT(r.relative_error, kGradTolerance) << c.name << " seed " << seed;
    }
  }
}

TEST(GradientCheck, ConvOnTwoByThreeByEightByEight) {
  std::mt19937_64 rng(7);
  Builder b = [](GraphD& g, const std::vector<Var>& in) { return g.conv2d(in[0], in[1], in[2], 1, 1, 1); };
  const auto r = check_gradients(b, {random_tensor({2, 3, 8, 8}, rng), random_tensor({4, 3, 3, 3}, rng),
                                     random_tensor({1, 4, 1, 1}, rng)},
                                 rng);
  EXPECT_LT(r.relative_error, kGradTolerance);
  EXPECT_GT(r.analytic_norm, 0.0);
}

TEST(Forward, ConvOfOnesIsNine) {
  Graph<double> g;
  const Var x = g.input("x"), w = g.input("w");
  g.set_input(x, TensorD({1, 1, 3, 3}, 1.0));
  g.set_input(w, TensorD({1, 1, 3, 3}, 1.0));
  const Var y = g.conv2d(x, w, std::nullopt, 1, 0, 0);
  g.forward();
  EXPECT_EQ(g.value(y).shape, (Shape{1, 1, 1, 1}));
  EXPECT_EQ(g.value(y).data[0], 9.0);
}

TEST(Forward, ConvOutputExtentRule) {
  Graph<double> g;
  const Var x = g.input("x"), w = g.input("w");
  g.set_input(x, TensorD({1, 2, 9, 7}));
  g.set_input(w, TensorD({3, 2, 3, 1}));
  const Var y = g.conv2d(x, w, std::nullopt, 2, 1, 0);
  g.forward();
  // floor((9 + 2 - 3) / 2) + 1 = 5, floor((7 + 0 - 1) / 2) + 1 = 4
  EXPECT_EQ(g.value(y).shape, (Shape{1, 3, 5, 4}));
}

TEST(Forward, LeakyRelu) {
  Graph<double> g;
  const Var x = g.input("x");
  g.set_input(x, TensorD({1, 1, 1, 1}, -2.0));
  const Var y = g.leaky_relu(x, 0.1);
  g.forward();
  EXPECT_DOUBLE_EQ(g.value(y).data[0], -0.2);
}

TEST(Forward, FactorizedPairEqualsFullKernelOnOneHot) {
  Graph<double> g;
  const Var x = g.input("x"), k31 = g.input("k31"), k13 = g.input("k13"), k33 = g.input("k33");
  TensorD img({1, 1, 7, 7});
  img.at(0, 0, 3, 2) = 1.0;
  g.set_input(x, img);
  g.set_input(k31, TensorD({1, 1, 3, 1}, 1.0));
  g.set_input(k13, TensorD({1, 1, 1, 3}, 1.0));
  g.set_input(k33, TensorD({1, 1, 3, 3}, 1.0));
  const Var pair = g.conv2d(g.conv2d(x, k31, std::nullopt, 1, 1, 0), k13, std::nullopt, 1, 0, 1);
  const Var full = g.conv2d(x, k33, std::nullopt, 1, 1, 1);
  g.forward();
  EXPECT_EQ(g.value(pair), g.value(full));
  double total = 0;
  for (double v : g.value(full).data) total += v;
  EXPECT_EQ(total, 9.0);
}

TEST(Forward, ShapeMismatchNamesNode) {
  Graph<double> g;
  const Var a = g.input("a"), b = g.input("b");
  g.set_input(a, TensorD({1, 2, 3, 3}));
  g.set_input(b, TensorD({1, 2, 3, 4}));
  const Var s = g.add(a, b);
  g.set_label(s, "sum");
  try {
    g.forward();
    FAIL() << "expected GraphError";
  } catch (const GraphError& e) {
    EXPECT_NE(std::string(e.what()).find("'sum'"), std::string::npos) << e.what();
  }
}

TEST(Forward, AttributeValidation) {
  Graph<double> g;
  const Var a = g.input("a");
  EXPECT_THROW(g.conv2d(a, a, std::nullopt, 0, 0, 0), GraphError);
  EXPECT_THROW(g.spatial_dropout(a, 1.0), GraphError);
  EXPECT_THROW(g.spatial_dropout(a, -0.1), GraphError);
  EXPECT_THROW(g.charbonnier(a, 0.0), GraphError);
}

TEST(Forward, UnboundInputFails) {
  Graph<double> g;
  const Var a = g.input("a");
  g.reduce_mean(a);
  EXPECT_THROW(g.forward(), GraphError);
}

TEST(Backward, BeforeForwardIsStateError) {
  Graph<double> g;
  const Var a = g.input("a", true);
  g.set_input(a, TensorD({1, 1, 2, 2}, 1.0));
  const Var m = g.reduce_mean(a);
  EXPECT_THROW(g.backward(m), StateError);
}

TEST(Backward, ReduceMeanGradient) {
  Graph<double> g;
  const Var a = g.input("a", true);
  g.set_input(a, TensorD({2, 3, 2, 2}, 0.5));
  const Var m = g.reduce_mean(a);
  g.forward();
  g.backward(m);
  for (double v : g.grad(a).data) EXPECT_DOUBLE_EQ(v, 1.0 / 24.0);
}

TEST(Backward, SquareAtThree) {
  Graph<double> g;
  const Var a = g.input("a", true);
  g.set_input(a, TensorD({1, 1, 1, 1}, 3.0));
  const Var y = g.square(a);
  g.forward();
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(a).data[0], 6.0);
}

TEST(Backward, GradientsAccumulateAlongPaths) {
  Graph<double> g;
  const Var a = g.input("a", true);
  g.set_input(a, TensorD({1, 1, 1, 1}, 2.0));
  const Var y = g.add(g.mul(a, a), a);  // y = a^2 + a
  g.forward();
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(a).data[0], 5.0);
}

TEST(Backward, LinearInOutputGradient) {
  std::mt19937_64 rng(4);
  Graph<double> g;
  const Var x = g.input("x", true), w = g.input("w", true);
  g.set_input(x, random_tensor({2, 3, 6, 6}, rng));
  g.set_input(w, random_tensor({2, 3, 3, 3}, rng));
  const Var y = g.leaky_relu(g.conv2d(x, w, std::nullopt, 1, 1, 1), 0.2);
  g.forward();
  const TensorD ga = random_tensor(g.value(y).shape, rng), gb = random_tensor(g.value(y).shape, rng);
  TensorD gab = ga;
  for (std::size_t i = 0; i < gab.size(); ++i) gab.data[i] += gb.data[i];
  g.backward(y, ga);
  const TensorD dxa = g.grad(x);
  g.backward(y, gb);
  const TensorD dxb = g.grad(x);
  g.backward(y, gab);
  for (std::size_t i = 0; i < dxa.size(); ++i) EXPECT_NEAR(g.grad(x).data[i], dxa.data[i] + dxb.data[i], 1e-12);
}

TEST(Backward, ParameterGradientsReachParameterSet) {
  std::mt19937_64 rng(8);
  ParameterSet<double> ps;
  auto& w = ps.add("w", {1, 1, 1, 1});
  w.value.data[0] = 3.0;
  Graph<double> g;
  const Var x = g.input("x");
  g.set_input(x, TensorD({1, 1, 2, 2}, 2.0));
  const Var y = g.reduce_mean(g.conv2d(x, g.parameter(w), std::nullopt, 1, 0, 0));
  g.forward();
  g.backward(y);
  EXPECT_DOUBLE_EQ(w.grad.data[0], 2.0);
  g.forward();
  g.backward(y);
  EXPECT_DOUBLE_EQ(w.grad.data[0], 4.0);  // accumulates until zero_grad
  ps.zero_grad();
  EXPECT_DOUBLE_EQ(w.grad.data[0], 0.0);
}

TEST(Determinism, DropoutMasksFollowSeed) {
  std::mt19937_64 rng(2);
  const TensorD input = random_tensor({4, 8, 3, 3}, rng);
  auto run = [&](std::uint64_t seed) {
    Graph<float> g(seed);
    const Var x = g.input("x");
    Tensor<float> t(input.shape);
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<float>(input.data[i]);
    g.set_input(x, t);
    const Var y = g.spatial_dropout(x, 0.3);
    g.forward();
    return g.value(y);
  };
  EXPECT_EQ(run(5), run(5));
  EXPECT_NE(run(5), run(6));
}

TEST(Determinism, EvaluationModeDisablesDropout) {
  Graph<double> g;
  g.set_training(false);
  const Var x = g.input("x");
  g.set_input(x, TensorD({2, 4, 2, 2}, 1.5));
  const Var y = g.spatial_dropout(x, 0.5);
  g.forward();
  for (double v : g.value(y).data) EXPECT_EQ(v, 1.5);
}

TEST(ChannelNorm, RunningStatisticsUpdateOnlyInTraining) {
  ParameterSet<double> ps;
  auto& gamma = ps.add("g", {1, 1, 1, 1});
  auto& beta = ps.add("b", {1, 1, 1, 1});
  auto& rm = ps.add("rm", {1, 1, 1, 1}, false);
  auto& rv = ps.add("rv", {1, 1, 1, 1}, false);
  gamma.value.data[0] = 1.0;
  rv.value.data[0] = 1.0;
  Graph<double> g;
  const Var x = g.input("x");
  TensorD t({1, 1, 1, 4});
  t.data = {1, 2, 3, 4};
  g.set_input(x, t);
  const Var y = g.channel_norm(x, g.parameter(gamma), g.parameter(beta), rm, rv);
  g.forward();
  EXPECT_DOUBLE_EQ(rm.value.data[0], 0.1 * 2.5);
  EXPECT_DOUBLE_EQ(rv.value.data[0], 0.9 + 0.1 * (5.0 / 3.0));
  double mean = 0;
  for (double v : g.value(y).data) mean += v;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  g.set_training(false);
  g.forward();
  EXPECT_DOUBLE_EQ(rm.value.data[0], 0.25);
}

TEST(WarpMask, FlagsOutOfImageSamples) {
  Graph<double> g;
  const Var f = g.input("f");
  TensorD flow({1, 2, 1, 3});
  flow.data = {1.0, 0.0, -0.5, 0, 0, 0};
  g.set_input(f, flow);
  const Var m = g.warp_mask(f);
  g.forward();
  EXPECT_EQ(g.value(m).data, (std::vector<double>{0.0, 1.0, 0.0}));
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterSet<float> ps;
  auto& p = ps.add("p", {1, 1, 2, 2});
  p.value.data = {1, -2, 3, 4};
  AdamState<float> st;
  adam_step(ps, st, AdamConfig{});
  EXPECT_EQ(p.value.data, (std::vector<float>{1, -2, 3, 4}));
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  ParameterSet<double> ps;
  auto& p = ps.add("p", {1, 1, 1, 3});
  p.grad.data = {0.5, -2.0, 1e-3};
  AdamState<double> st;
  AdamConfig cfg;
  adam_step(ps, st, cfg);
  EXPECT_NEAR(p.value.data[0], -cfg.lr, 1e-10);
  EXPECT_NEAR(p.value.data[1], cfg.lr, 1e-10);
  EXPECT_NEAR(p.value.data[2], -cfg.lr, 1e-9);
}

TEST(Adam, EqualGradientsStayEqual) {
  ParameterSet<float> ps;
  auto& a = ps.add("a", {1, 1, 1, 1});
  auto& b = ps.add("b", {1, 1, 1, 1});
  AdamState<float> st;
  for (int i = 0; i < 5; ++i) {
    a.grad.data[0] = b.grad.data[0] = 0.3F * static_cast<float>(i - 2);
    adam_step(ps, st, AdamConfig{});
  }
  EXPECT_EQ(a.value.data[0], b.value.data[0]);
}

TEST(Adam, NonFiniteGradientReportsStep) {
  ParameterSet<float> ps;
  auto& a = ps.add("a", {1, 1, 1, 1});
  AdamState<float> st;
  adam_step(ps, st, AdamConfig{});
  a.grad.data[0] = std::numeric_limits<float>::infinity();
  try {
    adam_step(ps, st, AdamConfig{});
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos);
  }
}

TEST(Checkpoint, ParametersAndOptimizerStateRoundtrip) {
  std::mt19937_64 rng(3);
  ParameterSet<float> ps;
  auto& w = ps.add("enc.w", {2, 3, 3, 1});
  ps.add("enc.rm", {1, 2, 1, 1}, false);
  for (auto& v : w.value.data) v = static_cast<float>(rng() % 1000) / 7.0F;
  for (auto& v : w.grad.data) v = 0.25F;
  AdamState<float> st;
  adam_step(ps, st, AdamConfig{});

  ParameterSet<float> copy;
  copy.add("enc.w", {2, 3, 3, 1});
  copy.add("enc.rm", {1, 2, 1, 1}, false);
  decode_checkpoint_into(encode_checkpoint(ps), copy);
  EXPECT_EQ(copy.at("enc.w").value, w.value);
  EXPECT_EQ(decode_optimizer_state<float>(encode_optimizer_state(st)), st);

  ParameterSet<float> wrong;
  wrong.add("enc.w", {2, 3, 1, 3});
  wrong.add("enc.rm", {1, 2, 1, 1}, false);
  EXPECT_THROW(decode_checkpoint_into(encode_checkpoint(ps), wrong), FormatError);
  Bytes truncated = encode_checkpoint(ps);
  truncated.resize(truncated.size() - 2);
  EXPECT_THROW(decode_checkpoint_into(truncated, copy), FormatError);
}
