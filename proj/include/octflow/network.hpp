#pragma once
// Encoder-decoder stage network: three stride-2 downsampling blocks, a stack
// of residual blocks built from factorized 3x1/1x3 convolutions with 1x1
// bottlenecks, and a bilinear-upsampling decoder with skip additions.

#include <array>
#include <cstdint>
#include <random>
#include <string>

#include "octflow/autodiff/graph.hpp"
#include "octflow/autodiff/tensor.hpp"

namespace octflow {

struct NetworkConfig {
  int in_channels = 18;
  int out_channels = 2;
  std::array<int, 3> widths{16, 32, 64};
  int residual_blocks = 5;
  double dropout = 0.1;
  double leaky_slope = 0.1;
  // multiplies the final convolution output (lets depth stages emit voxel-sized values)
  double output_scale = 1.0;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline constexpr int kNetworkStride = 8;

class StageNetwork {
 public:
  StageNetwork(NetworkConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.in_channels < 1 || cfg.out_channels < 1) throw ConfigError("network channel counts must be positive");
    for (int w : cfg.widths)
      if (w < 2 || w % 2) throw ConfigError("network widths must be even and >= 2");
    if (cfg.residual_blocks < 0) throw ConfigError("residual block count must be >= 0");
    if (!(cfg.dropout >= 0 && cfg.dropout < 1)) throw ConfigError("dropout rate must be in [0,1)");
    std::mt19937_64 rng(seed);
    const auto& W = cfg.widths;
    int c = cfg.in_channels;
    for (int i = 0; i < 3; ++i) {
      const std::string p = "enc" + std::to_string(i);
      conv(p + ".conv", W[i], c, 3, 3, rng);
      norm(p + ".norm", W[i]);
      c = W[i];
    }
    const int mid = W[2] / 2;
    for (int b = 0; b < cfg.residual_blocks; ++b) {
      const std::string p = "res" + std::to_string(b);
      conv(p + ".reduce", mid, W[2], 1, 1, rng);
      conv(p + ".col", mid, mid, 3, 1, rng);
      conv(p + ".row", mid, mid, 1, 3, rng);
      conv(p + ".expand", W[2], mid, 1, 1, rng);
      norm(p + ".norm", W[2]);
    }
    conv("dec2.proj", W[1], W[2], 1, 1, rng);
    conv("dec1.proj", W[0], W[1], 1, 1, rng);
    conv("head", cfg.out_channels, W[0], 3, 3, rng);
    // start close to a zero residual
    for (auto& v : params_.at("head.w").value.data) v *= 0.1F;
  }

  const NetworkConfig& config() const { return cfg_; }
  ad::ParameterSet<float>& parameters() { return params_; }
  const ad::ParameterSet<float>& parameters() const { return params_; }

  // Appends the network to `g`; input (N, in_channels, H, W) with H, W
  // divisible by 8; output (N, out_channels, H, W).
  ad::Var build(ad::Graph<float>& g, ad::Var x) {
    using ad::Var;
    const double slope = cfg_.leaky_slope;
    auto P = [&](const std::string& name) { return g.parameter(params_.at(name)); };
    auto conv = [&](Var in, const std::string& name, int stride, int ph, int pw) {
      return g.conv2d(in, P(name + ".w"), P(name + ".b"), stride, ph, pw);
    };
    auto norm = [&](Var in, const std::string& name) {
      return g.channel_norm(in, P(name + ".gamma"), P(name + ".beta"), params_.at(name + ".mean"),
                            params_.at(name + ".var"));
    };

    std::array<Var, 3> skips{};
    Var h = x;
    for (int i = 0; i < 3; ++i) {
      const std::string p = "enc" + std::to_string(i);
      h = g.leaky_relu(norm(conv(h, p + ".conv", 2, 1, 1), p + ".norm"), slope);
      skips[i] = h;
    }
    for (int b = 0; b < cfg_.residual_blocks; ++b) {
      const std::string p = "res" + std::to_string(b);
      Var r = g.leaky_relu(conv(h, p + ".reduce", 1, 0, 0), slope);
      r = g.leaky_relu(conv(r, p + ".col", 1, 1, 0), slope);
      r = g.leaky_relu(conv(r, p + ".row", 1, 0, 1), slope);
      r = norm(conv(r, p + ".expand", 1, 0, 0), p + ".norm");
      if (cfg_.dropout > 0) r = g.spatial_dropout(r, cfg_.dropout);
      h = g.leaky_relu(g.add(h, r), slope);
    }
    h = g.leaky_relu(g.add(conv(g.upsample2x(h), "dec2.proj", 1, 0, 0), skips[1]), slope);
    h = g.leaky_relu(g.add(conv(g.upsample2x(h), "dec1.proj", 1, 0, 0), skips[0]), slope);
    Var out = conv(g.upsample2x(h), "head", 1, 1, 1);
    if (cfg_.output_scale != 1.0) out = g.scale(out, cfg_.output_scale);
    g.set_label(out, "head");
    return out;
  }

  // Evaluation-mode forward pass.
  ad::Tensor<float> infer(const ad::Tensor<float>& input) {
    check_input(input.shape);
    ad::Graph<float> g;
    g.set_training(false);
    const ad::Var x = g.input("input");
    g.set_input(x, input);
    const ad::Var y = build(g, x);
    g.forward();
    return g.value(y);
  }

  void check_input(const ad::Shape& s) const {
    if (s.c != cfg_.in_channels)
      throw GraphError("network expects " + std::to_string(cfg_.in_channels) + " input channels, got " + s.str());
    if (s.h % kNetworkStride || s.w % kNetworkStride)
      throw GraphError("network input extent must be divisible by 8, got " + s.str());
  }

 private:
  void conv(const std::string& name, int cout, int cin, int kh, int kw, std::mt19937_64& rng) {
    ad::init_he_normal(params_.add(name + ".w", {cout, cin, kh, kw}).value, cin * kh * kw, rng);
    params_.add(name + ".b", {1, cout, 1, 1});
  }
  void norm(const std::string& name, int c) {
    auto& gamma = params_.add(name + ".gamma", {1, c, 1, 1});
    std::fill(gamma.value.data.begin(), gamma.value.data.end(), 1.0F);
    params_.add(name + ".beta", {1, c, 1, 1});
    params_.add(name + ".mean", {1, c, 1, 1}, false);
    auto& var = params_.add(name + ".var", {1, c, 1, 1}, false);
    std::fill(var.value.data.begin(), var.value.data.end(), 1.0F);
  }

  NetworkConfig cfg_;
  ad::ParameterSet<float> params_;
};

}  // namespace octflow
