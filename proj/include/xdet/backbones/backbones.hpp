#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xdet/core/nn.hpp"

namespace xdet {

enum class BackboneKind { NEXTVIT_S, CSP_DARKNET, HGNETV2 };
enum class Stage { STEM, S1, S2, S3, S4 };
enum class BlockKind { CONV, NCB, NTB };

inline const char* to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::NEXTVIT_S: return "NEXTVIT_S";
    case BackboneKind::CSP_DARKNET: return "CSP_DARKNET";
    case BackboneKind::HGNETV2: return "HGNETV2";
  }
  return "?";
}
inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::STEM: return "STEM";
    case Stage::S1: return "S1";
    case Stage::S2: return "S2";
    case Stage::S3: return "S3";
    case Stage::S4: return "S4";
  }
  return "?";
}
inline const char* to_string(BlockKind b) {
  switch (b) {
    case BlockKind::CONV: return "CONV";
    case BlockKind::NCB: return "NCB";
    case BlockKind::NTB: return "NTB";
  }
  return "?";
}

// One entry of the sequential layer registry.
struct LayerTap {
  int index = 0;  // 1-based, consecutive over the whole backbone
  Stage stage = Stage::STEM;
  BlockKind block_kind = BlockKind::CONV;
  Index stride = 1;
  Index channels = 0;
};

struct BackboneSpec {
  BackboneKind kind = BackboneKind::NEXTVIT_S;
  std::vector<Index> stage_channels = {64, 128, 256, 512};
  std::vector<Index> stage_depths = {3, 4, 10, 3};
  double width_scale = 1.0;
  Index stem_stride = 4;
  Index attn_heads = 4;
  double mlp_ratio = 2.0;

  static BackboneSpec make(BackboneKind kind, double width_scale = 1.0) {
    BackboneSpec s;
    s.kind = kind;
    s.width_scale = width_scale;
    if (kind == BackboneKind::CSP_DARKNET) s.stage_depths = {2, 1, 2, 2};
    if (kind == BackboneKind::HGNETV2) s.stage_depths = {1, 1, 1, 1};
    return s;
  }

  // Width-scaled channel count, kept a positive multiple of 4 so attention
  // head splits and sincos tables stay valid.
  Index scaled(int stage_idx) const {
    const double c = static_cast<double>(stage_channels[static_cast<size_t>(stage_idx)]) * width_scale;
    Index r = static_cast<Index>(std::lround(c / 4.0)) * 4;
    return std::max<Index>(4, r);
  }

  void validate() const {
    check<config_error>(stage_channels.size() == 4 && stage_depths.size() == 4,
                        "backbone spec needs 4 stage channels and depths");
    for (Index c : stage_channels)
      check<config_error>(c > 0, "backbone spec: non-positive stage channel");
    for (Index d : stage_depths)
      check<config_error>(d > 0, "backbone spec: non-positive stage depth");
    check<config_error>(width_scale > 0, "backbone spec: non-positive width scale");
    check<config_error>(stem_stride == 4, "backbone spec: stem stride must be 4");
    check<config_error>(attn_heads > 0 && mlp_ratio > 0, "backbone spec: bad attention config");
    if (kind == BackboneKind::NEXTVIT_S)
      check<config_error>(stage_depths == std::vector<Index>({3, 4, 10, 3}),
                          "NEXTVIT_S uses the fixed canonical stage depths (3,4,10,3)");
  }
};

// The sequential layer registry is derived from the spec alone.
//
// NEXTVIT_S canonical layout (stem 3 / S1 3 / S2 4 / S3 10 / S4 3):
//   stem 1-3, S1 NCB 4-6, S2 NCB 7-9 NTB 10, S3 NCB 11-14 NTB 15 NCB 16-19
//   NTB 20, S4 NCB 21-22 NTB 23.
inline std::vector<LayerTap> layer_registry(const BackboneSpec& spec) {
  spec.validate();
  std::vector<LayerTap> reg;
  auto push = [&](Stage st, BlockKind bk, Index stride, Index ch) {
    reg.push_back({static_cast<int>(reg.size()) + 1, st, bk, stride, ch});
  };
  const Index c0 = spec.scaled(0), c1 = spec.scaled(1), c2 = spec.scaled(2), c3 = spec.scaled(3);
  switch (spec.kind) {
    case BackboneKind::NEXTVIT_S: {
      push(Stage::STEM, BlockKind::CONV, 2, c0);
      push(Stage::STEM, BlockKind::CONV, 4, c0);
      push(Stage::STEM, BlockKind::CONV, 4, c0);
      for (int i = 0; i < 3; ++i) push(Stage::S1, BlockKind::NCB, 4, c0);
      for (int i = 0; i < 3; ++i) push(Stage::S2, BlockKind::NCB, 8, c1);
      push(Stage::S2, BlockKind::NTB, 8, c1);
      for (int i = 0; i < 4; ++i) push(Stage::S3, BlockKind::NCB, 16, c2);
      push(Stage::S3, BlockKind::NTB, 16, c2);
      for (int i = 0; i < 4; ++i) push(Stage::S3, BlockKind::NCB, 16, c2);
      push(Stage::S3, BlockKind::NTB, 16, c2);
      for (int i = 0; i < 2; ++i) push(Stage::S4, BlockKind::NCB, 32, c3);
      push(Stage::S4, BlockKind::NTB, 32, c3);
      break;
    }
    case BackboneKind::CSP_DARKNET: {
      // Layers 4 and 6 land at strides 8 and 16, matching the reference
      // detector's neck connections.
      push(Stage::STEM, BlockKind::CONV, 2, c0);
      push(Stage::S1, BlockKind::CONV, 4, c0);
      push(Stage::S1, BlockKind::CONV, 4, c0);
      push(Stage::S2, BlockKind::CONV, 8, c1);
      push(Stage::S3, BlockKind::CONV, 16, c2);
      push(Stage::S3, BlockKind::CONV, 16, c2);
      push(Stage::S4, BlockKind::CONV, 32, c3);
      push(Stage::S4, BlockKind::CONV, 32, c3);
      break;
    }
    case BackboneKind::HGNETV2: {
      // Stage-2/stage-3 outputs (layers 4 and 5) are the default taps.
      push(Stage::STEM, BlockKind::CONV, 2, c0);
      push(Stage::STEM, BlockKind::CONV, 4, c0);
      push(Stage::S1, BlockKind::CONV, 4, c0);
      push(Stage::S2, BlockKind::CONV, 8, c1);
      push(Stage::S3, BlockKind::CONV, 16, c2);
      push(Stage::S4, BlockKind::CONV, 32, c3);
      break;
    }
  }
  return reg;
}

template <typename T>
struct FeatureMap {
  Var<T> data;  // (B, C, H, W)
  Index stride = 0;
};

namespace blocks {

template <typename T>
struct Block : Module<T> {
  virtual Var<T> forward(const Var<T>& x) = 0;
};

// Depthwise local mixing + pointwise MLP, residual. Handles stride /
// channel changes through a 1x1 projection shortcut.
template <typename T>
class Ncb final : public Block<T> {
 public:
  Ncb(Index cin, Index cout, Index stride, double mlp_ratio, Rng& rng)
      : norm_(cin, ConvNormAct<T>::default_groups(cin)),
        dw_(cin, cin, 3, stride, 1, cin, rng, /*bias=*/false),
        pw1_(cin, hidden(cout, mlp_ratio), 1, 1, 0, 1, rng),
        pw2_(hidden(cout, mlp_ratio), cout, 1, 1, 0, 1, rng),
        project_(stride != 1 || cin != cout) {
    if (project_) proj_ = Conv2d<T>(cin, cout, 1, stride, 0, 1, rng, /*bias=*/false);
  }

  Var<T> forward(const Var<T>& x) override {
    Var<T> h = dw_.forward(norm_.forward(x));
    h = pw2_.forward(silu(pw1_.forward(h)));
    Var<T> shortcut = project_ ? proj_.forward(x) : x;
    return add(shortcut, h);
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    norm_.collect(p + ".norm", out);
    dw_.collect(p + ".dw", out);
    pw1_.collect(p + ".pw1", out);
    pw2_.collect(p + ".pw2", out);
    if (project_) proj_.collect(p + ".proj", out);
  }

 private:
  static Index hidden(Index cout, double ratio) {
    return std::max<Index>(4, static_cast<Index>(std::lround(cout * ratio)));
  }
  GroupNorm<T> norm_;
  Conv2d<T> dw_, pw1_, pw2_;
  bool project_ = false;
  Conv2d<T> proj_;
};

// Stride-free token block: pre-norm self-attention over flattened spatial
// positions, a depthwise local-mixing tail, and a pre-norm MLP.
template <typename T>
class Ntb final : public Block<T> {
 public:
  Ntb(Index channels, Index heads, double mlp_ratio, Rng& rng)
      : channels_(channels),
        ln1_(channels),
        attn_(channels, effective_heads(channels, heads), rng),
        mix_norm_(channels, ConvNormAct<T>::default_groups(channels)),
        mix_dw_(channels, channels, 3, 1, 1, channels, rng, /*bias=*/false),
        mix_pw_(channels, channels, 1, 1, 0, 1, rng),
        ln2_(channels),
        mlp_(channels, std::max<Index>(4, static_cast<Index>(std::lround(channels * mlp_ratio))), rng) {}

  Var<T> forward(const Var<T>& x) override {
    const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Var<T> t = to_tokens(x, b, c, h, w);
    Var<T> tn = ln1_.forward(t);
    Var<T> qk = add(tn, position_tokens(b, h, w));
    Var<T> x1 = add(x, to_map(attn_.forward(qk, qk, tn), b, c, h, w));
    Var<T> x2 = add(x1, mix_pw_.forward(silu(mix_dw_.forward(mix_norm_.forward(x1)))));
    Var<T> t2 = to_tokens(x2, b, c, h, w);
    return add(x2, to_map(mlp_.forward(ln2_.forward(t2)), b, c, h, w));
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    ln1_.collect(p + ".ln1", out);
    attn_.collect(p + ".attn", out);
    mix_norm_.collect(p + ".mix_norm", out);
    mix_dw_.collect(p + ".mix_dw", out);
    mix_pw_.collect(p + ".mix_pw", out);
    ln2_.collect(p + ".ln2", out);
    mlp_.collect(p + ".mlp", out);
  }

  static Index effective_heads(Index channels, Index requested) {
    Index h = std::min(requested, channels);
    while (h > 1 && channels % h != 0) --h;
    return h;
  }

 private:
  static Var<T> to_tokens(const Var<T>& x, Index b, Index c, Index h, Index w) {
    return permute(reshape(x, {b, c, h * w}), {0, 2, 1});
  }
  static Var<T> to_map(const Var<T>& t, Index b, Index c, Index h, Index w) {
    return reshape(permute(t, {0, 2, 1}), {b, c, h, w});
  }
  Var<T> position_tokens(Index b, Index h, Index w) {
    Tensor<T> pos = sincos_position_2d<T>(h, w, channels_);
    Tensor<T> tiled(Shape{b, h * w, channels_});
    for (Index i = 0; i < b; ++i)
      std::copy(pos.data(), pos.data() + pos.size(), tiled.data() + i * pos.size());
    return make_leaf(std::move(tiled));
  }

  Index channels_;
  LayerNorm<T> ln1_;
  MultiheadAttention<T> attn_;
  GroupNorm<T> mix_norm_;
  Conv2d<T> mix_dw_, mix_pw_;
  LayerNorm<T> ln2_;
  Mlp<T> mlp_;
};

template <typename T>
class PlainConv final : public Block<T> {
 public:
  PlainConv(Index cin, Index cout, Index stride, Rng& rng) : cna_(cin, cout, 3, stride, rng) {}
  Var<T> forward(const Var<T>& x) override { return cna_.forward(x); }
  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    cna_.collect(p + ".cna", out);
  }

 private:
  ConvNormAct<T> cna_;
};

// Split / transform / merge block standing in for the CSP stage interior.
template <typename T>
class Csp final : public Block<T> {
 public:
  Csp(Index cin, Index cout, Index stride, Rng& rng)
      : down_(stride != 1 || cin != cout), half_(std::max<Index>(4, cout / 2)) {
    Index c = cin;
    if (down_) {
      entry_ = ConvNormAct<T>(cin, cout, 3, stride, rng);
      c = cout;
    }
    split_a_ = Conv2d<T>(c, half_, 1, 1, 0, 1, rng, /*bias=*/false);
    split_b_ = Conv2d<T>(c, half_, 1, 1, 0, 1, rng, /*bias=*/false);
    inner_ = ConvNormAct<T>(half_, half_, 3, 1, rng);
    fuse_ = ConvNormAct<T>(2 * half_, cout, 1, 1, rng);
  }

  Var<T> forward(const Var<T>& x) override {
    Var<T> h = down_ ? entry_.forward(x) : x;
    Var<T> a = split_a_.forward(h);
    Var<T> b = inner_.forward(split_b_.forward(h));
    return fuse_.forward(concat<T>({a, b}, 1));
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    if (down_) entry_.collect(p + ".entry", out);
    split_a_.collect(p + ".split_a", out);
    split_b_.collect(p + ".split_b", out);
    inner_.collect(p + ".inner", out);
    fuse_.collect(p + ".fuse", out);
  }

 private:
  bool down_;
  Index half_;
  ConvNormAct<T> entry_;
  Conv2d<T> split_a_, split_b_;
  ConvNormAct<T> inner_, fuse_;
};

// Dense two-conv aggregation with a 1x1 squeeze, HGNet style.
template <typename T>
class Hg final : public Block<T> {
 public:
  Hg(Index cin, Index cout, Index stride, Rng& rng) : down_(stride != 1 || cin != cout) {
    Index c = cin;
    if (down_) {
      entry_ = ConvNormAct<T>(cin, cout, 3, stride, rng);
      c = cout;
    }
    conv1_ = ConvNormAct<T>(c, c, 3, 1, rng);
    conv2_ = ConvNormAct<T>(c, c, 3, 1, rng);
    squeeze_ = ConvNormAct<T>(3 * c, cout, 1, 1, rng);
  }

  Var<T> forward(const Var<T>& x) override {
    Var<T> h = down_ ? entry_.forward(x) : x;
    Var<T> h1 = conv1_.forward(h);
    Var<T> h2 = conv2_.forward(h1);
    return squeeze_.forward(concat<T>({h, h1, h2}, 1));
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    if (down_) entry_.collect(p + ".entry", out);
    conv1_.collect(p + ".conv1", out);
    conv2_.collect(p + ".conv2", out);
    squeeze_.collect(p + ".squeeze", out);
  }

 private:
  bool down_;
  ConvNormAct<T> entry_, conv1_, conv2_, squeeze_;
};

}  // namespace blocks

template <typename T>
struct BackboneFeatures {
  std::map<int, FeatureMap<T>> taps;
  FeatureMap<T> final_output;
};

// Sequential backbone; every block output is addressable by its registry
// index. Immutable after construction apart from parameter updates.
template <typename T>
class Backbone : public Module<T> {
 public:
  Backbone() = default;
  Backbone(const BackboneSpec& spec, Rng& rng) : spec_(spec), registry_(layer_registry(spec)) {
    Index prev = 3;
    Index prev_stride = 1;
    for (const LayerTap& tap : registry_) {
      std::unique_ptr<blocks::Block<T>> block;
      const Index cout = tap.channels;
      const Index stride = prev_stride == tap.stride ? 1 : 2;
      switch (spec.kind) {
        case BackboneKind::NEXTVIT_S:
          if (tap.block_kind == BlockKind::CONV)
            block = std::make_unique<blocks::PlainConv<T>>(prev, cout, stride, rng);
          else if (tap.block_kind == BlockKind::NCB)
            block = std::make_unique<blocks::Ncb<T>>(prev, cout, stride, spec.mlp_ratio, rng);
          else
            block = std::make_unique<blocks::Ntb<T>>(cout, spec.attn_heads, spec.mlp_ratio, rng);
          break;
        case BackboneKind::CSP_DARKNET:
          if (tap.index == 1 || tap.index == 2 || tap.index == 5 || tap.index == 7)
            block = std::make_unique<blocks::PlainConv<T>>(prev, cout, stride, rng);
          else
            block = std::make_unique<blocks::Csp<T>>(prev, cout, stride, rng);
          break;
        case BackboneKind::HGNETV2:
          if (tap.stage == Stage::STEM)
            block = std::make_unique<blocks::PlainConv<T>>(prev, cout, stride, rng);
          else
            block = std::make_unique<blocks::Hg<T>>(prev, cout, stride, rng);
          break;
      }
      blocks_.push_back(std::move(block));
      prev = cout;
      prev_stride = tap.stride;
    }
  }

  const BackboneSpec& spec() const { return spec_; }
  const std::vector<LayerTap>& registry() const { return registry_; }

  const LayerTap& tap_info(int index) const {
    check<input_error>(index >= 1 && index <= static_cast<int>(registry_.size()),
                       "tap index " + std::to_string(index) + " out of range");
    return registry_[static_cast<size_t>(index - 1)];
  }

  // images: (B,3,H,W) with H,W divisible by 32.
  BackboneFeatures<T> forward(const Var<T>& images, const std::vector<int>& taps) {
    check<input_error>(images.ndim() == 4 && images.dim(1) == 3,
                       "backbone input must be (B,3,H,W)");
    check<input_error>(images.dim(2) % 32 == 0 && images.dim(3) % 32 == 0,
                       "input height and width must be divisible by 32");
    for (int t : taps) (void)tap_info(t);
    std::vector<bool> want(registry_.size() + 1, false);
    for (int t : taps) want[static_cast<size_t>(t)] = true;

    BackboneFeatures<T> out;
    Var<T> x = images;
    for (size_t i = 0; i < blocks_.size(); ++i) {
      x = blocks_[i]->forward(x);
      const LayerTap& tap = registry_[i];
      if (want[static_cast<size_t>(tap.index)])
        out.taps.emplace(tap.index, FeatureMap<T>{x, tap.stride});
    }
    out.final_output = FeatureMap<T>{x, registry_.back().stride};
    return out;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i]->collect(prefix + ".layer" + std::to_string(i + 1), out);
  }

 private:
  BackboneSpec spec_;
  std::vector<LayerTap> registry_;
  std::vector<std::unique_ptr<blocks::Block<T>>> blocks_;
};

template <typename T>
Backbone<T> build_backbone(const BackboneSpec& spec, Rng& rng) {
  spec.validate();
  return Backbone<T>(spec, rng);
}

}  // namespace xdet
