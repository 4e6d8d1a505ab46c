#pragma once

#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "xdet/backbones/backbones.hpp"
#include "xdet/data/types.hpp"
#include "xdet/rtdetr/hungarian.hpp"
#include "xdet/yolo/yolo.hpp"  // FuseBlock, LossBreakdown

namespace xdet {

struct RtDetrConfig {
  Index num_classes = 80;
  Index hidden_dim = 128;
  Index num_queries = 300;
  Index decoder_layers = 3;
  Index heads = 8;
  double mlp_ratio = 2.0;
  // Intra-scale self-attention runs on the deepest map only.
  Index encoder_attention_stride = 32;
  double match_cls = 1.0, match_l1 = 5.0, match_giou = 2.0;
  double loss_cls = 1.0, loss_l1 = 5.0, loss_giou = 2.0;
  double focal_alpha = 0.25;  // focal gamma is fixed at 2
  bool aux_losses = true;

  void validate() const {
    check<config_error>(num_classes >= 1, "rtdetr: num_classes must be >= 1");
    check<config_error>(hidden_dim >= 8 && hidden_dim % 4 == 0,
                        "rtdetr: hidden_dim must be a multiple of 4");
    check<config_error>(heads >= 1 && hidden_dim % heads == 0,
                        "rtdetr: heads must divide hidden_dim");
    check<config_error>(num_queries >= 1, "rtdetr: need at least one query");
    check<config_error>(decoder_layers >= 1, "rtdetr: need at least one decoder layer");
    check<config_error>(encoder_attention_stride == 32,
                        "rtdetr: encoder self-attention is restricted to the stride-32 map");
    check<config_error>(match_cls >= 0 && match_l1 >= 0 && match_giou >= 0,
                        "rtdetr: matching weights must be non-negative");
  }
};

// Normalized cxcywh ground truth for set prediction.
struct NormAnnotation {
  double cx = 0, cy = 0, w = 0, h = 0;
  int class_id = 0;
};

inline std::vector<NormAnnotation> to_normalized(const std::vector<BoxAnnotation>& gts,
                                                 double img_w, double img_h) {
  std::vector<NormAnnotation> out;
  out.reserve(gts.size());
  for (const auto& g : gts)
    out.push_back({(g.box.x1 + g.box.x2) / 2 / img_w, (g.box.y1 + g.box.y2) / 2 / img_h,
                   g.box.width() / img_w, g.box.height() / img_h, g.class_id});
  return out;
}

struct CellAnchor {
  double cx = 0, cy = 0, w = 0, h = 0;  // normalized
};

template <typename T>
struct EncodedMemory {
  std::array<FeatureMap<T>, 3> fused;  // strides 8/16/32, common width
  Var<T> tokens;                       // (B, N, D), scale-major, row-major per scale
  Var<T> token_pos;                    // leaf (B, N, D)
  std::vector<CellAnchor> cells;       // per token
};

template <typename T>
struct QuerySet {
  Var<T> content;  // (B, K, D)
  Var<T> refs;     // (B, K, 4) normalized cxcywh in [0,1]
};

template <typename T>
struct DecoderOutput {
  std::vector<Var<T>> class_logits;  // per layer: (B, K, num_classes)
  std::vector<Var<T>> boxes;         // per layer: (B, K, 4) normalized
};

// ---------------------------------------------------------------- encoder

// Intra-scale self-attention on the stride-32 tokens plus PAN-style
// cross-scale fusion at a common channel width.
template <typename T>
class HybridEncoder : public Module<T> {
 public:
  HybridEncoder() = default;
  HybridEncoder(Index c8, Index c16, Index c32, const RtDetrConfig& cfg, Rng& rng)
      : dim_(cfg.hidden_dim),
        proj8_(c8, cfg.hidden_dim, 1, 1, rng),
        proj16_(c16, cfg.hidden_dim, 1, 1, rng),
        proj32_(c32, cfg.hidden_dim, 1, 1, rng),
        ln1_(cfg.hidden_dim),
        attn_(cfg.hidden_dim, cfg.heads, rng),
        ln2_(cfg.hidden_dim),
        mlp_(cfg.hidden_dim, hidden(cfg), rng),
        td16_(2 * cfg.hidden_dim, cfg.hidden_dim, rng),
        td8_(2 * cfg.hidden_dim, cfg.hidden_dim, rng),
        down8_(cfg.hidden_dim, cfg.hidden_dim, 3, 2, rng),
        bu16_(2 * cfg.hidden_dim, cfg.hidden_dim, rng),
        down16_(cfg.hidden_dim, cfg.hidden_dim, 3, 2, rng),
        bu32_(2 * cfg.hidden_dim, cfg.hidden_dim, rng) {}

  std::array<FeatureMap<T>, 3> forward(const FeatureMap<T>& tap8, const FeatureMap<T>& tap16,
                                       const FeatureMap<T>& top) {
    check<input_error>(tap8.stride == 8 && tap16.stride == 16 && top.stride == 32,
                       "hybrid encoder expects strides {8,16,32}");
    check<input_error>(tap8.data.dim(0) == tap16.data.dim(0) &&
                           tap16.data.dim(0) == top.data.dim(0),
                       "hybrid encoder: batch mismatch");
    Var<T> f8 = proj8_.forward(tap8.data);
    Var<T> f16 = proj16_.forward(tap16.data);
    Var<T> f32 = proj32_.forward(top.data);

    // transformer layer over the flattened deepest map
    const Index b = f32.dim(0), h = f32.dim(2), w = f32.dim(3);
    Var<T> t = permute(reshape(f32, {b, dim_, h * w}), {0, 2, 1});
    Var<T> tn = ln1_.forward(t);
    Var<T> qk = add(tn, tiled_positions(b, h, w));
    t = add(t, attn_.forward(qk, qk, tn));
    t = add(t, mlp_.forward(ln2_.forward(t)));
    f32 = reshape(permute(t, {0, 2, 1}), {b, dim_, h, w});

    // cross-scale fusion
    Var<T> t16 = td16_.forward(concat<T>({upsample_nearest2(f32), f16}, 1));
    Var<T> t8 = td8_.forward(concat<T>({upsample_nearest2(t16), f8}, 1));
    Var<T> o16 = bu16_.forward(concat<T>({down8_.forward(t8), t16}, 1));
    Var<T> o32 = bu32_.forward(concat<T>({down16_.forward(o16), f32}, 1));
    return {FeatureMap<T>{t8, 8}, FeatureMap<T>{o16, 16}, FeatureMap<T>{o32, 32}};
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    proj8_.collect(p + ".proj8", out);
    proj16_.collect(p + ".proj16", out);
    proj32_.collect(p + ".proj32", out);
    ln1_.collect(p + ".ln1", out);
    attn_.collect(p + ".attn", out);
    ln2_.collect(p + ".ln2", out);
    mlp_.collect(p + ".mlp", out);
    td16_.collect(p + ".td16", out);
    td8_.collect(p + ".td8", out);
    down8_.collect(p + ".down8", out);
    bu16_.collect(p + ".bu16", out);
    down16_.collect(p + ".down16", out);
    bu32_.collect(p + ".bu32", out);
  }

 private:
  static Index hidden(const RtDetrConfig& cfg) {
    return std::max<Index>(8, static_cast<Index>(std::lround(cfg.hidden_dim * cfg.mlp_ratio)));
  }
  Var<T> tiled_positions(Index b, Index h, Index w) {
    Tensor<T> pos = sincos_position_2d<T>(h, w, dim_);
    Tensor<T> tiled(Shape{b, h * w, dim_});
    for (Index i = 0; i < b; ++i)
      std::copy(pos.data(), pos.data() + pos.size(), tiled.data() + i * pos.size());
    return make_leaf(std::move(tiled));
  }

  Index dim_ = 0;
  ConvNormAct<T> proj8_, proj16_, proj32_;
  LayerNorm<T> ln1_;
  MultiheadAttention<T> attn_;
  LayerNorm<T> ln2_;
  Mlp<T> mlp_;
  FuseBlock<T> td16_, td8_;
  ConvNormAct<T> down8_;
  FuseBlock<T> bu16_;
  ConvNormAct<T> down16_;
  FuseBlock<T> bu32_;
};

// Stable ranking of cells by score descending, ties by lower cell index.
inline std::vector<Index> topk_cells(const std::vector<double>& scores, Index k) {
  check<input_error>(k >= 1 && k <= static_cast<Index>(scores.size()),
                     "select_queries: K exceeds the number of feature cells");
  std::vector<Index> order(scores.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  order.resize(static_cast<size_t>(k));
  return order;
}

// ------------------------------------------------------------------ decoder

template <typename T>
class BoxDeltaHead : public Module<T> {
 public:
  BoxDeltaHead() = default;
  BoxDeltaHead(Index dim, Rng& rng) : fc1_(dim, dim, rng), fc2_(dim, 4, rng) {}
  Var<T> forward(const Var<T>& x) { return fc2_.forward(silu(fc1_.forward(x))); }
  // Zeroing the output layer makes the refinement the identity: every
  // layer's boxes equal the initial anchors.
  void zero_offsets() {
    fc2_.weight().val().arr().setZero();
    fc2_.bias().val().arr().setZero();
  }
  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    fc1_.collect(p + ".fc1", out);
    fc2_.collect(p + ".fc2", out);
  }

 private:
  Linear<T> fc1_, fc2_;
};

template <typename T>
class DecoderLayer : public Module<T> {
 public:
  DecoderLayer() = default;
  DecoderLayer(const RtDetrConfig& cfg, Rng& rng)
      : ln1_(cfg.hidden_dim),
        self_attn_(cfg.hidden_dim, cfg.heads, rng),
        ln2_(cfg.hidden_dim),
        cross_attn_(cfg.hidden_dim, cfg.heads, rng),
        ln3_(cfg.hidden_dim),
        mlp_(cfg.hidden_dim,
             std::max<Index>(8, static_cast<Index>(std::lround(cfg.hidden_dim * cfg.mlp_ratio))),
             rng) {}

  Var<T> forward(const Var<T>& x, const Var<T>& query_pos, const Var<T>& mem_tokens,
                 const Var<T>& mem_pos) {
    Var<T> t = ln1_.forward(x);
    Var<T> q = add(t, query_pos);
    Var<T> h = add(x, self_attn_.forward(q, q, t));
    Var<T> t2 = ln2_.forward(h);
    h = add(h, cross_attn_.forward(add(t2, query_pos), add(mem_tokens, mem_pos), mem_tokens));
    return add(h, mlp_.forward(ln3_.forward(h)));
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    ln1_.collect(p + ".ln1", out);
    self_attn_.collect(p + ".self_attn", out);
    ln2_.collect(p + ".ln2", out);
    cross_attn_.collect(p + ".cross_attn", out);
    ln3_.collect(p + ".ln3", out);
    mlp_.collect(p + ".mlp", out);
  }

 private:
  LayerNorm<T> ln1_;
  MultiheadAttention<T> self_attn_;
  LayerNorm<T> ln2_;
  MultiheadAttention<T> cross_attn_;
  LayerNorm<T> ln3_;
  Mlp<T> mlp_;
};

// ----------------------------------------------------------------- the head

template <typename T>
class RtDetrHead : public Module<T> {
 public:
  RtDetrHead() = default;
  RtDetrHead(Index c8, Index c16, Index c32, const RtDetrConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    encoder_ = HybridEncoder<T>(c8, c16, c32, cfg, rng);
    score_head_ = Linear<T>(cfg.hidden_dim, cfg.num_classes, rng);
    content_proj_ = Linear<T>(cfg.hidden_dim, cfg.hidden_dim, rng);
    pos_fc1_ = Linear<T>(4, cfg.hidden_dim, rng);
    pos_fc2_ = Linear<T>(cfg.hidden_dim, cfg.hidden_dim, rng);
    class_head_ = Linear<T>(cfg.hidden_dim, cfg.num_classes, rng);
    class_head_.bias().val().arr().setConstant(static_cast<T>(-std::log(99.0)));
    box_head_ = BoxDeltaHead<T>(cfg.hidden_dim, rng);
    for (Index l = 0; l < cfg.decoder_layers; ++l) layers_.emplace_back(cfg, rng);
  }

  const RtDetrConfig& config() const { return cfg_; }

  EncodedMemory<T> encode(const FeatureMap<T>& tap8, const FeatureMap<T>& tap16,
                          const FeatureMap<T>& top) {
    EncodedMemory<T> mem;
    mem.fused = encoder_.forward(tap8, tap16, top);
    const Index b = mem.fused[0].data.dim(0);
    std::vector<Var<T>> token_parts;
    Index total = 0;
    for (int s = 0; s < 3; ++s) {
      const Var<T>& f = mem.fused[static_cast<size_t>(s)].data;
      const Index h = f.dim(2), w = f.dim(3);
      token_parts.push_back(permute(reshape(f, {b, cfg_.hidden_dim, h * w}), {0, 2, 1}));
      const double bw = 0.05 * (static_cast<double>(mem.fused[static_cast<size_t>(s)].stride) / 8.0);
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j)
          mem.cells.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(w),
                               (static_cast<double>(i) + 0.5) / static_cast<double>(h),
                               std::min(1.0, bw), std::min(1.0, bw)});
      total += h * w;
    }
    mem.tokens = concat<T>(token_parts, 1);  // (B, N, D)

    Tensor<T> pos(Shape{b, total, cfg_.hidden_dim});
    Index off = 0;
    for (int s = 0; s < 3; ++s) {
      const Var<T>& f = mem.fused[static_cast<size_t>(s)].data;
      const Index h = f.dim(2), w = f.dim(3);
      Tensor<T> sp = sincos_position_2d<T>(h, w, cfg_.hidden_dim);
      for (Index i = 0; i < b; ++i)
        std::copy(sp.data(), sp.data() + sp.size(),
                  pos.data() + (i * total + off) * cfg_.hidden_dim);
      off += h * w;
    }
    mem.token_pos = make_leaf(std::move(pos));
    return mem;
  }

  // Rank cells by their maximum class logit; top-K cell features become the
  // initial queries, reference boxes come from cell geometry.
  QuerySet<T> select_queries(const EncodedMemory<T>& mem, Index k) {
    const Index b = mem.tokens.dim(0), n = mem.tokens.dim(1);
    check<input_error>(k >= 1 && k <= n, "select_queries: K exceeds cell count");
    Var<T> logits = score_head_.forward(mem.tokens);  // (B, N, nc)
    const T* lp = logits.val().data();

    Var<T> tokens2d = reshape(mem.tokens, {b * n, cfg_.hidden_dim});
    std::vector<Index> rows;
    rows.reserve(static_cast<size_t>(b * k));
    Tensor<T> refs(Shape{b, k, 4});
    for (Index i = 0; i < b; ++i) {
      std::vector<double> scores(static_cast<size_t>(n));
      for (Index c = 0; c < n; ++c) {
        const T* row = lp + (i * n + c) * cfg_.num_classes;
        T best = row[0];
        for (Index cl = 1; cl < cfg_.num_classes; ++cl) best = std::max(best, row[cl]);
        scores[static_cast<size_t>(c)] = static_cast<double>(best);
      }
      const auto picked = topk_cells(scores, k);
      for (Index qi = 0; qi < k; ++qi) {
        const Index cell = picked[static_cast<size_t>(qi)];
        rows.push_back(i * n + cell);
        const CellAnchor& ca = mem.cells[static_cast<size_t>(cell)];
        refs.at({i, qi, 0}) = static_cast<T>(ca.cx);
        refs.at({i, qi, 1}) = static_cast<T>(ca.cy);
        refs.at({i, qi, 2}) = static_cast<T>(ca.w);
        refs.at({i, qi, 3}) = static_cast<T>(ca.h);
      }
    }
    QuerySet<T> q;
    q.content = reshape(content_proj_.forward(index_select_rows(tokens2d, rows)),
                        {b, k, cfg_.hidden_dim});
    q.refs = make_leaf(std::move(refs));
    return q;
  }

  DecoderOutput<T> decode_queries(const QuerySet<T>& queries, const EncodedMemory<T>& mem,
                                  Index num_layers) {
    check<input_error>(num_layers >= 1, "decode_queries: need at least one layer");
    check<input_error>(num_layers <= static_cast<Index>(layers_.size()),
                       "decode_queries: more layers requested than built");
    const Index b = queries.content.dim(0), k = queries.content.dim(1);
    DecoderOutput<T> out;
    Var<T> x = queries.content;
    Var<T> ref = queries.refs;
    for (Index l = 0; l < num_layers; ++l) {
      Var<T> qpos = pos_fc2_.forward(silu(pos_fc1_.forward(ref)));
      x = layers_[static_cast<size_t>(l)].forward(x, qpos, mem.tokens, mem.token_pos);
      Var<T> delta = box_head_.forward(x);  // (B,K,4) unconstrained
      ref = sigmoid(add(inverse_sigmoid(ref), delta));
      out.class_logits.push_back(class_head_.forward(x));
      out.boxes.push_back(ref);
      (void)b;
      (void)k;
    }
    return out;
  }

  DecoderOutput<T> forward(const FeatureMap<T>& tap8, const FeatureMap<T>& tap16,
                           const FeatureMap<T>& top) {
    EncodedMemory<T> mem = encode(tap8, tap16, top);
    QuerySet<T> q = select_queries(mem, cfg_.num_queries);
    return decode_queries(q, mem, cfg_.decoder_layers);
  }

  BoxDeltaHead<T>& box_head() { return box_head_; }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    encoder_.collect(p + ".encoder", out);
    score_head_.collect(p + ".score_head", out);
    content_proj_.collect(p + ".content_proj", out);
    pos_fc1_.collect(p + ".pos_fc1", out);
    pos_fc2_.collect(p + ".pos_fc2", out);
    class_head_.collect(p + ".class_head", out);
    box_head_.collect(p + ".box_head", out);
    for (size_t l = 0; l < layers_.size(); ++l)
      layers_[l].collect(p + ".layer" + std::to_string(l), out);
  }

 private:
  RtDetrConfig cfg_;
  HybridEncoder<T> encoder_;
  Linear<T> score_head_, content_proj_, pos_fc1_, pos_fc2_, class_head_;
  BoxDeltaHead<T> box_head_;
  std::vector<DecoderLayer<T>> layers_;
};

// ---------------------------------------------------------------- matching

struct MatchWeights {
  double w_cls = 1.0, w_l1 = 5.0, w_giou = 2.0;
};

inline double giou_scalar(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double iou = uni > 0 ? inter / uni : 0.0;
  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double chh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double hull = cw * chh;
  return hull > 0 ? iou - (hull - uni) / hull : iou;
}

inline Box cxcywh_to_xyxy(double cx, double cy, double w, double h) {
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

// Minimum-cost one-to-one matching of ground truths to queries for a single
// image and decoder layer. Returns gt index -> query index.
template <typename T>
inline std::vector<int> hungarian_match(const Tensor<T>& logits_kc, const Tensor<T>& boxes_k4,
                                        const std::vector<NormAnnotation>& gts,
                                        const MatchWeights& w = {}) {
  check<input_error>(w.w_cls >= 0 && w.w_l1 >= 0 && w.w_giou >= 0,
                     "hungarian_match: weights must be non-negative");
  const Index k = logits_kc.dim(0);
  const Index nc = logits_kc.dim(1);
  check<input_error>(static_cast<Index>(gts.size()) <= k,
                     "hungarian_match: more ground truths than queries");
  if (gts.empty()) return {};
  std::vector<double> cost(gts.size() * static_cast<size_t>(k));
  for (size_t g = 0; g < gts.size(); ++g) {
    const NormAnnotation& gt = gts[g];
    check<input_error>(gt.class_id >= 0 && gt.class_id < nc, "hungarian_match: class out of range");
    const Box gt_xy = cxcywh_to_xyxy(gt.cx, gt.cy, gt.w, gt.h);
    for (Index q = 0; q < k; ++q) {
      const double logit = static_cast<double>(logits_kc.at({q, static_cast<Index>(gt.class_id)}));
      const double score = 1.0 / (1.0 + std::exp(-logit));
      const double l1 = std::abs(static_cast<double>(boxes_k4.at({q, 0})) - gt.cx) +
                        std::abs(static_cast<double>(boxes_k4.at({q, 1})) - gt.cy) +
                        std::abs(static_cast<double>(boxes_k4.at({q, 2})) - gt.w) +
                        std::abs(static_cast<double>(boxes_k4.at({q, 3})) - gt.h);
      const Box pred_xy =
          cxcywh_to_xyxy(static_cast<double>(boxes_k4.at({q, 0})),
                         static_cast<double>(boxes_k4.at({q, 1})),
                         static_cast<double>(boxes_k4.at({q, 2})),
                         static_cast<double>(boxes_k4.at({q, 3})));
      cost[g * static_cast<size_t>(k) + static_cast<size_t>(q)] =
          w.w_cls * (-score) + w.w_l1 * l1 + w.w_giou * (1.0 - giou_scalar(pred_xy, gt_xy));
    }
  }
  return solve_assignment(cost, static_cast<int>(gts.size()), static_cast<int>(k));
}

// -------------------------------------------------------------------- loss

// Differentiable GIoU on (N,4) cxcywh tensors against constant targets.
template <typename T>
inline Var<T> giou_cxcywh(const Var<T>& pred, const Var<T>& target) {
  const Index n = pred.dim(0);
  auto col = [&](const Var<T>& m, Index c) { return reshape(slice(m, 1, c, 1), {n}); };
  Var<T> half = make_leaf(Tensor<T>::full({n}, T(0.5)));
  Var<T> zero = make_leaf(Tensor<T>::zeros({n}));
  const T eps = T(1e-9);

  Var<T> pcx = col(pred, 0), pcy = col(pred, 1), pw = col(pred, 2), ph = col(pred, 3);
  Var<T> gcx = col(target, 0), gcy = col(target, 1), gw = col(target, 2), gh = col(target, 3);
  Var<T> px1 = sub(pcx, mul(pw, half)), px2 = add(pcx, mul(pw, half));
  Var<T> py1 = sub(pcy, mul(ph, half)), py2 = add(pcy, mul(ph, half));
  Var<T> gx1 = sub(gcx, mul(gw, half)), gx2 = add(gcx, mul(gw, half));
  Var<T> gy1 = sub(gcy, mul(gh, half)), gy2 = add(gcy, mul(gh, half));

  Var<T> iw = maximum(sub(minimum(px2, gx2), maximum(px1, gx1)), zero);
  Var<T> ih = maximum(sub(minimum(py2, gy2), maximum(py1, gy1)), zero);
  Var<T> inter = mul(iw, ih);
  Var<T> uni = add_scalar(sub(add(mul(pw, ph), mul(gw, gh)), inter), eps);
  Var<T> iou_v = div(inter, uni);
  Var<T> hull = add_scalar(mul(sub(maximum(px2, gx2), minimum(px1, gx1)),
                               sub(maximum(py2, gy2), minimum(py1, gy1))),
                           eps);
  return sub(iou_v, div(sub(hull, uni), hull));
}

// Focal classification over all queries plus L1 and GIoU over matched
// pairs, averaged by ground-truth count and summed over decoder layers.
template <typename T>
inline LossBreakdown<T> detr_loss(const DecoderOutput<T>& outputs,
                                  const std::vector<std::vector<NormAnnotation>>& gts,
                                  const std::vector<std::vector<std::vector<int>>>& matchings,
                                  const RtDetrConfig& cfg) {
  const size_t layers = outputs.class_logits.size();
  check<input_error>(matchings.size() == layers, "detr_loss: one matching per layer required");
  const Index b = outputs.class_logits[0].dim(0);
  const Index k = outputs.class_logits[0].dim(1);
  check<input_error>(static_cast<Index>(gts.size()) == b, "detr_loss: batch mismatch");

  Index total_gt = 0;
  for (const auto& g : gts) total_gt += static_cast<Index>(g.size());
  const T norm = T(1) / static_cast<T>(std::max<Index>(1, total_gt));

  Var<T> cls_total = make_leaf(Tensor<T>::scalar(T(0)));
  Var<T> giou_total = make_leaf(Tensor<T>::scalar(T(0)));
  Var<T> l1_total = make_leaf(Tensor<T>::scalar(T(0)));

  const size_t first = cfg.aux_losses ? 0 : layers - 1;
  for (size_t l = first; l < layers; ++l) {
    const auto& match = matchings[l];
    check<input_error>(static_cast<Index>(match.size()) == b, "detr_loss: matching batch mismatch");
    check<numeric_error>(outputs.class_logits[l].val().all_finite() &&
                             outputs.boxes[l].val().all_finite(),
                         "detr_loss: non-finite predictions");

    Tensor<T> targets(Shape{b * k, cfg.num_classes});
    Tensor<T> alpha_t(Shape{b * k, cfg.num_classes});
    alpha_t.arr().setConstant(static_cast<T>(1.0 - cfg.focal_alpha));
    std::vector<Index> matched_rows;
    std::vector<const NormAnnotation*> matched_gt;
    for (Index i = 0; i < b; ++i) {
      const auto& m = match[static_cast<size_t>(i)];
      check<input_error>(m.size() == gts[static_cast<size_t>(i)].size(),
                         "detr_loss: matching does not cover all ground truths");
      for (size_t g = 0; g < m.size(); ++g) {
        const Index row = i * k + m[g];
        const NormAnnotation& ann = gts[static_cast<size_t>(i)][g];
        targets.at({row, static_cast<Index>(ann.class_id)}) = T(1);
        alpha_t.at({row, static_cast<Index>(ann.class_id)}) = static_cast<T>(cfg.focal_alpha);
        matched_rows.push_back(row);
        matched_gt.push_back(&ann);
      }
    }

    Var<T> logits2d = reshape(outputs.class_logits[l], {b * k, cfg.num_classes});
    Var<T> bce = bce_with_logits(logits2d, make_leaf(targets));
    Var<T> pt = vexp(neg(bce));  // probability of the true label
    Var<T> ones = make_leaf(Tensor<T>::full(bce.shape(), T(1)));
    Var<T> focal = mul(mul(make_leaf(alpha_t), square(sub(ones, pt))), bce);
    cls_total = add(cls_total, scale(sum(focal), norm));

    if (!matched_rows.empty()) {
      const Index m = static_cast<Index>(matched_rows.size());
      Var<T> boxes2d = reshape(outputs.boxes[l], {b * k, 4});
      Var<T> pred = index_select_rows(boxes2d, matched_rows);
      Tensor<T> gt_t(Shape{m, 4});
      for (Index i = 0; i < m; ++i) {
        gt_t.at({i, 0}) = static_cast<T>(matched_gt[static_cast<size_t>(i)]->cx);
        gt_t.at({i, 1}) = static_cast<T>(matched_gt[static_cast<size_t>(i)]->cy);
        gt_t.at({i, 2}) = static_cast<T>(matched_gt[static_cast<size_t>(i)]->w);
        gt_t.at({i, 3}) = static_cast<T>(matched_gt[static_cast<size_t>(i)]->h);
      }
      Var<T> gt_v = make_leaf(gt_t);
      l1_total = add(l1_total, scale(sum(vabs(sub(pred, gt_v))), norm));
      Var<T> ones_m = make_leaf(Tensor<T>::full({m}, T(1)));
      giou_total = add(giou_total, scale(sum(sub(ones_m, giou_cxcywh(pred, gt_v))), norm));
    }
  }

  LossBreakdown<T> out;
  out.cls = cls_total;
  out.box = giou_total;
  out.reg = l1_total;
  out.total = add(add(scale(out.cls, static_cast<T>(cfg.loss_cls)),
                      scale(out.box, static_cast<T>(cfg.loss_giou))),
                  scale(out.reg, static_cast<T>(cfg.loss_l1)));
  check<numeric_error>(out.total.val().all_finite(), "detr_loss: non-finite loss");
  return out;
}

// ------------------------------------------------------------- postprocess

// Per-query best class, confidence gate (strict >), pixel scaling; the set
// head needs no NMS.
template <typename T>
inline std::vector<std::vector<Detection>> detr_postprocess(const Var<T>& class_logits,
                                                            const Var<T>& boxes, double conf_thr,
                                                            int max_det, double img_w,
                                                            double img_h) {
  check<input_error>(conf_thr >= 0 && conf_thr <= 1, "detr_postprocess: conf_thr in [0,1]");
  check<input_error>(max_det >= 0, "detr_postprocess: max_det must be >= 0");
  const Index b = class_logits.dim(0), k = class_logits.dim(1), nc = class_logits.dim(2);
  const T* lp = class_logits.val().data();
  const T* bp = boxes.val().data();
  std::vector<std::vector<Detection>> out(static_cast<size_t>(b));
  for (Index i = 0; i < b; ++i) {
    std::vector<Detection> dets;
    for (Index q = 0; q < k; ++q) {
      const T* row = lp + (i * k + q) * nc;
      Index best_c = 0;
      for (Index c = 1; c < nc; ++c)
        if (row[c] > row[best_c]) best_c = c;
      const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(row[best_c])));
      if (!(score > conf_thr)) continue;
      const T* bx = bp + (i * k + q) * 4;
      const Box pixel = cxcywh_to_xyxy(static_cast<double>(bx[0]) * img_w,
                                       static_cast<double>(bx[1]) * img_h,
                                       static_cast<double>(bx[2]) * img_w,
                                       static_cast<double>(bx[3]) * img_h);
      dets.push_back({pixel, static_cast<int>(best_c), score});
    }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    if (static_cast<int>(dets.size()) > max_det) dets.resize(static_cast<size_t>(max_det));
    out[static_cast<size_t>(i)] = std::move(dets);
  }
  return out;
}

}  // namespace xdet
