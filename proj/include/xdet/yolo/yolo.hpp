#pragma once

#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "xdet/backbones/backbones.hpp"
#include "xdet/data/types.hpp"

namespace xdet {

struct YoloConfig {
  Index num_classes = 80;
  Index reg_max = 16;
  Index sppf_pool = 5;
  double cls_weight = 0.5;
  double box_weight = 7.5;
  double dfl_weight = 1.5;
  double assign_alpha = 0.5;
  double assign_beta = 6.0;
  int assign_topk = 10;

  void validate() const {
    check<config_error>(num_classes >= 1, "yolo: num_classes must be >= 1");
    check<config_error>(reg_max >= 1, "yolo: reg_max must be >= 1");
    check<config_error>(sppf_pool >= 1 && sppf_pool % 2 == 1, "sppf: pool size must be odd");
    check<config_error>(assign_topk >= 1, "yolo: assignment top-k must be >= 1");
  }
};

template <typename T>
struct NeckOutputs {
  FeatureMap<T> n3, n4, n5;  // strides 8 / 16 / 32
};

// Dense per-scale predictions; box regression is a discretized distance
// distribution with reg_max+1 bins per side.
template <typename T>
struct RawYoloPredictions {
  std::array<Var<T>, 3> cls;  // (B, num_classes, H_s, W_s)
  std::array<Var<T>, 3> reg;  // (B, 4*(reg_max+1), H_s, W_s)
  std::array<Index, 3> strides = {8, 16, 32};
  Index num_classes = 0;
  Index reg_max = 0;
  Index batch = 0;

  Index anchors_per_image() const {
    Index n = 0;
    for (int s = 0; s < 3; ++s) n += cls[s].dim(2) * cls[s].dim(3);
    return n;
  }
};

// Spatial pyramid pooling (fast): input concatenated with three successive
// same-padded max-pool copies, then a pointwise projection.
template <typename T>
class Sppf : public Module<T> {
 public:
  Sppf() = default;
  Sppf(Index cin, Index cout, Index pool, Rng& rng) : pool_(pool) {
    check<config_error>(pool >= 1 && pool % 2 == 1, "sppf: pool size must be odd");
    proj_ = ConvNormAct<T>(4 * cin, cout, 1, 1, rng);
  }

  FeatureMap<T> forward(const FeatureMap<T>& in) {
    check<input_error>(in.stride == 32, "sppf expects the stride-32 feature");
    Var<T> x = in.data;
    Var<T> p1 = maxpool2d(x, pool_, 1, pool_ / 2);
    Var<T> p2 = maxpool2d(p1, pool_, 1, pool_ / 2);
    Var<T> p3 = maxpool2d(p2, pool_, 1, pool_ / 2);
    return {proj_.forward(concat<T>({x, p1, p2, p3}, 1)), in.stride};
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    proj_.collect(p + ".proj", out);
  }

 private:
  Index pool_ = 5;
  ConvNormAct<T> proj_;
};

// 1x1 channel adaptation followed by a 3x3 mixer; adapts whatever channel
// count the active skip configuration feeds in.
template <typename T>
class FuseBlock : public Module<T> {
 public:
  FuseBlock() = default;
  FuseBlock(Index cin, Index cout, Rng& rng)
      : reduce_(cin, cout, 1, 1, rng), mix_(cout, cout, 3, 1, rng) {}

  Var<T> forward(const Var<T>& x) { return mix_.forward(reduce_.forward(x)); }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    reduce_.collect(p + ".reduce", out);
    mix_.collect(p + ".mix", out);
  }

 private:
  ConvNormAct<T> reduce_, mix_;
};

// Path-aggregation pyramid: top-down upsample/concat/fuse, then bottom-up
// stride-2 conv/concat/fuse.
template <typename T>
class Pafpn : public Module<T> {
 public:
  Pafpn() = default;
  Pafpn(Index c3_in, Index c4_in, Index c5_in, Index c3, Index c4, Index c5, Rng& rng)
      : td4_(c5_in + c4_in, c4, rng),
        td3_(c4 + c3_in, c3, rng),
        down3_(c3, c3, 3, 2, rng),
        bu4_(c3 + c4, c4, rng),
        down4_(c4, c4, 3, 2, rng),
        bu5_(c4 + c5_in, c5, rng) {}

  NeckOutputs<T> forward(const FeatureMap<T>& p3, const FeatureMap<T>& p4,
                         const FeatureMap<T>& p5) {
    check<input_error>(p3.stride == 8 && p4.stride == 16 && p5.stride == 32,
                       "pafpn expects strides (8,16,32)");
    check<input_error>(p3.data.dim(0) == p4.data.dim(0) && p4.data.dim(0) == p5.data.dim(0),
                       "pafpn: batch mismatch");
    Var<T> t4 = td4_.forward(concat<T>({upsample_nearest2(p5.data), p4.data}, 1));
    Var<T> n3 = td3_.forward(concat<T>({upsample_nearest2(t4), p3.data}, 1));
    Var<T> n4 = bu4_.forward(concat<T>({down3_.forward(n3), t4}, 1));
    Var<T> n5 = bu5_.forward(concat<T>({down4_.forward(n4), p5.data}, 1));
    return {{n3, 8}, {n4, 16}, {n5, 32}};
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    td4_.collect(p + ".td4", out);
    td3_.collect(p + ".td3", out);
    down3_.collect(p + ".down3", out);
    bu4_.collect(p + ".bu4", out);
    down4_.collect(p + ".down4", out);
    bu5_.collect(p + ".bu5", out);
  }

 private:
  FuseBlock<T> td4_, td3_;
  ConvNormAct<T> down3_;
  FuseBlock<T> bu4_;
  ConvNormAct<T> down4_;
  FuseBlock<T> bu5_;
};

// Decoupled anchor-free head: separate classification and box-distribution
// branches per scale.
template <typename T>
class YoloHead : public Module<T> {
 public:
  YoloHead() = default;
  YoloHead(std::array<Index, 3> neck_channels, const YoloConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    for (int s = 0; s < 3; ++s) {
      const Index c = neck_channels[static_cast<size_t>(s)];
      cls_stem_[s] = ConvNormAct<T>(c, c, 3, 1, rng);
      cls_stem2_[s] = ConvNormAct<T>(c, c, 3, 1, rng);
      cls_out_[s] = Conv2d<T>(c, cfg.num_classes, 1, 1, 0, 1, rng);
      reg_stem_[s] = ConvNormAct<T>(c, c, 3, 1, rng);
      reg_stem2_[s] = ConvNormAct<T>(c, c, 3, 1, rng);
      reg_out_[s] = Conv2d<T>(c, 4 * (cfg.reg_max + 1), 1, 1, 0, 1, rng);
      // bias the classification output towards background
      cls_out_[s].bias().val().arr().setConstant(static_cast<T>(-std::log(99.0)));
    }
  }

  RawYoloPredictions<T> forward(const NeckOutputs<T>& neck) {
    RawYoloPredictions<T> raw;
    raw.num_classes = cfg_.num_classes;
    raw.reg_max = cfg_.reg_max;
    raw.batch = neck.n3.data.dim(0);
    const FeatureMap<T>* maps[3] = {&neck.n3, &neck.n4, &neck.n5};
    for (int s = 0; s < 3; ++s) {
      const Var<T>& x = maps[s]->data;
      raw.cls[s] = cls_out_[s].forward(cls_stem2_[s].forward(cls_stem_[s].forward(x)));
      raw.reg[s] = reg_out_[s].forward(reg_stem2_[s].forward(reg_stem_[s].forward(x)));
      raw.strides[s] = maps[s]->stride;
    }
    return raw;
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    for (int s = 0; s < 3; ++s) {
      const std::string sp = p + ".p" + std::to_string(s + 3);
      cls_stem_[s].collect(sp + ".cls1", out);
      cls_stem2_[s].collect(sp + ".cls2", out);
      cls_out_[s].collect(sp + ".cls_out", out);
      reg_stem_[s].collect(sp + ".reg1", out);
      reg_stem2_[s].collect(sp + ".reg2", out);
      reg_out_[s].collect(sp + ".reg_out", out);
    }
  }

 private:
  YoloConfig cfg_;
  std::array<ConvNormAct<T>, 3> cls_stem_, cls_stem2_, reg_stem_, reg_stem2_;
  std::array<Conv2d<T>, 3> cls_out_, reg_out_;
};

// ------------------------------------------------------------ dense decoding

struct AnchorPoint {
  double cx = 0, cy = 0;  // pixels
  Index stride = 0;
};

// Flattened anchor list: scales in order, row-major within each scale.
template <typename T>
inline std::vector<AnchorPoint> anchor_points(const RawYoloPredictions<T>& raw) {
  std::vector<AnchorPoint> pts;
  pts.reserve(static_cast<size_t>(raw.anchors_per_image()));
  for (int s = 0; s < 3; ++s) {
    const Index h = raw.cls[s].dim(2), w = raw.cls[s].dim(3);
    const double stride = static_cast<double>(raw.strides[s]);
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j)
        pts.push_back({(j + 0.5) * stride, (i + 0.5) * stride, raw.strides[s]});
  }
  return pts;
}

namespace detail {

// (B*A, C) row-major views of the per-scale NCHW heads, anchors flattened in
// the anchor_points order.
template <typename T>
Var<T> flatten_scales(const std::array<Var<T>, 3>& maps, Index batch, Index channels) {
  std::vector<Var<T>> per_scale;
  for (int s = 0; s < 3; ++s) {
    const Index h = maps[s].dim(2), w = maps[s].dim(3);
    per_scale.push_back(
        permute(reshape(maps[s], {batch, channels, h * w}), {0, 2, 1}));  // (B, HW, C)
  }
  Var<T> all = concat<T>(per_scale, 1);  // (B, A, C)
  return reshape(all, {batch * all.dim(1), channels});
}

template <typename T>
std::vector<double> softmax_expect_row(const T* logits, Index bins) {
  std::vector<double> probs(static_cast<size_t>(bins));
  double mx = logits[0];
  for (Index i = 1; i < bins; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double sum = 0;
  for (Index i = 0; i < bins; ++i) {
    probs[static_cast<size_t>(i)] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += probs[static_cast<size_t>(i)];
  }
  std::vector<double> r(1, 0.0);
  double e = 0;
  for (Index i = 0; i < bins; ++i) e += probs[static_cast<size_t>(i)] / sum * static_cast<double>(i);
  r[0] = e;
  return r;
}

}  // namespace detail

// Decoded box for one anchor from raw distribution logits (no autograd).
template <typename T>
inline Box decode_anchor_box(const T* reg_row, Index reg_max, const AnchorPoint& a) {
  const Index bins = reg_max + 1;
  double d[4];
  for (int side = 0; side < 4; ++side)
    d[side] = detail::softmax_expect_row(reg_row + side * bins, bins)[0];
  const double s = static_cast<double>(a.stride);
  return Box{a.cx - d[0] * s, a.cy - d[1] * s, a.cx + d[2] * s, a.cy + d[3] * s};
}

// --------------------------------------------------------------- assignment

struct Assignment {
  std::vector<int> anchor_to_gt;  // (B*A), -1 for negatives; gt index is per-image
  Index anchors_per_image = 0;
  Index batch = 0;
  int num_pos = 0;
};

// Task-aligned assignment: candidates are anchors whose center lies inside
// the box; each ground truth keeps its top-k by score^alpha * iou^beta;
// conflicts resolve to the gt with higher IoU.
template <typename T>
inline Assignment assign_targets(const RawYoloPredictions<T>& raw,
                                 const std::vector<std::vector<BoxAnnotation>>& gt,
                                 const YoloConfig& cfg) {
  check<input_error>(static_cast<Index>(gt.size()) == raw.batch,
                     "assign_targets: ground-truth batch mismatch");
  NoGradGuard ng;
  const auto anchors = anchor_points(raw);
  const Index a_per = static_cast<Index>(anchors.size());
  Assignment out;
  out.anchors_per_image = a_per;
  out.batch = raw.batch;
  out.anchor_to_gt.assign(static_cast<size_t>(raw.batch * a_per), -1);

  Var<T> cls_flat = detail::flatten_scales(raw.cls, raw.batch, raw.num_classes);
  Var<T> reg_flat = detail::flatten_scales(raw.reg, raw.batch, 4 * (raw.reg_max + 1));
  const T* cls_p = cls_flat.val().data();
  const T* reg_p = reg_flat.val().data();

  for (Index b = 0; b < raw.batch; ++b) {
    const auto& boxes = gt[static_cast<size_t>(b)];
    if (boxes.empty()) continue;
    // decode every anchor's box once per image
    std::vector<Box> decoded(static_cast<size_t>(a_per));
    for (Index a = 0; a < a_per; ++a)
      decoded[static_cast<size_t>(a)] = decode_anchor_box(
          reg_p + (b * a_per + a) * 4 * (raw.reg_max + 1), raw.reg_max,
          anchors[static_cast<size_t>(a)]);

    struct Claim {
      double iou;
      int gt;
    };
    std::vector<std::optional<Claim>> claims(static_cast<size_t>(a_per));
    for (size_t g = 0; g < boxes.size(); ++g) {
      const Box& gb = boxes[g].box;
      std::vector<std::pair<double, Index>> scored;  // (-align, anchor)
      for (Index a = 0; a < a_per; ++a) {
        const auto& ap = anchors[static_cast<size_t>(a)];
        if (ap.cx <= gb.x1 || ap.cx >= gb.x2 || ap.cy <= gb.y1 || ap.cy >= gb.y2) continue;
        const double iou = box_iou(decoded[static_cast<size_t>(a)], gb);
        const T logit = cls_p[(b * a_per + a) * raw.num_classes + boxes[g].class_id];
        const double score =
            logit >= T(0) ? 1.0 / (1.0 + std::exp(-static_cast<double>(logit)))
                          : std::exp(static_cast<double>(logit)) /
                                (1.0 + std::exp(static_cast<double>(logit)));
        const double align = std::pow(score, cfg.assign_alpha) * std::pow(iou, cfg.assign_beta);
        scored.emplace_back(-align, a);
      }
      std::sort(scored.begin(), scored.end());
      const size_t keep = std::min<size_t>(scored.size(), static_cast<size_t>(cfg.assign_topk));
      for (size_t i = 0; i < keep; ++i) {
        const Index a = scored[i].second;
        const double iou = box_iou(decoded[static_cast<size_t>(a)], gb);
        auto& cl = claims[static_cast<size_t>(a)];
        if (!cl || iou > cl->iou) cl = Claim{iou, static_cast<int>(g)};
      }
    }
    for (Index a = 0; a < a_per; ++a)
      if (claims[static_cast<size_t>(a)]) {
        out.anchor_to_gt[static_cast<size_t>(b * a_per + a)] = claims[static_cast<size_t>(a)]->gt;
        ++out.num_pos;
      }
  }
  return out;
}

// ------------------------------------------------------------------- losses

template <typename T>
struct LossBreakdown {
  Var<T> cls, box, reg, total;  // box: IoU-based term, reg: dfl (YOLO) / L1 (DETR)
};

// Differentiable complete-IoU between (N,4) xyxy box tensors.
template <typename T>
inline Var<T> ciou(const Var<T>& pred, const Var<T>& target) {
  const Index n = pred.dim(0);
  auto col = [&](const Var<T>& m, Index c) { return reshape(slice(m, 1, c, 1), {n}); };
  Var<T> px1 = col(pred, 0), py1 = col(pred, 1), px2 = col(pred, 2), py2 = col(pred, 3);
  Var<T> gx1 = col(target, 0), gy1 = col(target, 1), gx2 = col(target, 2), gy2 = col(target, 3);
  Var<T> zero = make_leaf(Tensor<T>::zeros({n}));
  const T eps = T(1e-9);

  Var<T> iw = maximum(sub(minimum(px2, gx2), maximum(px1, gx1)), zero);
  Var<T> ih = maximum(sub(minimum(py2, gy2), maximum(py1, gy1)), zero);
  Var<T> inter = mul(iw, ih);
  Var<T> pw = sub(px2, px1), ph = sub(py2, py1);
  Var<T> gw = sub(gx2, gx1), gh = sub(gy2, gy1);
  Var<T> uni = add_scalar(sub(add(mul(pw, ph), mul(gw, gh)), inter), eps);
  Var<T> iou_v = div(inter, uni);

  // center distance over enclosing-box diagonal
  Var<T> half = make_leaf(Tensor<T>::full({n}, T(0.5)));
  Var<T> pcx = mul(add(px1, px2), half), pcy = mul(add(py1, py2), half);
  Var<T> gcx = mul(add(gx1, gx2), half), gcy = mul(add(gy1, gy2), half);
  Var<T> rho2 = add(square(sub(pcx, gcx)), square(sub(pcy, gcy)));
  Var<T> cw = sub(maximum(px2, gx2), minimum(px1, gx1));
  Var<T> ch = sub(maximum(py2, gy2), minimum(py1, gy1));
  Var<T> c2 = add_scalar(add(square(cw), square(ch)), eps);

  // aspect-ratio consistency term
  const T four_over_pi2 = T(4.0 / (3.14159265358979323846 * 3.14159265358979323846));
  Var<T> v = scale(square(sub(vatan(div(gw, add_scalar(gh, eps))), vatan(div(pw, add_scalar(ph, eps))))),
                   four_over_pi2);
  Var<T> one = make_leaf(Tensor<T>::full({n}, T(1)));
  Var<T> alpha = div(v, add_scalar(add(sub(one, iou_v), v), eps));
  return sub(sub(iou_v, div(rho2, c2)), mul(alpha, v));
}

// Classification BCE over all anchors, CIoU over positives, distribution
// focal regression over positives.
template <typename T>
inline LossBreakdown<T> yolo_loss(const RawYoloPredictions<T>& raw, const Assignment& assign,
                                  const std::vector<std::vector<BoxAnnotation>>& gt,
                                  const YoloConfig& cfg) {
  check<input_error>(assign.batch == raw.batch &&
                         assign.anchors_per_image == raw.anchors_per_image(),
                     "yolo_loss: assignment does not match predictions");
  const Index a_per = assign.anchors_per_image;
  const Index bins = raw.reg_max + 1;
  const auto anchors = anchor_points(raw);

  Var<T> cls_flat = detail::flatten_scales(raw.cls, raw.batch, raw.num_classes);
  Var<T> reg_flat = detail::flatten_scales(raw.reg, raw.batch, 4 * bins);
  check<numeric_error>(cls_flat.val().all_finite() && reg_flat.val().all_finite(),
                       "yolo_loss: non-finite predictions");

  // one-hot targets at positive anchors
  Tensor<T> cls_targets(Shape{raw.batch * a_per, raw.num_classes});
  std::vector<Index> pos_rows;
  std::vector<const BoxAnnotation*> pos_gt;
  for (Index r = 0; r < raw.batch * a_per; ++r) {
    const int g = assign.anchor_to_gt[static_cast<size_t>(r)];
    if (g < 0) continue;
    const Index b = r / a_per;
    const BoxAnnotation& ann = gt[static_cast<size_t>(b)][static_cast<size_t>(g)];
    cls_targets.at({r, static_cast<Index>(ann.class_id)}) = T(1);
    pos_rows.push_back(r);
    pos_gt.push_back(&ann);
  }
  const Index npos = static_cast<Index>(pos_rows.size());
  const T norm = T(1) / static_cast<T>(std::max<Index>(1, npos));

  LossBreakdown<T> out;
  out.cls = scale(sum(bce_with_logits(cls_flat, make_leaf(cls_targets))), norm);

  if (npos == 0) {
    out.box = make_leaf(Tensor<T>::scalar(T(0)));
    out.reg = make_leaf(Tensor<T>::scalar(T(0)));
  } else {
    Var<T> reg_pos = index_select_rows(reg_flat, pos_rows);             // (npos, 4*bins)
    Var<T> dist_logits = reshape(reg_pos, {npos * 4, bins});
    Var<T> probs = softmax_rows(dist_logits);
    Tensor<T> bin_values(Shape{bins, 1});
    for (Index i = 0; i < bins; ++i) bin_values[i] = static_cast<T>(i);
    Var<T> dists = reshape(matmul(probs, make_leaf(bin_values)), {npos, 4});  // cell units

    Tensor<T> ax_t(Shape{npos}), ay_t(Shape{npos}), stride_t(Shape{npos});
    Tensor<T> gt_boxes(Shape{npos, 4});
    Tensor<T> dfl_weights(Shape{npos * 4, bins});
    for (Index i = 0; i < npos; ++i) {
      const auto& ap = anchors[static_cast<size_t>(pos_rows[static_cast<size_t>(i)] % a_per)];
      ax_t[i] = static_cast<T>(ap.cx);
      ay_t[i] = static_cast<T>(ap.cy);
      stride_t[i] = static_cast<T>(ap.stride);
      const Box& gb = pos_gt[static_cast<size_t>(i)]->box;
      gt_boxes.at({i, 0}) = static_cast<T>(gb.x1);
      gt_boxes.at({i, 1}) = static_cast<T>(gb.y1);
      gt_boxes.at({i, 2}) = static_cast<T>(gb.x2);
      gt_boxes.at({i, 3}) = static_cast<T>(gb.y2);
      // distribution focal targets: distances in cell units
      const double s = ap.stride;
      const double side_d[4] = {(ap.cx - gb.x1) / s, (ap.cy - gb.y1) / s, (gb.x2 - ap.cx) / s,
                                (gb.y2 - ap.cy) / s};
      for (int sd = 0; sd < 4; ++sd) {
        double t = std::clamp(side_d[sd], 0.0, static_cast<double>(raw.reg_max) - 0.01);
        const Index tl = static_cast<Index>(std::floor(t));
        const double wr = t - static_cast<double>(tl);
        dfl_weights.at({i * 4 + sd, tl}) = static_cast<T>(1.0 - wr);
        dfl_weights.at({i * 4 + sd, tl + 1}) = static_cast<T>(wr);
      }
    }
    Var<T> ax = make_leaf(ax_t), ay = make_leaf(ay_t), stride_v = make_leaf(stride_t);
    auto colv = [&](Index c) { return reshape(slice(dists, 1, c, 1), {npos}); };
    Var<T> x1 = sub(ax, mul(colv(0), stride_v));
    Var<T> y1 = sub(ay, mul(colv(1), stride_v));
    Var<T> x2 = add(ax, mul(colv(2), stride_v));
    Var<T> y2 = add(ay, mul(colv(3), stride_v));
    Var<T> pred_boxes = concat<T>({reshape(x1, {npos, 1}), reshape(y1, {npos, 1}),
                                   reshape(x2, {npos, 1}), reshape(y2, {npos, 1})},
                                  1);
    Var<T> iou_term = ciou(pred_boxes, make_leaf(gt_boxes));
    Var<T> ones = make_leaf(Tensor<T>::full({npos}, T(1)));
    out.box = scale(sum(sub(ones, iou_term)), norm);

    Var<T> log_probs = log_softmax_rows(dist_logits);
    out.reg = scale(neg(sum(mul(log_probs, make_leaf(dfl_weights)))),
                    T(1) / static_cast<T>(npos * 4));
  }

  out.total = add(add(scale(out.cls, static_cast<T>(cfg.cls_weight)),
                      scale(out.box, static_cast<T>(cfg.box_weight))),
                  scale(out.reg, static_cast<T>(cfg.dfl_weight)));
  check<numeric_error>(out.total.val().all_finite(), "yolo_loss: non-finite loss");
  return out;
}

// --------------------------------------------------------------- decode/NMS

// Greedy class-wise suppression; ties in confidence break by lower index.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thr, int max_det) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  std::vector<Detection> kept;
  std::vector<char> suppressed(dets.size(), 0);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(dets[i]);
    if (static_cast<int>(kept.size()) >= max_det) break;
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const size_t j = order[oj];
      if (suppressed[j] || dets[j].class_id != dets[i].class_id) continue;
      if (box_iou(dets[i].box, dets[j].box) > iou_thr) suppressed[j] = 1;
    }
  }
  return kept;
}

// Per-image detections: distribution decode, confidence gate (strict >),
// class-wise NMS, confidence-sorted cap.
template <typename T>
inline std::vector<std::vector<Detection>> decode_and_nms(const RawYoloPredictions<T>& raw,
                                                          double conf_thr, double iou_thr,
                                                          int max_det) {
  check<input_error>(conf_thr >= 0 && conf_thr <= 1 && iou_thr >= 0 && iou_thr <= 1,
                     "decode_and_nms: thresholds must lie in [0,1]");
  check<input_error>(max_det >= 0, "decode_and_nms: max_det must be >= 0");
  NoGradGuard ng;
  const auto anchors = anchor_points(raw);
  const Index a_per = static_cast<Index>(anchors.size());
  Var<T> cls_flat = detail::flatten_scales(raw.cls, raw.batch, raw.num_classes);
  Var<T> reg_flat = detail::flatten_scales(raw.reg, raw.batch, 4 * (raw.reg_max + 1));
  const T* cls_p = cls_flat.val().data();
  const T* reg_p = reg_flat.val().data();

  std::vector<std::vector<Detection>> out(static_cast<size_t>(raw.batch));
  for (Index b = 0; b < raw.batch; ++b) {
    std::vector<Detection> cand;
    for (Index a = 0; a < a_per; ++a) {
      const T* logits = cls_p + (b * a_per + a) * raw.num_classes;
      Box decoded;
      bool have_box = false;
      for (Index c = 0; c < raw.num_classes; ++c) {
        const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[c])));
        if (!(score > conf_thr)) continue;
        if (!have_box) {
          decoded = decode_anchor_box(reg_p + (b * a_per + a) * 4 * (raw.reg_max + 1),
                                      raw.reg_max, anchors[static_cast<size_t>(a)]);
          have_box = true;
        }
        cand.push_back({decoded, static_cast<int>(c), score});
      }
    }
    out[static_cast<size_t>(b)] = nms(std::move(cand), iou_thr, max_det);
  }
  return out;
}

// Full dense pipeline: SPPF on the deepest feature, PAFPN over the two taps
// plus the pooled top, decoupled head.
template <typename T>
class YoloNeckHead : public Module<T> {
 public:
  YoloNeckHead() = default;
  YoloNeckHead(Index tap8_channels, Index tap16_channels, Index top_channels,
               std::array<Index, 3> neck_channels, const YoloConfig& cfg, Rng& rng)
      : sppf_(top_channels, neck_channels[2], cfg.sppf_pool, rng),
        pafpn_(tap8_channels, tap16_channels, neck_channels[2], neck_channels[0],
               neck_channels[1], neck_channels[2], rng),
        head_(neck_channels, cfg, rng) {}

  RawYoloPredictions<T> forward(const FeatureMap<T>& tap8, const FeatureMap<T>& tap16,
                                const FeatureMap<T>& top) {
    FeatureMap<T> pooled = sppf_.forward(top);
    return head_.forward(pafpn_.forward(tap8, tap16, pooled));
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    sppf_.collect(p + ".sppf", out);
    pafpn_.collect(p + ".pafpn", out);
    head_.collect(p + ".head", out);
  }

 private:
  Sppf<T> sppf_;
  Pafpn<T> pafpn_;
  YoloHead<T> head_;
};

}  // namespace xdet
