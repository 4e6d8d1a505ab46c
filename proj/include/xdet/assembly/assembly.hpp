#pragma once

#include <json.hpp>

#include <optional>
#include <sstream>

#include "xdet/core/serialize.hpp"
#include "xdet/rtdetr/rtdetr.hpp"
#include "xdet/yolo/yolo.hpp"

namespace xdet {

using json = nlohmann::json;

enum class HeadKind { YOLO, RTDETR };

inline const char* to_string(HeadKind h) { return h == HeadKind::YOLO ? "YOLO" : "RTDETR"; }

inline HeadKind head_from_string(const std::string& s) {
  if (s == "YOLO") return HeadKind::YOLO;
  if (s == "RTDETR") return HeadKind::RTDETR;
  throw config_error("unknown head kind: " + s);
}

inline BackboneKind backbone_from_string(const std::string& s) {
  if (s == "NEXTVIT_S") return BackboneKind::NEXTVIT_S;
  if (s == "CSP_DARKNET") return BackboneKind::CSP_DARKNET;
  if (s == "HGNETV2") return BackboneKind::HGNETV2;
  throw config_error("unknown backbone kind: " + s);
}

// C(x, y): x feeds the stride-8 neck input, y the stride-16 one.
struct SkipConfig {
  int x = 0;
  int y = 0;
  bool operator==(const SkipConfig&) const = default;
};

inline SkipConfig default_skip(BackboneKind backbone, HeadKind head) {
  switch (backbone) {
    case BackboneKind::NEXTVIT_S:
      return head == HeadKind::YOLO ? SkipConfig{7, 17} : SkipConfig{9, 19};
    case BackboneKind::CSP_DARKNET:
      return {4, 6};
    case BackboneKind::HGNETV2:
      return {4, 5};  // stage-2 / stage-3 outputs
  }
  return {0, 0};
}

struct DetectorConfig {
  HeadKind head = HeadKind::YOLO;
  BackboneKind backbone = BackboneKind::NEXTVIT_S;
  SkipConfig skip = {7, 17};
  Index num_classes = 80;
  Index image_size = 640;
  double width_scale = 1.0;
  uint64_t init_seed = 0;
  YoloConfig yolo;
  RtDetrConfig rtdetr;
  std::optional<BackboneSpec> backbone_override;

  BackboneSpec backbone_spec() const {
    BackboneSpec s = backbone_override ? *backbone_override : BackboneSpec::make(backbone);
    s.kind = backbone;
    s.width_scale = width_scale;
    return s;
  }

  void validate() const {
    check<config_error>(num_classes >= 1, "detector: num_classes must be >= 1");
    check<config_error>(image_size > 0 && image_size % 32 == 0,
                        "detector: image_size must be divisible by 32");
    backbone_spec().validate();
  }
};

// ------------------------------------------------------------ skip validation

struct TapReport {
  int index = 0;
  std::string stage, kind;
  Index stride = 0, channels = 0;
  Index expected_stride = 0;
  bool ok = false;
};

struct ValidationReport {
  bool passed = false;
  std::vector<TapReport> taps;
  std::vector<std::string> errors;

  std::string summary() const {
    std::ostringstream os;
    for (const auto& t : taps)
      os << "  tap " << t.index << ": stage=" << t.stage << " kind=" << t.kind
         << " stride=" << t.stride << " channels=" << t.channels << " expected_stride="
         << t.expected_stride << (t.ok ? "  [ok]" : "  [FAIL]") << "\n";
    for (const auto& e : errors) os << "  error: " << e << "\n";
    os << (passed ? "PASS" : "FAIL") << "\n";
    return os.str();
  }
};

// Static shape propagation over the layer registry; failures are reported,
// never thrown.
inline ValidationReport validate_skip_config(const BackboneSpec& spec, const SkipConfig& skip) {
  ValidationReport rep;
  std::vector<LayerTap> reg;
  try {
    reg = layer_registry(spec);
  } catch (const std::exception& e) {
    rep.errors.emplace_back(e.what());
    return rep;
  }
  if (skip.x >= skip.y) rep.errors.push_back("skip ordering violated: need x < y");
  const Index expected[2] = {8, 16};
  const int idx[2] = {skip.x, skip.y};
  bool taps_ok = true;
  for (int i = 0; i < 2; ++i) {
    TapReport t;
    t.index = idx[i];
    t.expected_stride = expected[i];
    if (idx[i] < 1 || idx[i] > static_cast<int>(reg.size())) {
      t.ok = false;
      rep.errors.push_back("tap " + std::to_string(idx[i]) + " is not a registry index");
    } else {
      const LayerTap& lt = reg[static_cast<size_t>(idx[i] - 1)];
      t.stage = to_string(lt.stage);
      t.kind = to_string(lt.block_kind);
      t.stride = lt.stride;
      t.channels = lt.channels;
      t.ok = lt.stride == expected[i];
      if (!t.ok)
        rep.errors.push_back("tap " + std::to_string(idx[i]) + " has stride " +
                             std::to_string(lt.stride) + ", the neck needs " +
                             std::to_string(expected[i]));
    }
    taps_ok = taps_ok && t.ok;
    rep.taps.push_back(std::move(t));
  }
  rep.passed = taps_ok && skip.x < skip.y;
  return rep;
}

// ------------------------------------------------------------------ detector

struct EvalConfig {
  double conf_thr = 0.001;
  double nms_iou = 0.7;  // dense head only
  int max_det = 300;
};

// D(head, backbone) with the unified train/eval interface.
template <typename T>
class Detector : public Module<T> {
 public:
  Detector() = default;

  explicit Detector(const DetectorConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const auto rep = validate_skip_config(cfg.backbone_spec(), cfg.skip);
    check<config_error>(rep.passed, "invalid skip configuration:\n" + rep.summary());

    Rng rng(cfg.init_seed);
    backbone_ = Backbone<T>(cfg.backbone_spec(), rng);
    const auto& reg = backbone_.registry();
    const Index cx = reg[static_cast<size_t>(cfg.skip.x - 1)].channels;
    const Index cy = reg[static_cast<size_t>(cfg.skip.y - 1)].channels;
    const Index ctop = reg.back().channels;
    const BackboneSpec bs = cfg.backbone_spec();

    if (cfg.head == HeadKind::YOLO) {
      YoloConfig yc = cfg.yolo;
      yc.num_classes = cfg.num_classes;
      yolo_cfg_ = yc;
      yolo_.emplace(cx, cy, ctop, std::array<Index, 3>{bs.scaled(1), bs.scaled(2), bs.scaled(3)},
                    yc, rng);
    } else {
      RtDetrConfig rc = cfg.rtdetr;
      rc.num_classes = cfg.num_classes;
      rtdetr_cfg_ = rc;
      rtdetr_.emplace(cx, cy, ctop, rc, rng);
    }
  }

  const DetectorConfig& config() const { return cfg_; }
  Backbone<T>& backbone() { return backbone_; }
  const YoloConfig& yolo_config() const { return yolo_cfg_; }
  const RtDetrConfig& rtdetr_config() const { return rtdetr_cfg_; }
  bool is_yolo() const { return yolo_.has_value(); }
  RtDetrHead<T>& rtdetr_head() { return *rtdetr_; }

  // Dense-head raw predictions (YOLO only).
  RawYoloPredictions<T> forward_yolo(const Var<T>& images) {
    check<config_error>(yolo_.has_value(), "not a YOLO detector");
    auto feats = backbone_.forward(images, {cfg_.skip.x, cfg_.skip.y});
    return yolo_->forward(feats.taps.at(cfg_.skip.x), feats.taps.at(cfg_.skip.y),
                          feats.final_output);
  }

  // Query-head raw predictions (RTDETR only).
  DecoderOutput<T> forward_rtdetr(const Var<T>& images) {
    check<config_error>(rtdetr_.has_value(), "not an RTDETR detector");
    auto feats = backbone_.forward(images, {cfg_.skip.x, cfg_.skip.y});
    return rtdetr_->forward(feats.taps.at(cfg_.skip.x), feats.taps.at(cfg_.skip.y),
                            feats.final_output);
  }

  LossBreakdown<T> compute_loss(const Var<T>& images,
                                const std::vector<std::vector<BoxAnnotation>>& gts) {
    if (yolo_) {
      auto raw = forward_yolo(images);
      auto assign = assign_targets(raw, gts, yolo_cfg_);
      return yolo_loss(raw, assign, gts, yolo_cfg_);
    }
    auto out = forward_rtdetr(images);
    const double img_w = static_cast<double>(images.dim(3));
    const double img_h = static_cast<double>(images.dim(2));
    std::vector<std::vector<NormAnnotation>> norm;
    norm.reserve(gts.size());
    for (const auto& g : gts) norm.push_back(to_normalized(g, img_w, img_h));
    std::vector<std::vector<std::vector<int>>> matchings;
    {
      NoGradGuard ng;
      const Index b = out.class_logits[0].dim(0);
      const Index k = out.class_logits[0].dim(1);
      MatchWeights mw{rtdetr_cfg_.match_cls, rtdetr_cfg_.match_l1, rtdetr_cfg_.match_giou};
      for (size_t l = 0; l < out.class_logits.size(); ++l) {
        std::vector<std::vector<int>> layer_match;
        for (Index i = 0; i < b; ++i) {
          Tensor<T> logits(Shape{k, cfg_.num_classes});
          Tensor<T> boxes(Shape{k, 4});
          std::copy(out.class_logits[l].val().data() + i * k * cfg_.num_classes,
                    out.class_logits[l].val().data() + (i + 1) * k * cfg_.num_classes,
                    logits.data());
          std::copy(out.boxes[l].val().data() + i * k * 4,
                    out.boxes[l].val().data() + (i + 1) * k * 4, boxes.data());
          layer_match.push_back(hungarian_match(logits, boxes, norm[static_cast<size_t>(i)], mw));
        }
        matchings.push_back(std::move(layer_match));
      }
    }
    return detr_loss(out, norm, matchings, rtdetr_cfg_);
  }

  std::vector<std::vector<Detection>> predict(const Var<T>& images, const EvalConfig& ec) {
    NoGradGuard ng;
    if (yolo_) {
      auto raw = forward_yolo(images);
      return decode_and_nms(raw, ec.conf_thr, ec.nms_iou, ec.max_det);
    }
    auto out = forward_rtdetr(images);
    return detr_postprocess(out.class_logits.back(), out.boxes.back(), ec.conf_thr, ec.max_det,
                            static_cast<double>(images.dim(3)),
                            static_cast<double>(images.dim(2)));
  }

  void collect(const std::string& p, std::vector<NamedParam<T>>& out) override {
    backbone_.collect(p + ".backbone", out);
    if (yolo_) yolo_->collect(p + ".yolo", out);
    if (rtdetr_) rtdetr_->collect(p + ".rtdetr", out);
  }

 private:
  DetectorConfig cfg_;
  Backbone<T> backbone_;
  YoloConfig yolo_cfg_;
  RtDetrConfig rtdetr_cfg_;
  std::optional<YoloNeckHead<T>> yolo_;
  std::optional<RtDetrHead<T>> rtdetr_;
};

template <typename T>
Detector<T> build_detector(const DetectorConfig& cfg) {
  return Detector<T>(cfg);
}

// Table-layout reference combinations with their selected skip configs.
inline std::vector<DetectorConfig> enumerate_reference_configs(Index num_classes) {
  std::vector<DetectorConfig> out;
  const std::pair<HeadKind, BackboneKind> combos[4] = {
      {HeadKind::YOLO, BackboneKind::CSP_DARKNET},
      {HeadKind::YOLO, BackboneKind::NEXTVIT_S},
      {HeadKind::RTDETR, BackboneKind::HGNETV2},
      {HeadKind::RTDETR, BackboneKind::NEXTVIT_S},
  };
  for (const auto& [head, backbone] : combos) {
    DetectorConfig cfg;
    cfg.head = head;
    cfg.backbone = backbone;
    cfg.skip = default_skip(backbone, head);
    cfg.num_classes = num_classes;
    out.push_back(cfg);
  }
  return out;
}

// -------------------------------------------------------------------- config

inline json to_json(const SkipConfig& s) { return json::array({s.x, s.y}); }

inline json to_json(const DetectorConfig& c) {
  json j;
  j["head"] = to_string(c.head);
  j["backbone"] = to_string(c.backbone);
  j["skip"] = to_json(c.skip);
  j["num_classes"] = c.num_classes;
  j["image_size"] = c.image_size;
  j["width_scale"] = c.width_scale;
  j["init_seed"] = c.init_seed;
  j["yolo"] = {{"reg_max", c.yolo.reg_max},
               {"sppf_pool", c.yolo.sppf_pool},
               {"cls_weight", c.yolo.cls_weight},
               {"box_weight", c.yolo.box_weight},
               {"dfl_weight", c.yolo.dfl_weight},
               {"assign_topk", c.yolo.assign_topk},
               {"assign_alpha", c.yolo.assign_alpha},
               {"assign_beta", c.yolo.assign_beta}};
  j["rtdetr"] = {{"hidden_dim", c.rtdetr.hidden_dim},
                 {"num_queries", c.rtdetr.num_queries},
                 {"decoder_layers", c.rtdetr.decoder_layers},
                 {"heads", c.rtdetr.heads},
                 {"mlp_ratio", c.rtdetr.mlp_ratio},
                 {"match_cls", c.rtdetr.match_cls},
                 {"match_l1", c.rtdetr.match_l1},
                 {"match_giou", c.rtdetr.match_giou},
                 {"loss_cls", c.rtdetr.loss_cls},
                 {"loss_l1", c.rtdetr.loss_l1},
                 {"loss_giou", c.rtdetr.loss_giou},
                 {"focal_alpha", c.rtdetr.focal_alpha},
                 {"aux_losses", c.rtdetr.aux_losses}};
  if (c.backbone_override) {
    const BackboneSpec& s = *c.backbone_override;
    j["backbone_spec"] = {{"stage_channels", s.stage_channels},
                          {"stage_depths", s.stage_depths},
                          {"attn_heads", s.attn_heads},
                          {"mlp_ratio", s.mlp_ratio}};
  }
  return j;
}

inline DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig c;
  try {
    c.head = head_from_string(j.at("head").get<std::string>());
    c.backbone = backbone_from_string(j.at("backbone").get<std::string>());
    if (j.contains("skip")) {
      c.skip.x = j["skip"].at(0).get<int>();
      c.skip.y = j["skip"].at(1).get<int>();
    } else {
      c.skip = default_skip(c.backbone, c.head);
    }
    c.num_classes = j.at("num_classes").get<Index>();
    c.image_size = j.value("image_size", Index{640});
    c.width_scale = j.value("width_scale", 1.0);
    c.init_seed = j.value("init_seed", uint64_t{0});
    if (j.contains("yolo")) {
      const json& y = j["yolo"];
      c.yolo.reg_max = y.value("reg_max", c.yolo.reg_max);
      c.yolo.sppf_pool = y.value("sppf_pool", c.yolo.sppf_pool);
      c.yolo.cls_weight = y.value("cls_weight", c.yolo.cls_weight);
      c.yolo.box_weight = y.value("box_weight", c.yolo.box_weight);
      c.yolo.dfl_weight = y.value("dfl_weight", c.yolo.dfl_weight);
      c.yolo.assign_topk = y.value("assign_topk", c.yolo.assign_topk);
      c.yolo.assign_alpha = y.value("assign_alpha", c.yolo.assign_alpha);
      c.yolo.assign_beta = y.value("assign_beta", c.yolo.assign_beta);
    }
    if (j.contains("rtdetr")) {
      const json& r = j["rtdetr"];
      c.rtdetr.hidden_dim = r.value("hidden_dim", c.rtdetr.hidden_dim);
      c.rtdetr.num_queries = r.value("num_queries", c.rtdetr.num_queries);
      c.rtdetr.decoder_layers = r.value("decoder_layers", c.rtdetr.decoder_layers);
      c.rtdetr.heads = r.value("heads", c.rtdetr.heads);
      c.rtdetr.mlp_ratio = r.value("mlp_ratio", c.rtdetr.mlp_ratio);
      c.rtdetr.match_cls = r.value("match_cls", c.rtdetr.match_cls);
      c.rtdetr.match_l1 = r.value("match_l1", c.rtdetr.match_l1);
      c.rtdetr.match_giou = r.value("match_giou", c.rtdetr.match_giou);
      c.rtdetr.loss_cls = r.value("loss_cls", c.rtdetr.loss_cls);
      c.rtdetr.loss_l1 = r.value("loss_l1", c.rtdetr.loss_l1);
      c.rtdetr.loss_giou = r.value("loss_giou", c.rtdetr.loss_giou);
      c.rtdetr.focal_alpha = r.value("focal_alpha", c.rtdetr.focal_alpha);
      c.rtdetr.aux_losses = r.value("aux_losses", c.rtdetr.aux_losses);
    }
    if (j.contains("backbone_spec")) {
      BackboneSpec s = BackboneSpec::make(c.backbone);
      const json& b = j["backbone_spec"];
      if (b.contains("stage_channels"))
        s.stage_channels = b["stage_channels"].get<std::vector<Index>>();
      if (b.contains("stage_depths")) s.stage_depths = b["stage_depths"].get<std::vector<Index>>();
      s.attn_heads = b.value("attn_heads", s.attn_heads);
      s.mlp_ratio = b.value("mlp_ratio", s.mlp_ratio);
      c.backbone_override = s;
    }
  } catch (const json::exception& e) {
    throw config_error(std::string("detector config: ") + e.what());
  }
  return c;
}

// ----------------------------------------------------------- checkpointing

template <typename T>
inline void save_checkpoint(Detector<T>& det, const std::string& path) {
  TensorArchive a;
  a.meta = to_json(det.config()).dump(2);
  for (auto& p : det.named_parameters("detector")) a.put(p.name, p.param->val());
  a.save(path);
}

// Restores parameters into an equivalently configured detector; a different
// architecture is a hard error.
template <typename T>
inline void load_checkpoint(Detector<T>& det, const TensorArchive& a) {
  json meta = json::parse(a.meta, nullptr, false);
  check<config_error>(!meta.is_discarded(), "checkpoint: bad metadata");
  const DetectorConfig saved = detector_config_from_json(meta);
  const DetectorConfig& cur = det.config();
  check<config_error>(saved.head == cur.head && saved.backbone == cur.backbone &&
                          saved.num_classes == cur.num_classes &&
                          saved.width_scale == cur.width_scale && saved.skip == cur.skip,
                      "checkpoint/architecture mismatch");
  for (auto& p : det.named_parameters("detector")) {
    check<config_error>(a.has(p.name), "checkpoint missing tensor " + p.name);
    Tensor<T> t = a.template get<T>(p.name);
    check<config_error>(t.shape() == p.param->shape(),
                        "checkpoint shape mismatch for " + p.name);
    p.param->val() = t;
  }
}

template <typename T>
inline void load_checkpoint(Detector<T>& det, const std::string& path) {
  load_checkpoint(det, TensorArchive::load(path));
}

// Optional pretrained-import hook: copies the intersection of backbone
// tensors by name, reports (loaded, missing) counts.
template <typename T>
inline std::pair<int, int> import_backbone_weights(Detector<T>& det, const TensorArchive& a) {
  int loaded = 0, missing = 0;
  for (auto& p : det.named_parameters("detector")) {
    if (p.name.rfind("detector.backbone.", 0) != 0) continue;
    if (a.has(p.name)) {
      Tensor<T> t = a.template get<T>(p.name);
      if (t.shape() == p.param->shape()) {
        p.param->val() = t;
        ++loaded;
        continue;
      }
    }
    ++missing;
  }
  return {loaded, missing};
}

}  // namespace xdet
