#include "xdet/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace xdet {

using json = nlohmann::json;

MatchResult match_detections(const std::vector<PredRecord>& preds,
                             const std::vector<BoxAnnotation>& gts, int class_id,
                             double iou_thr) {
  std::vector<size_t> order;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i].det.class_id == class_id) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return preds[a].det.confidence > preds[b].det.confidence;
  });

  std::vector<size_t> gt_idx;
  for (size_t g = 0; g < gts.size(); ++g)
    if (gts[g].class_id == class_id) gt_idx.push_back(g);
  std::vector<char> used(gt_idx.size(), 0);

  MatchResult res;
  res.n_gt = gt_idx.size();
  res.tp.reserve(order.size());
  res.confidences.reserve(order.size());
  for (size_t oi : order) {
    const PredRecord& p = preds[oi];
    double best = -1;
    size_t best_g = gt_idx.size();
    for (size_t k = 0; k < gt_idx.size(); ++k) {
      if (used[k]) continue;
      const BoxAnnotation& g = gts[gt_idx[k]];
      if (g.image_id != p.image_id) continue;
      const double ov = iou(p.det.box, g.box);
      if (ov >= iou_thr && ov > best) {
        best = ov;
        best_g = k;
      }
    }
    if (best_g < gt_idx.size()) {
      used[best_g] = 1;
      res.tp.push_back(1);
    } else {
      res.tp.push_back(0);
    }
    res.confidences.push_back(p.det.confidence);
  }
  return res;
}

double average_precision(const std::vector<int>& tp, size_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  size_t tps = 0;
  for (size_t i = 0; i < tp.size(); ++i) {
    tps += static_cast<size_t>(tp[i]);
    precision.push_back(static_cast<double>(tps) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tps) / static_cast<double>(n_gt));
  }
  double ap = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = static_cast<double>(r) / 100.0;
    double best = 0;
    for (size_t i = 0; i < precision.size(); ++i)
      if (recall[i] >= level - 1e-12) best = std::max(best, precision[i]);
    ap += best;
  }
  return ap / 101.0;
}

const char* size_bucket(double area) {
  if (area < 32.0 * 32.0) return "small";
  if (area < 96.0 * 96.0) return "medium";
  return "large";
}

namespace {

// mean AP over the 10 COCO thresholds for one class
std::pair<double, double> class_ap(const std::vector<PredRecord>& preds,
                                   const std::vector<BoxAnnotation>& gts, int class_id) {
  double ap50 = 0, sum = 0;
  for (int t = 0; t < 10; ++t) {
    const double thr = 0.5 + 0.05 * t;
    const MatchResult m = match_detections(preds, gts, class_id, thr);
    const double ap = average_precision(m.tp, m.n_gt);
    if (t == 0) ap50 = ap;
    sum += ap;
  }
  return {ap50, sum / 10.0};
}

}  // namespace

MetricsReport evaluate_detections(const std::vector<PredRecord>& preds,
                                  const std::vector<BoxAnnotation>& gts,
                                  const ClassTaxonomy& taxonomy) {
  MetricsReport rep;
  double sum50 = 0, sum5095 = 0;
  int counted = 0;
  for (int c = 0; c < taxonomy.num_classes(); ++c) {
    PerClassMetrics pc;
    for (const auto& g : gts)
      if (g.class_id == c) ++pc.n_gt;
    for (const auto& p : preds)
      if (p.det.class_id == c) ++pc.n_pred;
    if (pc.n_gt > 0) {
      const auto [a50, a5095] = class_ap(preds, gts, c);
      pc.ap50 = a50;
      pc.ap50_95 = a5095;
      sum50 += a50;
      sum5095 += a5095;
      ++counted;
    }
    rep.per_class[taxonomy.codes[static_cast<size_t>(c)]] = pc;
  }
  if (counted > 0) {
    rep.map50 = sum50 / counted;
    rep.map50_95 = sum5095 / counted;
  }

  // size-bucketed mAP50:95: both sides filtered by their own box area
  for (const char* bucket : {"small", "medium", "large"}) {
    std::vector<BoxAnnotation> bgts;
    for (const auto& g : gts)
      if (std::string(size_bucket(g.box.area())) == bucket) bgts.push_back(g);
    rep.size_gt_counts[bucket] = bgts.size();
    if (bgts.empty()) {
      rep.per_size[bucket] = 0.0;
      continue;
    }
    std::vector<PredRecord> bpreds;
    for (const auto& p : preds)
      if (std::string(size_bucket(p.det.box.area())) == bucket) bpreds.push_back(p);
    double sum = 0;
    int n = 0;
    for (int c = 0; c < taxonomy.num_classes(); ++c) {
      bool has_gt = false;
      for (const auto& g : bgts)
        if (g.class_id == c) has_gt = true;
      if (!has_gt) continue;
      sum += class_ap(bpreds, bgts, c).second;
      ++n;
    }
    rep.per_size[bucket] = n > 0 ? sum / n : 0.0;
  }
  return rep;
}

SessionMatrix session_matrix(const std::map<SessionSpec, MetricsReport>& reports) {
  std::set<int> domain_set;
  for (const auto& [s, _] : reports) {
    domain_set.insert(s.train_domain);
    domain_set.insert(s.test_domain);
  }
  check<input_error>(domain_set.size() >= 2, "session_matrix: need at least two domains");
  std::vector<int> domains(domain_set.begin(), domain_set.end());

  SessionMatrix m;
  for (int i : domains)
    for (int j : domains) {
      if (i == j) continue;
      const SessionSpec s{i, j};
      auto it = reports.find(s);
      check<input_error>(it != reports.end(), "session_matrix: missing session " + s.label());
      m.order.push_back(s);
      m.reports.push_back(it->second);
    }
  check<input_error>(m.order.size() == reports.size(),
                     "session_matrix: extra sessions outside the domain grid");
  for (const auto& r : m.reports) {
    m.avg_map50 += r.map50;
    m.avg_map50_95 += r.map50_95;
  }
  m.avg_map50 /= static_cast<double>(m.reports.size());
  m.avg_map50_95 /= static_cast<double>(m.reports.size());
  return m;
}

json MetricsReport::to_json() const {
  json j;
  j["map50"] = map50;
  j["map50_95"] = map50_95;
  j["per_class"] = json::object();
  for (const auto& [code, pc] : per_class)
    j["per_class"][code] = {{"ap50", pc.ap50},
                            {"ap50_95", pc.ap50_95},
                            {"n_gt", pc.n_gt},
                            {"n_pred", pc.n_pred}};
  j["per_size"] = per_size;
  j["size_gt_counts"] = size_gt_counts;
  return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  r.map50 = j.at("map50").get<double>();
  r.map50_95 = j.at("map50_95").get<double>();
  if (j.contains("per_class"))
    for (auto it = j["per_class"].begin(); it != j["per_class"].end(); ++it) {
      PerClassMetrics pc;
      pc.ap50 = it.value().value("ap50", 0.0);
      pc.ap50_95 = it.value().value("ap50_95", 0.0);
      pc.n_gt = it.value().value("n_gt", size_t{0});
      pc.n_pred = it.value().value("n_pred", size_t{0});
      r.per_class[it.key()] = pc;
    }
  if (j.contains("per_size"))
    r.per_size = j["per_size"].get<std::map<std::string, double>>();
  if (j.contains("size_gt_counts"))
    r.size_gt_counts = j["size_gt_counts"].get<std::map<std::string, size_t>>();
  return r;
}

}  // namespace xdet
