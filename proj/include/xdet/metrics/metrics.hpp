#pragma once

#include <json.hpp>

#include <map>

#include "xdet/data/types.hpp"

namespace xdet {

// Spatial overlap: intersection area over union area.
inline double iou(const Box& a, const Box& b) { return box_iou(a, b); }

struct PredRecord {
  int64_t image_id = 0;
  Detection det;
};

// Confidence-ordered TP/FP flags for one class at one IoU threshold.
struct MatchResult {
  std::vector<int> tp;              // per prediction, sorted by confidence desc
  std::vector<double> confidences;  // same order
  size_t n_gt = 0;
};

// Greedy matching: each prediction takes the unmatched same-class gt (same
// image) with the highest IoU at or above the threshold.
MatchResult match_detections(const std::vector<PredRecord>& preds,
                             const std::vector<BoxAnnotation>& gts, int class_id, double iou_thr);

// 101-point interpolated average precision. n_gt == 0 yields no value; the
// caller excludes such classes from averaging.
double average_precision(const std::vector<int>& tp_sorted_desc, size_t n_gt);

struct PerClassMetrics {
  double ap50 = 0;
  double ap50_95 = 0;
  size_t n_gt = 0;
  size_t n_pred = 0;
};

struct MetricsReport {
  double map50 = 0;
  double map50_95 = 0;
  std::map<std::string, PerClassMetrics> per_class;  // keyed by class code
  std::map<std::string, double> per_size;            // small / medium / large -> mAP50:95
  std::map<std::string, size_t> size_gt_counts;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

// COCO-style scale buckets by ground-truth box area.
const char* size_bucket(double area);

// Full evaluation: per-class AP at IoU 0.5 and averaged over 0.50:0.95:0.05,
// class means over classes with at least one gt, plus size-bucketed mAP.
MetricsReport evaluate_detections(const std::vector<PredRecord>& preds,
                                  const std::vector<BoxAnnotation>& gts,
                                  const ClassTaxonomy& taxonomy);

struct SessionMatrix {
  std::vector<SessionSpec> order;
  std::vector<MetricsReport> reports;  // aligned with order
  double avg_map50 = 0;
  double avg_map50_95 = 0;
};

// Aggregates all n(n-1) session reports in protocol column order; a missing
// session is an error.
SessionMatrix session_matrix(const std::map<SessionSpec, MetricsReport>& reports);

}  // namespace xdet
