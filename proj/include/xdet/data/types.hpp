#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "xdet/core/image.hpp"

namespace xdet {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return x2 > x1 && y2 > y1; }
};

inline double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct BoxAnnotation {
  Box box;
  int class_id = 0;
  int64_t image_id = 0;
};

struct Detection {
  Box box;
  int class_id = 0;
  double confidence = 0.0;
};

struct ClassTaxonomy {
  std::string dataset;
  std::vector<std::string> codes;
  std::vector<std::string> long_names;

  int num_classes() const { return static_cast<int>(codes.size()); }

  static const ClassTaxonomy& eds();
  static const ClassTaxonomy& hixray();
  static const ClassTaxonomy& pidray();
  static ClassTaxonomy synthetic(int num_classes);
  static const ClassTaxonomy& by_name(const std::string& name);
};

struct ImageRecord {
  int64_t id = 0;
  std::string file_name;  // empty for in-memory images
  int width = 0;
  int height = 0;
  Image pixels;  // may be empty when file-backed
  std::vector<BoxAnnotation> boxes;
};

struct Dataset {
  std::string name;
  ClassTaxonomy taxonomy;
  std::vector<ImageRecord> images;
  std::string image_root;
  int degenerate_dropped = 0;  // zero-area ground truths removed at load

  size_t num_images() const { return images.size(); }
  size_t num_instances() const {
    size_t n = 0;
    for (const auto& im : images) n += im.boxes.size();
    return n;
  }
};

// Ordered cross-domain protocol entry: train on one scanner domain, test on
// another.
struct SessionSpec {
  int train_domain = 0;
  int test_domain = 0;
  bool operator<(const SessionSpec& o) const {
    return train_domain != o.train_domain ? train_domain < o.train_domain
                                          : test_domain < o.test_domain;
  }
  bool operator==(const SessionSpec& o) const {
    return train_domain == o.train_domain && test_domain == o.test_domain;
  }
  std::string label() const {
    return "D" + std::to_string(train_domain) + "->" + std::to_string(test_domain);
  }
};

}  // namespace xdet
