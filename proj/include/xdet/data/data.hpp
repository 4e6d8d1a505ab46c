#pragma once

#include <map>
#include <optional>

#include "xdet/data/types.hpp"

namespace xdet {

// ------------------------------------------------------------------ COCO io

// Parses a COCO-format annotation file. Unknown category ids are a taxonomy
// mismatch; zero-area boxes are dropped and counted.
Dataset load_annotations(const std::string& path, const ClassTaxonomy& taxonomy);

// Re-serializes a dataset to COCO format (exact box coordinates).
void save_annotations(const Dataset& ds, const std::string& path);

struct DatasetStats {
  size_t images = 0;
  size_t instances = 0;
  std::optional<double> instances_per_image;
};

DatasetStats dataset_stats(const Dataset& ds);

// -------------------------------------------------------------- protocols

// All ordered domain pairs (i, j), i != j, in row-major order.
std::vector<SessionSpec> eds_sessions(const std::vector<int>& domains);

// Partition of a test set into the three evaluation subsets.
std::map<std::string, Dataset> pidray_eval_splits(
    const Dataset& test, const std::map<int64_t, std::string>& subset_labels);

// ---------------------------------------------------------------- synthetic

struct DomainTransform {
  double gain[3] = {1, 1, 1};
  double offset[3] = {0, 0, 0};
};

// Per-scanner color/contrast shifts emulating the cross-domain setting.
DomainTransform default_domain_transform(int domain);

struct SyntheticSpec {
  uint64_t seed = 0;
  int n_images = 8;
  int image_size = 128;
  int min_objects = 1;
  int max_objects = 3;
  int num_classes = 6;
  int domain = 1;            // 1 = identity transform by default
  double occlusion = 0.0;    // fraction of each glyph hidden under bars
  std::vector<DomainTransform> transforms;  // overrides; indexed by domain-1

  DomainTransform transform() const {
    if (!transforms.empty()) {
      check<config_error>(domain >= 1 && domain <= static_cast<int>(transforms.size()),
                          "synthetic: domain has no transform entry");
      return transforms[static_cast<size_t>(domain - 1)];
    }
    return default_domain_transform(domain);
  }
};

// Deterministic glyph scenes: one glyph family per class on a textured
// background; geometry depends only on the seed, never on the domain.
Dataset generate_synthetic(const SyntheticSpec& spec);

inline Dataset generate_synthetic(uint64_t seed, int n_images, const ClassTaxonomy& taxonomy,
                                  int image_size, int max_objects) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.n_images = n_images;
  spec.image_size = image_size;
  spec.max_objects = max_objects;
  spec.num_classes = taxonomy.num_classes();
  Dataset ds = generate_synthetic(spec);
  ds.taxonomy = taxonomy;
  return ds;
}

// Materializes a synthetic dataset: images + COCO annotations.
void write_dataset(const Dataset& ds, const std::string& dir);

// Loads pixel data for a record (file-backed or in-memory), resized to size.
Image record_image(const Dataset& ds, const ImageRecord& rec, int size);

}  // namespace xdet
