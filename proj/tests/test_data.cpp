#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "xdet/data/data.hpp"

using namespace xdet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("xdet_data_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_fixture(const fs::path& p, const std::string& body) {
  std::ofstream f(p);
  f << body;
}

const char* kTwoImageFixture = R"JSON({
  "images": [
    {"id": 1, "file_name": "a.png", "width": 100, "height": 100},
    {"id": 2, "file_name": "b.png", "width": 100, "height": 100}
  ],
  "annotations": [
    {"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 10, 20, 30]},
    {"id": 2, "image_id": 1, "category_id": 2, "bbox": [40, 40, 10, 10]},
    {"id": 3, "image_id": 2, "category_id": 1, "bbox": [5.5, 6.25, 30.125, 12.5]}
  ],
  "categories": [
    {"id": 1, "name": "DB"}, {"id": 2, "name": "KN"}
  ]
})JSON";

}  // namespace

TEST_CASE("taxonomies carry the published class lists") {
  CHECK(ClassTaxonomy::eds().num_classes() == 10);
  CHECK(ClassTaxonomy::eds().codes ==
        std::vector<std::string>{"DB", "KN", "SC", "LA", "UM", "LI", "SE", "PB", "PR", "GB"});
  CHECK(ClassTaxonomy::hixray().num_classes() == 8);
  CHECK(ClassTaxonomy::hixray().codes ==
        std::vector<std::string>{"PO1", "PO2", "TA", "MP", "LA", "CO", "WA", "NL"});
  CHECK(ClassTaxonomy::pidray().num_classes() == 12);
  CHECK(ClassTaxonomy::pidray().codes ==
        std::vector<std::string>{"BA", "PL", "HA", "PB", "SC", "WR", "GU", "BU", "SP", "HC",
                                 "KN", "LI"});
}

TEST_CASE("coco loading") {
  TempDir tmp;

  SUBCASE("fixture with 2 images and 3 boxes") {
    write_fixture(tmp.path / "ann.json", kTwoImageFixture);
    auto ds = load_annotations((tmp.path / "ann.json").string(), ClassTaxonomy::eds());
    CHECK(ds.num_images() == 2);
    CHECK(ds.num_instances() == 3);
    CHECK(ds.degenerate_dropped == 0);
    CHECK(ds.images[0].boxes[0].box.x2 == 30.0);
    CHECK(ds.images[0].boxes[1].class_id == 1);  // KN
  }

  SUBCASE("degenerate boxes are dropped with a warning count") {
    write_fixture(tmp.path / "deg.json", R"JSON({
      "images": [{"id": 1, "file_name": "a.png", "width": 50, "height": 50}],
      "annotations": [
        {"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 10, 0, 20]},
        {"id": 2, "image_id": 1, "category_id": 1, "bbox": [10, 10, 20, 20]}
      ],
      "categories": [{"id": 1, "name": "DB"}]
    })JSON");
    auto ds = load_annotations((tmp.path / "deg.json").string(), ClassTaxonomy::eds());
    CHECK(ds.num_instances() == 1);
    CHECK(ds.degenerate_dropped == 1);
  }

  SUBCASE("unknown category ids are a taxonomy mismatch") {
    write_fixture(tmp.path / "bad.json", R"JSON({
      "images": [{"id": 1, "file_name": "a.png", "width": 50, "height": 50}],
      "annotations": [{"id": 1, "image_id": 1, "category_id": 99, "bbox": [1, 1, 5, 5]}],
      "categories": [{"id": 1, "name": "DB"}]
    })JSON");
    CHECK_THROWS_AS(load_annotations((tmp.path / "bad.json").string(), ClassTaxonomy::eds()),
                    input_error);
  }

  SUBCASE("unknown category names fail against the taxonomy") {
    write_fixture(tmp.path / "name.json", R"JSON({
      "images": [],
      "annotations": [],
      "categories": [{"id": 1, "name": "Chainsaw"}]
    })JSON");
    CHECK_THROWS_AS(load_annotations((tmp.path / "name.json").string(), ClassTaxonomy::eds()),
                    input_error);
  }

  SUBCASE("parse failure") {
    write_fixture(tmp.path / "broken.json", "{ not json");
    CHECK_THROWS_AS(load_annotations((tmp.path / "broken.json").string(), ClassTaxonomy::eds()),
                    io_error);
  }

  SUBCASE("load then save round-trips box coordinates exactly") {
    write_fixture(tmp.path / "ann.json", kTwoImageFixture);
    auto ds = load_annotations((tmp.path / "ann.json").string(), ClassTaxonomy::eds());
    save_annotations(ds, (tmp.path / "resaved.json").string());
    auto ds2 = load_annotations((tmp.path / "resaved.json").string(), ClassTaxonomy::eds());
    REQUIRE(ds2.num_instances() == ds.num_instances());
    for (size_t i = 0; i < ds.images.size(); ++i)
      for (size_t b = 0; b < ds.images[i].boxes.size(); ++b) {
        CHECK(ds2.images[i].boxes[b].box.x1 == ds.images[i].boxes[b].box.x1);
        CHECK(ds2.images[i].boxes[b].box.y1 == ds.images[i].boxes[b].box.y1);
        CHECK(ds2.images[i].boxes[b].box.x2 == ds.images[i].boxes[b].box.x2);
        CHECK(ds2.images[i].boxes[b].box.y2 == ds.images[i].boxes[b].box.y2);
        CHECK(ds2.images[i].boxes[b].class_id == ds.images[i].boxes[b].class_id);
      }
  }
}

TEST_CASE("dataset stats") {
  TempDir tmp;
  write_fixture(tmp.path / "ann.json", kTwoImageFixture);
  auto ds = load_annotations((tmp.path / "ann.json").string(), ClassTaxonomy::eds());
  auto s = dataset_stats(ds);
  CHECK(s.images == 2);
  CHECK(s.instances == 3);
  CHECK(*s.instances_per_image == doctest::Approx(1.5));

  Dataset empty;
  auto es = dataset_stats(empty);
  CHECK(es.images == 0);
  CHECK(es.instances == 0);
  CHECK_FALSE(es.instances_per_image.has_value());
}

TEST_CASE("eds session enumeration") {
  auto six = eds_sessions({1, 2, 3});
  REQUIRE(six.size() == 6);
  CHECK(six[0] == SessionSpec{1, 2});
  CHECK(six[1] == SessionSpec{1, 3});
  CHECK(six[2] == SessionSpec{2, 1});
  CHECK(six[3] == SessionSpec{2, 3});
  CHECK(six[4] == SessionSpec{3, 1});
  CHECK(six[5] == SessionSpec{3, 2});

  CHECK(eds_sessions({1, 2}).size() == 2);
  CHECK_THROWS_AS(eds_sessions({1}), input_error);

  for (int n = 2; n <= 5; ++n) {
    std::vector<int> domains;
    for (int i = 1; i <= n; ++i) domains.push_back(i);
    CHECK(eds_sessions(domains).size() == static_cast<size_t>(n * (n - 1)));
  }
}

TEST_CASE("pidray subset partition") {
  Dataset test;
  test.taxonomy = ClassTaxonomy::pidray();
  for (int i = 1; i <= 3; ++i) {
    ImageRecord rec;
    rec.id = i;
    test.images.push_back(rec);
  }

  SUBCASE("labels (easy, easy, hidden)") {
    std::map<int64_t, std::string> labels = {{1, "easy"}, {2, "easy"}, {3, "hidden"}};
    auto splits = pidray_eval_splits(test, labels);
    CHECK(splits.at("easy").num_images() == 2);
    CHECK(splits.at("hard").num_images() == 0);
    CHECK(splits.at("hidden").num_images() == 1);
    // partition: disjoint and covering
    CHECK(splits.at("easy").num_images() + splits.at("hard").num_images() +
              splits.at("hidden").num_images() ==
          test.num_images());
  }

  SUBCASE("an unlabeled image is an error") {
    std::map<int64_t, std::string> labels = {{1, "easy"}, {3, "hidden"}};
    CHECK_THROWS_AS(pidray_eval_splits(test, labels), input_error);
  }

  SUBCASE("an unknown subset name is an error") {
    std::map<int64_t, std::string> labels = {{1, "easy"}, {2, "medium"}, {3, "hidden"}};
    CHECK_THROWS_AS(pidray_eval_splits(test, labels), input_error);
  }
}

TEST_CASE("synthetic generation is deterministic") {
  SyntheticSpec spec;
  spec.seed = 42;
  spec.n_images = 4;
  spec.image_size = 64;
  spec.max_objects = 3;
  spec.num_classes = 5;
  auto a = generate_synthetic(spec);
  auto b = generate_synthetic(spec);
  REQUIRE(a.num_images() == 4);
  REQUIRE(b.num_images() == 4);
  for (size_t i = 0; i < a.images.size(); ++i) {
    CHECK(a.images[i].pixels.rgb == b.images[i].pixels.rgb);
    REQUIRE(a.images[i].boxes.size() == b.images[i].boxes.size());
    for (size_t k = 0; k < a.images[i].boxes.size(); ++k) {
      CHECK(a.images[i].boxes[k].box.x1 == b.images[i].boxes[k].box.x1);
      CHECK(a.images[i].boxes[k].class_id == b.images[i].boxes[k].class_id);
    }
  }
}

TEST_CASE("synthetic respects counts and bounds") {
  SyntheticSpec spec;
  spec.seed = 7;
  spec.n_images = 8;
  spec.image_size = 96;
  spec.max_objects = 3;
  spec.num_classes = 6;
  auto ds = generate_synthetic(spec);
  CHECK(ds.num_images() == 8);
  CHECK(ds.num_instances() <= 24);
  CHECK(ds.num_instances() >= 8);
  for (const auto& im : ds.images)
    for (const auto& b : im.boxes) {
      CHECK(b.box.x1 >= 0);
      CHECK(b.box.y1 >= 0);
      CHECK(b.box.x2 <= spec.image_size);
      CHECK(b.box.y2 <= spec.image_size);
      CHECK(b.box.valid());
      CHECK(b.class_id >= 0);
      CHECK(b.class_id < 6);
    }
}

TEST_CASE("domain shift changes pixels but not geometry") {
  SyntheticSpec base;
  base.seed = 9;
  base.n_images = 6;
  base.image_size = 64;
  base.num_classes = 4;
  // configured pure-offset shift, chosen to stay inside the clipping range
  base.transforms = {DomainTransform{{1, 1, 1}, {0, 0, 0}},
                     DomainTransform{{1, 1, 1}, {15, 15, 15}}};
  base.domain = 1;
  auto d1 = generate_synthetic(base);
  base.domain = 2;
  auto d2 = generate_synthetic(base);

  double mean1[3] = {0, 0, 0}, mean2[3] = {0, 0, 0};
  size_t n = 0;
  for (size_t i = 0; i < d1.images.size(); ++i) {
    REQUIRE(d1.images[i].boxes.size() == d2.images[i].boxes.size());
    for (size_t k = 0; k < d1.images[i].boxes.size(); ++k) {
      CHECK(d1.images[i].boxes[k].box.x1 == d2.images[i].boxes[k].box.x1);
      CHECK(d1.images[i].boxes[k].box.y2 == d2.images[i].boxes[k].box.y2);
      CHECK(d1.images[i].boxes[k].class_id == d2.images[i].boxes[k].class_id);
    }
    const auto& p1 = d1.images[i].pixels.rgb;
    const auto& p2 = d2.images[i].pixels.rgb;
    for (size_t q = 0; q < p1.size(); q += 3)
      for (int c = 0; c < 3; ++c) {
        mean1[c] += p1[q + static_cast<size_t>(c)];
        mean2[c] += p2[q + static_cast<size_t>(c)];
        ++n;
      }
  }
  for (int c = 0; c < 3; ++c) {
    const double diff = (mean2[c] - mean1[c]) / (static_cast<double>(n) / 3.0);
    // palette and background stay within [40,215], so +15 never clips
    CHECK(diff == doctest::Approx(15.0).epsilon(1e-6));
  }
}

TEST_CASE("written datasets load back identically") {
  TempDir tmp;
  SyntheticSpec spec;
  spec.seed = 21;
  spec.n_images = 3;
  spec.image_size = 64;
  spec.num_classes = 4;
  auto ds = generate_synthetic(spec);
  write_dataset(ds, (tmp.path / "synth").string());

  auto loaded = load_annotations((tmp.path / "synth" / "annotations.json").string(),
                                 ClassTaxonomy::synthetic(4));
  loaded.image_root = (tmp.path / "synth" / "images").string();
  REQUIRE(loaded.num_images() == 3);
  CHECK(loaded.num_instances() == ds.num_instances());
  for (size_t i = 0; i < ds.images.size(); ++i) {
    Image img = record_image(loaded, loaded.images[i], 64);
    CHECK(img.rgb == ds.images[i].pixels.rgb);
  }
}
