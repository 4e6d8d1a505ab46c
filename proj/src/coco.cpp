#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "xdet/data/data.hpp"

namespace xdet {

using json = nlohmann::json;

namespace {

ClassTaxonomy make_taxonomy(const char* name, std::vector<std::string> codes,
                            std::vector<std::string> longs) {
  ClassTaxonomy t;
  t.dataset = name;
  t.codes = std::move(codes);
  t.long_names = std::move(longs);
  return t;
}

}  // namespace

const ClassTaxonomy& ClassTaxonomy::eds() {
  static const ClassTaxonomy t = make_taxonomy(
      "EDS", {"DB", "KN", "SC", "LA", "UM", "LI", "SE", "PB", "PR", "GB"},
      {"Plastic bottle", "Knife", "Scissor", "Laptop", "Umbrella", "Lighter", "Device",
       "Power bank", "Pressure", "Glass bottle"});
  return t;
}

const ClassTaxonomy& ClassTaxonomy::hixray() {
  static const ClassTaxonomy t = make_taxonomy(
      "HiXray", {"PO1", "PO2", "TA", "MP", "LA", "CO", "WA", "NL"},
      {"Portable charger 1", "Portable charger 2", "Tablet", "Mobile phone", "Laptop",
       "Cosmetic", "Water", "Nonmetallic lighter"});
  return t;
}

const ClassTaxonomy& ClassTaxonomy::pidray() {
  static const ClassTaxonomy t = make_taxonomy(
      "PIDray", {"BA", "PL", "HA", "PB", "SC", "WR", "GU", "BU", "SP", "HC", "KN", "LI"},
      {"Baton", "Pliers", "Hammer", "Power-bank", "Scissors", "Wrench", "Gun", "Bullet",
       "Sprayer", "Handcuffs", "Knife", "Lighter"});
  return t;
}

ClassTaxonomy ClassTaxonomy::synthetic(int num_classes) {
  ClassTaxonomy t;
  t.dataset = "synthetic";
  for (int i = 0; i < num_classes; ++i) {
    t.codes.push_back("G" + std::to_string(i));
    t.long_names.push_back("Glyph " + std::to_string(i));
  }
  return t;
}

const ClassTaxonomy& ClassTaxonomy::by_name(const std::string& name) {
  if (name == "EDS") return eds();
  if (name == "HiXray") return hixray();
  if (name == "PIDray") return pidray();
  throw config_error("unknown taxonomy: " + name);
}

Dataset load_annotations(const std::string& path, const ClassTaxonomy& taxonomy) {
  std::ifstream f(path);
  check<io_error>(static_cast<bool>(f), "cannot open annotations: " + path);
  json j = json::parse(f, nullptr, false);
  check<io_error>(!j.is_discarded(), "annotation parse failure: " + path);
  check<io_error>(j.contains("images") && j.contains("annotations"),
                  path + ": not a COCO annotation file");

  // category id -> class index, matched by code/long name; without a
  // categories section ids are taken as 1-based taxonomy indices
  std::unordered_map<int64_t, int> cat_map;
  if (j.contains("categories")) {
    for (const auto& c : j["categories"]) {
      const int64_t id = c.at("id").get<int64_t>();
      const std::string name = c.value("name", "");
      int idx = -1;
      for (int k = 0; k < taxonomy.num_classes(); ++k)
        if (taxonomy.codes[static_cast<size_t>(k)] == name ||
            taxonomy.long_names[static_cast<size_t>(k)] == name) {
          idx = k;
          break;
        }
      if (idx < 0 && name.empty() && id >= 1 && id <= taxonomy.num_classes())
        idx = static_cast<int>(id - 1);
      check<input_error>(idx >= 0, path + ": category '" + name + "' (id " + std::to_string(id) +
                                       ") is not in the " + taxonomy.dataset + " taxonomy");
      cat_map[id] = idx;
    }
  } else {
    for (int k = 0; k < taxonomy.num_classes(); ++k) cat_map[k + 1] = k;
  }

  Dataset ds;
  ds.name = std::filesystem::path(path).stem().string();
  ds.taxonomy = taxonomy;
  std::unordered_map<int64_t, size_t> by_id;
  for (const auto& im : j["images"]) {
    ImageRecord rec;
    rec.id = im.at("id").get<int64_t>();
    rec.file_name = im.value("file_name", "");
    rec.width = im.value("width", 0);
    rec.height = im.value("height", 0);
    by_id[rec.id] = ds.images.size();
    ds.images.push_back(std::move(rec));
  }

  for (const auto& an : j["annotations"]) {
    const int64_t image_id = an.at("image_id").get<int64_t>();
    auto it = by_id.find(image_id);
    check<input_error>(it != by_id.end(),
                       path + ": annotation references unknown image " + std::to_string(image_id));
    const int64_t cat = an.at("category_id").get<int64_t>();
    auto cit = cat_map.find(cat);
    check<input_error>(cit != cat_map.end(), path + ": category id " + std::to_string(cat) +
                                                 " is not in the " + taxonomy.dataset +
                                                 " taxonomy");
    const auto& bb = an.at("bbox");
    const double x = bb.at(0).get<double>(), y = bb.at(1).get<double>();
    const double w = bb.at(2).get<double>(), h = bb.at(3).get<double>();
    if (w <= 0 || h <= 0) {
      ++ds.degenerate_dropped;
      continue;
    }
    BoxAnnotation ann;
    ann.box = {x, y, x + w, y + h};
    ann.class_id = cit->second;
    ann.image_id = image_id;
    ds.images[it->second].boxes.push_back(ann);
  }
  return ds;
}

void save_annotations(const Dataset& ds, const std::string& path) {
  json j;
  j["images"] = json::array();
  j["annotations"] = json::array();
  j["categories"] = json::array();
  for (int k = 0; k < ds.taxonomy.num_classes(); ++k)
    j["categories"].push_back({{"id", k + 1},
                               {"name", ds.taxonomy.codes[static_cast<size_t>(k)]},
                               {"supercategory", ds.taxonomy.dataset}});
  int64_t ann_id = 1;
  for (const auto& im : ds.images) {
    j["images"].push_back({{"id", im.id},
                           {"file_name", im.file_name},
                           {"width", im.width},
                           {"height", im.height}});
    for (const auto& b : im.boxes)
      j["annotations"].push_back({{"id", ann_id++},
                                  {"image_id", im.id},
                                  {"category_id", b.class_id + 1},
                                  {"bbox", {b.box.x1, b.box.y1, b.box.width(), b.box.height()}},
                                  {"area", b.box.area()},
                                  {"iscrowd", 0}});
  }
  std::ofstream f(path);
  check<io_error>(static_cast<bool>(f), "cannot write " + path);
  f << j.dump(1) << "\n";
}

DatasetStats dataset_stats(const Dataset& ds) {
  DatasetStats s;
  s.images = ds.num_images();
  s.instances = ds.num_instances();
  if (s.images > 0)
    s.instances_per_image = static_cast<double>(s.instances) / static_cast<double>(s.images);
  return s;
}

std::vector<SessionSpec> eds_sessions(const std::vector<int>& domains) {
  check<input_error>(domains.size() >= 2, "eds_sessions: need at least two domains");
  std::vector<SessionSpec> out;
  for (int i : domains)
    for (int j : domains)
      if (i != j) out.push_back({i, j});
  return out;
}

std::map<std::string, Dataset> pidray_eval_splits(
    const Dataset& test, const std::map<int64_t, std::string>& subset_labels) {
  std::map<std::string, Dataset> out;
  for (const char* name : {"easy", "hard", "hidden"}) {
    Dataset d;
    d.name = test.name + "-" + name;
    d.taxonomy = test.taxonomy;
    d.image_root = test.image_root;
    out[name] = std::move(d);
  }
  for (const auto& im : test.images) {
    auto it = subset_labels.find(im.id);
    check<input_error>(it != subset_labels.end(),
                       "pidray splits: image " + std::to_string(im.id) + " has no subset label");
    auto oit = out.find(it->second);
    check<input_error>(oit != out.end(), "pidray splits: unknown subset '" + it->second + "'");
    oit->second.images.push_back(im);
  }
  return out;
}

}  // namespace xdet
