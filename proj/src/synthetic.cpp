#include <algorithm>
#include <cmath>
#include <filesystem>

#include "xdet/core/nn.hpp"
#include "xdet/data/data.hpp"

namespace xdet {

namespace {

// Palette kept inside [40, 215] so the default domain offsets do not clip.
const uint8_t kPalette[12][3] = {
    {200, 60, 60},  {60, 170, 70},  {70, 90, 205},  {210, 180, 50}, {170, 70, 190},
    {60, 190, 185}, {205, 120, 55}, {110, 205, 60}, {75, 60, 180},  {200, 70, 140},
    {90, 140, 90},  {140, 110, 70},
};

struct Glyph {
  int x0, y0, w, h;
  uint8_t color[3];
  int family;
};

bool inside(double px, double py, const Glyph& g, int family) {
  // normalized coordinates in [-1, 1] within the glyph box
  const double nx = 2.0 * (px - g.x0) / g.w - 1.0;
  const double ny = 2.0 * (py - g.y0) / g.h - 1.0;
  switch (family) {
    case 0: return nx * nx + ny * ny <= 1.0;                         // disc
    case 1: return true;                                             // square
    case 2: return ny >= -1.0 && std::abs(nx) <= (1.0 - ny) / 2.0;   // triangle (tip down? up)
    case 3: return std::abs(nx) <= 0.3 || std::abs(ny) <= 0.3;       // plus
    case 4: {                                                        // ring
      const double r2 = nx * nx + ny * ny;
      return r2 <= 1.0 && r2 >= 0.35;
    }
    case 5: return std::abs(nx) + std::abs(ny) <= 1.0;               // diamond
    case 6: return std::abs(std::abs(nx) - std::abs(ny)) <= 0.3;     // X
    case 7: return std::fmod(std::floor((ny + 1.0) * 3.0), 2.0) < 1.0;  // horizontal bars
    case 8: {                                                        // four-point star
      const double a = std::abs(nx), b = std::abs(ny);
      return std::sqrt(a) + std::sqrt(b) <= 1.2;
    }
    case 9: return nx <= -0.3 || ny >= 0.3;                          // L shape
    case 10: {                                                       // capsule
      const double cy = std::clamp(ny, -0.5, 0.5);
      return nx * nx / 0.36 + (ny - cy) * (ny - cy) / 0.49 <= 1.0;
    }
    default: {                                                       // checker
      const int cx = static_cast<int>(std::floor((nx + 1.0) * 2.0));
      const int cy = static_cast<int>(std::floor((ny + 1.0) * 2.0));
      return (cx + cy) % 2 == 0;
    }
  }
}

}  // namespace

DomainTransform default_domain_transform(int domain) {
  switch (((domain - 1) % 3 + 3) % 3) {
    case 0: return DomainTransform{{1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}};
    case 1: return DomainTransform{{0.55, 1.15, 1.05}, {28.0, -12.0, 8.0}};
    default: return DomainTransform{{1.25, 0.60, 0.80}, {-18.0, 22.0, -6.0}};
  }
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  check<config_error>(spec.n_images >= 1, "synthetic: n_images must be >= 1");
  check<config_error>(spec.image_size >= 32, "synthetic: image_size too small");
  check<config_error>(spec.num_classes >= 1 && spec.max_objects >= 1 &&
                          spec.min_objects >= 1 && spec.min_objects <= spec.max_objects,
                      "synthetic: bad class/object counts");
  check<config_error>(spec.occlusion >= 0.0 && spec.occlusion <= 0.9,
                      "synthetic: occlusion must lie in [0, 0.9]");
  const DomainTransform tf = spec.transform();

  Dataset ds;
  ds.name = "synthetic-seed" + std::to_string(spec.seed) + "-d" + std::to_string(spec.domain);
  ds.taxonomy = ClassTaxonomy::synthetic(spec.num_classes);

  Rng rng(spec.seed);
  const int s = spec.image_size;
  for (int n = 0; n < spec.n_images; ++n) {
    ImageRecord rec;
    rec.id = n + 1;
    rec.width = s;
    rec.height = s;

    // background: per-channel base + vertical gradient + pixel noise
    double base[3], grad[3];
    for (int c = 0; c < 3; ++c) {
      base[c] = rng.uniform(120, 180);
      grad[c] = rng.uniform(-15, 15);
    }
    rec.pixels.width = s;
    rec.pixels.height = s;
    rec.pixels.rgb.resize(static_cast<size_t>(s) * s * 3);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        for (int c = 0; c < 3; ++c) {
          const double v = base[c] + grad[c] * (static_cast<double>(y) / s - 0.5) * 2.0 +
                           rng.uniform(-10, 10);
          rec.pixels.at(y, x, c) = static_cast<uint8_t>(std::lround(std::clamp(v, 40.0, 215.0)));
        }

    const int n_obj = static_cast<int>(rng.randint(spec.min_objects, spec.max_objects + 1));
    std::vector<Glyph> placed;
    for (int o = 0; o < n_obj; ++o) {
      const int cls = static_cast<int>(rng.randint(0, spec.num_classes));
      Glyph g;
      g.family = cls % 12;
      bool ok = false;
      for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
        const double extent = rng.uniform(0.16, 0.38) * s;
        const double aspect = rng.uniform(0.8, 1.25);
        g.w = std::max(8, static_cast<int>(std::lround(extent * aspect)));
        g.h = std::max(8, static_cast<int>(std::lround(extent / aspect)));
        g.w = std::min(g.w, s - 4);
        g.h = std::min(g.h, s - 4);
        g.x0 = static_cast<int>(rng.randint(2, s - g.w - 1));
        g.y0 = static_cast<int>(rng.randint(2, s - g.h - 1));
        ok = true;
        const Box candidate{static_cast<double>(g.x0), static_cast<double>(g.y0),
                            static_cast<double>(g.x0 + g.w), static_cast<double>(g.y0 + g.h)};
        for (const auto& other : placed) {
          const Box ob{static_cast<double>(other.x0), static_cast<double>(other.y0),
                       static_cast<double>(other.x0 + other.w),
                       static_cast<double>(other.y0 + other.h)};
          if (box_iou(candidate, ob) > 0.45) ok = false;
        }
      }
      for (int c = 0; c < 3; ++c) {
        const double jitter = rng.uniform(-12, 12);
        g.color[c] = static_cast<uint8_t>(
            std::lround(std::clamp(kPalette[cls % 12][c] + jitter, 40.0, 215.0)));
      }
      placed.push_back(g);

      for (int y = g.y0; y < g.y0 + g.h; ++y)
        for (int x = g.x0; x < g.x0 + g.w; ++x)
          if (inside(x + 0.5, y + 0.5, g, g.family))
            for (int c = 0; c < 3; ++c) rec.pixels.at(y, x, c) = g.color[c];

      // concealment: background-colored bars across the glyph
      if (spec.occlusion > 0) {
        const int bars = 1 + static_cast<int>(spec.occlusion * 4);
        for (int bi = 0; bi < bars; ++bi) {
          const bool horizontal = rng.uniform() < 0.5;
          const int thickness =
              std::max(1, static_cast<int>(spec.occlusion * (horizontal ? g.h : g.w) / bars));
          const int start = static_cast<int>(
              rng.randint(0, std::max(1, (horizontal ? g.h : g.w) - thickness)));
          for (int y = g.y0; y < g.y0 + g.h; ++y)
            for (int x = g.x0; x < g.x0 + g.w; ++x) {
              const int along = horizontal ? y - g.y0 : x - g.x0;
              if (along >= start && along < start + thickness)
                for (int c = 0; c < 3; ++c)
                  rec.pixels.at(y, x, c) = static_cast<uint8_t>(std::lround(
                      std::clamp(base[c] + rng.uniform(-8, 8), 40.0, 215.0)));
            }
        }
      }

      BoxAnnotation ann;
      ann.box = {static_cast<double>(g.x0), static_cast<double>(g.y0),
                 static_cast<double>(g.x0 + g.w), static_cast<double>(g.y0 + g.h)};
      ann.class_id = cls;
      ann.image_id = rec.id;
      rec.boxes.push_back(ann);
    }

    // scanner shift: applied after drawing so geometry is domain-invariant
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        for (int c = 0; c < 3; ++c) {
          const double v = rec.pixels.at(y, x, c) * tf.gain[c] + tf.offset[c];
          rec.pixels.at(y, x, c) = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
        }

    ds.images.push_back(std::move(rec));
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  check<io_error>(fs::exists(fs::path(dir) / "images"), "cannot create dataset dir " + dir);
  Dataset on_disk = ds;
  on_disk.image_root = (fs::path(dir) / "images").string();
  for (auto& im : on_disk.images) {
    check<io_error>(!im.pixels.empty(), "write_dataset: image has no pixels");
    im.file_name = "img_" + std::to_string(im.id) + ".png";
    write_png((fs::path(dir) / "images" / im.file_name).string(), im.pixels);
  }
  save_annotations(on_disk, (fs::path(dir) / "annotations.json").string());
}

Image record_image(const Dataset& ds, const ImageRecord& rec, int size) {
  Image img;
  if (!rec.pixels.empty()) {
    img = rec.pixels;
  } else {
    check<io_error>(!rec.file_name.empty(), "image record has neither pixels nor a file");
    namespace fs = std::filesystem;
    const fs::path p = ds.image_root.empty() ? fs::path(rec.file_name)
                                             : fs::path(ds.image_root) / rec.file_name;
    img = read_image(p.string());
  }
  return resize_bilinear(img, size, size);
}

}  // namespace xdet
