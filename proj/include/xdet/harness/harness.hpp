#pragma once

#include <filesystem>
#include <fstream>

#include "xdet/assembly/assembly.hpp"
#include "xdet/data/data.hpp"
#include "xdet/metrics/metrics.hpp"

namespace xdet {

enum class OptimizerKind { SGD, ADAMW };

inline const char* to_string(OptimizerKind o) { return o == OptimizerKind::SGD ? "SGD" : "ADAMW"; }

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::ADAMW;
  double learning_rate = 0.000714;
  double momentum = 0.937;  // SGD only
  double weight_decay = 0.0;
  int batch_size = 18;
  int max_epochs = 100;
  int early_stop_patience = 20;
  uint64_t seed = 0;
  bool augment_hflip = false;   // off by default so seeded runs are comparable
  double scale_jitter = 0.0;    // 0.1 = +/-10%
  int grad_accum = 1;

  void validate() const {
    check<config_error>(learning_rate > 0, "train: learning rate must be positive");
    check<config_error>(batch_size >= 1, "train: batch size must be >= 1");
    check<config_error>(max_epochs >= 1, "train: max_epochs must be >= 1");
    check<config_error>(early_stop_patience >= 1, "train: patience must be >= 1");
    check<config_error>(grad_accum >= 1, "train: grad_accum must be >= 1");
    check<config_error>(scale_jitter >= 0 && scale_jitter < 0.5, "train: bad scale jitter");
  }
};

// ------------------------------------------------------------- optimizers

template <typename T>
class Optimizer {
 public:
  Optimizer(std::vector<NamedParam<T>> params, const TrainConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    state_m_.resize(params_.size());
    state_v_.resize(params_.size());
  }

  void zero_grad() {
    for (auto& p : params_) p.param->node()->zero_grad();
  }

  void step() {
    ++t_;
    const T lr = static_cast<T>(cfg_.learning_rate);
    for (size_t i = 0; i < params_.size(); ++i) {
      Var<T>& p = *params_[i].param;
      if (!p.grad().defined()) continue;
      auto& g = p.grad().arr();
      if (cfg_.optimizer == OptimizerKind::SGD) {
        if (!state_m_[i].defined()) state_m_[i] = Tensor<T>::zeros(p.shape());
        auto& m = state_m_[i].arr();
        m = static_cast<T>(cfg_.momentum) * m + g;
        if (cfg_.weight_decay > 0) m += static_cast<T>(cfg_.weight_decay) * p.val().arr();
        p.val().arr() -= lr * m;
      } else {
        const T b1 = T(0.9), b2 = T(0.999), eps = T(1e-8);
        if (!state_m_[i].defined()) {
          state_m_[i] = Tensor<T>::zeros(p.shape());
          state_v_[i] = Tensor<T>::zeros(p.shape());
        }
        auto& m = state_m_[i].arr();
        auto& v = state_v_[i].arr();
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g * g;
        const T bc1 = T(1) - std::pow(b1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(b2, static_cast<T>(t_));
        if (cfg_.weight_decay > 0)
          p.val().arr() -= lr * static_cast<T>(cfg_.weight_decay) * p.val().arr();
        p.val().arr() -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
      }
    }
  }

 private:
  std::vector<NamedParam<T>> params_;
  TrainConfig cfg_;
  std::vector<Tensor<T>> state_m_, state_v_;
  long t_ = 0;
};

// ----------------------------------------------------------- batch plumbing

// An image resized to the network input with its boxes scaled along.
struct TrainSample {
  Image pixels;
  std::vector<BoxAnnotation> boxes;
  int64_t image_id = 0;
};

inline std::vector<TrainSample> prepare_samples(const Dataset& ds, int image_size) {
  std::vector<TrainSample> out;
  out.reserve(ds.images.size());
  for (const auto& rec : ds.images) {
    TrainSample s;
    s.image_id = rec.id;
    s.pixels = record_image(ds, rec, image_size);
    const double src_w = rec.width > 0 ? rec.width : (rec.pixels.empty() ? image_size : rec.pixels.width);
    const double src_h = rec.height > 0 ? rec.height : (rec.pixels.empty() ? image_size : rec.pixels.height);
    const double fx = image_size / src_w, fy = image_size / src_h;
    for (const auto& b : rec.boxes) {
      BoxAnnotation sb = b;
      sb.box = {b.box.x1 * fx, b.box.y1 * fy, b.box.x2 * fx, b.box.y2 * fy};
      s.boxes.push_back(sb);
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
inline Var<T> stack_images(const std::vector<const TrainSample*>& batch, int image_size) {
  Tensor<T> t(Shape{static_cast<Index>(batch.size()), 3, image_size, image_size});
  Index off = 0;
  for (const auto* s : batch) {
    Tensor<T> one = image_to_tensor<T>(s->pixels);
    std::copy(one.data(), one.data() + one.size(), t.data() + off);
    off += one.size();
  }
  return make_leaf(std::move(t));
}

// --------------------------------------------------------------- evaluation

template <typename T>
inline MetricsReport evaluate(Detector<T>& det, const Dataset& ds, const EvalConfig& ec,
                              int eval_batch = 4) {
  NoGradGuard ng;
  const int image_size = static_cast<int>(det.config().image_size);
  auto samples = prepare_samples(ds, image_size);
  std::vector<PredRecord> preds;
  std::vector<BoxAnnotation> gts;
  for (size_t i = 0; i < samples.size(); i += static_cast<size_t>(eval_batch)) {
    std::vector<const TrainSample*> batch;
    for (size_t j = i; j < std::min(samples.size(), i + static_cast<size_t>(eval_batch)); ++j)
      batch.push_back(&samples[j]);
    auto dets = det.predict(stack_images<T>(batch, image_size), ec);
    for (size_t j = 0; j < batch.size(); ++j) {
      for (const auto& d : dets[j]) preds.push_back({batch[j]->image_id, d});
      for (const auto& g : batch[j]->boxes) gts.push_back(g);
    }
  }
  return evaluate_detections(preds, gts, ds.taxonomy);
}

// Loads a checkpoint into a detector built from its own config snapshot.
template <typename T>
inline Detector<T> detector_from_checkpoint(const std::string& path) {
  TensorArchive a = TensorArchive::load(path);
  json meta = json::parse(a.meta, nullptr, false);
  check<config_error>(!meta.is_discarded(), "checkpoint: bad metadata");
  Detector<T> det(detector_config_from_json(meta));
  load_checkpoint(det, a);
  return det;
}

// ----------------------------------------------------------------- training

struct EpochStats {
  int epoch = 0;
  double total = 0, cls = 0, box = 0, reg = 0;
  double val_map50 = 0, val_map50_95 = 0;
};

struct RunResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;  // 1-based
  double best_metric = 0;
  MetricsReport final_report;  // best parameters on the validation set
  MetricsReport train_report;  // best parameters on the training set
  std::string checkpoint_path;
};

namespace detail {

inline void hflip_sample(TrainSample& s) {
  const int w = s.pixels.width;
  for (int y = 0; y < s.pixels.height; ++y)
    for (int x = 0; x < w / 2; ++x)
      for (int c = 0; c < 3; ++c)
        std::swap(s.pixels.at(y, x, c), s.pixels.at(y, w - 1 - x, c));
  for (auto& b : s.boxes) {
    const double x1 = w - b.box.x2, x2 = w - b.box.x1;
    b.box.x1 = x1;
    b.box.x2 = x2;
  }
}

}  // namespace detail

// Seeded epoch loop with per-epoch validation, strict-improvement early
// stopping, and best-parameter retention.
template <typename T>
inline RunResult train(Detector<T>& det, const Dataset& train_ds, const Dataset& val_ds,
                       const TrainConfig& cfg, const EvalConfig& ec = {},
                       const std::string& checkpoint_path = "") {
  cfg.validate();
  check<input_error>(train_ds.taxonomy.codes == val_ds.taxonomy.codes,
                     "train: dataset taxonomies do not match");
  check<input_error>(!train_ds.images.empty(), "train: empty training set");

  const int image_size = static_cast<int>(det.config().image_size);
  auto samples = prepare_samples(train_ds, image_size);
  auto params = det.named_parameters("detector");
  Optimizer<T> opt(params, cfg);
  Rng rng(cfg.seed);

  RunResult result;
  std::vector<Tensor<T>> best_params;
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), rng.engine());

    EpochStats stats;
    stats.epoch = epoch;
    int batches = 0;
    size_t pos = 0;
    while (pos < order.size()) {
      opt.zero_grad();
      int micro = 0;
      for (; micro < cfg.grad_accum && pos < order.size(); ++micro) {
        std::vector<TrainSample> staged;
        std::vector<const TrainSample*> batch;
        std::vector<std::vector<BoxAnnotation>> gts;
        for (int k = 0; k < cfg.batch_size && pos < order.size(); ++k, ++pos) {
          const TrainSample& base = samples[order[pos]];
          if (cfg.augment_hflip || cfg.scale_jitter > 0) {
            TrainSample aug = base;
            if (cfg.augment_hflip && rng.uniform() < 0.5) detail::hflip_sample(aug);
            if (cfg.scale_jitter > 0) {
              const double f = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter);
              const int scaled = std::max(32, static_cast<int>(std::lround(image_size * f)));
              Image z = resize_bilinear(aug.pixels, scaled, scaled);
              aug.pixels = resize_bilinear(z, image_size, image_size);
            }
            staged.push_back(std::move(aug));
          } else {
            staged.push_back(base);
          }
        }
        for (const auto& s : staged) {
          batch.push_back(&s);
          gts.push_back(s.boxes);
        }
        auto loss = det.compute_loss(stack_images<T>(batch, image_size), gts);
        const double total = static_cast<double>(loss.total.val()[0]);
        check<numeric_error>(std::isfinite(total),
                             "training aborted: non-finite loss at epoch " +
                                 std::to_string(epoch));
        stats.total += total;
        stats.cls += static_cast<double>(loss.cls.val()[0]);
        stats.box += static_cast<double>(loss.box.val()[0]);
        stats.reg += static_cast<double>(loss.reg.val()[0]);
        ++batches;
        Var<T> scaled = cfg.grad_accum > 1 ? scale(loss.total, T(1) / static_cast<T>(cfg.grad_accum))
                                           : loss.total;
        backward(scaled);
      }
      opt.step();
    }
    if (batches > 0) {
      stats.total /= batches;
      stats.cls /= batches;
      stats.box /= batches;
      stats.reg /= batches;
    }

    MetricsReport val = evaluate(det, val_ds, ec);
    stats.val_map50 = val.map50;
    stats.val_map50_95 = val.map50_95;
    result.history.push_back(stats);

    if (result.best_epoch == 0 || val.map50_95 > result.best_metric) {
      result.best_epoch = epoch;
      result.best_metric = val.map50_95;
      best_params.clear();
      for (auto& p : params) best_params.push_back(p.param->val().clone());
      since_best = 0;
    } else {
      ++since_best;
      if (since_best >= cfg.early_stop_patience) break;
    }
  }

  if (!best_params.empty())
    for (size_t i = 0; i < params.size(); ++i) params[i].param->val() = best_params[i];

  result.final_report = evaluate(det, val_ds, ec);
  result.train_report = evaluate(det, train_ds, ec);
  if (!checkpoint_path.empty()) {
    save_checkpoint(det, checkpoint_path);
    result.checkpoint_path = checkpoint_path;
  }
  return result;
}

// ---------------------------------------------------------------- protocols

enum class Protocol { SPLIT, EDS_SESSIONS, PIDRAY_SUBSETS };

inline Protocol protocol_from_string(const std::string& s) {
  if (s == "SPLIT") return Protocol::SPLIT;
  if (s == "EDS_SESSIONS") return Protocol::EDS_SESSIONS;
  if (s == "PIDRAY_SUBSETS") return Protocol::PIDRAY_SUBSETS;
  throw config_error("unknown protocol: " + s);
}

inline const char* to_string(Protocol p) {
  switch (p) {
    case Protocol::SPLIT: return "SPLIT";
    case Protocol::EDS_SESSIONS: return "EDS_SESSIONS";
    case Protocol::PIDRAY_SUBSETS: return "PIDRAY_SUBSETS";
  }
  return "?";
}

struct DatasetBundle {
  std::string name;
  ClassTaxonomy taxonomy;
  std::map<std::string, Dataset> splits;               // "train" / "test"
  std::map<int, std::pair<Dataset, Dataset>> domains;  // id -> (train, test)
  std::map<std::string, Dataset> subsets;              // easy / hard / hidden
  std::vector<int> domain_ids;
};

// Manifest: {"name", "taxonomy", and either "synthetic" {...} or file-backed
// "splits"/"domains"/"subsets" entries of {"annotations", "image_root"}.
inline DatasetBundle resolve_manifest(const json& m) {
  DatasetBundle b;
  b.name = m.value("name", "dataset");
  const std::string tax = m.value("taxonomy", "synthetic:6");
  if (tax.rfind("synthetic:", 0) == 0)
    b.taxonomy = ClassTaxonomy::synthetic(std::stoi(tax.substr(10)));
  else
    b.taxonomy = ClassTaxonomy::by_name(tax);

  auto load_entry = [&](const json& e) {
    Dataset d = load_annotations(e.at("annotations").get<std::string>(), b.taxonomy);
    d.image_root = e.value("image_root", "");
    return d;
  };

  if (m.contains("synthetic")) {
    const json& s = m["synthetic"];
    SyntheticSpec spec;
    spec.seed = s.value("seed", uint64_t{0});
    spec.n_images = s.value("n_images", 8);
    spec.image_size = s.value("image_size", 128);
    spec.min_objects = s.value("min_objects", 1);
    spec.max_objects = s.value("max_objects", 3);
    spec.num_classes = b.taxonomy.num_classes();
    const int n_test = s.value("n_test_images", spec.n_images);
    const int n_domains = s.value("domains", 0);
    if (n_domains >= 2) {
      for (int d = 1; d <= n_domains; ++d) {
        SyntheticSpec tr = spec;
        tr.domain = d;
        tr.seed = spec.seed + 131ull * static_cast<uint64_t>(d);
        SyntheticSpec te = tr;
        te.seed = tr.seed + 71;
        te.n_images = n_test;
        Dataset train_d = generate_synthetic(tr);
        Dataset test_d = generate_synthetic(te);
        train_d.taxonomy = b.taxonomy;
        test_d.taxonomy = b.taxonomy;
        b.domains[d] = {std::move(train_d), std::move(test_d)};
        b.domain_ids.push_back(d);
      }
    } else {
      SyntheticSpec te = spec;
      te.seed = spec.seed + 7919;
      te.n_images = n_test;
      Dataset train_d = generate_synthetic(spec);
      Dataset test_d = generate_synthetic(te);
      train_d.taxonomy = b.taxonomy;
      test_d.taxonomy = b.taxonomy;
      b.splits["train"] = std::move(train_d);
      b.splits["test"] = std::move(test_d);
      // subset variants for the three-way evaluation protocol
      SyntheticSpec easy = spec;
      easy.seed = spec.seed + 1009;
      easy.n_images = n_test;
      easy.min_objects = easy.max_objects = 1;
      SyntheticSpec hard = spec;
      hard.seed = spec.seed + 2003;
      hard.n_images = n_test;
      hard.min_objects = std::max(2, spec.min_objects);
      hard.max_objects = std::max(hard.min_objects, spec.max_objects);
      SyntheticSpec hidden = spec;
      hidden.seed = spec.seed + 3001;
      hidden.n_images = n_test;
      hidden.occlusion = 0.5;
      for (auto& [key, sp] : std::map<std::string, SyntheticSpec>{
               {"easy", easy}, {"hard", hard}, {"hidden", hidden}}) {
        Dataset d = generate_synthetic(sp);
        d.taxonomy = b.taxonomy;
        b.subsets[key] = std::move(d);
      }
    }
    return b;
  }

  if (m.contains("splits"))
    for (auto it = m["splits"].begin(); it != m["splits"].end(); ++it)
      b.splits[it.key()] = load_entry(it.value());
  if (m.contains("domains"))
    for (auto it = m["domains"].begin(); it != m["domains"].end(); ++it) {
      const int d = std::stoi(it.key());
      b.domains[d] = {load_entry(it.value().at("train")), load_entry(it.value().at("test"))};
      b.domain_ids.push_back(d);
    }
  if (m.contains("subsets"))
    for (auto it = m["subsets"].begin(); it != m["subsets"].end(); ++it)
      b.subsets[it.key()] = load_entry(it.value());
  std::sort(b.domain_ids.begin(), b.domain_ids.end());
  return b;
}

inline DatasetBundle resolve_manifest_file(const std::string& path) {
  std::ifstream f(path);
  check<io_error>(static_cast<bool>(f), "cannot open manifest: " + path);
  json m = json::parse(f, nullptr, false);
  check<io_error>(!m.is_discarded(), "manifest parse failure: " + path);
  return resolve_manifest(m);
}

struct ProtocolResult {
  Protocol protocol = Protocol::SPLIT;
  std::vector<std::pair<std::string, RunResult>> runs;
  std::vector<std::pair<std::string, MetricsReport>> reports;
  std::optional<SessionMatrix> matrix;
};

// SPLIT: one train/eval; EDS_SESSIONS: one run per ordered domain pair plus
// the session matrix; PIDRAY_SUBSETS: one run, four reports.
template <typename T>
inline ProtocolResult run_protocol(Protocol protocol, const DetectorConfig& dc,
                                   const DatasetBundle& bundle, const TrainConfig& tc,
                                   const EvalConfig& ec = {}, const std::string& out_dir = "") {
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);
  auto ckpt = [&](const std::string& tag) {
    return out_dir.empty() ? std::string{} : (fs::path(out_dir) / (tag + ".ckpt")).string();
  };

  ProtocolResult res;
  res.protocol = protocol;
  switch (protocol) {
    case Protocol::SPLIT: {
      check<input_error>(bundle.splits.count("train") && bundle.splits.count("test"),
                         "SPLIT protocol needs train and test entries in the manifest");
      DetectorConfig cfg = dc;
      cfg.init_seed = tc.seed;
      Detector<T> det(cfg);
      RunResult run = train(det, bundle.splits.at("train"), bundle.splits.at("test"), tc, ec,
                            ckpt("split"));
      res.reports.emplace_back("test", run.final_report);
      res.reports.emplace_back("train", run.train_report);
      res.runs.emplace_back("split", std::move(run));
      break;
    }
    case Protocol::EDS_SESSIONS: {
      check<input_error>(bundle.domain_ids.size() >= 2,
                         "EDS_SESSIONS needs at least two domains in the manifest");
      std::map<SessionSpec, MetricsReport> session_reports;
      for (const SessionSpec& s : eds_sessions(bundle.domain_ids)) {
        const auto& train_pair = bundle.domains.at(s.train_domain);
        const auto& test_pair = bundle.domains.at(s.test_domain);
        DetectorConfig cfg = dc;
        cfg.init_seed = tc.seed + static_cast<uint64_t>(s.train_domain);
        Detector<T> det(cfg);
        const Dataset& val =
            train_pair.second.images.empty() ? train_pair.first : train_pair.second;
        RunResult run = train(det, train_pair.first, val, tc, ec, ckpt(s.label()));
        MetricsReport cross = evaluate(det, test_pair.second, ec);
        session_reports[s] = cross;
        res.reports.emplace_back(s.label(), cross);
        res.runs.emplace_back(s.label(), std::move(run));
      }
      res.matrix = session_matrix(session_reports);
      break;
    }
    case Protocol::PIDRAY_SUBSETS: {
      check<input_error>(
          (bundle.splits.count("train") || !bundle.subsets.empty()) && bundle.subsets.count("easy") &&
              bundle.subsets.count("hard") && bundle.subsets.count("hidden"),
          "PIDRAY_SUBSETS needs a train entry and easy/hard/hidden subsets");
      const Dataset& train_ds = bundle.splits.count("train")
                                    ? bundle.splits.at("train")
                                    : bundle.subsets.at("easy");
      // overall = union of the three subsets
      Dataset overall;
      overall.name = bundle.name + "-overall";
      overall.taxonomy = bundle.taxonomy;
      int64_t next_id = 1;
      for (const char* key : {"easy", "hard", "hidden"}) {
        for (ImageRecord rec : bundle.subsets.at(key).images) {
          const int64_t old_id = rec.id;
          rec.id = next_id++;
          for (auto& bx : rec.boxes) bx.image_id = rec.id;
          (void)old_id;
          overall.images.push_back(std::move(rec));
        }
      }
      DetectorConfig cfg = dc;
      cfg.init_seed = tc.seed;
      Detector<T> det(cfg);
      RunResult run = train(det, train_ds, overall, tc, ec, ckpt("pidray"));
      for (const char* key : {"easy", "hard", "hidden"})
        res.reports.emplace_back(key, evaluate(det, bundle.subsets.at(key), ec));
      res.reports.emplace_back("overall", run.final_report);
      res.runs.emplace_back("pidray", std::move(run));
      break;
    }
  }
  return res;
}

// --------------------------------------------------------------- reporting

inline json train_config_to_json(const TrainConfig& c) {
  return json{{"optimizer", to_string(c.optimizer)},
              {"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"early_stop_patience", c.early_stop_patience},
              {"early_stop_metric", "map50_95"},
              {"seed", c.seed},
              {"augment_hflip", c.augment_hflip},
              {"scale_jitter", c.scale_jitter},
              {"grad_accum", c.grad_accum}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (j.contains("optimizer")) {
    const std::string o = j["optimizer"].get<std::string>();
    check<config_error>(o == "SGD" || o == "ADAMW", "unknown optimizer: " + o);
    c.optimizer = o == "SGD" ? OptimizerKind::SGD : OptimizerKind::ADAMW;
  }
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.seed = j.value("seed", c.seed);
  c.augment_hflip = j.value("augment_hflip", c.augment_hflip);
  c.scale_jitter = j.value("scale_jitter", c.scale_jitter);
  c.grad_accum = j.value("grad_accum", c.grad_accum);
  return c;
}

inline json eval_config_to_json(const EvalConfig& e) {
  return json{{"conf_thr", e.conf_thr}, {"nms_iou", e.nms_iou}, {"max_det", e.max_det}};
}

inline EvalConfig eval_config_from_json(const json& j) {
  EvalConfig e;
  e.conf_thr = j.value("conf_thr", e.conf_thr);
  e.nms_iou = j.value("nms_iou", e.nms_iou);
  e.max_det = j.value("max_det", e.max_det);
  return e;
}

constexpr int kResultsSchemaVersion = 1;

// Structured, timestamp-free results file; identical runs serialize
// byte-identically.
inline json results_to_json(const ProtocolResult& res, const DetectorConfig& dc,
                            const TrainConfig& tc, const EvalConfig& ec,
                            const std::string& dataset_name) {
  json j;
  j["schema_version"] = kResultsSchemaVersion;
  j["protocol"] = to_string(res.protocol);
  j["dataset"] = dataset_name;
  j["detector"] = to_json(dc);
  j["train"] = train_config_to_json(tc);
  j["eval"] = eval_config_to_json(ec);
  j["reports"] = json::object();
  for (const auto& [label, rep] : res.reports) j["reports"][label] = rep.to_json();
  if (res.matrix) {
    json m;
    m["sessions"] = json::array();
    for (size_t i = 0; i < res.matrix->order.size(); ++i)
      m["sessions"].push_back({{"session", res.matrix->order[i].label()},
                               {"map50", res.matrix->reports[i].map50},
                               {"map50_95", res.matrix->reports[i].map50_95}});
    m["avg_map50"] = res.matrix->avg_map50;
    m["avg_map50_95"] = res.matrix->avg_map50_95;
    j["session_matrix"] = m;
  }
  j["runs"] = json::object();
  for (const auto& [label, run] : res.runs) {
    json r;
    r["best_epoch"] = run.best_epoch;
    r["best_metric"] = run.best_metric;
    r["epochs"] = run.history.size();
    r["checkpoint"] = run.checkpoint_path;
    r["train_map50"] = run.train_report.map50;
    j["runs"][label] = r;
  }
  return j;
}

inline void write_history_csv(const std::string& path,
                              const std::vector<std::pair<std::string, RunResult>>& runs) {
  std::ofstream f(path);
  check<io_error>(static_cast<bool>(f), "cannot write " + path);
  f << "run,epoch,total,cls,box,reg,val_map50,val_map50_95\n";
  for (const auto& [label, run] : runs)
    for (const auto& e : run.history)
      f << label << "," << e.epoch << "," << e.total << "," << e.cls << "," << e.box << ","
        << e.reg << "," << e.val_map50 << "," << e.val_map50_95 << "\n";
}

}  // namespace xdet
