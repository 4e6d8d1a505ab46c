#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "xdet/rtdetr/rtdetr.hpp"

using namespace xdet;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

RtDetrConfig tiny_cfg(Index nc = 3) {
  RtDetrConfig cfg;
  cfg.num_classes = nc;
  cfg.hidden_dim = 16;
  cfg.num_queries = 8;
  cfg.decoder_layers = 3;
  cfg.heads = 2;
  return cfg;
}

template <typename T>
std::array<FeatureMap<T>, 3> tiny_taps(Index b, Rng& rng, Index c8 = 12, Index c16 = 20,
                                       Index c32 = 24) {
  return {FeatureMap<T>{make_leaf(random_tensor<T>({b, c8, 8, 8}, rng)), 8},
          FeatureMap<T>{make_leaf(random_tensor<T>({b, c16, 4, 4}, rng)), 16},
          FeatureMap<T>{make_leaf(random_tensor<T>({b, c32, 2, 2}, rng)), 32}};
}

// exhaustive minimum over all injections gt -> query
double brute_force_min_cost(const std::vector<double>& cost, int nr, int nc) {
  std::vector<int> cols(static_cast<size_t>(nc));
  std::iota(cols.begin(), cols.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> pick(static_cast<size_t>(nr), -1);
  std::vector<bool> used(static_cast<size_t>(nc), false);
  std::function<void(int, double)> rec = [&](int row, double acc) {
    if (row == nr) {
      best = std::min(best, acc);
      return;
    }
    for (int c = 0; c < nc; ++c) {
      if (used[static_cast<size_t>(c)]) continue;
      used[static_cast<size_t>(c)] = true;
      rec(row + 1, acc + cost[static_cast<size_t>(row) * nc + c]);
      used[static_cast<size_t>(c)] = false;
    }
  };
  rec(0, 0.0);
  return best;
}

}  // namespace

TEST_CASE("hybrid encoder fuses three scales at a common width") {
  Rng rng(3);
  auto cfg = tiny_cfg();
  HybridEncoder<float> enc(12, 20, 24, cfg, rng);
  NoGradGuard ng;
  auto taps = tiny_taps<float>(2, rng);
  auto fused = enc.forward(taps[0], taps[1], taps[2]);
  CHECK(fused[0].data.shape() == Shape{2, 16, 8, 8});
  CHECK(fused[1].data.shape() == Shape{2, 16, 4, 4});
  CHECK(fused[2].data.shape() == Shape{2, 16, 2, 2});
  CHECK(fused[0].stride == 8);
  CHECK(fused[2].stride == 32);

  auto bad = taps;
  bad[0].stride = 16;
  CHECK_THROWS_AS(enc.forward(bad[0], taps[1], taps[2]), input_error);

  RtDetrConfig wrong = cfg;
  wrong.encoder_attention_stride = 8;
  CHECK_THROWS_AS(RtDetrHead<float>(12, 20, 24, wrong, rng), config_error);
}

TEST_CASE("encoder is batch independent") {
  Rng rng(5);
  auto cfg = tiny_cfg();
  HybridEncoder<float> enc(12, 20, 24, cfg, rng);
  NoGradGuard ng;
  Rng data_rng(7);
  Tensor<float> t8 = random_tensor<float>({1, 12, 8, 8}, data_rng);
  Tensor<float> t16 = random_tensor<float>({1, 20, 4, 4}, data_rng);
  Tensor<float> t32 = random_tensor<float>({1, 24, 2, 2}, data_rng);
  auto tile = [](const Tensor<float>& t, Index n) {
    Shape s = t.shape();
    s[0] = n;
    Tensor<float> out(s);
    for (Index i = 0; i < n; ++i)
      std::copy(t.data(), t.data() + t.size(), out.data() + i * t.size());
    return out;
  };
  auto one = enc.forward({make_leaf(t8), 8}, {make_leaf(t16), 16}, {make_leaf(t32), 32});
  auto three = enc.forward({make_leaf(tile(t8, 3)), 8}, {make_leaf(tile(t16, 3)), 16},
                           {make_leaf(tile(t32, 3)), 32});
  for (int s = 0; s < 3; ++s) {
    const auto& a = one[static_cast<size_t>(s)].data.val();
    const auto& b = three[static_cast<size_t>(s)].data.val();
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < a.size(); ++j)
        CHECK(b[i * a.size() + j] == doctest::Approx(a[j]).epsilon(1e-6));
  }
}

TEST_CASE("query selection ranks by maximum class logit") {
  Rng rng(9);
  auto cfg = tiny_cfg();
  RtDetrHead<float> head(12, 20, 24, cfg, rng);
  NoGradGuard ng;
  auto taps = tiny_taps<float>(1, rng);
  auto mem = head.encode(taps[0], taps[1], taps[2]);
  const Index n = mem.tokens.dim(1);
  CHECK(n == 64 + 16 + 4);

  SUBCASE("top-k matches a full sort") {
    Rng srng(11);
    std::vector<double> scores(static_cast<size_t>(n));
    for (auto& s : scores) s = srng.uniform(-5, 5);
    auto top = topk_cells(scores, 5);
    std::vector<Index> order(scores.size());
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return scores[a] > scores[b]; });
    for (int i = 0; i < 5; ++i) CHECK(top[static_cast<size_t>(i)] == order[static_cast<size_t>(i)]);
  }

  SUBCASE("K equal to all cells selects everything") {
    auto q = head.select_queries(mem, n);
    CHECK(q.content.shape() == Shape{1, n, 16});
    CHECK(q.refs.shape() == Shape{1, n, 4});
    for (Index i = 0; i < q.refs.size(); ++i) {
      CHECK(q.refs.val()[i] >= 0.0f);
      CHECK(q.refs.val()[i] <= 1.0f);
    }
  }

  SUBCASE("K exceeding the cell count is rejected") {
    CHECK_THROWS_AS(head.select_queries(mem, n + 1), input_error);
  }
}

TEST_CASE("decoder emits one entry per layer and preserves zero-init anchors") {
  Rng rng(13);
  auto cfg = tiny_cfg();
  RtDetrHead<float> head(12, 20, 24, cfg, rng);
  head.box_head().zero_offsets();
  NoGradGuard ng;
  auto taps = tiny_taps<float>(2, rng);
  auto mem = head.encode(taps[0], taps[1], taps[2]);
  auto queries = head.select_queries(mem, cfg.num_queries);
  auto out = head.decode_queries(queries, mem, 3);
  REQUIRE(out.boxes.size() == 3);
  REQUIRE(out.class_logits.size() == 3);
  CHECK(out.class_logits[0].shape() == Shape{2, 8, 3});
  CHECK(out.boxes[2].shape() == Shape{2, 8, 4});

  // the box delta head is zero-initialized, so each layer's boxes equal the
  // initial cell-geometry anchors
  for (size_t l = 0; l < 3; ++l)
    for (Index i = 0; i < out.boxes[l].size(); ++i)
      CHECK(out.boxes[l].val()[i] == doctest::Approx(queries.refs.val()[i]).epsilon(1e-5));

  CHECK_THROWS_AS(head.decode_queries(queries, mem, 0), input_error);
}

TEST_CASE("decoder boxes stay inside the unit interval across random models") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    auto cfg = tiny_cfg();
    cfg.decoder_layers = 2;
    cfg.num_queries = 4;
    RtDetrHead<float> head(6, 8, 10, cfg, rng);
    // push the box head away from zero so refinement actually moves
    for (auto& p : head.named_parameters("h"))
      if (p.name.find("box_head") != std::string::npos)
        for (Index i = 0; i < p.param->size(); ++i)
          p.param->val()[i] = static_cast<float>(rng.uniform(-2, 2));
    NoGradGuard ng;
    auto taps = tiny_taps<float>(1, rng, 6, 8, 10);
    auto out = head.forward(taps[0], taps[1], taps[2]);
    for (const auto& boxes : out.boxes)
      for (Index i = 0; i < boxes.size(); ++i) {
        CHECK(boxes.val()[i] >= 0.0f);
        CHECK(boxes.val()[i] <= 1.0f);
      }
  }
}

TEST_CASE("hungarian matching basics") {
  SUBCASE("zero ground truths give an empty matching") {
    Tensor<double> logits(Shape{3, 2});
    Tensor<double> boxes(Shape{3, 4});
    CHECK(hungarian_match(logits, boxes, {}).empty());
  }

  SUBCASE("the cheaper query wins a single gt") {
    Tensor<double> logits = Tensor<double>::from({2, 2}, {4.0, -4.0, -4.0, -4.0});
    Tensor<double> boxes =
        Tensor<double>::from({2, 4}, {0.5, 0.5, 0.2, 0.2, 0.9, 0.9, 0.05, 0.05});
    std::vector<NormAnnotation> gts = {{0.5, 0.5, 0.2, 0.2, 0}};
    auto m = hungarian_match(logits, boxes, gts);
    REQUIRE(m.size() == 1);
    CHECK(m[0] == 0);
  }

  SUBCASE("more gts than queries is an error") {
    Tensor<double> logits(Shape{1, 2});
    Tensor<double> boxes(Shape{1, 4});
    std::vector<NormAnnotation> gts(2, NormAnnotation{0.5, 0.5, 0.1, 0.1, 0});
    CHECK_THROWS_AS(hungarian_match(logits, boxes, gts), input_error);
  }
}

TEST_CASE("hungarian equals brute force on random instances") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int nr = 1 + static_cast<int>(rng.randint(0, 5));
    const int nc = nr + static_cast<int>(rng.randint(0, 8 - nr));
    std::vector<double> cost(static_cast<size_t>(nr * nc));
    for (auto& c : cost) c = rng.uniform(-3, 3);
    auto assign = solve_assignment(cost, nr, nc);
    // valid injection
    std::vector<bool> used(static_cast<size_t>(nc), false);
    for (int r = 0; r < nr; ++r) {
      REQUIRE(assign[static_cast<size_t>(r)] >= 0);
      REQUIRE(assign[static_cast<size_t>(r)] < nc);
      CHECK_FALSE(used[static_cast<size_t>(assign[static_cast<size_t>(r)])]);
      used[static_cast<size_t>(assign[static_cast<size_t>(r)])] = true;
    }
    const double got = assignment_cost(cost, nc, assign);
    const double want = brute_force_min_cost(cost, nr, nc);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("matching is permutation equivariant over the gt list") {
  Rng rng(19);
  Tensor<double> logits = random_tensor<double>({6, 3}, rng, -2, 2);
  Tensor<double> boxes = random_tensor<double>({6, 4}, rng, 0.2, 0.8);
  std::vector<NormAnnotation> gts = {{0.3, 0.3, 0.2, 0.2, 0},
                                     {0.7, 0.6, 0.3, 0.25, 2},
                                     {0.5, 0.8, 0.15, 0.1, 1}};
  auto m1 = hungarian_match(logits, boxes, gts);
  std::vector<NormAnnotation> shuffled = {gts[2], gts[0], gts[1]};
  auto m2 = hungarian_match(logits, boxes, shuffled);
  std::set<std::pair<int, int>> pairs1, pairs2;
  for (size_t g = 0; g < gts.size(); ++g) pairs1.insert({m1[g], gts[g].class_id});
  for (size_t g = 0; g < shuffled.size(); ++g) pairs2.insert({m2[g], shuffled[g].class_id});
  CHECK(pairs1 == pairs2);
}

TEST_CASE("detr loss limit cases and oracle") {
  Rng rng(23);
  RtDetrConfig cfg = tiny_cfg(3);
  const Index b = 2, k = 5, layers = 2;
  cfg.decoder_layers = layers;

  auto make_outputs = [&](bool requires_grad) {
    DecoderOutput<double> out;
    for (Index l = 0; l < layers; ++l) {
      out.class_logits.push_back(
          Var<double>(random_tensor<double>({b, k, 3}, rng, -3, 3), requires_grad));
      out.boxes.push_back(
          Var<double>(random_tensor<double>({b, k, 4}, rng, 0.2, 0.8), requires_grad));
    }
    return out;
  };

  std::vector<std::vector<NormAnnotation>> gts(2);
  gts[0] = {{0.4, 0.4, 0.2, 0.3, 1}, {0.7, 0.7, 0.2, 0.2, 0}};
  gts[1] = {{0.5, 0.5, 0.4, 0.4, 2}};

  SUBCASE("zero gts leaves only the background classification term") {
    auto out = make_outputs(false);
    std::vector<std::vector<NormAnnotation>> empty(2);
    std::vector<std::vector<std::vector<int>>> match(layers,
                                                     std::vector<std::vector<int>>(2));
    auto loss = detr_loss(out, empty, match, cfg);
    CHECK(loss.box.val()[0] == 0.0);
    CHECK(loss.reg.val()[0] == 0.0);
    CHECK(loss.cls.val()[0] > 0.0);
  }

  SUBCASE("perfectly matched boxes have zero box losses") {
    auto out = make_outputs(false);
    std::vector<std::vector<std::vector<int>>> match(
        layers, {{0, 1}, {2}});
    // write gt boxes into the matched query slots on every layer
    for (Index l = 0; l < layers; ++l) {
      auto& boxes = out.boxes[static_cast<size_t>(l)];
      auto set_box = [&](Index img, Index q, const NormAnnotation& a) {
        boxes.val().at({img, q, 0}) = a.cx;
        boxes.val().at({img, q, 1}) = a.cy;
        boxes.val().at({img, q, 2}) = a.w;
        boxes.val().at({img, q, 3}) = a.h;
      };
      set_box(0, 0, gts[0][0]);
      set_box(0, 1, gts[0][1]);
      set_box(1, 2, gts[1][0]);
    }
    auto loss = detr_loss(out, gts, match, cfg);
    CHECK(std::abs(loss.box.val()[0]) <= 1e-6);
    CHECK(std::abs(loss.reg.val()[0]) <= 1e-6);
  }

  SUBCASE("random case matches a straight-line oracle") {
    auto out = make_outputs(false);
    std::vector<std::vector<std::vector<int>>> match(layers, {{3, 0}, {4}});
    auto loss = detr_loss(out, gts, match, cfg);

    double cls_sum = 0, l1_sum = 0, giou_sum = 0;
    const int total_gt = 3;
    for (Index l = 0; l < layers; ++l) {
      const auto& logits = out.class_logits[static_cast<size_t>(l)].val();
      const auto& boxes = out.boxes[static_cast<size_t>(l)].val();
      for (Index i = 0; i < b; ++i)
        for (Index q = 0; q < k; ++q)
          for (Index c = 0; c < 3; ++c) {
            double t = 0;
            for (size_t g = 0; g < gts[static_cast<size_t>(i)].size(); ++g)
              if (match[static_cast<size_t>(l)][static_cast<size_t>(i)][g] == q &&
                  gts[static_cast<size_t>(i)][g].class_id == c)
                t = 1.0;
            const double x = logits.at({i, q, c});
            const double bce = std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
            const double pt = std::exp(-bce);
            const double at = t > 0.5 ? cfg.focal_alpha : 1.0 - cfg.focal_alpha;
            cls_sum += at * (1 - pt) * (1 - pt) * bce;
          }
      for (Index i = 0; i < b; ++i)
        for (size_t g = 0; g < gts[static_cast<size_t>(i)].size(); ++g) {
          const int q = match[static_cast<size_t>(l)][static_cast<size_t>(i)][g];
          const auto& a = gts[static_cast<size_t>(i)][g];
          const double pcx = boxes.at({i, q, 0}), pcy = boxes.at({i, q, 1});
          const double pw = boxes.at({i, q, 2}), ph = boxes.at({i, q, 3});
          l1_sum += std::abs(pcx - a.cx) + std::abs(pcy - a.cy) + std::abs(pw - a.w) +
                    std::abs(ph - a.h);
          giou_sum += 1.0 - giou_scalar(cxcywh_to_xyxy(pcx, pcy, pw, ph),
                                        cxcywh_to_xyxy(a.cx, a.cy, a.w, a.h));
        }
    }
    CHECK(loss.cls.val()[0] == doctest::Approx(cls_sum / total_gt).epsilon(1e-9));
    CHECK(loss.reg.val()[0] == doctest::Approx(l1_sum / total_gt).epsilon(1e-9));
    CHECK(loss.box.val()[0] == doctest::Approx(giou_sum / total_gt).epsilon(1e-9));
    const double total = cfg.loss_cls * cls_sum / 3 + cfg.loss_l1 * l1_sum / 3 +
                         cfg.loss_giou * giou_sum / 3;
    CHECK(std::abs(loss.total.val()[0] - total) < 1e-6);
  }

  SUBCASE("loss gradient matches finite differences") {
    auto out = make_outputs(true);
    std::vector<std::vector<std::vector<int>>> match(layers, {{3, 0}, {4}});
    auto loss_value = [&] { return detr_loss(out, gts, match, cfg).total; };
    Var<double> total = loss_value();
    backward(total);
    const double h = 1e-6;
    for (Index l = 0; l < layers; ++l)
      for (Var<double>* v : {&out.class_logits[static_cast<size_t>(l)],
                             &out.boxes[static_cast<size_t>(l)]}) {
        for (Index probe = 0; probe < 4; ++probe) {
          const Index idx = (probe * 131) % v->size();
          const double orig = v->val()[idx];
          v->val()[idx] = orig + h;
          const double up = loss_value().val()[0];
          v->val()[idx] = orig - h;
          const double dn = loss_value().val()[0];
          v->val()[idx] = orig;
          const double num = (up - dn) / (2 * h);
          const double ana = v->grad().defined() ? v->grad()[idx] : 0.0;
          CHECK(std::abs(num - ana) <= 1e-5 * std::max({1.0, std::abs(num), std::abs(ana)}));
        }
      }
  }
}

TEST_CASE("postprocess thresholds, caps, and scales") {
  Tensor<float> logits(Shape{1, 3, 2});
  Tensor<float> boxes(Shape{1, 3, 4});
  // query 0: strong class 1; query 1: weak; query 2: medium class 0
  logits.at({0, 0, 0}) = -4;
  logits.at({0, 0, 1}) = 3;
  logits.at({0, 1, 0}) = -6;
  logits.at({0, 1, 1}) = -6;
  logits.at({0, 2, 0}) = 1;
  logits.at({0, 2, 1}) = -2;
  const float q0[4] = {0.5f, 0.5f, 0.25f, 0.5f};
  for (int i = 0; i < 4; ++i) boxes.at({0, 0, static_cast<Index>(i)}) = q0[i];
  for (int i = 0; i < 4; ++i) boxes.at({0, 1, static_cast<Index>(i)}) = 0.3f;
  for (int i = 0; i < 4; ++i) boxes.at({0, 2, static_cast<Index>(i)}) = 0.6f;

  auto dets = detr_postprocess(make_leaf(logits), make_leaf(boxes), 0.5, 100, 640, 640);
  REQUIRE(dets[0].size() == 2);
  CHECK(dets[0][0].class_id == 1);
  // cx=0.5,w=0.25 on a 640 image -> x1=240, x2=400; cy=0.5,h=0.5 -> y1=160,y2=480
  CHECK(dets[0][0].box.x1 == doctest::Approx(240.0));
  CHECK(dets[0][0].box.x2 == doctest::Approx(400.0));
  CHECK(dets[0][0].box.y1 == doctest::Approx(160.0));
  CHECK(dets[0][0].box.y2 == doctest::Approx(480.0));

  auto none = detr_postprocess(make_leaf(logits), make_leaf(boxes), 1.0, 100, 640, 640);
  CHECK(none[0].empty());

  auto capped = detr_postprocess(make_leaf(logits), make_leaf(boxes), 0.0, 1, 640, 640);
  CHECK(capped[0].size() == 1);
  CHECK(capped[0][0].class_id == 1);
}

TEST_CASE("full rtdetr head runs under gradients") {
  Rng rng(31);
  auto cfg = tiny_cfg();
  RtDetrHead<float> head(12, 20, 24, cfg, rng);
  FeatureMap<float> t8{Var<float>(random_tensor<float>({1, 12, 8, 8}, rng), true), 8};
  FeatureMap<float> t16{Var<float>(random_tensor<float>({1, 20, 4, 4}, rng), true), 16};
  FeatureMap<float> t32{Var<float>(random_tensor<float>({1, 24, 2, 2}, rng), true), 32};
  auto out = head.forward(t8, t16, t32);
  Var<float> probe = add(sum(out.class_logits.back()), sum(out.boxes.back()));
  backward(probe);
  int with_grad = 0, total = 0;
  for (auto& p : head.named_parameters("head")) {
    ++total;
    if (p.param->grad().defined() && p.param->grad().arr().abs().sum() > 0) ++with_grad;
  }
  CHECK(total > 0);
  // only the encoder scoring head is outside the gradient path
  CHECK(with_grad >= total - 2);
}
