#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ltn/synthbench/pipeline.hpp"
#include "oracles.hpp"

using namespace ltn;
using namespace ltn::synth;
using ltn::testing::param_grad_check;
using ltn::testing::perturb;
using ltn::testing::random_tensor;

namespace {

SynthConfig small_synth(int train, int val) {
  SynthConfig c;
  c.train_size = train;
  c.val_size = val;
  return c;
}

BoxSpec box(double cx, double cy, double scale, int category = 0) { return {cx, cy, scale, 1.0, category}; }

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Pooled window means straight from the definition.
double naive_logit(const ToyDetector<double>& det, const Tensor<double>& f, int y, int x, int a) {
  const auto& s = det.anchors()[static_cast<std::size_t>(a)];
  auto& self = const_cast<ToyDetector<double>&>(det);
  const auto& w = self.parameters()[0]->value;
  const auto& b = self.parameters()[1]->value;
  const int H = f.dim(0), W = f.dim(1), C = f.dim(2);
  double z = b[static_cast<std::size_t>(a)];
  for (int j = 0; j < kPoolWindows; ++j) {
    const auto& r = s.windows[static_cast<std::size_t>(j)];
    std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
    int count = 0;
    for (int yy = y + r.dy0; yy <= y + r.dy1; ++yy)
      for (int xx = x + r.dx0; xx <= x + r.dx1; ++xx) {
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
        ++count;
        for (int c = 0; c < C; ++c) mean[static_cast<std::size_t>(c)] += f.at(yy, xx, c);
      }
    if (count == 0) continue;
    for (int c = 0; c < C; ++c) {
      z += w[(static_cast<std::size_t>(s.group) * kPoolWindows + j) * C + c] * mean[static_cast<std::size_t>(c)] / count;
    }
  }
  return z;
}

struct TinyBench {
  BenchmarkConfig config;
  SyntheticDataset dataset;
  PreparedData data;
};

const TinyBench& tiny_bench() {
  static const TinyBench bench = [] {
    TinyBench b;
    b.config.synth = small_synth(6, 4);
    b.dataset = generate_dataset(b.config.synth, 11);
    b.data = prepare_data(b.dataset, b.config);
    return b;
  }();
  return bench;
}

std::vector<Tensor<float>> random_layouts(std::size_t n, const BenchmarkConfig& config, Rng& rng) {
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(random_tensor({config.grid.height, config.grid.width, config.mixture.num_channels()}, rng, 0, 1)
                      .cast<float>());
  }
  return out;
}

}  // namespace

TEST_CASE("generation is byte-identical for a seed and differs across seeds") {
  const auto c = small_synth(5, 3);
  const auto a = generate_dataset(c, 7), b = generate_dataset(c, 7), other = generate_dataset(c, 8);
  REQUIRE(a.train.size() == 5);
  REQUIRE(a.val.size() == 3);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].image == b.train[i].image);
    CHECK(a.train[i].annotations == b.train[i].annotations);
    CHECK(a.train[i].distractors == b.train[i].distractors);
  }
  CHECK(a.val[0].id == 5);
  CHECK_FALSE(a.train[0].image == other.train[0].image);
}

TEST_CASE("zero object rates give empty annotations") {
  auto c = small_synth(4, 2);
  c.car_rate = 0.0;
  c.pedestrian_rate = 0.0;
  c.distractor_rate = 0.0;
  const auto d = generate_dataset(c, 3);
  for (const auto* split : {&d.train, &d.val})
    for (const auto& s : *split) {
      CHECK(s.annotations.empty());
      CHECK(s.distractors.empty());
    }
}

TEST_CASE("object scale grows with the image row of the object's base") {
  const auto d = generate_dataset(small_synth(700, 1), 5);
  std::vector<double> scale, row;
  for (const auto& s : d.train)
    for (const auto& a : s.annotations) {
      if (a.category != kCarCategory) continue;
      scale.push_back(a.scale);
      row.push_back(a.cy + 0.5 * a.height());
    }
  REQUIRE(scale.size() >= 1000);
  CHECK(pearson(scale, row) > 0.5);
}

TEST_CASE("generated objects stay inside the image and do not overlap") {
  const auto d = generate_dataset(small_synth(50, 1), 9);
  for (const auto& s : d.train) {
    std::vector<BoxSpec> all = s.annotations;
    all.insert(all.end(), s.distractors.begin(), s.distractors.end());
    for (std::size_t i = 0; i < all.size(); ++i) {
      CHECK(all[i].left() >= 0.0);
      CHECK(all[i].top() >= 0.0);
      CHECK(all[i].left() + all[i].width() <= 192.0);
      CHECK(all[i].top() + all[i].height() <= 128.0);
      for (std::size_t j = i + 1; j < all.size(); ++j) CHECK(iou(all[i], all[j]) == 0.0);
    }
  }
}

TEST_CASE("synthetic configuration validation") {
  auto c = small_synth(1, 1);
  c.num_archetypes = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_synth(1, 1);
  c.car_rate = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  BenchmarkConfig b;
  b.synth.image_w = 100;
  CHECK_THROWS_AS(b.validate(), ConfigError);
}

TEST_CASE("backbone levels have the expected shapes") {
  const auto d = generate_dataset(small_synth(1, 1), 2);
  const auto f = compute_backbone(d.train[0].image);
  CHECK(f.c2.shape() == Shape{32, 48, kBackboneChannels});
  CHECK(f.c3.shape() == Shape{16, 24, kBackboneChannels});
  CHECK(f.c5.shape() == Shape{4, 6, kBackboneChannels});
  CHECK(f.c6.shape() == Shape{2, 3, kBackboneChannels});
  CHECK(appearance_descriptor(d.train[0].image).size() == 96);
}

TEST_CASE("iou examples") {
  CHECK(iou(box(0.5, 0.5, 1.0), box(1.0, 0.5, 1.0)) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(box(3, 3, 2), box(3, 3, 2)) == 1.0);
  CHECK(iou(box(0, 0, 1), box(5, 5, 1)) == 0.0);
  CHECK(iou(box(0.5, 0.5, 1.0), box(1.5, 0.5, 1.0)) == 0.0);
  CHECK(iou(box(0, 0, 2), box(0, 0, 1)) == doctest::Approx(0.25));
}

TEST_CASE("nms keeps one of two identical boxes and never suppresses across categories") {
  const auto kept = non_maximum_suppression({{box(10, 10, 8), 0.9}, {box(10, 10, 8), 0.8}}, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);
  CHECK(non_maximum_suppression({{box(10, 10, 8, 0), 0.9}, {box(10, 10, 8, 1), 0.8}}, 0.5).size() == 2);
  // IoU 1/3 survives a 0.5 threshold.
  CHECK(non_maximum_suppression({{box(0.5, 0.5, 1.0), 0.4}, {box(1.0, 0.5, 1.0), 0.7}}, 0.5).size() == 2);
}

TEST_CASE("average precision examples") {
  const std::vector<std::vector<BoxSpec>> truth{{box(10, 10, 8)}};
  CHECK(evaluate_ap({{{box(10, 10, 8), 0.9}}}, truth, 0.5, 1).mean == 1.0);
  CHECK(evaluate_ap({{{box(50, 50, 8), 0.9}, {box(10, 10, 8), 0.5}}}, truth, 0.5, 1).mean == 0.5);
  CHECK(evaluate_ap({{}}, truth, 0.5, 1).mean == 0.0);
  // A duplicate of a matched detection is a false positive after the match.
  CHECK(evaluate_ap({{{box(10, 10, 8), 0.9}, {box(10, 10, 8), 0.5}}}, truth, 0.5, 1).mean == 1.0);
  const auto r = evaluate_ap({{{box(10, 10, 8), 0.9}, {box(10, 10, 8, 1), 0.9}}}, truth, 0.5, 2);
  CHECK(r.per_category == std::vector<double>{1.0, 0.0});
  CHECK(r.mean == 1.0);
  CHECK_THROWS_AS(evaluate_ap({}, truth, 0.5, 1), ContractViolation);
}

TEST_CASE("average precision equals brute-force enumeration on random instances") {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto inst = ltn::testing::random_ap_instance(rng);
    for (double threshold : {0.3, 0.5, 0.75}) {
      const auto r = evaluate_ap(inst.detections, inst.truth, threshold, 2);
      for (int c = 0; c < 2; ++c) {
        REQUIRE(r.per_category[static_cast<std::size_t>(c)] ==
                ltn::testing::brute_force_ap(inst.detections, inst.truth, threshold, c));
      }
    }
  }
}

TEST_CASE("anchor shapes cover the scale bins with nested windows") {
  const MixtureSpec spec;
  const DetectorConfig config;
  const auto anchors = make_anchor_shapes(config, spec, 4.0);
  CHECK(anchors.size() == static_cast<std::size_t>(spec.num_channels() * config.sub_anchors));
  for (const auto& a : anchors) {
    CHECK(spec.channel(a.category, std::clamp(static_cast<int>(std::upper_bound(spec.scale_edges.begin(),
                                                                                 spec.scale_edges.end(), a.scale) -
                                                                spec.scale_edges.begin()),
                                               0, spec.num_scale_bins() - 1),
                       0) == a.group);
    const auto &core = a.windows[0], &bx = a.windows[1], &ctx = a.windows[2];
    CHECK(ctx.dy0 <= bx.dy0);
    CHECK(bx.dy0 <= core.dy0);
    CHECK(core.dx1 <= bx.dx1);
    CHECK(bx.dx1 <= ctx.dx1);
  }
  DetectorConfig bad;
  bad.aspects = {1.0};
  CHECK_THROWS_AS(bad.validate(spec), ConfigError);
}

TEST_CASE("detector logits match pooled window means computed directly") {
  Rng rng(4);
  ToyDetector<double> det(DetectorConfig{}, MixtureSpec{}, 3, 4.0);
  perturb(det.parameters(), rng, 0.3);
  const auto f = random_tensor({9, 11, 3}, rng);
  const auto z = det.logit_values(f);
  REQUIRE(z.shape() == Shape{9, 11, det.num_anchors()});
  double worst = 0.0;
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 11; ++x)
      for (int a = 0; a < det.num_anchors(); ++a) worst = std::max(worst, std::abs(z.at(y, x, a) - naive_logit(det, f, y, x, a)));
  CHECK(worst < 1e-12);
  Tape<double> tape;
  CHECK_THROWS_AS(det.logits(tape, tape.constant(random_tensor({4, 4, 2}, rng))), ContractViolation);
}

TEST_CASE("detector gradients match central differences") {
  Rng rng(6);
  ToyDetector<double> det(DetectorConfig{}, MixtureSpec{}, 3, 4.0);
  perturb(det.parameters(), rng, 0.3);
  const auto f = random_tensor({7, 9, 3}, rng);
  const auto mix = random_tensor({7, 9, det.num_anchors()}, rng);
  auto dense = [&](Tape<double>& t, Var features) {
    return nn::sum(t, nn::multiply(t, det.logits(t, features), t.constant(mix)));
  };
  const auto in = grad_check([&](Tape<double>& t, const std::vector<Var>& v) { return dense(t, v[0]); }, {f});
  CHECK(in.max_relative_error < 1e-4);
  const auto params = param_grad_check(det.parameters(), [&](Tape<double>& t) { return dense(t, t.constant(f)); });
  CHECK(params.max_relative_error < 1e-4);

  // Sparse output gradient as in training: logistic loss on a few anchors.
  const std::vector<int> idx{3, 50, 400, 1000, 1500};
  const std::vector<double> tgt{1, 0, 1, 0, 0};
  auto sparse = [&](Tape<double>& t, Var features) {
    return nn::sigmoid_cross_entropy<double>(t, det.logits(t, features), idx, tgt);
  };
  CHECK(grad_check([&](Tape<double>& t, const std::vector<Var>& v) { return sparse(t, v[0]); }, {f}).max_relative_error <
        1e-4);
  CHECK(param_grad_check(det.parameters(), [&](Tape<double>& t) { return sparse(t, t.constant(f)); })
            .max_relative_error < 1e-4);
}

TEST_CASE("an anchor equal to a ground-truth box is labelled positive and far anchors negative") {
  const MixtureSpec spec;
  const DetectorConfig config;
  const auto anchors = make_anchor_shapes(config, spec, 4.0);
  const int a = 4;
  const BoxSpec truth{(5 + 0.5) * 4.0, (6 + 0.5) * 4.0, anchors[a].scale, anchors[a].aspect, anchors[a].category};
  const auto labels = label_anchors(anchors, 32, 48, 4.0, {truth}, config);
  const int A = static_cast<int>(anchors.size());
  CHECK(labels[static_cast<std::size_t>((6 * 48 + 5) * A + a)] == 1);
  CHECK(labels[static_cast<std::size_t>((30 * 48 + 40) * A + a)] == 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1) continue;
    const int cell = static_cast<int>(i) / A, k = static_cast<int>(i) % A;
    const BoxSpec b{(cell % 48 + 0.5) * 4.0, (cell / 48 + 0.5) * 4.0, anchors[static_cast<std::size_t>(k)].scale,
                    anchors[static_cast<std::size_t>(k)].aspect, anchors[static_cast<std::size_t>(k)].category};
    CHECK(iou(b, truth) >= config.positive_iou);
  }
}

TEST_CASE("anchor sampling respects the quotas and skips ignored anchors") {
  Rng rng(8);
  const DetectorConfig config;
  std::vector<signed char> labels(5000, 0);
  std::vector<float> logits(5000);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double u = rng.uniform();
    labels[i] = u < 0.05 ? 1 : (u < 0.2 ? -1 : 0);
    logits[i] = static_cast<float>(rng.normal());
  }
  Rng r1(3), r2(3);
  const auto s = sample_anchors(labels, logits, config, r1);
  CHECK(s.indices == sample_anchors(labels, logits, config, r2).indices);
  CHECK(static_cast<int>(s.indices.size()) == config.anchors_per_image);
  int pos = 0;
  for (std::size_t k = 0; k < s.indices.size(); ++k) {
    const auto l = labels[static_cast<std::size_t>(s.indices[k])];
    CHECK(l != -1);
    CHECK(s.targets[k] == (l == 1 ? 1.0 : 0.0));
    pos += l == 1;
  }
  CHECK(pos == config.max_positives);
  // The highest-logit negative is always taken.
  int hardest = -1;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 0 && (hardest < 0 || logits[i] > logits[static_cast<std::size_t>(hardest)])) hardest = static_cast<int>(i);
  CHECK(std::find(s.indices.begin(), s.indices.end(), hardest) != s.indices.end());
}

TEST_CASE("an untrained detector emits nothing above threshold") {
  ToyDetector<float> det(DetectorConfig{}, MixtureSpec{}, 8, 4.0);
  const auto& d = tiny_bench().data.val[0];
  CHECK(decode_detections(det, det.logit_values(d.features.c2)).empty());
  DetectorConfig strict;
  strict.score_threshold = 0.999;
  ToyDetector<float> trained(strict, MixtureSpec{}, 8, 4.0);
  Rng rng(2);
  for (auto* p : trained.parameters())
    for (auto& v : p->value.data()) v = static_cast<float>(rng.uniform(-0.05, 0.05));
  CHECK(decode_detections(trained, trained.logit_values(d.features.c2)).empty());
}

TEST_CASE("decoded detections are sorted, capped and suppressed") {
  DetectorConfig config;
  config.score_threshold = 0.0;
  ToyDetector<float> det(config, MixtureSpec{}, 8, 4.0);
  det.parameters()[1]->value.data()[0] = 5.0f;
  const auto dets = decode_detections(det, det.logit_values(tiny_bench().data.val[0].features.c2));
  CHECK(static_cast<int>(dets.size()) <= config.max_detections);
  for (std::size_t i = 1; i < dets.size(); ++i) CHECK(dets[i - 1].score >= dets[i].score);
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = i + 1; j < dets.size(); ++j)
      if (dets[i].box.category == dets[j].box.category) CHECK(iou(dets[i].box, dets[j].box) <= config.nms_iou);
}

TEST_CASE("pass-through early fusion and zero-alpha late fusion reproduce the baseline") {
  const auto& b = tiny_bench();
  auto det = make_detector(b.config);
  Rng rng(12);
  for (auto* p : det.parameters())
    for (auto& v : p->value.data()) v += static_cast<float>(rng.uniform(-0.3, 0.3));
  const auto layouts = random_layouts(b.data.val.size(), b.config, rng);
  const auto base = run_detector(det, nullptr, b.data.val, nullptr, std::nullopt, b.config);
  EarlyFusion<float> fusion(kBackboneChannels, b.config.mixture.num_channels(), EarlyFusionMethod::conv1x1);
  CHECK(run_detector(det, &fusion, b.data.val, &layouts, std::nullopt, b.config) == base);
  CHECK(run_detector(det, nullptr, b.data.val, &layouts, 0.0, b.config) == base);

  // Layout block trained away from zero, feature block still the identity: a
  // zero layout leaves the baseline untouched.
  auto& w = fusion.parameters()[0]->value;
  for (int ci = kBackboneChannels; ci < kBackboneChannels + b.config.mixture.num_channels(); ++ci)
    for (int co = 0; co < kBackboneChannels; ++co)
      w[static_cast<std::size_t>(ci) * kBackboneChannels + co] = static_cast<float>(rng.uniform(-1, 1));
  std::vector<Tensor<float>> zeros(layouts.size(), Tensor<float>(layouts[0].shape()));
  CHECK(run_detector(det, &fusion, b.data.val, &zeros, std::nullopt, b.config) == base);
  CHECK_FALSE(run_detector(det, &fusion, b.data.val, &layouts, std::nullopt, b.config) == base);
}

TEST_CASE("feature normalizers standardize training channels") {
  const auto& b = tiny_bench();
  std::vector<double> sum(kBackboneChannels, 0.0), sq(kBackboneChannels, 0.0);
  double n = 0;
  for (const auto& s : b.data.train) {
    const auto& t = s.features.c2;
    for (int y = 0; y < t.dim(0); ++y)
      for (int x = 0; x < t.dim(1); ++x) {
        for (int c = 0; c < kBackboneChannels; ++c) {
          sum[static_cast<std::size_t>(c)] += t.at(y, x, c);
          sq[static_cast<std::size_t>(c)] += double(t.at(y, x, c)) * t.at(y, x, c);
        }
        ++n;
      }
  }
  for (int c = 0; c < kBackboneChannels; ++c) {
    CHECK(std::abs(sum[static_cast<std::size_t>(c)] / n) < 1e-3);
    CHECK(sq[static_cast<std::size_t>(c)] / n == doctest::Approx(1.0).epsilon(1e-3));
  }
  const auto scale = fit_layout_scale({Tensor<float>({2, 2, 1}, 0.0f)});
  CHECK(scale.scale[0] > 0.0f);
}

TEST_CASE("train and schedule configuration validation") {
  TrainConfig t;
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.step3_lr = -1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  BenchmarkConfig b;
  b.grid.width = 20;
  CHECK_THROWS_AS(b.validate(), ConfigError);
}
