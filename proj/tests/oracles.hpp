#pragma once

// Independent reference computations shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "ltn/codebook.hpp"
#include "ltn/fusion.hpp"
#include "ltn/layout_net.hpp"
#include "ltn/numerics/grad_check.hpp"
#include "ltn/numerics/ops.hpp"
#include "ltn/synthbench/detector.hpp"
#include "ltn/synthbench/evaluation.hpp"
#include "param_check.hpp"

namespace ltn::testing {

/// Random projection of a tensor to a scalar, so gradients carry O(1) entries.
inline Var project(Tape<double>& tape, Var v, Rng& rng) {
  auto w = random_tensor(tape.value(v).shape(), rng);
  return nn::sum(tape, nn::multiply(tape, v, tape.constant(w)));
}

struct OpGradCase {
  const char* name;
  std::function<std::vector<Tensor<double>>(Rng&)> points;
  std::function<Var(Tape<double>&, const std::vector<Var>&, Rng&)> loss;
};

/// One scalar loss per differentiable op, over random inputs.
inline std::vector<OpGradCase> op_gradient_cases() {
  using TapeD = Tape<double>;
  using Vars = std::vector<Var>;
  return {
      {"conv2d stride 1 pad 1",
       [](Rng& r) { return std::vector{random_tensor({5, 6, 3}, r), random_tensor({3, 3, 3, 4}, r), random_tensor({4}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) { return project(t, nn::conv2d(t, v[0], v[1], v[2], 1, 1), r); }},
      {"conv2d stride 2 pad 0",
       [](Rng& r) { return std::vector{random_tensor({7, 7, 2}, r), random_tensor({3, 1, 2, 3}, r), random_tensor({3}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) { return project(t, nn::conv2d(t, v[0], v[1], v[2], 2, 0), r); }},
      {"max_pool2d", [](Rng& r) { return std::vector{random_tensor({4, 6, 3}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) { return project(t, nn::max_pool2d(t, v[0]), r); }},
      {"fully_connected",
       [](Rng& r) { return std::vector{random_tensor({2, 3, 2}, r), random_tensor({12, 5}, r), random_tensor({5}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) { return project(t, nn::fully_connected(t, v[0], v[1], v[2]), r); }},
      {"relu", [](Rng& r) { return std::vector{random_tensor({20}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) { return project(t, nn::relu(t, v[0]), r); }},
      {"softmax", [](Rng& r) { return std::vector{random_tensor({6}, r, -3, 3)}; },
       [](TapeD& t, const Vars& v, Rng& r) { return project(t, nn::softmax(t, v[0]), r); }},
      {"concat and slice", [](Rng& r) { return std::vector{random_tensor({3, 2, 2}, r), random_tensor({3, 2, 3}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) {
         auto c = nn::concat_channels(t, v[0], v[1]);
         return project(t, nn::slice_channels(t, c, 1, 4), r);
       }},
      {"bilinear_resize up", [](Rng& r) { return std::vector{random_tensor({3, 4, 2}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) { return project(t, nn::bilinear_resize(t, v[0], 7, 5), r); }},
      {"bilinear_resize down", [](Rng& r) { return std::vector{random_tensor({8, 9, 2}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) { return project(t, nn::bilinear_resize(t, v[0], 3, 4), r); }},
      {"add multiply scale",
       [](Rng& r) { return std::vector{random_tensor({2, 3, 2}, r), random_tensor({2, 3, 2}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) {
         return project(t, nn::scale(t, nn::multiply(t, nn::add(t, v[0], v[1]), v[1]), 0.7), r);
       }},
      {"affine_grid and grid_sample",
       [](Rng& r) {
         auto theta = Tensor<double>({6}, std::vector<double>{0.8, 0.1, 0.05, -0.1, 0.9, -0.07});
         for (auto& v : theta.data()) v += r.uniform(-0.05, 0.05);
         return std::vector{random_tensor({5, 6, 2}, r), theta};
       },
       [](TapeD& t, const Vars& v, Rng& r) {
         return project(t, nn::grid_sample(t, v[0], nn::affine_grid(t, v[1], 4, 5)), r);
       }},
      {"mean_squared_error", [](Rng& r) { return std::vector{random_tensor({3, 3, 2}, r), random_tensor({3, 3, 2}, r)}; },
       [](TapeD& t, const Vars& v, Rng&) { return nn::mean_squared_error(t, v[0], v[1]); }},
      {"negative_log_likelihood of softmax", [](Rng& r) { return std::vector{random_tensor({8}, r, -2, 2)}; },
       [](TapeD& t, const Vars& v, Rng& r) {
         return nn::negative_log_likelihood(t, nn::softmax(t, v[0]), r.uniform_int(8));
       }},
      {"box_mean", [](Rng& r) { return std::vector{random_tensor({5, 7, 2}, r)}; },
       [](TapeD& t, const Vars& v, Rng& r) { return project(t, nn::box_mean(t, v[0], 4, 3), r); }},
      {"sigmoid_cross_entropy", [](Rng& r) { return std::vector{random_tensor({10}, r, -3, 3)}; },
       [](TapeD& t, const Vars& v, Rng& r) {
         std::vector<int> idx{0, 2, 3, 7, 9};
         std::vector<double> tgt;
         for (std::size_t i = 0; i < idx.size(); ++i) tgt.push_back(r.uniform() < 0.5 ? 0.0 : 1.0);
         return nn::sigmoid_cross_entropy(t, v[0], std::span<const int>(idx), std::span<const double>(tgt));
       }},
  };
}

/// Central-difference check of one op case at one seed.
inline GradCheckReport check_op_case(const OpGradCase& c, int seed) {
  Rng rng(static_cast<std::uint64_t>(seed) + 100);
  auto points = c.points(rng);
  const auto loss_seed = rng.next();
  return grad_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        Rng r(loss_seed);
        return c.loss(t, v, r);
      },
      points);
}

inline TransformConfig small_transform() {
  TransformConfig c;
  c.layout_channels = 3;
  c.grid_h = 8;
  c.grid_w = 12;
  c.c3_channels = 2;
  c.c6_channels = 2;
  c.c6_h = 2;
  c.c6_w = 3;
  c.conv1 = 4;
  c.conv2 = 4;
  c.conv3 = 5;
  c.fc1 = 6;
  c.conv4 = 5;
  return c;
}

/// Scene classification loss through the classifier head.
inline GradCheckReport check_classifier_loss(int seed) {
  Rng rng(static_cast<std::uint64_t>(seed));
  ClassifierHead<double> head({4, 6, 3, 4, 5}, rng);
  const auto c5 = random_tensor({4, 6, 3}, rng);
  const int label = static_cast<int>(rng.uniform_int(5));
  return param_grad_check(head.parameters(), [&](Tape<double>& t) {
    return cls_loss(t, head.probabilities(t, t.constant(c5)), label);
  });
}

/// Layout plus regularizer loss through localization, warp and refinement.
inline GradCheckReport check_stn_loss(int seed, double beta = 0.1) {
  const auto cfg = small_transform();
  Rng rng(static_cast<std::uint64_t>(seed) + 10);
  TransformNet<double> net(cfg, rng);
  perturb(net.parameters(), rng, 0.05);
  const auto s_c = random_tensor({cfg.grid_h, cfg.grid_w, cfg.layout_channels}, rng, 0, 1);
  const auto c6 = random_tensor({2, 3, 2}, rng);
  const auto c3 = random_tensor({cfg.grid_h, cfg.grid_w, 2}, rng);
  const auto target = random_tensor({cfg.grid_h, cfg.grid_w, cfg.layout_channels}, rng, 0, 1);
  return param_grad_check(
      net.parameters(),
      [&](Tape<double>& t) {
        auto out = net.forward(t, t.constant(s_c), t.constant(c6), t.constant(c3));
        return stn_loss(t, out.layout, t.constant(target), out.theta, beta);
      },
      1e-5);
}

/// Direct layout regression through the FCN variant.
inline GradCheckReport check_fcn_loss(int seed) {
  FcnConfig cfg{3, 8, 12, 2, 2, 5};
  Rng rng(static_cast<std::uint64_t>(seed) + 20);
  FcnLayoutNet<double> net(cfg, rng);
  const auto c3 = random_tensor({8, 12, 2}, rng);
  const auto c6 = random_tensor({2, 3, 2}, rng);
  perturb(net.parameters(), rng, 0.05);
  const auto target = random_tensor({8, 12, 3}, rng, 0, 1);
  return param_grad_check(net.parameters(), [&](Tape<double>& t) {
    return layout_loss(t, net.forward(t, t.constant(c3), t.constant(c6)), t.constant(target));
  });
}

/// Early fusion with respect to its parameters and to both inputs; the worse of the two.
inline GradCheckReport check_fusion(EarlyFusionMethod method, int seed) {
  Rng rng(static_cast<std::uint64_t>(seed) + 30);
  EarlyFusion<double> fusion(3, 2, method);
  perturb(fusion.parameters(), rng, 0.3);
  const auto feats = random_tensor({4, 6, 3}, rng);
  const auto layout = random_tensor({2, 3, 2}, rng);
  const auto proj = random_tensor({4, 6, 3}, rng);
  const auto params = param_grad_check(fusion.parameters(), [&](Tape<double>& t) {
    return nn::sum(t, nn::multiply(t, fusion.fuse(t, t.constant(feats), t.constant(layout)), t.constant(proj)));
  });
  const auto inputs = grad_check(
      [&](Tape<double>& t, const std::vector<Var>& v) {
        return nn::sum(t, nn::multiply(t, fusion.fuse(t, v[0], v[1]), t.constant(proj)));
      },
      {feats, layout});
  return params.max_relative_error >= inputs.max_relative_error ? params : inputs;
}

/// Anchor logistic loss through the toy detector on a sparse anchor sample.
inline GradCheckReport check_detector_loss(int seed) {
  Rng rng(static_cast<std::uint64_t>(seed) + 40);
  synth::ToyDetector<double> det(synth::DetectorConfig{}, MixtureSpec{}, 3, 4.0);
  perturb(det.parameters(), rng, 0.3);
  const auto f = random_tensor({7, 9, 3}, rng);
  std::vector<int> idx;
  std::vector<double> tgt;
  for (int k = 0; k < 8; ++k) {
    idx.push_back(rng.uniform_int(7 * 9 * det.num_anchors()));
    tgt.push_back(rng.uniform() < 0.3 ? 1.0 : 0.0);
  }
  auto loss = [&](Tape<double>& t, Var features) {
    return nn::sigmoid_cross_entropy<double>(t, det.logits(t, features), idx, tgt);
  };
  const auto params = param_grad_check(det.parameters(), [&](Tape<double>& t) { return loss(t, t.constant(f)); });
  const auto inputs = grad_check([&](Tape<double>& t, const std::vector<Var>& v) { return loss(t, v[0]); }, {f});
  return params.max_relative_error >= inputs.max_relative_error ? params : inputs;
}

/// Coarse layout cell (i, j, k) summed directly over images of the cluster and their annotations.
inline double naive_coarse(const std::vector<CodebookEntry>& entries, int cluster, const MixtureSpec& spec,
                           const VoteKernel& kernel, const GridGeometry& grid, int i, int j, int k) {
  double s = 0.0;
  for (const auto& e : entries) {
    if (e.cluster != cluster) continue;
    for (const auto& y : e.annotations) {
      if (assign_group(y, spec) != k) continue;
      const double gx = y.cx / grid.stride_px - 0.5, gy = y.cy / grid.stride_px - 0.5;
      const double d2 = (j - gx) * (j - gx) + (i - gy) * (i - gy);
      s += std::exp(-d2 / (2.0 * kernel.sigma * kernel.sigma)) / (kernel.z * kernel.sigma * kernel.sigma);
    }
  }
  return s;
}

inline std::vector<CodebookEntry> random_entries(Rng& rng, const GridGeometry& grid, int images, int clusters) {
  std::vector<CodebookEntry> entries;
  for (int m = 0; m < images; ++m) {
    CodebookEntry e{static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(clusters))), {}};
    const int count = static_cast<int>(rng.uniform_int(5));
    for (int a = 0; a < count; ++a) {
      e.annotations.push_back({rng.uniform(0, grid.width * grid.stride_px), rng.uniform(0, grid.height * grid.stride_px),
                               rng.uniform(8, 90), rng.uniform(0.4, 2.0), static_cast<int>(rng.uniform_int(2))});
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

/// Largest deviation of accumulate_coarse_layout from the direct sum on one random instance.
inline double coarse_layout_deviation(std::uint64_t seed, const GridGeometry& grid) {
  const MixtureSpec spec{};
  const VoteKernel kernel{};
  Rng rng(seed);
  const auto entries = random_entries(rng, grid, 10, 3);
  const int cluster = static_cast<int>(rng.uniform_int(3));
  const auto layout = accumulate_coarse_layout(entries, cluster, spec, kernel, grid);
  double worst = 0.0;
  for (int i = 0; i < grid.height; ++i)
    for (int j = 0; j < grid.width; ++j)
      for (int k = 0; k < spec.num_channels(); ++k) {
        worst = std::max(worst, std::abs(layout.values.at(i, j, k) -
                                         naive_coarse(entries, cluster, spec, kernel, grid, i, j, k)));
      }
  return worst;
}

inline BoxSpec square(double cx, double cy, double scale, int category = 0) { return {cx, cy, scale, 1.0, category}; }

/// Precision/recall at every prefix by re-running greedy matching from scratch,
/// then the all-point envelope as a maximum over the suffix.
inline double brute_force_ap(const std::vector<std::vector<synth::Detection>>& dets,
                             const std::vector<std::vector<BoxSpec>>& truth, double threshold, int category) {
  struct Ref {
    double score;
    std::size_t image, index;
  };
  std::vector<Ref> order;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < dets[i].size(); ++j)
      if (dets[i][j].box.category == category) order.push_back({dets[i][j].score, i, j});
  std::sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });
  int positives = 0;
  for (const auto& t : truth)
    for (const auto& g : t) positives += g.category == category ? 1 : 0;
  if (positives == 0) return 0.0;

  std::vector<double> precision, recall;
  for (std::size_t n = 1; n <= order.size(); ++n) {
    std::vector<std::vector<bool>> used(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) used[i].assign(truth[i].size(), false);
    int tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& d = dets[order[k].image][order[k].index];
      const auto& t = truth[order[k].image];
      int pick = -1;
      double best = -1.0;
      for (std::size_t g = 0; g < t.size(); ++g) {
        if (t[g].category != category || used[order[k].image][g]) continue;
        if (synth::iou(d.box, t[g]) > best) {
          best = synth::iou(d.box, t[g]);
          pick = static_cast<int>(g);
        }
      }
      if (pick >= 0 && best >= threshold) {
        used[order[k].image][static_cast<std::size_t>(pick)] = true;
        ++tp;
      }
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(n));
    recall.push_back(static_cast<double>(tp) / positives);
  }
  double ap = 0.0, previous = 0.0;
  for (std::size_t n = 0; n < precision.size(); ++n) {
    ap += (recall[n] - previous) * *std::max_element(precision.begin() + static_cast<std::ptrdiff_t>(n), precision.end());
    previous = recall[n];
  }
  return ap;
}

struct ApInstance {
  std::vector<std::vector<BoxSpec>> truth;
  std::vector<std::vector<synth::Detection>> detections;
};

/// Up to three images and at most ten boxes in total; coarse scores force ties
/// and detections near the truth give partial overlaps.
inline ApInstance random_ap_instance(Rng& rng) {
  ApInstance inst;
  const int images = 1 + rng.uniform_int(3);
  inst.truth.resize(static_cast<std::size_t>(images));
  inst.detections.resize(static_cast<std::size_t>(images));
  int budget = 10;
  for (std::size_t i = 0; i < inst.truth.size(); ++i) {
    auto& truth = inst.truth[i];
    const int ng = std::min(budget, rng.uniform_int(4));
    budget -= ng;
    for (int g = 0; g < ng; ++g) {
      truth.push_back(square(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(3, 8), rng.uniform_int(2)));
    }
    const int nd = std::min(budget, rng.uniform_int(5));
    budget -= nd;
    for (int k = 0; k < nd; ++k) {
      BoxSpec b = square(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(3, 8), rng.uniform_int(2));
      if (!truth.empty() && rng.uniform() < 0.6) {
        b = truth[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(truth.size())))];
        b.cx += rng.uniform(-2, 2);
        b.cy += rng.uniform(-2, 2);
      }
      inst.detections[i].push_back({b, rng.uniform_int(4) / 4.0});
    }
  }
  return inst;
}

}  // namespace ltn::testing
