#include "ltn/synthbench/generator.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

#include "ltn/errors.hpp"

namespace ltn::synth {

void SynthConfig::validate() const {
  if (num_archetypes < 2) throw ConfigError("synth: need at least 2 archetypes");
  if (train_size <= 0 || val_size <= 0) throw ConfigError("synth: split sizes must be positive");
  if (image_h <= 0 || image_w <= 0 || image_h % kDescriptorRows != 0 || image_w % kDescriptorCols != 0) {
    throw ConfigError("synth: image size must be a positive multiple of 8 x 12");
  }
  if (car_rate < 0 || pedestrian_rate < 0 || distractor_rate < 0) throw ConfigError("synth: rates must be >= 0");
  if (noise_sd < 0 || horizon_jitter_px < 0 || road_jitter_px < 0 || scale_noise < 0) {
    throw ConfigError("synth: noise levels must be >= 0");
  }
  if (car_aspect <= 0 || pedestrian_aspect <= 0 || pedestrian_scale_ratio <= 0) {
    throw ConfigError("synth: aspects and scale ratio must be positive");
  }
}

namespace {

constexpr int kMaxAttempts = 100;

/// Per-scene geometry after jitter.
struct SceneGeometry {
  double horizon;
  double vanish_x;
  double road_bottom;
  double road_half;
  double walk;
  double height;

  double depth(double y) const { return std::clamp((y - horizon) / (height - horizon), 0.0, 1.0); }
  double center(double y) const { return vanish_x + (road_bottom - vanish_x) * depth(y); }
  double half_width(double y) const { return road_half * depth(y); }
  double walk_width(double y) const { return walk * depth(y); }
};

SceneGeometry nominal_geometry(const SynthConfig& c, const Archetype& a) {
  return {a.horizon_frac * c.image_h, a.vanish_x_frac * c.image_w, a.road_center_frac * c.image_w,
          a.road_half_frac * c.image_w, a.walk_frac * c.image_w, static_cast<double>(c.image_h)};
}

double bounded_normal(Rng& rng, double limit) {
  if (limit <= 0.0) return 0.0;
  return std::clamp(rng.normal(0.0, limit / 2.0), -limit, limit);
}

double background_tone(const Archetype& a, const SceneGeometry& g, double y, double x) {
  if (y < g.horizon) return a.sky_tone - 0.12 * (1.0 - y / g.horizon);
  const double d = std::abs(x - g.center(y));
  const double half = g.half_width(y);
  if (d < half) return a.road_tone;
  if (d < half + g.walk_width(y)) return a.walk_tone;
  return a.ground_tone;
}

std::vector<double> render_background(const SynthConfig& c, const Archetype& a, const SceneGeometry& g) {
  std::vector<double> img(static_cast<std::size_t>(c.image_h) * c.image_w);
  for (int y = 0; y < c.image_h; ++y)
    for (int x = 0; x < c.image_w; ++x) {
      img[static_cast<std::size_t>(y) * c.image_w + x] = background_tone(a, g, y + 0.5, x + 0.5);
    }
  return img;
}

/// Blend `tone` into the image over the rectangle, weighting edge pixels by coverage.
void fill_rect(std::vector<double>& img, int h, int w, double left, double top, double right, double bottom,
               double tone) {
  const int y0 = std::max(0, static_cast<int>(std::floor(top)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(bottom)) - 1);
  const int x0 = std::max(0, static_cast<int>(std::floor(left)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(right)) - 1);
  for (int y = y0; y <= y1; ++y) {
    const double cy = std::min<double>(y + 1, bottom) - std::max<double>(y, top);
    if (cy <= 0) continue;
    for (int x = x0; x <= x1; ++x) {
      const double cx = std::min<double>(x + 1, right) - std::max<double>(x, left);
      if (cx <= 0) continue;
      double& p = img[static_cast<std::size_t>(y) * w + x];
      p += cx * cy * (tone - p);
    }
  }
}

struct Placed {
  BoxSpec box;
  double tone;
  bool distractor;
};

void render_object(std::vector<double>& img, int h, int w, const Placed& o) {
  const auto& b = o.box;
  const double l = b.left(), t = b.top(), r = l + b.width(), bt = t + b.height();
  fill_rect(img, h, w, l, t, r, bt, o.tone);
  if (b.category == kCarCategory) {
    // Darker window band across the upper part of the body.
    const double inset = 0.15 * b.width();
    fill_rect(img, h, w, l + inset, t + 0.12 * b.height(), r - inset, t + 0.42 * b.height(), o.tone - 0.3);
  } else {
    // Lighter head block.
    const double inset = 0.25 * b.width();
    fill_rect(img, h, w, l + inset, t, r - inset, t + 0.18 * b.height(), o.tone + 0.25);
  }
}

bool inside(const BoxSpec& b, int h, int w) {
  return b.left() >= 0.0 && b.top() >= 0.0 && b.left() + b.width() <= w && b.top() + b.height() <= h;
}

bool overlaps(const BoxSpec& a, const BoxSpec& b) {
  const double ix = std::min(a.left() + a.width(), b.left() + b.width()) - std::max(a.left(), b.left());
  const double iy = std::min(a.top() + a.height(), b.top() + b.height()) - std::max(a.top(), b.top());
  return ix > 0.0 && iy > 0.0;
}

BoxSpec box_from_bottom(double cx, double bottom, double scale, double aspect, int category) {
  BoxSpec b{cx, 0.0, scale, aspect, category};
  b.cy = bottom - b.height() / 2.0;
  return b;
}

double law(const Archetype& a, const SceneGeometry& g, double bottom) { return a.s0 + a.s1 * (bottom - g.horizon); }

BoxSpec propose_car(const SynthConfig& c, const Archetype& a, const SceneGeometry& g, Rng& rng) {
  const double bottom = g.horizon + rng.uniform(0.12, 1.0) * (c.image_h - g.horizon);
  const double scale = law(a, g, bottom) * std::exp(rng.normal(0.0, c.scale_noise));
  const double aspect = c.car_aspect * std::exp(rng.normal(0.0, 0.05));
  const double cx = g.center(bottom) + rng.uniform(-0.7, 0.7) * g.half_width(bottom);
  return box_from_bottom(cx, bottom, scale, aspect, kCarCategory);
}

BoxSpec propose_pedestrian(const SynthConfig& c, const Archetype& a, const SceneGeometry& g, Rng& rng) {
  const double bottom = g.horizon + rng.uniform(0.25, 1.0) * (c.image_h - g.horizon);
  const double scale = c.pedestrian_scale_ratio * law(a, g, bottom) * std::exp(rng.normal(0.0, c.scale_noise));
  const double aspect = c.pedestrian_aspect * std::exp(rng.normal(0.0, 0.05));
  const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double cx = g.center(bottom) + side * (g.half_width(bottom) + rng.uniform(0.2, 0.8) * g.walk_width(bottom));
  return box_from_bottom(cx, bottom, scale, aspect, kPedestrianCategory);
}

/// Object-like patterns in places the archetype never puts objects: cars in
/// the sky, pedestrians on open ground or mid-road, cars and pedestrians far
/// too small for their row.
BoxSpec propose_distractor(const SynthConfig& c, const Archetype& a, const SceneGeometry& g, Rng& rng) {
  // Row-scale violations are drawn twice as often as the others.
  static constexpr int kKinds[] = {0, 1, 2, 2, 3, 3, 4};
  const int kind = kKinds[rng.uniform_int(7)];
  if (kind == 0) {
    const double scale = rng.uniform(12.0, 36.0);
    const double aspect = c.car_aspect * std::exp(rng.normal(0.0, 0.05));
    BoxSpec b{rng.uniform(0.0, c.image_w), 0.0, scale, aspect, kCarCategory};
    b.cy = rng.uniform(b.height() / 2.0, std::max(b.height() / 2.0, g.horizon - b.height() / 2.0));
    return b;
  }
  if (kind == 1) {
    const double bottom = g.horizon + rng.uniform(0.2, 1.0) * (c.image_h - g.horizon);
    const double scale = rng.uniform(10.0, 30.0);
    const double reach = g.half_width(bottom) + g.walk_width(bottom) + 8.0;
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double cx = g.center(bottom) + side * (reach + rng.uniform(0.0, 0.5 * c.image_w));
    return box_from_bottom(cx, bottom, scale, c.pedestrian_aspect * std::exp(rng.normal(0.0, 0.05)),
                           kPedestrianCategory);
  }
  if (kind == 2) {
    const double bottom = g.horizon + rng.uniform(0.6, 1.0) * (c.image_h - g.horizon);
    const double scale = law(a, g, bottom) * rng.uniform(0.3, 0.45);
    const double cx = g.center(bottom) + rng.uniform(-0.7, 0.7) * g.half_width(bottom);
    return box_from_bottom(cx, bottom, scale, c.car_aspect * std::exp(rng.normal(0.0, 0.05)), kCarCategory);
  }
  if (kind == 3) {
    const double bottom = g.horizon + rng.uniform(0.6, 1.0) * (c.image_h - g.horizon);
    const double scale = c.pedestrian_scale_ratio * law(a, g, bottom) * rng.uniform(0.3, 0.45);
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double cx = g.center(bottom) + side * (g.half_width(bottom) + rng.uniform(0.2, 0.8) * g.walk_width(bottom));
    return box_from_bottom(cx, bottom, scale, c.pedestrian_aspect * std::exp(rng.normal(0.0, 0.05)),
                           kPedestrianCategory);
  }
  const double bottom = g.horizon + rng.uniform(0.3, 1.0) * (c.image_h - g.horizon);
  const double scale = c.pedestrian_scale_ratio * law(a, g, bottom) * std::exp(rng.normal(0.0, c.scale_noise));
  const double cx = g.center(bottom) + rng.uniform(-0.4, 0.4) * g.half_width(bottom);
  return box_from_bottom(cx, bottom, scale, c.pedestrian_aspect * std::exp(rng.normal(0.0, 0.05)),
                         kPedestrianCategory);
}

double object_tone(int category, Rng& rng) {
  return category == kCarCategory ? rng.uniform(0.82, 0.95) : rng.uniform(0.05, 0.18);
}

GrayImage quantize(const std::vector<double>& img, int h, int w) {
  GrayImage out(h, w);
  for (std::size_t i = 0; i < img.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

double descriptor_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace

std::vector<Archetype> make_archetypes(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = Rng(seed).fork(0);
  std::vector<Archetype> out;
  std::vector<std::vector<double>> looks;
  constexpr double kMinDistance = 0.06;
  for (int id = 0; id < config.num_archetypes; ++id) {
    Archetype best;
    double best_distance = -1.0;
    std::vector<double> best_look;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Archetype a;
      a.id = id;
      a.horizon_frac = rng.uniform(0.25, 0.5);
      a.road_half_frac = rng.uniform(0.12, 0.22);
      a.walk_frac = rng.uniform(0.05, 0.08);
      const double margin = a.road_half_frac + a.walk_frac;
      a.road_center_frac = rng.uniform(margin, 1.0 - margin);
      a.vanish_x_frac = rng.uniform(0.3, 0.7);
      const double bottom_scale = rng.uniform(44.0, 60.0);
      a.s0 = 4.0;
      a.s1 = (bottom_scale - a.s0) / ((1.0 - a.horizon_frac) * config.image_h);
      a.sky_tone = rng.uniform(0.6, 0.9);
      a.ground_tone = rng.uniform(0.2, 0.4);
      a.road_tone = rng.uniform(0.42, 0.55);
      a.walk_tone = rng.uniform(0.6, 0.75);
      a.car_rate = rng.uniform(0.6, 1.4);
      a.pedestrian_rate = rng.uniform(0.6, 1.4);
      const auto g = nominal_geometry(config, a);
      const auto look = appearance_descriptor(quantize(render_background(config, a, g), config.image_h, config.image_w));
      double nearest = 1e9;
      for (const auto& other : looks) nearest = std::min(nearest, descriptor_distance(look, other));
      if (nearest > best_distance) {
        best = a;
        best_distance = nearest;
        best_look = look;
      }
      if (nearest >= kMinDistance) break;
    }
    if (best_distance < kMinDistance) {
      spdlog::warn("archetype {} is only {:.3f} from its nearest neighbour", id, best_distance);
    }
    out.push_back(best);
    looks.push_back(best_look);
  }
  return out;
}

SyntheticScene generate_scene(const SynthConfig& config, const Archetype& archetype, int id, Rng& rng,
                              int* skipped) {
  SceneGeometry g = nominal_geometry(config, archetype);
  g.horizon += bounded_normal(rng, config.horizon_jitter_px);
  g.vanish_x += 0.5 * bounded_normal(rng, config.road_jitter_px);
  g.road_bottom += bounded_normal(rng, config.road_jitter_px);

  std::vector<Placed> placed;
  auto place = [&](auto&& propose, bool distractor) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      BoxSpec b = propose();
      if (!inside(b, config.image_h, config.image_w)) continue;
      if (std::any_of(placed.begin(), placed.end(), [&](const Placed& p) { return overlaps(p.box, b); })) continue;
      placed.push_back({b, object_tone(b.category, rng), distractor});
      return;
    }
    spdlog::debug("scene {}: no feasible placement after {} attempts, object skipped", id, kMaxAttempts);
    if (skipped) ++*skipped;
  };
  const int cars = rng.poisson(config.car_rate * archetype.car_rate);
  const int pedestrians = rng.poisson(config.pedestrian_rate * archetype.pedestrian_rate);
  const int distractors = rng.poisson(config.distractor_rate);
  for (int i = 0; i < cars; ++i) place([&] { return propose_car(config, archetype, g, rng); }, false);
  for (int i = 0; i < pedestrians; ++i) place([&] { return propose_pedestrian(config, archetype, g, rng); }, false);
  for (int i = 0; i < distractors; ++i) place([&] { return propose_distractor(config, archetype, g, rng); }, true);

  auto img = render_background(config, archetype, g);
  std::vector<std::size_t> order(placed.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = placed[a].box;
    const auto& pb = placed[b].box;
    return pa.top() + pa.height() < pb.top() + pb.height();
  });
  for (std::size_t i : order) render_object(img, config.image_h, config.image_w, placed[i]);
  if (config.noise_sd > 0.0) {
    for (auto& v : img) v += rng.normal(0.0, config.noise_sd);
  }

  SyntheticScene scene;
  scene.id = id;
  scene.archetype = archetype.id;
  scene.image = quantize(img, config.image_h, config.image_w);
  for (const auto& p : placed) (p.distractor ? scene.distractors : scene.annotations).push_back(p.box);
  return scene;
}

SyntheticDataset generate_dataset(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  SyntheticDataset ds;
  ds.archetypes = make_archetypes(config, seed);
  const Rng root(seed);
  auto make = [&](int split, int count, int first_id, std::vector<SyntheticScene>& out) {
    const Rng stream = root.fork(static_cast<std::uint64_t>(split));
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      Rng rng = stream.fork(static_cast<std::uint64_t>(i));
      const auto& a = ds.archetypes[static_cast<std::size_t>(rng.uniform_int(config.num_archetypes))];
      out.push_back(generate_scene(config, a, first_id + i, rng, &ds.skipped_placements));
    }
  };
  make(1, config.train_size, 0, ds.train);
  make(2, config.val_size, config.train_size, ds.val);
  if (ds.skipped_placements > 0) {
    spdlog::info("generator skipped {} objects with no feasible placement", ds.skipped_placements);
  }
  return ds;
}

std::vector<double> appearance_descriptor(const GrayImage& image) {
  if (image.height % kDescriptorRows != 0 || image.width % kDescriptorCols != 0) {
    throw ContractViolation("descriptor needs image extents divisible by 8 x 12");
  }
  const int bh = image.height / kDescriptorRows, bw = image.width / kDescriptorCols;
  std::vector<double> d(static_cast<std::size_t>(kDescriptorRows) * kDescriptorCols, 0.0);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      d[static_cast<std::size_t>(y / bh) * kDescriptorCols + x / bw] += image.at(y, x);
    }
  for (auto& v : d) v /= static_cast<double>(bh * bw);
  return d;
}

}  // namespace ltn::synth
