#pragma once

#include <cstdint>
#include <vector>

#include "ltn/rng.hpp"
#include "ltn/scene_model.hpp"

namespace ltn::synth {

/// 8-bit grayscale image, row-major.
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0) {}

  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x] / 255.0; }
  bool operator==(const GrayImage&) const = default;
};

/// A road-scene template: horizon, a road band converging to a vanishing
/// point, sidewalks on either side, and a linear perspective scale law
/// a_s(y) = s0 + s1 * (y - horizon) for an object whose bottom edge sits on row y.
struct Archetype {
  int id = 0;
  double horizon_frac = 0.4;
  double vanish_x_frac = 0.5;
  double road_center_frac = 0.5;  // road centre at the bottom row
  double road_half_frac = 0.25;   // road half-width at the bottom row
  double walk_frac = 0.08;        // sidewalk width at the bottom row
  double s0 = 6.0;
  double s1 = 0.6;
  double sky_tone = 0.7;
  double ground_tone = 0.35;
  double road_tone = 0.45;
  double walk_tone = 0.6;
  double car_rate = 1.0;  // multipliers on the dataset-wide placement rates
  double pedestrian_rate = 1.0;
};

struct SynthConfig {
  int image_h = 128;
  int image_w = 192;
  int num_archetypes = 8;
  int train_size = 2000;
  int val_size = 500;
  double car_rate = 3.0;
  double pedestrian_rate = 2.0;
  double distractor_rate = 4.0;
  double noise_sd = 0.05;
  double horizon_jitter_px = 6.0;
  double road_jitter_px = 12.0;
  double scale_noise = 0.08;  // sd of the log-scale perturbation
  double car_aspect = 1.6;
  double pedestrian_aspect = 0.45;
  double pedestrian_scale_ratio = 0.55;

  void validate() const;
};

inline constexpr int kCarCategory = 0;
inline constexpr int kPedestrianCategory = 1;

struct SyntheticScene {
  int id = 0;
  int archetype = 0;
  GrayImage image;
  std::vector<BoxSpec> annotations;
  std::vector<BoxSpec> distractors;  // rendered like objects but never annotated
};

struct SyntheticDataset {
  std::vector<Archetype> archetypes;
  std::vector<SyntheticScene> train;
  std::vector<SyntheticScene> val;
  int skipped_placements = 0;
};

/// Archetypes drawn from the seed, rejecting candidates whose empty-scene
/// appearance is too close to an earlier one.
std::vector<Archetype> make_archetypes(const SynthConfig& config, std::uint64_t seed);

/// One scene; its randomness comes only from `rng`.
SyntheticScene generate_scene(const SynthConfig& config, const Archetype& archetype, int id, Rng& rng,
                              int* skipped = nullptr);

/// Train and validation scenes; scene i draws from a stream forked off the seed.
SyntheticDataset generate_dataset(const SynthConfig& config, std::uint64_t seed);

/// Whole-image appearance descriptor: 8 x 12 block means (D = 96).
std::vector<double> appearance_descriptor(const GrayImage& image);
inline constexpr int kDescriptorRows = 8;
inline constexpr int kDescriptorCols = 12;

}  // namespace ltn::synth
