#pragma once

#include <string>

#include <json.hpp>

#include "ltn/synthbench/pipeline.hpp"

// JSON mappings of the benchmark configuration. Network fields that are
// derived from other settings (channel counts, grid extents) are not exposed.
namespace ltn {

void to_json(nlohmann::json& j, FusionMode m);
void from_json(const nlohmann::json& j, FusionMode& m);
void to_json(nlohmann::json& j, EarlyFusionMethod m);
void from_json(const nlohmann::json& j, EarlyFusionMethod& m);

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MixtureSpec, num_categories, scale_edges, aspect_edges)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(VoteKernel, sigma, z)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(GridGeometry, width, height, stride_px)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(KMeansOptions, max_iterations, tolerance, restarts)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TransformConfig, conv1, conv2, conv3, fc1, conv4, use_transform, use_refine)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FcnConfig, width)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FusionConfig, mode, alpha, method)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BoxSpec, cx, cy, scale, aspect, category)

}  // namespace ltn

namespace ltn::synth {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SynthConfig, image_h, image_w, num_archetypes, train_size, val_size, car_rate,
                                   pedestrian_rate, distractor_rate, noise_sd, horizon_jitter_px, road_jitter_px,
                                   scale_noise, car_aspect, pedestrian_aspect, pedestrian_scale_ratio)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Archetype, id, horizon_frac, vanish_x_frac, road_center_frac, road_half_frac,
                                   walk_frac, s0, s1, sky_tone, ground_tone, road_tone, walk_tone, car_rate,
                                   pedestrian_rate)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DetectorConfig, aspects, sub_anchors, score_threshold, nms_iou, pre_nms_top,
                                   max_detections, positive_iou, negative_iou, anchors_per_image, max_positives,
                                   hard_negatives, prior_probability)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, detector_epochs, detector_lr, classifier_epochs, layout_epochs,
                                   step2_lr, finetune_epochs, step3_lr, momentum, batch_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BenchmarkConfig, synth, mixture, kernel, grid, clusters, kmeans, detector,
                                   classifier_width, transform, fcn, beta, fusion, alpha_grid, train)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ApTriple, ap50, ap70, ap75)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ChannelNormalizer, mean, scale)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FeatureNormalizers, c2, c3, c5, c6)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(LayoutTrainingReport, initial_loss, final_loss, mean_theta_distance)

/// Overlay `patch` onto `base`. Every key of `patch` must exist in `base`
/// with a compatible type; objects merge recursively, other values replace.
/// Throws ConfigError naming the offending dotted key.
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix = "");

/// Parse a value from the command line: JSON when it parses, otherwise a string.
nlohmann::json parse_override_value(const std::string& text);

/// Set a dotted key ("a.b.c") in `doc`; the key must already exist.
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace ltn::synth
