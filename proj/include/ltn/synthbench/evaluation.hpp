#pragma once

#include <vector>

#include "ltn/synthbench/detector.hpp"

namespace ltn::synth {

struct ApReport {
  std::vector<double> per_category;  // 0 for a category without ground truth
  double mean = 0.0;                 // over categories that have ground truth
};

/// VOC-style average precision with all-point interpolation.
///
/// Per category, detections from all images are visited by descending score
/// (stable in input order); each takes the unmatched ground truth of its image
/// with the highest IoU, and counts as a true positive if that IoU reaches the
/// threshold. AP is the area under the monotone precision envelope.
ApReport evaluate_ap(const std::vector<std::vector<Detection>>& detections,
                     const std::vector<std::vector<BoxSpec>>& ground_truth, double iou_threshold,
                     int num_categories);

}  // namespace ltn::synth
