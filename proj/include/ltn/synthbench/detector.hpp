#pragma once

#include <array>
#include <optional>
#include <vector>

#include "ltn/fusion.hpp"
#include "ltn/numerics/ops.hpp"
#include "ltn/rng.hpp"
#include "ltn/scene_model.hpp"

namespace ltn::synth {

struct Detection {
  BoxSpec box;
  double score = 0.0;

  bool operator==(const Detection&) const = default;
};

/// Intersection over union of two axis-aligned boxes.
double iou(const BoxSpec& a, const BoxSpec& b);

/// Greedy non-maximum suppression: visit by descending score (stable), drop
/// anything overlapping a kept box of the same category above `threshold`.
std::vector<Detection> non_maximum_suppression(std::vector<Detection> detections, double threshold);

struct DetectorConfig {
  std::vector<double> aspects{1.6, 0.45};  // anchor aspect per category
  int sub_anchors = 3;                      // anchor scales per scale bin
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int pre_nms_top = 400;  // per category
  int max_detections = 100;
  double positive_iou = 0.6;
  double negative_iou = 0.5;
  int anchors_per_image = 256;
  int max_positives = 64;
  int hard_negatives = 96;
  double prior_probability = 0.01;

  void validate(const MixtureSpec& spec) const;
};

/// Pooling rectangle in feature cells, inclusive offsets from the anchor cell.
struct PoolWindow {
  int dy0 = 0, dy1 = 0, dx0 = 0, dx1 = 0;
  bool operator==(const PoolWindow&) const = default;
};

/// Core, box, context, then one-cell-deep strips just outside the box
/// (top, bottom, left, right) and just inside it (same order).
inline constexpr int kPoolWindows = 11;

/// One anchor shape; an anchor sits on every feature cell.
struct AnchorShape {
  int group = 0;  // mixture channel
  double scale = 0.0;
  double aspect = 1.0;
  int category = 0;
  std::array<PoolWindow, kPoolWindows> windows{};
};

/// Anchor shapes for every mixture group: `sub_anchors` geometric steps inside
/// each scale bin; the open outer bins span [edge0 / 2, edge0) and [edgeN, 2 edgeN).
std::vector<AnchorShape> make_anchor_shapes(const DetectorConfig& config, const MixtureSpec& spec, double stride);

/// Dense detector: each anchor pools the features over its windows (clipped
/// box means, zero when the window leaves the map), and the linear scorer of
/// its mixture group maps the pooled values to a logit, plus a per-anchor bias.
/// Weight row k of det.w is the scorer of mixture channel k.
template <typename T>
class ToyDetector {
 public:
  ToyDetector(const DetectorConfig& config, const MixtureSpec& spec, int feature_channels, double stride);

  /// Logits [H, W, A] for features [H, W, C]; flat index (y * W + x) * A + a.
  Var logits(Tape<T>& tape, Var features) const;

  /// Forward pass without gradients.
  Tensor<T> logit_values(const Tensor<T>& features) const;

  BoxSpec anchor_box(int y, int x, int anchor) const;
  int num_anchors() const noexcept { return static_cast<int>(anchors_.size()); }
  const std::vector<AnchorShape>& anchors() const noexcept { return anchors_; }
  const DetectorConfig& config() const noexcept { return config_; }
  const MixtureSpec& spec() const noexcept { return spec_; }
  double stride() const noexcept { return stride_; }

  ParameterList<T> parameters();

 private:
  DetectorConfig config_;
  MixtureSpec spec_;
  int channels_;
  double stride_;
  std::vector<AnchorShape> anchors_;
  std::vector<PoolWindow> windows_;                            // distinct pooling windows
  std::vector<std::array<int, kPoolWindows>> anchor_windows_;  // window index per anchor slot
  mutable Parameter<T> weights_;  // [K, kPoolWindows * C]
  mutable Parameter<T> biases_;   // [A]
};

/// Training target per anchor: 1 positive, 0 negative, -1 ignored.
std::vector<signed char> label_anchors(const std::vector<AnchorShape>& anchors, int feat_h, int feat_w,
                                       double stride, const std::vector<BoxSpec>& truth,
                                       const DetectorConfig& config);

/// Anchor minibatch: up to max_positives positives at random, then the
/// highest-scoring negatives, then random negatives up to anchors_per_image.
struct AnchorSample {
  std::vector<int> indices;
  std::vector<double> targets;
};
AnchorSample sample_anchors(const std::vector<signed char>& labels, std::span<const float> logits,
                            const DetectorConfig& config, Rng& rng);

/// Layout read-out used for late fusion.
struct LateLayout {
  const LayoutGrid* grid = nullptr;
  const MixtureSpec* spec = nullptr;
  double alpha = 0.0;
};

/// Sigmoid scores, optional late fusion, score threshold, per-category top-k and NMS.
template <typename T>
std::vector<Detection> decode_detections(const ToyDetector<T>& detector, const Tensor<T>& logits,
                                         const std::optional<LateLayout>& late = std::nullopt);

}  // namespace ltn::synth
