#pragma once

#include <array>
#include <span>

#include "ltn/numerics/ops.hpp"
#include "ltn/rng.hpp"

namespace ltn {

/// Affine warp parameters [t11, t12, t13, t21, t22, t23] acting on normalized
/// (align-corners) coordinates.
struct AffineParams {
  std::array<double, 6> theta{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

  static constexpr std::array<double, 6> identity() { return {1.0, 0.0, 0.0, 0.0, 1.0, 0.0}; }

  /// Euclidean distance to the identity transform.
  double distance_to_identity() const;

  template <typename T>
  static AffineParams from(const Tensor<T>& t) {
    if (t.size() != 6) throw ContractViolation("affine parameters need 6 values, got " + to_string(t.shape()));
    AffineParams p;
    for (std::size_t i = 0; i < 6; ++i) p.theta[i] = static_cast<double>(t[i]);
    return p;
  }
  bool operator==(const AffineParams&) const = default;
};

struct ClassifierConfig {
  int in_h = 4;
  int in_w = 6;
  int in_channels = 8;
  int conv_channels = 32;
  int clusters = 8;
};

/// Scene-layout classification head: 2x2 max pool, 3x3 conv + relu, fully connected to N logits.
template <typename T>
class ClassifierHead {
 public:
  ClassifierHead(const ClassifierConfig& config, Rng& rng);

  Var logits(Tape<T>& tape, Var c5) const;
  Var probabilities(Tape<T>& tape, Var c5) const { return nn::softmax(tape, logits(tape, c5)); }

  /// Forward pass without gradients.
  Tensor<T> classify(const Tensor<T>& c5) const;

  ParameterList<T> parameters();
  const ClassifierConfig& config() const noexcept { return config_; }

 private:
  ClassifierConfig config_;
  mutable Parameter<T> conv_w_, conv_b_, fc_w_, fc_b_;
};

/// Index of the largest probability; ties go to the lowest index.
template <typename T>
int argmax_cluster(std::span<const T> probabilities);

struct TransformConfig {
  int layout_channels = 8;  // K
  int grid_h = 16;          // S_c / S_l spatial extent
  int grid_w = 24;
  int c3_channels = 8;
  int c6_channels = 8;
  int c6_h = 2;
  int c6_w = 3;
  int conv1 = 32;
  int conv2 = 32;
  int conv3 = 64;
  int fc1 = 128;
  int conv4 = 64;
  bool use_transform = true;
  bool use_refine = true;
};

/// Localization network, affine sampler and refinement convolutions.
///
/// fc2 and conv5 start at zero, so an untrained net predicts the identity
/// transform and an all-zero refined layout.
template <typename T>
class TransformNet {
 public:
  TransformNet(const TransformConfig& config, Rng& rng);

  struct Output {
    Var theta;   // invalid when the transform is disabled
    Var warped;  // S_c after the affine warp (S_c itself when disabled)
    Var layout;  // S_l
  };

  /// theta = identity + fc2(fc1(conv3(conv1(S_c small) ++ conv2(C6)))).
  Var localize(Tape<T>& tape, Var s_c_small, Var c6) const;

  /// Bilinear warp of S_c by theta at the grid resolution.
  Var transform(Tape<T>& tape, Var s_c, Var theta) const;

  /// conv5(relu(conv4(warped ++ C3))).
  Var refine(Tape<T>& tape, Var warped, Var c3) const;

  /// Full pipeline per the enabled components.
  Output forward(Tape<T>& tape, Var s_c, Var c6, Var c3) const;

  ParameterList<T> localization_parameters();
  ParameterList<T> refinement_parameters();
  ParameterList<T> parameters();
  const TransformConfig& config() const noexcept { return config_; }

 private:
  TransformConfig config_;
  mutable Parameter<T> conv1_w_, conv1_b_, conv2_w_, conv2_b_, conv3_w_, conv3_b_;
  mutable Parameter<T> fc1_w_, fc1_b_, fc2_w_, fc2_b_;
  mutable Parameter<T> conv4_w_, conv4_b_, conv5_w_, conv5_b_;
};

struct FcnConfig {
  int layout_channels = 8;
  int grid_h = 16;
  int grid_w = 24;
  int c3_channels = 8;
  int c6_channels = 8;
  int width = 64;
};

/// Direct layout prediction from appearance alone: C3 ++ upsampled C6 through
/// the refinement topology, no retrieved template.
template <typename T>
class FcnLayoutNet {
 public:
  FcnLayoutNet(const FcnConfig& config, Rng& rng);

  Var forward(Tape<T>& tape, Var c3, Var c6) const;

  ParameterList<T> parameters();
  const FcnConfig& config() const noexcept { return config_; }

 private:
  FcnConfig config_;
  mutable Parameter<T> conv_a_w_, conv_a_b_, conv_b_w_, conv_b_b_;
};

/// -log(max(p[label], 1e-12)).
template <typename T>
Var cls_loss(Tape<T>& tape, Var probabilities, int label);

/// Mean squared error over all cells and channels.
template <typename T>
Var layout_loss(Tape<T>& tape, Var layout, Var target);

/// (1/6) * ||theta - identity||^2.
template <typename T>
Var reg_loss(Tape<T>& tape, Var theta);

/// layout_loss + beta * reg_loss.
template <typename T>
Var stn_loss(Tape<T>& tape, Var layout, Var target, Var theta, double beta);

}  // namespace ltn
