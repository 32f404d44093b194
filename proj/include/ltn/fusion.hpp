#pragma once

#include <string>

#include "ltn/numerics/ops.hpp"

namespace ltn {

enum class FusionMode { none, late, early };
enum class EarlyFusionMethod { conv1x1, eltwise_sum, eltwise_mul };

FusionMode fusion_mode_from_string(const std::string& s);
std::string to_string(FusionMode mode);
EarlyFusionMethod fusion_method_from_string(const std::string& s);
std::string to_string(EarlyFusionMethod method);

struct FusionConfig {
  FusionMode mode = FusionMode::early;
  double alpha = 0.3;
  EarlyFusionMethod method = EarlyFusionMethod::conv1x1;

  void validate() const;
};

/// Decision-level fusion: s_d + alpha * s_l.
inline double late_fuse(double s_d, double s_l, double alpha) { return s_d + alpha * s_l; }

/// Feature-level fusion of a layout stack into backbone features.
///
/// conv1x1: concat(features, layout) -> 1x1 conv back to C channels.
/// eltwise_sum: features + 1x1 projection of the layout.
/// eltwise_mul: features * 1x1 projection of the layout.
/// Every method is initialized to pass the features through unchanged.
template <typename T>
class EarlyFusion {
 public:
  EarlyFusion(int feature_channels, int layout_channels, EarlyFusionMethod method);

  /// `layout` is bilinearly resized to the feature resolution first.
  Var fuse(Tape<T>& tape, Var features, Var layout) const;

  ParameterList<T> parameters();
  EarlyFusionMethod method() const noexcept { return method_; }
  int feature_channels() const noexcept { return channels_; }
  int layout_channels() const noexcept { return layout_channels_; }

 private:
  int channels_;
  int layout_channels_;
  EarlyFusionMethod method_;
  mutable Parameter<T> weight_, bias_;
};

}  // namespace ltn
