#pragma once

#include "ltn/numerics/tensor.hpp"
#include "ltn/synthbench/generator.hpp"

namespace ltn::synth {

inline constexpr int kBackboneChannels = 8;

/// Fixed hand-crafted feature pyramid.
///
/// C2 (stride 4) holds per-block statistics: mean, standard deviation, mean
/// |d/dx|, mean |d/dy|, max, min, centre-surround contrast and mean signed
/// d/dy. C3 (stride 8) and C5 (stride 32) are average pools of C2; C6
/// (stride 64) is a 2x2 max pool of C5.
struct BackboneFeatures {
  Tensor<float> c2;
  Tensor<float> c3;
  Tensor<float> c5;
  Tensor<float> c6;
};

BackboneFeatures compute_backbone(const GrayImage& image);

}  // namespace ltn::synth
