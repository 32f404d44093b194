#include "ltn/synthbench/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "ltn/errors.hpp"

namespace ltn::synth {

namespace {

Tensor<double> average_pool(const Tensor<double>& in, int factor) {
  const int H = in.dim(0) / factor, W = in.dim(1) / factor, C = in.dim(2);
  Tensor<double> out({H, W, C});
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) s += in.at(y * factor + dy, x * factor + dx, c);
        out.at(y, x, c) = s * inv;
      }
  return out;
}

Tensor<double> max_pool(const Tensor<double>& in, int factor) {
  const int H = in.dim(0) / factor, W = in.dim(1) / factor, C = in.dim(2);
  Tensor<double> out({H, W, C});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double m = in.at(y * factor, x * factor, c);
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) m = std::max(m, in.at(y * factor + dy, x * factor + dx, c));
        out.at(y, x, c) = m;
      }
  return out;
}

}  // namespace

BackboneFeatures compute_backbone(const GrayImage& image) {
  constexpr int kBlock = 4;
  if (image.height % 64 != 0 || image.width % 64 != 0) {
    throw ContractViolation("backbone needs image extents divisible by 64");
  }
  const int H = image.height, W = image.width;
  auto px = [&](int y, int x) { return image.at(std::clamp(y, 0, H - 1), std::clamp(x, 0, W - 1)); };

  const int h2 = H / kBlock, w2 = W / kBlock;
  Tensor<double> c2({h2, w2, kBackboneChannels});
  for (int by = 0; by < h2; ++by)
    for (int bx = 0; bx < w2; ++bx) {
      double sum = 0, sq = 0, agx = 0, agy = 0, gy = 0, hi = 0, lo = 1;
      for (int dy = 0; dy < kBlock; ++dy)
        for (int dx = 0; dx < kBlock; ++dx) {
          const int y = by * kBlock + dy, x = bx * kBlock + dx;
          const double v = px(y, x);
          const double gx_ = 0.5 * (px(y, x + 1) - px(y, x - 1));
          const double gy_ = 0.5 * (px(y + 1, x) - px(y - 1, x));
          sum += v;
          sq += v * v;
          agx += std::abs(gx_);
          agy += std::abs(gy_);
          gy += gy_;
          hi = std::max(hi, v);
          lo = std::min(lo, v);
        }
      constexpr double n = kBlock * kBlock;
      const double mean = sum / n;
      double* f = &c2.at(by, bx, 0);
      f[0] = mean;
      f[1] = std::sqrt(std::max(0.0, sq / n - mean * mean));
      f[2] = agx / n;
      f[3] = agy / n;
      f[4] = hi;
      f[5] = lo;
      f[7] = gy / n;
    }
  // Centre-surround: block mean minus the mean over its 5x5 block neighbourhood.
  for (int by = 0; by < h2; ++by)
    for (int bx = 0; bx < w2; ++bx) {
      double s = 0;
      int count = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int y = by + dy, x = bx + dx;
          if (y < 0 || y >= h2 || x < 0 || x >= w2) continue;
          s += c2.at(y, x, 0);
          ++count;
        }
      c2.at(by, bx, 6) = c2.at(by, bx, 0) - s / count;
    }

  const auto c3 = average_pool(c2, 2);
  const auto c5 = average_pool(c3, 4);
  const auto c6 = max_pool(c5, 2);
  return {c2.cast<float>(), c3.cast<float>(), c5.cast<float>(), c6.cast<float>()};
}

}  // namespace ltn::synth
