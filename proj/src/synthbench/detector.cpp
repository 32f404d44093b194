#include "ltn/synthbench/detector.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace ltn::synth {

double iou(const BoxSpec& a, const BoxSpec& b) {
  const double ix = std::min(a.left() + a.width(), b.left() + b.width()) - std::max(a.left(), b.left());
  const double iy = std::min(a.top() + a.height(), b.top() + b.height()) - std::max(a.top(), b.top());
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.width() * a.height() + b.width() * b.height() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<Detection> non_maximum_suppression(std::vector<Detection> detections, double threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : detections) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.box.category == d.box.category && iou(k.box, d.box) > threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

void DetectorConfig::validate(const MixtureSpec& spec) const {
  if (static_cast<int>(aspects.size()) != spec.num_categories) {
    throw ConfigError("detector: need one anchor aspect per category");
  }
  if (spec.num_aspect_bins() != 1) throw ConfigError("detector: anchors support a single aspect bin");
  if (spec.scale_edges.empty()) throw ConfigError("detector: need at least one scale edge");
  if (sub_anchors < 1) throw ConfigError("detector: sub_anchors must be >= 1");
  for (double a : aspects) {
    if (!(a > 0)) throw ConfigError("detector: anchor aspects must be positive");
  }
  if (!(negative_iou <= positive_iou) || positive_iou <= 0 || positive_iou > 1) {
    throw ConfigError("detector: need 0 < negative_iou <= positive_iou <= 1");
  }
  if (anchors_per_image < 1 || max_positives < 0 || hard_negatives < 0) {
    throw ConfigError("detector: anchor sample sizes must be non-negative");
  }
  if (!(prior_probability > 0 && prior_probability < 1)) throw ConfigError("detector: prior must lie in (0, 1)");
}

namespace {

int odd_window(double cells) { return std::max(1, 2 * static_cast<int>(std::lround((cells - 1.0) / 2.0)) + 1); }

PoolWindow centered(int h, int w) {
  const int by = (h - 1) / 2, bx = (w - 1) / 2;
  return {-by, h - 1 - by, -bx, w - 1 - bx};
}

std::array<PoolWindow, kPoolWindows> anchor_windows(double h, double w) {
  const PoolWindow core = centered(odd_window(0.5 * h), odd_window(0.5 * w));
  const PoolWindow box = centered(odd_window(h), odd_window(w));
  const PoolWindow context = centered(odd_window(2.0 * h), odd_window(2.0 * w));
  return {core,
          box,
          context,
          {box.dy0 - 1, box.dy0 - 1, box.dx0, box.dx1},
          {box.dy1 + 1, box.dy1 + 1, box.dx0, box.dx1},
          {box.dy0, box.dy1, box.dx0 - 1, box.dx0 - 1},
          {box.dy0, box.dy1, box.dx1 + 1, box.dx1 + 1},
          {box.dy0, box.dy0, box.dx0, box.dx1},
          {box.dy1, box.dy1, box.dx0, box.dx1},
          {box.dy0, box.dy1, box.dx0, box.dx0},
          {box.dy0, box.dy1, box.dx1, box.dx1}};
}

}  // namespace

std::vector<AnchorShape> make_anchor_shapes(const DetectorConfig& config, const MixtureSpec& spec, double stride) {
  config.validate(spec);
  std::vector<double> bounds;
  bounds.push_back(spec.scale_edges.front() / 2.0);
  for (double e : spec.scale_edges) bounds.push_back(e);
  bounds.push_back(spec.scale_edges.back() * 2.0);
  std::vector<AnchorShape> out;
  for (int o = 0; o < spec.num_categories; ++o)
    for (int s = 0; s < spec.num_scale_bins(); ++s) {
      const double lo = bounds[static_cast<std::size_t>(s)], hi = bounds[static_cast<std::size_t>(s) + 1];
      for (int j = 0; j < config.sub_anchors; ++j) {
        AnchorShape a;
        a.group = spec.channel(o, s, 0);
        a.category = o;
        a.scale = lo * std::pow(hi / lo, (j + 0.5) / config.sub_anchors);
        a.aspect = config.aspects[static_cast<std::size_t>(o)];
        const double w = a.scale * std::sqrt(a.aspect) / stride, h = a.scale / std::sqrt(a.aspect) / stride;
        a.windows = anchor_windows(h, w);
        out.push_back(a);
      }
    }
  return out;
}

template <typename T>
ToyDetector<T>::ToyDetector(const DetectorConfig& config, const MixtureSpec& spec, int feature_channels,
                            double stride)
    : config_(config),
      spec_(spec),
      channels_(feature_channels),
      stride_(stride),
      anchors_(make_anchor_shapes(config, spec, stride)),
      weights_("det.w", Tensor<T>({spec.num_channels(), kPoolWindows * feature_channels})),
      biases_("det.b", Tensor<T>({static_cast<int>(anchors_.size())},
                                 static_cast<T>(std::log(config.prior_probability / (1.0 - config.prior_probability))))) {
  for (const auto& a : anchors_) {
    std::array<int, kPoolWindows> slots{};
    for (int j = 0; j < kPoolWindows; ++j) {
      const auto& key = a.windows[static_cast<std::size_t>(j)];
      const auto it = std::find(windows_.begin(), windows_.end(), key);
      slots[static_cast<std::size_t>(j)] = static_cast<int>(it - windows_.begin());
      if (it == windows_.end()) windows_.push_back(key);
    }
    anchor_windows_.push_back(slots);
  }
}

namespace {

struct WindowBounds {
  int y0, y1, x0, x1;
  double count;
};

// Empty windows have count 0.
WindowBounds clip_window(int y, int x, const PoolWindow& r, int H, int W) {
  WindowBounds b{std::max(0, y + r.dy0), std::min(H - 1, y + r.dy1), std::max(0, x + r.dx0),
                 std::min(W - 1, x + r.dx1), 0.0};
  if (b.y0 <= b.y1 && b.x0 <= b.x1) b.count = double(b.y1 - b.y0 + 1) * double(b.x1 - b.x0 + 1);
  return b;
}

}  // namespace

template <typename T>
Var ToyDetector<T>::logits(Tape<T>& tape, Var features) const {
  const auto& f = tape.value(features);
  if (f.rank() != 3 || f.dim(2) != channels_) {
    throw ContractViolation("detector: expected " + std::to_string(channels_) + " feature channels, got " +
                            to_string(f.shape()));
  }
  const int H = f.dim(0), W = f.dim(1), C = channels_, A = num_anchors(), K = spec_.num_channels();
  const std::size_t row = static_cast<std::size_t>(W + 1) * C;
  auto sat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(H + 1) * row, 0.0);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const T* src = &f.at(y, x, 0);
      double* dst = &(*sat)[static_cast<std::size_t>(y + 1) * row + static_cast<std::size_t>(x + 1) * C];
      for (int c = 0; c < C; ++c) dst[c] = static_cast<double>(src[c]) + dst[c - C] + dst[c - static_cast<std::ptrdiff_t>(row)] -
                                          dst[c - C - static_cast<std::ptrdiff_t>(row)];
    }
  }
  // Summed-area table projected on each scorer slice: proj[(k * J + j)][cell].
  const auto& wv = weights_.value;
  const std::size_t cells = static_cast<std::size_t>(H + 1) * (W + 1);
  std::vector<double> proj(static_cast<std::size_t>(K) * kPoolWindows * cells);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < kPoolWindows; ++j) {
      const T* w = wv.raw() + (static_cast<std::size_t>(k) * kPoolWindows + j) * C;
      double* p = &proj[(static_cast<std::size_t>(k) * kPoolWindows + j) * cells];
      for (std::size_t i = 0; i < cells; ++i) {
        const double* s = &(*sat)[i * C];
        double acc = 0.0;
        for (int c = 0; c < C; ++c) acc += static_cast<double>(w[c]) * s[c];
        p[i] = acc;
      }
    }
  const auto& bv = biases_.value;
  Tensor<T> out({H, W, A});
  for (int a = 0; a < A; ++a) {
    const int group = anchors_[static_cast<std::size_t>(a)].group;
    for (int j = 0; j < kPoolWindows; ++j) {
      const auto& r = windows_[static_cast<std::size_t>(anchor_windows_[static_cast<std::size_t>(a)][j])];
      const double* p = &proj[(static_cast<std::size_t>(group) * kPoolWindows + j) * cells];
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const auto b = clip_window(y, x, r, H, W);
          if (b.count == 0.0) continue;
          const auto at = [&](int yy, int xx) { return p[static_cast<std::size_t>(yy) * (W + 1) + xx]; };
          out.at(y, x, a) += static_cast<T>((at(b.y1 + 1, b.x1 + 1) - at(b.y0, b.x1 + 1) - at(b.y1 + 1, b.x0) + at(b.y0, b.x0)) / b.count);
        }
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at(y, x, a) += bv[static_cast<std::size_t>(a)];
  }

  const Var wvar = tape.param(weights_);
  const Var bvar = tape.param(biases_);
  std::vector<int> groups;
  for (const auto& a : anchors_) groups.push_back(a.group);
  return tape.record(std::move(out), {features, wvar, bvar}, [=, windows = windows_, anchor_windows = anchor_windows_](
                                                                 Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    const auto& w = t.value(wvar);
    const bool need_x = t.requires_grad(features), need_w = t.requires_grad(wvar), need_b = t.requires_grad(bvar);
    // Rectangle updates on a difference grid, prefix-summed once at the end.
    std::vector<double> diff(need_x ? static_cast<std::size_t>(H + 1) * (W + 1) * C : 0, 0.0);
    auto add_corner = [&](int y, int x, int c, double v) {
      diff[(static_cast<std::size_t>(y) * (W + 1) + x) * C + c] += v;
    };
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int a = 0; a < A; ++a) {
          const T gv = g.at(y, x, a);
          if (gv == T(0)) continue;
          if (need_b) t.grad(bvar)[static_cast<std::size_t>(a)] += gv;
          const int group = groups[static_cast<std::size_t>(a)];
          for (int j = 0; j < kPoolWindows; ++j) {
            const auto b = clip_window(y, x, windows[static_cast<std::size_t>(anchor_windows[static_cast<std::size_t>(a)][j])],
                                       H, W);
            if (b.count == 0.0) continue;
            const std::size_t slot = (static_cast<std::size_t>(group) * kPoolWindows + j) * C;
            if (need_w) {
              T* gw = t.grad(wvar).raw() + slot;
              const double* p11 = &(*sat)[static_cast<std::size_t>(b.y1 + 1) * row + static_cast<std::size_t>(b.x1 + 1) * C];
              const double* p01 = &(*sat)[static_cast<std::size_t>(b.y0) * row + static_cast<std::size_t>(b.x1 + 1) * C];
              const double* p10 = &(*sat)[static_cast<std::size_t>(b.y1 + 1) * row + static_cast<std::size_t>(b.x0) * C];
              const double* p00 = &(*sat)[static_cast<std::size_t>(b.y0) * row + static_cast<std::size_t>(b.x0) * C];
              for (int c = 0; c < C; ++c) gw[c] += gv * static_cast<T>((p11[c] - p01[c] - p10[c] + p00[c]) / b.count);
            }
            if (need_x) {
              const T* wr = w.raw() + slot;
              for (int c = 0; c < C; ++c) {
                const double v = static_cast<double>(gv) * static_cast<double>(wr[c]) / b.count;
                add_corner(b.y0, b.x0, c, v);
                add_corner(b.y0, b.x1 + 1, c, -v);
                add_corner(b.y1 + 1, b.x0, c, -v);
                add_corner(b.y1 + 1, b.x1 + 1, c, v);
              }
            }
          }
        }
    if (need_x) {
      auto& gx = t.grad(features);
      std::vector<double> acc(static_cast<std::size_t>(W + 1) * C, 0.0);
      for (int y = 0; y < H; ++y) {
        std::vector<double> run(static_cast<std::size_t>(C), 0.0);
        for (int x = 0; x < W; ++x) {
          const double* d = &diff[(static_cast<std::size_t>(y) * (W + 1) + x) * C];
          T* dst = &gx.at(y, x, 0);
          for (int c = 0; c < C; ++c) {
            run[static_cast<std::size_t>(c)] += d[c];
            acc[static_cast<std::size_t>(x) * C + c] += run[static_cast<std::size_t>(c)];
            dst[c] += static_cast<T>(acc[static_cast<std::size_t>(x) * C + c]);
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> ToyDetector<T>::logit_values(const Tensor<T>& features) const {
  Tape<T> tape;
  return tape.value(logits(tape, tape.constant(features)));
}

template <typename T>
BoxSpec ToyDetector<T>::anchor_box(int y, int x, int anchor) const {
  const auto& s = anchors_.at(static_cast<std::size_t>(anchor));
  return {(x + 0.5) * stride_, (y + 0.5) * stride_, s.scale, s.aspect, s.category};
}

template <typename T>
ParameterList<T> ToyDetector<T>::parameters() {
  return {&weights_, &biases_};
}

std::vector<signed char> label_anchors(const std::vector<AnchorShape>& anchors, int feat_h, int feat_w,
                                       double stride, const std::vector<BoxSpec>& truth,
                                       const DetectorConfig& config) {
  const int A = static_cast<int>(anchors.size());
  const std::size_t n = static_cast<std::size_t>(feat_h) * feat_w * A;
  std::vector<double> max_iou(n, 0.0);
  std::vector<int> best_index(truth.size(), -1);
  std::vector<double> best_iou(truth.size(), 0.0);
  for (std::size_t g = 0; g < truth.size(); ++g) {
    const auto& t = truth[g];
    for (int a = 0; a < A; ++a) {
      const auto& s = anchors[static_cast<std::size_t>(a)];
      if (s.category != t.category) continue;
      // Only anchors whose box can intersect the ground truth.
      const BoxSpec shape{0.0, 0.0, s.scale, s.aspect, s.category};
      const double rx = 0.5 * (shape.width() + t.width()), ry = 0.5 * (shape.height() + t.height());
      const int x0 = std::max(0, static_cast<int>(std::ceil((t.cx - rx) / stride - 0.5)));
      const int x1 = std::min(feat_w - 1, static_cast<int>(std::floor((t.cx + rx) / stride - 0.5)));
      const int y0 = std::max(0, static_cast<int>(std::ceil((t.cy - ry) / stride - 0.5)));
      const int y1 = std::min(feat_h - 1, static_cast<int>(std::floor((t.cy + ry) / stride - 0.5)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const BoxSpec box{(x + 0.5) * stride, (y + 0.5) * stride, s.scale, s.aspect, s.category};
          const double v = iou(box, t);
          const int idx = (y * feat_w + x) * A + a;
          max_iou[static_cast<std::size_t>(idx)] = std::max(max_iou[static_cast<std::size_t>(idx)], v);
          if (v > best_iou[g]) {
            best_iou[g] = v;
            best_index[g] = idx;
          }
        }
    }
  }
  std::vector<signed char> labels(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (max_iou[i] >= config.positive_iou) {
      labels[i] = 1;
    } else if (max_iou[i] >= config.negative_iou) {
      labels[i] = -1;
    }
  }
  for (std::size_t g = 0; g < truth.size(); ++g) {
    if (best_index[g] >= 0 && best_iou[g] >= config.negative_iou) labels[static_cast<std::size_t>(best_index[g])] = 1;
  }
  return labels;
}

AnchorSample sample_anchors(const std::vector<signed char>& labels, std::span<const float> logits,
                            const DetectorConfig& config, Rng& rng) {
  if (labels.size() != logits.size()) throw ContractViolation("sample_anchors: label and logit counts differ");
  std::vector<int> positives, negatives;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) positives.push_back(static_cast<int>(i));
    if (labels[i] == 0) negatives.push_back(static_cast<int>(i));
  }
  for (std::size_t i = positives.size(); i > 1; --i) {
    std::swap(positives[i - 1], positives[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
  }
  AnchorSample out;
  const std::size_t num_pos = std::min(positives.size(), static_cast<std::size_t>(config.max_positives));
  out.indices.assign(positives.begin(), positives.begin() + static_cast<std::ptrdiff_t>(num_pos));
  out.targets.assign(num_pos, 1.0);

  const std::size_t budget = static_cast<std::size_t>(config.anchors_per_image) > num_pos
                                 ? static_cast<std::size_t>(config.anchors_per_image) - num_pos
                                 : 0;
  const std::size_t hard = std::min({budget, negatives.size(), static_cast<std::size_t>(config.hard_negatives)});
  std::partial_sort(negatives.begin(), negatives.begin() + static_cast<std::ptrdiff_t>(hard), negatives.end(),
                    [&](int a, int b) {
                      const float la = logits[static_cast<std::size_t>(a)], lb = logits[static_cast<std::size_t>(b)];
                      return la != lb ? la > lb : a < b;
                    });
  for (std::size_t i = 0; i < hard; ++i) out.indices.push_back(negatives[i]);
  const std::size_t easy = std::min(budget - hard, negatives.size() - hard);
  for (std::size_t i = 0; i < easy; ++i) {
    const std::size_t j = hard + i + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(negatives.size() - hard - i)));
    std::swap(negatives[hard + i], negatives[j]);
    out.indices.push_back(negatives[hard + i]);
  }
  out.targets.resize(out.indices.size(), 0.0);
  return out;
}

template <typename T>
std::vector<Detection> decode_detections(const ToyDetector<T>& detector, const Tensor<T>& logits,
                                         const std::optional<LateLayout>& late) {
  const auto& cfg = detector.config();
  const int H = logits.dim(0), W = logits.dim(1), A = logits.dim(2);
  if (A != detector.num_anchors()) throw ContractViolation("decode: logit channels do not match the anchors");
  const int categories = detector.spec().num_categories;
  std::vector<std::vector<Detection>> candidates(static_cast<std::size_t>(categories));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int a = 0; a < A; ++a) {
        const double z = static_cast<double>(logits.at(y, x, a));
        double score = 1.0 / (1.0 + std::exp(-z));
        const BoxSpec box = detector.anchor_box(y, x, a);
        if (late) score = late_fuse(score, layout_value_at(*late->grid, box, *late->spec), late->alpha);
        if (score > cfg.score_threshold) candidates[static_cast<std::size_t>(box.category)].push_back({box, score});
      }
  std::vector<Detection> out;
  for (auto& c : candidates) {
    std::stable_sort(c.begin(), c.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(c.size()) > cfg.pre_nms_top) c.resize(static_cast<std::size_t>(cfg.pre_nms_top));
    const auto kept = non_maximum_suppression(std::move(c), cfg.nms_iou);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(out.size()) > cfg.max_detections) out.resize(static_cast<std::size_t>(cfg.max_detections));
  return out;
}

template class ToyDetector<float>;
template class ToyDetector<double>;
template std::vector<Detection> decode_detections<float>(const ToyDetector<float>&, const Tensor<float>&,
                                                         const std::optional<LateLayout>&);
template std::vector<Detection> decode_detections<double>(const ToyDetector<double>&, const Tensor<double>&,
                                                          const std::optional<LateLayout>&);

}  // namespace ltn::synth
