#include "ltn/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace ltn::nn {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

template <typename T>
void require_rank3(const Tensor<T>& t, const char* op) {
  require(t.rank() == 3, std::string(op) + ": expected an H x W x C tensor, got " + to_string(t.shape()));
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.raw();
  const T* s = src.raw();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// Pixel coordinate of a normalized align-corners coordinate. Values within a
// few ulps of a pixel centre are snapped onto it so that the identity grid
// reproduces its source exactly.
template <typename T>
T unnormalize(T g, int extent) {
  if (extent == 1) return T(0);
  const T x = (g + T(1)) * T(0.5) * T(extent - 1);
  const T r = std::nearbyint(x);
  const T tol = T(8) * std::numeric_limits<T>::epsilon() * T(extent);
  return std::abs(x - r) <= tol ? r : x;
}

template <typename T>
T normalized_base(int i, int extent) {
  if (extent == 1) return T(0);
  return T(2 * i - (extent - 1)) / T(extent - 1);
}

// Box sums through a summed-area table kept in double.
template <typename T>
Tensor<T> box_mean_values(const Tensor<T>& in, int win_h, int win_w, bool divide_by_count, int before_h,
                          int before_w) {
  const int H = in.dim(0), W = in.dim(1), C = in.dim(2);
  const std::size_t stride_row = static_cast<std::size_t>(W + 1) * C;
  std::vector<double> sat(static_cast<std::size_t>(H + 1) * stride_row, 0.0);
  for (int y = 0; y < H; ++y) {
    std::vector<double> row(static_cast<std::size_t>(C), 0.0);
    for (int x = 0; x < W; ++x) {
      const T* src = &in.at(y, x, 0);
      double* dst = &sat[static_cast<std::size_t>(y + 1) * stride_row + static_cast<std::size_t>(x + 1) * C];
      const double* above = dst - stride_row;
      for (int c = 0; c < C; ++c) {
        row[static_cast<std::size_t>(c)] += static_cast<double>(src[c]);
        dst[c] = above[c] + row[static_cast<std::size_t>(c)];
      }
    }
  }
  Tensor<T> out(in.shape());
  for (int y = 0; y < H; ++y) {
    const int y0 = std::max(0, y - before_h);
    const int y1 = std::min(H - 1, y - before_h + win_h - 1);
    for (int x = 0; x < W; ++x) {
      const int x0 = std::max(0, x - before_w);
      const int x1 = std::min(W - 1, x - before_w + win_w - 1);
      T* dst = &out.at(y, x, 0);
      if (y1 < y0 || x1 < x0) continue;
      const double count = divide_by_count ? double(y1 - y0 + 1) * double(x1 - x0 + 1) : 1.0;
      const double* a = &sat[static_cast<std::size_t>(y1 + 1) * stride_row + static_cast<std::size_t>(x1 + 1) * C];
      const double* b = &sat[static_cast<std::size_t>(y0) * stride_row + static_cast<std::size_t>(x1 + 1) * C];
      const double* c0 = &sat[static_cast<std::size_t>(y1 + 1) * stride_row + static_cast<std::size_t>(x0) * C];
      const double* d = &sat[static_cast<std::size_t>(y0) * stride_row + static_cast<std::size_t>(x0) * C];
      for (int c = 0; c < C; ++c) dst[c] = static_cast<T>((a[c] - b[c] - c0[c] + d[c]) / count);
    }
  }
  return out;
}

}  // namespace

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, int stride, int pad) {
  const auto& in = tape.value(input);
  const auto& k = tape.value(kernel);
  const auto& b = tape.value(bias);
  require_rank3(in, "conv2d");
  require(k.rank() == 4, "conv2d: kernel must be kh x kw x cin x cout, got " + to_string(k.shape()));
  require(k.dim(0) % 2 == 1 && k.dim(1) % 2 == 1,
          "conv2d: kernel spatial extent must be odd, got " + to_string(k.shape()));
  require(k.dim(2) == in.dim(2), "conv2d: input " + to_string(in.shape()) + " does not match kernel " +
                                     to_string(k.shape()));
  require(b.size() == static_cast<std::size_t>(k.dim(3)),
          "conv2d: bias " + to_string(b.shape()) + " does not match kernel " + to_string(k.shape()));
  require(stride >= 1 && pad >= 0, "conv2d: stride must be positive and pad non-negative");

  const int H = in.dim(0), W = in.dim(1), Ci = in.dim(2);
  const int KH = k.dim(0), KW = k.dim(1), Co = k.dim(3);
  const int Ho = (H + 2 * pad - KH) / stride + 1;
  const int Wo = (W + 2 * pad - KW) / stride + 1;
  require(H + 2 * pad >= KH && W + 2 * pad >= KW,
          "conv2d: input " + to_string(in.shape()) + " smaller than kernel " + to_string(k.shape()));

  Tensor<T> out({Ho, Wo, Co});
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      T* o = &out.at(oy, ox, 0);
      for (int co = 0; co < Co; ++co) o[co] = b[static_cast<std::size_t>(co)];
      for (int ky = 0; ky < KH; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < KW; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= W) continue;
          const T* x = &in.at(iy, ix, 0);
          const T* kk = k.raw() + (static_cast<std::size_t>(ky * KW + kx) * Ci) * Co;
          for (int ci = 0; ci < Ci; ++ci) {
            const T v = x[ci];
            if (v == T(0)) continue;
            const T* krow = kk + static_cast<std::size_t>(ci) * Co;
            for (int co = 0; co < Co; ++co) o[co] += v * krow[co];
          }
        }
      }
    }
  }

  return tape.record(std::move(out), {input, kernel, bias}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    const auto& x = t.value(input);
    const auto& w = t.value(kernel);
    if (t.requires_grad(input)) {
      // Transposed kernel [kh, kw, cout, cin] keeps the inner loop contiguous.
      std::vector<T> wt(w.size());
      for (int tap = 0; tap < KH * KW; ++tap) {
        for (int ci = 0; ci < Ci; ++ci) {
          for (int co = 0; co < Co; ++co) {
            wt[(static_cast<std::size_t>(tap) * Co + co) * Ci + ci] =
                w[(static_cast<std::size_t>(tap) * Ci + ci) * Co + co];
          }
        }
      }
      auto& gx = t.grad(input);
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          const T* go = &g.at(oy, ox, 0);
          for (int ky = 0; ky < KH; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              T* gi = &gx.at(iy, ix, 0);
              const T* kk = wt.data() + static_cast<std::size_t>(ky * KW + kx) * Co * Ci;
              for (int co = 0; co < Co; ++co) {
                const T gv = go[co];
                if (gv == T(0)) continue;
                const T* krow = kk + static_cast<std::size_t>(co) * Ci;
                for (int ci = 0; ci < Ci; ++ci) gi[ci] += gv * krow[ci];
              }
            }
          }
        }
      }
    }
    if (t.requires_grad(kernel)) {
      auto& gk = t.grad(kernel);
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          const T* go = &g.at(oy, ox, 0);
          for (int ky = 0; ky < KH; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              const T* xv = &x.at(iy, ix, 0);
              T* gkk = gk.raw() + static_cast<std::size_t>(ky * KW + kx) * Ci * Co;
              for (int ci = 0; ci < Ci; ++ci) {
                const T v = xv[ci];
                if (v == T(0)) continue;
                T* grow = gkk + static_cast<std::size_t>(ci) * Co;
                for (int co = 0; co < Co; ++co) grow[co] += v * go[co];
              }
            }
          }
        }
      }
    }
    if (t.requires_grad(bias)) {
      auto& gb = t.grad(bias);
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          const T* go = &g.at(oy, ox, 0);
          for (int co = 0; co < Co; ++co) gb[static_cast<std::size_t>(co)] += go[co];
        }
      }
    }
  });
}

template <typename T>
Var max_pool2d(Tape<T>& tape, Var input) {
  const auto& in = tape.value(input);
  require_rank3(in, "max_pool2d");
  const int H = in.dim(0), W = in.dim(1), C = in.dim(2);
  require(H % 2 == 0 && W % 2 == 0, "max_pool2d: spatial extents must be divisible by 2, got " + to_string(in.shape()));
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> out({Ho, Wo, C});
  std::vector<std::size_t> arg(out.size());
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      for (int c = 0; c < C; ++c) {
        std::size_t best = 0;
        T best_v = T(0);
        bool first = true;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx =
                (static_cast<std::size_t>(2 * oy + dy) * W + static_cast<std::size_t>(2 * ox + dx)) * C + c;
            if (first || in[idx] > best_v) {
              best_v = in[idx];
              best = idx;
              first = false;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(oy) * Wo + ox) * C + c;
        out[o] = best_v;
        arg[o] = best;
      }
    }
  }
  return tape.record(std::move(out), {input}, [=, arg = std::move(arg)](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    auto& gx = t.grad(input);
    for (std::size_t o = 0; o < g.size(); ++o) gx[arg[o]] += g[o];
  });
}

template <typename T>
Var fully_connected(Tape<T>& tape, Var input, Var weight, Var bias) {
  const auto& x = tape.value(input);
  const auto& w = tape.value(weight);
  const auto& b = tape.value(bias);
  require(w.rank() == 2, "fully_connected: weight must be in x out, got " + to_string(w.shape()));
  const int n = w.dim(0), m = w.dim(1);
  require(x.size() == static_cast<std::size_t>(n), "fully_connected: input " + to_string(x.shape()) +
                                                       " does not match weight " + to_string(w.shape()));
  require(b.size() == static_cast<std::size_t>(m),
          "fully_connected: bias " + to_string(b.shape()) + " does not match weight " + to_string(w.shape()));
  Tensor<T> out({m});
  for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(j)] = b[static_cast<std::size_t>(j)];
  for (int i = 0; i < n; ++i) {
    const T v = x[static_cast<std::size_t>(i)];
    if (v == T(0)) continue;
    const T* row = w.raw() + static_cast<std::size_t>(i) * m;
    T* o = out.raw();
    for (int j = 0; j < m; ++j) o[j] += v * row[j];
  }
  return tape.record(std::move(out), {input, weight, bias}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    const auto& xv = t.value(input);
    const auto& wv = t.value(weight);
    if (t.requires_grad(input)) {
      auto& gx = t.grad(input);
      for (int i = 0; i < n; ++i) {
        const T* row = wv.raw() + static_cast<std::size_t>(i) * m;
        T acc = T(0);
        for (int j = 0; j < m; ++j) acc += row[j] * g[static_cast<std::size_t>(j)];
        gx[static_cast<std::size_t>(i)] += acc;
      }
    }
    if (t.requires_grad(weight)) {
      auto& gw = t.grad(weight);
      for (int i = 0; i < n; ++i) {
        const T v = xv[static_cast<std::size_t>(i)];
        if (v == T(0)) continue;
        T* row = gw.raw() + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) row[j] += v * g[static_cast<std::size_t>(j)];
      }
    }
    if (t.requires_grad(bias)) accumulate(t.grad(bias), g);
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return tape.record(std::move(out), {input}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    const auto& xv = t.value(input);
    auto& gx = t.grad(input);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) gx[i] += g[i];
    }
  });
}

template <typename T>
Var softmax(Tape<T>& tape, Var logits) {
  const auto& z = tape.value(logits);
  require(z.rank() == 1 && z.size() >= 1, "softmax: expected rank-1 logits, got " + to_string(z.shape()));
  Tensor<T> out(z.shape());
  T mx = z[0];
  for (std::size_t i = 1; i < z.size(); ++i) mx = std::max(mx, z[i]);
  T total = T(0);
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - mx);
    total += out[i];
  }
  for (std::size_t i = 0; i < z.size(); ++i) out[i] /= total;
  return tape.record(std::move(out), {logits}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    const auto& y = t.value_by_id(self);
    T dot = T(0);
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
    auto& gz = t.grad(logits);
    for (std::size_t i = 0; i < g.size(); ++i) gz[i] += y[i] * (g[i] - dot);
  });
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  require_rank3(va, "concat_channels");
  require_rank3(vb, "concat_channels");
  require(va.dim(0) == vb.dim(0) && va.dim(1) == vb.dim(1),
          "concat_channels: spatial extents differ, " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
  const int H = va.dim(0), W = va.dim(1), Ca = va.dim(2), Cb = vb.dim(2);
  Tensor<T> out({H, W, Ca + Cb});
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      std::copy_n(&va.at(y, x, 0), Ca, &out.at(y, x, 0));
      std::copy_n(&vb.at(y, x, 0), Cb, &out.at(y, x, Ca));
    }
  }
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          for (int c = 0; c < Ca; ++c) ga.at(y, x, c) += g.at(y, x, c);
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          for (int c = 0; c < Cb; ++c) gb.at(y, x, c) += g.at(y, x, Ca + c);
    }
  });
}

template <typename T>
Var slice_channels(Tape<T>& tape, Var input, int begin, int end) {
  const auto& v = tape.value(input);
  require_rank3(v, "slice_channels");
  require(0 <= begin && begin < end && end <= v.dim(2), "slice_channels: bad channel range [" +
                                                            std::to_string(begin) + ", " + std::to_string(end) +
                                                            ") for " + to_string(v.shape()));
  const int H = v.dim(0), W = v.dim(1), C = end - begin;
  Tensor<T> out({H, W, C});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) std::copy_n(&v.at(y, x, begin), C, &out.at(y, x, 0));
  return tape.record(std::move(out), {input}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    auto& gi = t.grad(input);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < C; ++c) gi.at(y, x, begin + c) += g.at(y, x, c);
  });
}

namespace {

struct AxisTaps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

AxisTaps resize_taps(int in, int out) {
  AxisTaps taps;
  taps.lo.resize(static_cast<std::size_t>(out));
  taps.hi.resize(static_cast<std::size_t>(out));
  taps.frac.resize(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    double pos = 0.0;
    if (out > 1 && in > 1) pos = static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    int lo = static_cast<int>(std::floor(pos));
    lo = std::clamp(lo, 0, in - 1);
    const int hi = std::min(lo + 1, in - 1);
    taps.lo[static_cast<std::size_t>(o)] = lo;
    taps.hi[static_cast<std::size_t>(o)] = hi;
    taps.frac[static_cast<std::size_t>(o)] = pos - lo;
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear_values(const Tensor<T>& in, int out_h, int out_w) {
  require_rank3(in, "bilinear_resize");
  require(out_h > 0 && out_w > 0, "bilinear_resize: target extents must be positive");
  const int C = in.dim(2);
  const AxisTaps ty = resize_taps(in.dim(0), out_h);
  const AxisTaps tx = resize_taps(in.dim(1), out_w);
  Tensor<T> out({out_h, out_w, C});
  for (int oy = 0; oy < out_h; ++oy) {
    const auto sy = static_cast<std::size_t>(oy);
    const T wy = static_cast<T>(ty.frac[sy]);
    for (int ox = 0; ox < out_w; ++ox) {
      const auto sx = static_cast<std::size_t>(ox);
      const T wx = static_cast<T>(tx.frac[sx]);
      const T* v00 = &in.at(ty.lo[sy], tx.lo[sx], 0);
      const T* v01 = &in.at(ty.lo[sy], tx.hi[sx], 0);
      const T* v10 = &in.at(ty.hi[sy], tx.lo[sx], 0);
      const T* v11 = &in.at(ty.hi[sy], tx.hi[sx], 0);
      T* o = &out.at(oy, ox, 0);
      for (int c = 0; c < C; ++c) {
        const T top = v00[c] + wx * (v01[c] - v00[c]);
        const T bottom = v10[c] + wx * (v11[c] - v10[c]);
        o[c] = top + wy * (bottom - top);
      }
    }
  }
  return out;
}

template <typename T>
Var bilinear_resize(Tape<T>& tape, Var input, int out_h, int out_w) {
  const auto& in = tape.value(input);
  Tensor<T> out = resize_bilinear_values(in, out_h, out_w);
  const int H = in.dim(0), W = in.dim(1), C = in.dim(2);
  return tape.record(std::move(out), {input}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    auto& gi = t.grad(input);
    const AxisTaps ty = resize_taps(H, out_h);
    const AxisTaps tx = resize_taps(W, out_w);
    for (int oy = 0; oy < out_h; ++oy) {
      const auto sy = static_cast<std::size_t>(oy);
      const T wy = static_cast<T>(ty.frac[sy]);
      for (int ox = 0; ox < out_w; ++ox) {
        const auto sx = static_cast<std::size_t>(ox);
        const T wx = static_cast<T>(tx.frac[sx]);
        const T w00 = (T(1) - wy) * (T(1) - wx), w01 = (T(1) - wy) * wx;
        const T w10 = wy * (T(1) - wx), w11 = wy * wx;
        const T* go = &g.at(oy, ox, 0);
        T* g00 = &gi.at(ty.lo[sy], tx.lo[sx], 0);
        T* g01 = &gi.at(ty.lo[sy], tx.hi[sx], 0);
        T* g10 = &gi.at(ty.hi[sy], tx.lo[sx], 0);
        T* g11 = &gi.at(ty.hi[sy], tx.hi[sx], 0);
        for (int c = 0; c < C; ++c) {
          g00[c] += w00 * go[c];
          g01[c] += w01 * go[c];
          g10[c] += w10 * go[c];
          g11[c] += w11 * go[c];
        }
      }
    }
  });
}

template <typename T>
Var reshape(Tape<T>& tape, Var input, Shape shape) {
  const auto& v = tape.value(input);
  require(shape_size(shape) == v.size(),
          "reshape: cannot view " + to_string(v.shape()) + " as " + to_string(shape));
  return tape.record(v.reshaped(std::move(shape)), {input}, [=](Tape<T>& t, int self) {
    accumulate(t.grad(input), t.grad_by_id(self));
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  require(va.shape() == vb.shape(), "add: shapes differ, " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    if (t.requires_grad(a)) accumulate(t.grad(a), g);
    if (t.requires_grad(b)) accumulate(t.grad(b), g);
  });
}

template <typename T>
Var multiply(Tape<T>& tape, Var a, Var b) {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  require(va.shape() == vb.shape(),
          "multiply: shapes differ, " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      const auto& other = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * other[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      const auto& other = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * other[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  const auto& va = tape.value(a);
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * factor;
  return tape.record(std::move(out), {a}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
  Tensor<T> out({1}, tape.value(a).sum());
  return tape.record(std::move(out), {a}, [=](Tape<T>& t, int self) {
    const T g = t.grad_by_id(self)[0];
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

template <typename T>
Var affine_grid(Tape<T>& tape, Var theta, int out_h, int out_w) {
  const auto& th = tape.value(theta);
  require(th.size() == 6, "affine_grid: theta must hold 6 values, got " + to_string(th.shape()));
  require(out_h > 0 && out_w > 0, "affine_grid: extents must be positive");
  Tensor<T> grid({out_h, out_w, 2});
  for (int i = 0; i < out_h; ++i) {
    const T yb = normalized_base<T>(i, out_h);
    for (int j = 0; j < out_w; ++j) {
      const T xb = normalized_base<T>(j, out_w);
      grid.at(i, j, 0) = th[0] * xb + th[1] * yb + th[2];
      grid.at(i, j, 1) = th[3] * xb + th[4] * yb + th[5];
    }
  }
  return tape.record(std::move(grid), {theta}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    auto& gt = t.grad(theta);
    for (int i = 0; i < out_h; ++i) {
      const T yb = normalized_base<T>(i, out_h);
      for (int j = 0; j < out_w; ++j) {
        const T xb = normalized_base<T>(j, out_w);
        const T gx = g.at(i, j, 0), gy = g.at(i, j, 1);
        gt[0] += gx * xb;
        gt[1] += gx * yb;
        gt[2] += gx;
        gt[3] += gy * xb;
        gt[4] += gy * yb;
        gt[5] += gy;
      }
    }
  });
}

template <typename T>
void sample_bilinear_at(const Tensor<T>& src, T px, T py, std::span<T> out) {
  const int H = src.dim(0), W = src.dim(1), C = src.dim(2);
  std::fill(out.begin(), out.end(), T(0));
  if (!std::isfinite(px) || !std::isfinite(py)) return;
  const T fx = std::floor(px), fy = std::floor(py);
  if (fx < T(-1) || fy < T(-1) || fx > T(W) || fy > T(H)) return;
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const T wx = px - fx, wy = py - fy;
  auto tap = [&](int y, int x, int c) -> T {
    return (y >= 0 && y < H && x >= 0 && x < W) ? src.at(y, x, c) : T(0);
  };
  for (int c = 0; c < C; ++c) {
    const T v00 = tap(y0, x0, c), v01 = tap(y0, x0 + 1, c);
    const T v10 = tap(y0 + 1, x0, c), v11 = tap(y0 + 1, x0 + 1, c);
    const T top = v00 + wx * (v01 - v00);
    const T bottom = v10 + wx * (v11 - v10);
    out[static_cast<std::size_t>(c)] = top + wy * (bottom - top);
  }
}

template <typename T>
Var grid_sample(Tape<T>& tape, Var source, Var grid) {
  const auto& src = tape.value(source);
  const auto& gr = tape.value(grid);
  require_rank3(src, "grid_sample");
  require(gr.rank() == 3 && gr.dim(2) == 2, "grid_sample: grid must be Ho x Wo x 2, got " + to_string(gr.shape()));
  const int H = src.dim(0), W = src.dim(1), C = src.dim(2);
  const int Ho = gr.dim(0), Wo = gr.dim(1);
  Tensor<T> out({Ho, Wo, C});
  for (int i = 0; i < Ho; ++i) {
    for (int j = 0; j < Wo; ++j) {
      const T px = unnormalize(gr.at(i, j, 0), W);
      const T py = unnormalize(gr.at(i, j, 1), H);
      sample_bilinear_at(src, px, py, std::span<T>(&out.at(i, j, 0), static_cast<std::size_t>(C)));
    }
  }
  return tape.record(std::move(out), {source, grid}, [=](Tape<T>& t, int self) {
    const auto& g = t.grad_by_id(self);
    const auto& s = t.value(source);
    const auto& gv = t.value(grid);
    const bool want_src = t.requires_grad(source);
    const bool want_grid = t.requires_grad(grid);
    Tensor<T>* gs = want_src ? &t.grad(source) : nullptr;
    Tensor<T>* gg = want_grid ? &t.grad(grid) : nullptr;
    const T half_w = W > 1 ? T(0.5) * T(W - 1) : T(0);
    const T half_h = H > 1 ? T(0.5) * T(H - 1) : T(0);
    for (int i = 0; i < Ho; ++i) {
      for (int j = 0; j < Wo; ++j) {
        const T px = unnormalize(gv.at(i, j, 0), W);
        const T py = unnormalize(gv.at(i, j, 1), H);
        if (!std::isfinite(px) || !std::isfinite(py)) continue;
        const T fx = std::floor(px), fy = std::floor(py);
        if (fx < T(-1) || fy < T(-1) || fx > T(W) || fy > T(H)) continue;
        const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        const T wx = px - fx, wy = py - fy;
        const bool in00 = y0 >= 0 && y0 < H && x0 >= 0 && x0 < W;
        const bool in01 = y0 >= 0 && y0 < H && x0 + 1 >= 0 && x0 + 1 < W;
        const bool in10 = y0 + 1 >= 0 && y0 + 1 < H && x0 >= 0 && x0 < W;
        const bool in11 = y0 + 1 >= 0 && y0 + 1 < H && x0 + 1 >= 0 && x0 + 1 < W;
        const T* go = &g.at(i, j, 0);
        T dx = T(0), dy = T(0);
        for (int c = 0; c < C; ++c) {
          const T gc = go[c];
          if (gc == T(0)) continue;
          const T v00 = in00 ? s.at(y0, x0, c) : T(0);
          const T v01 = in01 ? s.at(y0, x0 + 1, c) : T(0);
          const T v10 = in10 ? s.at(y0 + 1, x0, c) : T(0);
          const T v11 = in11 ? s.at(y0 + 1, x0 + 1, c) : T(0);
          if (gs) {
            if (in00) gs->at(y0, x0, c) += gc * (T(1) - wy) * (T(1) - wx);
            if (in01) gs->at(y0, x0 + 1, c) += gc * (T(1) - wy) * wx;
            if (in10) gs->at(y0 + 1, x0, c) += gc * wy * (T(1) - wx);
            if (in11) gs->at(y0 + 1, x0 + 1, c) += gc * wy * wx;
          }
          dx += gc * ((T(1) - wy) * (v01 - v00) + wy * (v11 - v10));
          dy += gc * ((T(1) - wx) * (v10 - v00) + wx * (v11 - v01));
        }
        if (gg) {
          gg->at(i, j, 0) += dx * half_w;
          gg->at(i, j, 1) += dy * half_h;
        }
      }
    }
  });
}

template <typename T>
Var mean_squared_error(Tape<T>& tape, Var a, Var b) {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  require(va.shape() == vb.shape(),
          "mean_squared_error: shapes differ, " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
  T acc = T(0);
  for (std::size_t i = 0; i < va.size(); ++i) {
    const T d = va[i] - vb[i];
    acc += d * d;
  }
  const T n = static_cast<T>(va.size());
  return tape.record(Tensor<T>({1}, acc / n), {a, b}, [=](Tape<T>& t, int self) {
    const T g = t.grad_by_id(self)[0] * T(2) / n;
    const auto& x = t.value(a);
    const auto& y = t.value(b);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g * (x[i] - y[i]);
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < x.size(); ++i) gb[i] -= g * (x[i] - y[i]);
    }
  });
}

template <typename T>
Var negative_log_likelihood(Tape<T>& tape, Var probabilities, int label, T floor) {
  const auto& p = tape.value(probabilities);
  require(label >= 0 && static_cast<std::size_t>(label) < p.size(),
          "negative_log_likelihood: label " + std::to_string(label) + " outside [0, " + std::to_string(p.size()) + ")");
  const T pl = p[static_cast<std::size_t>(label)];
  const T clipped = std::max(pl, floor);
  return tape.record(Tensor<T>({1}, -std::log(clipped)), {probabilities}, [=](Tape<T>& t, int self) {
    if (pl <= floor) return;
    t.grad(probabilities)[static_cast<std::size_t>(label)] -= t.grad_by_id(self)[0] / pl;
  });
}

template <typename T>
Var box_mean(Tape<T>& tape, Var input, int win_h, int win_w) {
  const auto& in = tape.value(input);
  require_rank3(in, "box_mean");
  require(win_h >= 1 && win_w >= 1, "box_mean: window must be at least 1x1");
  const int before_h = (win_h - 1) / 2, before_w = (win_w - 1) / 2;
  Tensor<T> out = box_mean_values(in, win_h, win_w, true, before_h, before_w);
  const int H = in.dim(0), W = in.dim(1), C = in.dim(2);
  return tape.record(std::move(out), {input}, [=](Tape<T>& t, int self) {
    // Divide by each output's count, then gather with the mirrored window.
    Tensor<T> scaled = t.grad_by_id(self);
    for (int y = 0; y < H; ++y) {
      const int rows = std::min(H - 1, y - before_h + win_h - 1) - std::max(0, y - before_h) + 1;
      for (int x = 0; x < W; ++x) {
        const int cols = std::min(W - 1, x - before_w + win_w - 1) - std::max(0, x - before_w) + 1;
        const T inv = T(1) / static_cast<T>(rows * cols);
        T* s = &scaled.at(y, x, 0);
        for (int c = 0; c < C; ++c) s[c] *= inv;
      }
    }
    const Tensor<T> back = box_mean_values(scaled, win_h, win_w, false, win_h - 1 - before_h, win_w - 1 - before_w);
    accumulate(t.grad(input), back);
  });
}

template <typename T>
Var sigmoid_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> indices, std::span<const T> targets) {
  const auto& z = tape.value(logits);
  require(indices.size() == targets.size() && !indices.empty(),
          "sigmoid_cross_entropy: need matching, non-empty index and target lists");
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<T> tgt(targets.begin(), targets.end());
  T acc = T(0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    require(idx[k] >= 0 && static_cast<std::size_t>(idx[k]) < z.size(), "sigmoid_cross_entropy: index out of range");
    const T v = z[static_cast<std::size_t>(idx[k])];
    acc += std::max(v, T(0)) - v * tgt[k] + std::log1p(std::exp(-std::abs(v)));
  }
  const T n = static_cast<T>(idx.size());
  return tape.record(Tensor<T>({1}, acc / n), {logits},
                     [=, idx = std::move(idx), tgt = std::move(tgt)](Tape<T>& t, int self) {
                       const T g = t.grad_by_id(self)[0] / n;
                       const auto& zv = t.value(logits);
                       auto& gz = t.grad(logits);
                       for (std::size_t k = 0; k < idx.size(); ++k) {
                         const auto i = static_cast<std::size_t>(idx[k]);
                         const T s = T(1) / (T(1) + std::exp(-zv[i]));
                         gz[i] += g * (s - tgt[k]);
                       }
                     });
}

#define LTN_INSTANTIATE_OPS(T)                                                                      \
  template Var conv2d<T>(Tape<T>&, Var, Var, Var, int, int);                                       \
  template Var max_pool2d<T>(Tape<T>&, Var);                                                       \
  template Var fully_connected<T>(Tape<T>&, Var, Var, Var);                                        \
  template Var relu<T>(Tape<T>&, Var);                                                             \
  template Var softmax<T>(Tape<T>&, Var);                                                          \
  template Var concat_channels<T>(Tape<T>&, Var, Var);                                             \
  template Var slice_channels<T>(Tape<T>&, Var, int, int);                                         \
  template Var bilinear_resize<T>(Tape<T>&, Var, int, int);                                        \
  template Var reshape<T>(Tape<T>&, Var, Shape);                                                   \
  template Var add<T>(Tape<T>&, Var, Var);                                                         \
  template Var multiply<T>(Tape<T>&, Var, Var);                                                    \
  template Var scale<T>(Tape<T>&, Var, T);                                                         \
  template Var sum<T>(Tape<T>&, Var);                                                              \
  template Var affine_grid<T>(Tape<T>&, Var, int, int);                                            \
  template Var grid_sample<T>(Tape<T>&, Var, Var);                                                 \
  template Var mean_squared_error<T>(Tape<T>&, Var, Var);                                          \
  template Var negative_log_likelihood<T>(Tape<T>&, Var, int, T);                                  \
  template Var box_mean<T>(Tape<T>&, Var, int, int);                                               \
  template Var sigmoid_cross_entropy<T>(Tape<T>&, Var, std::span<const int>, std::span<const T>);  \
  template Tensor<T> resize_bilinear_values<T>(const Tensor<T>&, int, int);                        \
  template void sample_bilinear_at<T>(const Tensor<T>&, T, T, std::span<T>);

LTN_INSTANTIATE_OPS(float)
LTN_INSTANTIATE_OPS(double)

}  // namespace ltn::nn
