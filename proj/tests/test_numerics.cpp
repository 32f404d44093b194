#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>

#include "ltn/numerics/grad_check.hpp"
#include "ltn/numerics/ops.hpp"
#include "ltn/numerics/optim.hpp"
#include "ltn/numerics/weights_io.hpp"
#include "ltn/rng.hpp"
#include "oracles.hpp"

using namespace ltn;
using TapeD = Tape<double>;
using ltn::testing::random_tensor;

namespace {

// Naive cross-correlation with explicit bounds checks.
Tensor<double> naive_conv(const Tensor<double>& in, const Tensor<double>& k, const Tensor<double>& b, int stride,
                          int pad) {
  const int H = in.dim(0), W = in.dim(1), C = in.dim(2);
  const int kh = k.dim(0), kw = k.dim(1), co = k.dim(3);
  const int Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> out({Ho, Wo, co});
  for (int y = 0; y < Ho; ++y)
    for (int x = 0; x < Wo; ++x)
      for (int o = 0; o < co; ++o) {
        double s = b[static_cast<std::size_t>(o)];
        for (int dy = 0; dy < kh; ++dy)
          for (int dx = 0; dx < kw; ++dx)
            for (int c = 0; c < C; ++c) {
              const int iy = y * stride + dy - pad, ix = x * stride + dx - pad;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              s += in.at(iy, ix, c) * k[((static_cast<std::size_t>(dy) * kw + dx) * C + c) * co + o];
            }
        out.at(y, x, o) = s;
      }
  return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 5;

}  // namespace

TEST_CASE("conv2d of ones with a 3x3 ones kernel counts in-bounds taps") {
  TapeD tape;
  auto in = tape.constant(Tensor<double>({4, 4, 1}, 1.0));
  auto k = tape.constant(Tensor<double>({3, 3, 1, 1}, 1.0));
  auto b = tape.constant(Tensor<double>({1}, 0.0));
  const auto& out = tape.value(nn::conv2d(tape, in, k, b, 1, 1));
  CHECK(out.at(0, 0, 0) == 4.0);
  CHECK(out.at(0, 1, 0) == 6.0);
  CHECK(out.at(1, 0, 0) == 6.0);
  CHECK(out.at(1, 1, 0) == 9.0);
  CHECK(out.at(2, 2, 0) == 9.0);
  CHECK(out.at(3, 3, 0) == 4.0);
}

TEST_CASE("conv2d matches a naive loop for strides and paddings") {
  Rng rng(11);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1, 2}) {
      auto x = random_tensor({7, 9, 3}, rng);
      auto k = random_tensor({3, 5, 3, 4}, rng);
      auto b = random_tensor({4}, rng);
      TapeD tape;
      auto y = nn::conv2d(tape, tape.constant(x), tape.constant(k), tape.constant(b), stride, pad);
      CHECK(max_abs_diff(tape.value(y), naive_conv(x, k, b, stride, pad)) < 1e-12);
    }
  }
}

TEST_CASE("conv2d rejects an even kernel and a channel mismatch") {
  TapeD tape;
  auto in = tape.constant(Tensor<double>({4, 4, 2}));
  auto b = tape.constant(Tensor<double>({1}));
  CHECK_THROWS_AS(nn::conv2d(tape, in, tape.constant(Tensor<double>({2, 2, 2, 1})), b), ContractViolation);
  CHECK_THROWS_AS(nn::conv2d(tape, in, tape.constant(Tensor<double>({3, 3, 3, 1})), b), ContractViolation);
}

TEST_CASE("max_pool2d picks window maxima and routes ties to the first cell") {
  TapeD tape;
  Tensor<double> x({2, 4, 1}, std::vector<double>{1, 5, 2, 2, 3, 4, 2, 2});
  auto in = tape.input(x);
  auto y = nn::max_pool2d(tape, in);
  CHECK(tape.value(y).shape() == Shape{1, 2, 1});
  CHECK(tape.value(y)[0] == 5.0);
  CHECK(tape.value(y)[1] == 2.0);
  tape.backward(nn::sum(tape, y));
  const auto& g = tape.grad(in);
  CHECK(g[1] == 1.0);
  CHECK(g[2] == 1.0);
  CHECK(g[3] == 0.0);
  CHECK(g[6] == 0.0);
  CHECK(g[7] == 0.0);
  CHECK_THROWS_AS(nn::max_pool2d(tape, tape.constant(Tensor<double>({3, 4, 1}))), ContractViolation);
}

TEST_CASE("fully_connected, relu and softmax on small examples") {
  TapeD tape;
  auto x = tape.constant(Tensor<double>({2}, std::vector<double>{1, -2}));
  auto w = tape.constant(Tensor<double>({2, 3}, std::vector<double>{1, 0, 2, 3, 1, -1}));
  auto b = tape.constant(Tensor<double>({3}, std::vector<double>{0.5, 0, 0}));
  const auto& y = tape.value(nn::fully_connected(tape, x, w, b));
  CHECK(y[0] == doctest::Approx(1 - 6 + 0.5));
  CHECK(y[1] == doctest::Approx(-2));
  CHECK(y[2] == doctest::Approx(4));

  const auto& r = tape.value(nn::relu(tape, tape.constant(Tensor<double>({3}, std::vector<double>{-1, 0, 2}))));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);

  const auto& p = tape.value(nn::softmax(tape, tape.constant(Tensor<double>({3}, std::vector<double>{1, 2, 3}))));
  CHECK(p[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(p[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax sums to one and is shift-invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = random_tensor({8}, rng, -30, 30);
    auto shifted = z;
    for (auto& v : shifted.data()) v += 100.0;
    TapeD tape;
    const auto p = tape.value(nn::softmax(tape, tape.constant(z)));
    const auto q = tape.value(nn::softmax(tape, tape.constant(shifted)));
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(max_abs_diff(p, q) < 1e-12);
  }
}

TEST_CASE("concat_channels then slice_channels round-trips") {
  Rng rng(3);
  auto a = random_tensor({3, 4, 2}, rng);
  auto b = random_tensor({3, 4, 5}, rng);
  TapeD tape;
  auto c = nn::concat_channels(tape, tape.constant(a), tape.constant(b));
  CHECK(tape.value(c).shape() == Shape{3, 4, 7});
  CHECK(tape.value(nn::slice_channels(tape, c, 0, 2)) == a);
  CHECK(tape.value(nn::slice_channels(tape, c, 2, 7)) == b);
  CHECK_THROWS_AS(nn::concat_channels(tape, tape.constant(a), tape.constant(Tensor<double>({3, 5, 1}))),
                  ContractViolation);
}

TEST_CASE("bilinear_resize interpolates with aligned corners and stays within input bounds") {
  TapeD tape;
  Tensor<double> x({2, 2, 1}, std::vector<double>{0, 1, 2, 3});
  const auto& y = tape.value(nn::bilinear_resize(tape, tape.constant(x), 3, 3));
  CHECK(y.at(1, 1, 0) == doctest::Approx(1.5));
  CHECK(y.at(0, 0, 0) == 0.0);
  CHECK(y.at(2, 2, 0) == 3.0);

  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto src = random_tensor({4, 6, 2}, rng);
    TapeD t;
    const auto out = t.value(nn::bilinear_resize(t, t.constant(src), 13, 7));
    const auto [lo, hi] = std::minmax_element(src.data().begin(), src.data().end());
    for (double v : out.data()) {
      CHECK(v >= *lo);
      CHECK(v <= *hi);
    }
  }
}

TEST_CASE("bilinear_resize to the same size is the identity") {
  Rng rng(4);
  auto src = random_tensor({5, 7, 3}, rng);
  TapeD tape;
  CHECK(tape.value(nn::bilinear_resize(tape, tape.constant(src), 5, 7)) == src);
}

TEST_CASE("box_mean matches a direct window average") {
  Rng rng(6);
  auto x = random_tensor({6, 9, 2}, rng);
  for (auto [wh, ww] : {std::pair{3, 3}, std::pair{2, 4}, std::pair{5, 1}}) {
    TapeD tape;
    const auto y = tape.value(nn::box_mean(tape, tape.constant(x), wh, ww));
    const int bh = (wh - 1) / 2, bw = (ww - 1) / 2;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 9; ++j)
        for (int c = 0; c < 2; ++c) {
          double s = 0.0;
          int n = 0;
          for (int di = -bh; di < wh - bh; ++di)
            for (int dj = -bw; dj < ww - bw; ++dj) {
              if (i + di < 0 || i + di >= 6 || j + dj < 0 || j + dj >= 9) continue;
              s += x.at(i + di, j + dj, c);
              ++n;
            }
          CHECK(y.at(i, j, c) == doctest::Approx(s / n).epsilon(1e-12));
        }
  }
}

TEST_CASE("affine_grid with the identity theta returns base coordinates") {
  TapeD tape;
  Tensor<double> theta({6}, std::vector<double>{1, 0, 0, 0, 1, 0});
  const auto g = tape.value(nn::affine_grid(tape, tape.constant(theta), 3, 5));
  CHECK(g.at(0, 0, 0) == -1.0);
  CHECK(g.at(0, 0, 1) == -1.0);
  CHECK(g.at(2, 4, 0) == 1.0);
  CHECK(g.at(1, 2, 0) == 0.0);
  CHECK(g.at(1, 2, 1) == 0.0);
}

TEST_CASE("grid_sample with the identity grid reproduces the source bit-exactly") {
  Rng rng(21);
  for (auto [h, w] : {std::pair{16, 24}, std::pair{7, 3}, std::pair{2, 3}, std::pair{31, 17}}) {
    auto src = random_tensor({h, w, 3}, rng);
    Tensor<float> srcf = src.cast<float>();
    {
      TapeD tape;
      auto grid = nn::affine_grid(tape, tape.constant(Tensor<double>({6}, std::vector<double>{1, 0, 0, 0, 1, 0})), h, w);
      CHECK(tape.value(nn::grid_sample(tape, tape.constant(src), grid)) == src);
    }
    {
      Tape<float> tape;
      auto grid = nn::affine_grid(tape, tape.constant(Tensor<float>({6}, std::vector<float>{1, 0, 0, 0, 1, 0})), h, w);
      CHECK(tape.value(nn::grid_sample(tape, tape.constant(srcf), grid)) == srcf);
    }
  }
}

TEST_CASE("grid_sample zero-pads outside the source and survives non-finite coordinates") {
  TapeD tape;
  Tensor<double> src({2, 2, 1}, 1.0);
  Tensor<double> grid({1, 3, 2}, std::vector<double>{5.0, 0.0, NAN, 0.0, 1.0, 0.0});
  const auto out = tape.value(nn::grid_sample(tape, tape.constant(src), tape.constant(grid)));
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 1.0);
}

TEST_CASE("losses on small examples") {
  TapeD tape;
  auto a = tape.constant(Tensor<double>({2}, std::vector<double>{1, 3}));
  auto b = tape.constant(Tensor<double>({2}, std::vector<double>{0, 1}));
  CHECK(tape.value(nn::mean_squared_error(tape, a, b))[0] == doctest::Approx(2.5));
  auto p = tape.constant(Tensor<double>({8}, 0.125));
  CHECK(tape.value(nn::negative_log_likelihood(tape, p, 3))[0] == doctest::Approx(std::log(8.0)));
  auto zero = tape.constant(Tensor<double>({2}, std::vector<double>{0.0, 1.0}));
  CHECK(tape.value(nn::negative_log_likelihood(tape, zero, 0))[0] == doctest::Approx(-std::log(1e-12)));
  auto logits = tape.constant(Tensor<double>({3}, std::vector<double>{0.0, 100.0, -100.0}));
  std::vector<int> idx{0, 1, 2};
  std::vector<double> tgt{1.0, 1.0, 0.0};
  CHECK(tape.value(nn::sigmoid_cross_entropy(tape, logits, std::span<const int>(idx), std::span<const double>(tgt)))[0] ==
        doctest::Approx(std::log(2.0) / 3.0));
}

// Gradient checks: every op, five seeds, relative error below 1e-4.

TEST_CASE("gradients of every op agree with central differences") {
  for (const auto& c : ltn::testing::op_gradient_cases()) {
    for (int seed = 0; seed < kSeeds; ++seed) {
      const auto report = ltn::testing::check_op_case(c, seed);
      INFO(c.name, " seed ", seed, " analytic ", report.worst_analytic, " numeric ", report.worst_numeric);
      CHECK(report.max_relative_error < kGradTol);
    }
  }
}

TEST_CASE("parameter gradients accumulate through bound leaves") {
  Parameter<double> p{"w", Tensor<double>({3}, std::vector<double>{1, 2, 3})};
  for (int pass = 0; pass < 2; ++pass) {
    TapeD tape;
    auto w = tape.param(p);
    tape.backward(nn::sum(tape, nn::multiply(tape, w, w)));
  }
  CHECK(p.grad[0] == 4.0);
  CHECK(p.grad[2] == 12.0);
}

TEST_CASE("sgd with momentum follows the closed-form recurrence") {
  Parameter<double> p{"w", Tensor<double>({1}, 1.0)};
  Sgd<double> opt({&p}, 0.1, 0.9);
  p.grad[0] = 1.0;
  opt.step();
  CHECK(p.value[0] == doctest::Approx(0.9));
  CHECK(p.grad[0] == 0.0);
  p.grad[0] = 1.0;
  opt.step();
  CHECK(p.value[0] == doctest::Approx(0.9 - 0.1 * 1.9));
}

TEST_CASE("weights round-trip through the binary format") {
  Rng rng(2);
  Parameter<float> a{"conv.w", random_tensor({3, 3, 2, 4}, rng).cast<float>()};
  Parameter<float> b{"conv.b", random_tensor({4}, rng).cast<float>()};
  ParameterList<float> params{&a, &b};
  const auto bytes = encode_weights(snapshot(params));
  const auto decoded = decode_weights(bytes);
  Parameter<float> a2{"conv.w", Tensor<float>({3, 3, 2, 4})};
  Parameter<float> b2{"conv.b", Tensor<float>({4})};
  restore(decoded, ParameterList<float>{&a2, &b2});
  CHECK(a2.value == a.value);
  CHECK(b2.value == b.value);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_weights(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_weights(bad_version), VersionError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_weights(truncated), TruncatedError);

  Parameter<float> wrong{"conv.w", Tensor<float>({3, 3, 2, 5})};
  CHECK_THROWS_AS(restore(decoded, ParameterList<float>{&wrong, &b2}), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "ltn_weights_test.bin";
  save_weights(path, snapshot(params));
  CHECK(encode_weights(load_weights(path)) == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("rng streams are reproducible and forks are independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next() == b.next());
  Rng f1 = Rng(42).fork(1), f2 = Rng(42).fork(2);
  CHECK(f1.next() != f2.next());
  Rng n(7);
  double mean = 0.0, sq = 0.0;
  const int count = 20000;
  for (int i = 0; i < count; ++i) {
    const double v = n.normal();
    mean += v;
    sq += v * v;
  }
  mean /= count;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(sq / count - 1.0) < 0.05);
}
