#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "ltn/codebook.hpp"
#include "ltn/rng.hpp"
#include "oracles.hpp"

using namespace ltn;

namespace {

const GridGeometry kGrid{12, 8, 8.0};

BoxSpec random_box(Rng& rng) {
  return {rng.uniform(0, kGrid.width * kGrid.stride_px), rng.uniform(0, kGrid.height * kGrid.stride_px),
          rng.uniform(8, 90), rng.uniform(0.4, 2.0), static_cast<int>(rng.uniform_int(2))};
}

FeatureMatrix blobs(Rng& rng, int per_blob, std::vector<int>& labels) {
  FeatureMatrix x(2 * per_blob, 2);
  for (int i = 0; i < 2 * per_blob; ++i) {
    const int label = i % 2;
    labels.push_back(label);
    x.row(i)[0] = rng.normal() + (label == 0 ? 0.0 : 10.0);
    x.row(i)[1] = rng.normal();
  }
  return x;
}

}  // namespace

TEST_CASE("kmeans with as many clusters as points gives zero SSE") {
  Rng rng(1);
  FeatureMatrix x(6, 3);
  for (auto& v : x.data) v = rng.uniform();
  const auto r = kmeans(x, 6, 7);
  CHECK(r.sse == 0.0);
  std::vector<int> sorted = r.membership;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 6; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("kmeans separates two well-separated blobs") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed + 50);
    std::vector<int> labels;
    const auto x = blobs(rng, 40, labels);
    const auto r = kmeans(x, 2, seed);
    const int flip = r.membership[0] == labels[0] ? 0 : 1;
    for (std::size_t i = 0; i < labels.size(); ++i) CHECK((r.membership[i] ^ flip) == labels[i]);
  }
}

TEST_CASE("kmeans SSE never increases across Lloyd iterations and runs are reproducible") {
  Rng rng(3);
  FeatureMatrix x(300, 5);
  for (auto& v : x.data) v = rng.normal();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = kmeans(x, 7, seed);
    for (std::size_t i = 1; i < r.sse_history.size(); ++i) CHECK(r.sse_history[i] <= r.sse_history[i - 1]);
    const auto again = kmeans(x, 7, seed);
    CHECK(again.membership == r.membership);
    CHECK(again.centroids == r.centroids);
  }
  CHECK_THROWS_AS(kmeans(x, 301, 0), ContractViolation);
}

TEST_CASE("kmeans handles duplicate points without empty clusters") {
  FeatureMatrix x(6, 1);
  x.data = {0, 0, 0, 0, 5, 5};
  const auto r = kmeans(x, 3, 1);
  std::vector<int> counts(3, 0);
  for (int m : r.membership) ++counts[static_cast<std::size_t>(m)];
  for (int c : counts) CHECK(c > 0);
}

TEST_CASE("coarse layout equals the naive double loop on random instances") {
  for (int trial = 0; trial < 20; ++trial) {
    CHECK(ltn::testing::coarse_layout_deviation(static_cast<std::uint64_t>(trial), kGrid) < 1e-12);
  }
}

TEST_CASE("coarse layout of identical images is a multiple of one image's layout") {
  const MixtureSpec spec{};
  const BoxSpec box{40.0, 30.0, 20.0, 1.0, 1};
  std::vector<CodebookEntry> one{{0, {box}}};
  std::vector<CodebookEntry> three{{0, {box}}, {0, {box}}, {0, {box}}, {1, {box}}};
  const auto single = accumulate_coarse_layout(one, 0, spec, VoteKernel{}, kGrid);
  const auto triple = accumulate_coarse_layout(three, 0, spec, VoteKernel{}, kGrid);
  const auto target = rasterize_target_layout(std::span(&box, 1), spec, kGrid, VoteKernel{});
  CHECK(single.values == target.values);
  for (std::size_t i = 0; i < single.values.size(); ++i) {
    CHECK(triple.values[i] == doctest::Approx(3.0 * single.values[i]).epsilon(1e-12));
  }
  const auto empty = accumulate_coarse_layout(three, 2, spec, VoteKernel{}, kGrid);
  CHECK(empty.values.sum() == 0.0);
}

TEST_CASE("codebook retrieval, persistence and load-time validation") {
  Rng rng(9);
  const int images = 40;
  FeatureMatrix features(images, 4);
  std::vector<std::vector<BoxSpec>> annotations;
  for (int m = 0; m < images; ++m) {
    const int archetype = m % 3;
    for (int d = 0; d < 4; ++d) features.row(m)[static_cast<std::size_t>(d)] = archetype * 3.0 + 0.1 * rng.normal();
    std::vector<BoxSpec> boxes;
    for (int a = 0; a < 3; ++a) boxes.push_back(random_box(rng));
    annotations.push_back(boxes);
  }
  const MixtureSpec spec{};
  const auto cb = Codebook::build(features, annotations, 3, 11, spec, VoteKernel{}, kGrid);
  CHECK(cb.size() == 3);

  int total = 0;
  for (int s : cb.cluster_sizes()) total += s;
  CHECK(total == images);
  for (int m = 0; m < images; ++m) CHECK(cb.nearest_cluster(features.row(m)) == cb.entries()[static_cast<std::size_t>(m)].cluster);

  for (int i = 0; i < 3; ++i) {
    const auto recomputed = accumulate_coarse_layout(cb.entries(), i, cb.spec(), cb.kernel(), cb.grid());
    CHECK(retrieve(cb, i).values == recomputed.values);
    CHECK(&retrieve(cb, i) == &retrieve(cb, i));
  }
  CHECK_THROWS_AS(retrieve(cb, 3), ContractViolation);
  CHECK_THROWS_AS(retrieve(cb, -1), ContractViolation);

  const auto bytes = encode_codebook(cb);
  const auto loaded = decode_codebook(bytes);
  CHECK(loaded == cb);
  CHECK(encode_codebook(loaded) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "ltn_codebook_test.ltnc";
  save_codebook(cb, path);
  CHECK(load_codebook(path) == cb);
  std::filesystem::remove(path);

  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  CHECK_THROWS_AS(decode_codebook(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 7;
  CHECK_THROWS_AS(decode_codebook(bad_version), VersionError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  CHECK_THROWS_AS(decode_codebook(truncated), TruncatedError);

  // Find a non-trivial coarse-layout value in the final section and perturb it.
  auto tampered = bytes;
  const std::size_t cells = static_cast<std::size_t>(kGrid.width) * kGrid.height * spec.num_channels();
  const std::size_t offset = bytes.size() - cells * 3 * 4 + 4 * 50;
  float v;
  std::memcpy(&v, tampered.data() + offset, 4);
  v += 0.25f;
  std::memcpy(tampered.data() + offset, &v, 4);
  CHECK_THROWS_AS(decode_codebook(tampered), ConsistencyError);
}

TEST_CASE("total vote mass of a coarse layout tracks the cluster's annotation count") {
  const MixtureSpec spec{};
  const GridGeometry wide{40, 40, 8.0};
  std::vector<CodebookEntry> entries;
  Rng rng(4);
  int count = 0;
  for (int m = 0; m < 5; ++m) {
    CodebookEntry e{0, {}};
    for (int a = 0; a < 3; ++a) {
      e.annotations.push_back({rng.uniform(120, 200), rng.uniform(120, 200), 20.0, 1.0, 0});
      ++count;
    }
    entries.push_back(e);
  }
  const auto grid = accumulate_coarse_layout(entries, 0, spec, VoteKernel{}, wide);
  CHECK(grid.values.sum() > 0.95 * count);
  CHECK(grid.values.sum() <= count);
}
