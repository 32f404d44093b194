#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ltn/scene_model.hpp"

namespace ltn {

/// Dense row-major M x D matrix of per-image appearance features.
struct FeatureMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  std::span<double> row(int i) { return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const double> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
  }
  bool operator==(const FeatureMatrix&) const = default;
};

struct KMeansOptions {
  int max_iterations = 100;
  double tolerance = 1e-6;  // stop once every centroid moves less than this
  int restarts = 1;         // independent seedings; the lowest final SSE wins
};

struct KMeansResult {
  FeatureMatrix centroids;
  std::vector<int> membership;
  double sse = 0.0;
  int iterations = 0;
  std::vector<double> sse_history;  // SSE after each Lloyd iteration of the winning run
};

/// k-means++ seeding then Lloyd iterations with squared Euclidean distance.
/// Ties in assignment go to the lowest centroid index. An emptied cluster is
/// reseeded with the point farthest from its current centroid.
KMeansResult kmeans(const FeatureMatrix& features, int clusters, std::uint64_t seed, const KMeansOptions& options = {});

/// Per-dimension mean and scale; zero-variance dimensions get scale 1.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const FeatureMatrix& features);
  FeatureMatrix apply(const FeatureMatrix& features) const;
  std::vector<double> apply(std::span<const double> feature) const;
  bool operator==(const Standardizer&) const = default;
};

/// One training image's cluster id and annotations.
struct CodebookEntry {
  int cluster = 0;
  std::vector<BoxSpec> annotations;
  bool operator==(const CodebookEntry&) const = default;
};

/// Coarse layout of cluster i: the sum of target layouts of every entry with
/// that cluster id. An empty cluster yields a zero grid and a warning.
LayoutGrid accumulate_coarse_layout(std::span<const CodebookEntry> entries, int cluster, const MixtureSpec& spec,
                                    const VoteKernel& kernel, const GridGeometry& grid);

class Codebook {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  Codebook() = default;

  /// Cluster standardized features and precompute the coarse layouts.
  /// Stored values are rounded to 32-bit precision up front so that a saved
  /// codebook reloads to an identical object.
  static Codebook build(const FeatureMatrix& features, const std::vector<std::vector<BoxSpec>>& annotations,
                        int clusters, std::uint64_t seed, const MixtureSpec& spec, const VoteKernel& kernel,
                        const GridGeometry& grid, const KMeansOptions& options = {});

  int size() const noexcept { return centroids_.rows; }
  const MixtureSpec& spec() const noexcept { return spec_; }
  const VoteKernel& kernel() const noexcept { return kernel_; }
  const GridGeometry& grid() const noexcept { return grid_; }
  const FeatureMatrix& centroids() const noexcept { return centroids_; }
  const Standardizer& standardizer() const noexcept { return standardizer_; }
  const std::vector<CodebookEntry>& entries() const noexcept { return entries_; }

  /// Number of training images per cluster.
  std::vector<int> cluster_sizes() const;

  /// Nearest centroid to a raw (unstandardized) feature.
  int nearest_cluster(std::span<const double> feature) const;

  const LayoutGrid& coarse_layout(int cluster) const;

  bool operator==(const Codebook&) const;

  friend std::vector<char> encode_codebook(const Codebook& codebook);
  friend Codebook decode_codebook(std::vector<char> bytes);

 private:
  MixtureSpec spec_;
  VoteKernel kernel_;
  GridGeometry grid_;
  FeatureMatrix centroids_;
  Standardizer standardizer_;
  std::vector<CodebookEntry> entries_;
  std::vector<LayoutGrid> coarse_;
};

/// Precomputed coarse layout S_c of cluster i, no recomputation.
const LayoutGrid& retrieve(const Codebook& codebook, int cluster);

// "LTNC" container, little-endian:
//   magic | u32 version |
//   header:    u32 N, u32 D, u32 M, u32 categories, u32 #scale edges, f32 edges...,
//              u32 #aspect edges, f32 edges..., f32 sigma, f32 z, u32 grid w, u32 grid h, f32 stride
//   centroids: N x D f32, then D f32 mean, D f32 scale
//   entries:   M x (u32 cluster, u32 count, count x (f32 cx, cy, scale, aspect, u32 category))
//   layouts:   N x (H x W x K) f32
std::vector<char> encode_codebook(const Codebook& codebook);

/// Throws FormatError (magic or structure), VersionError, TruncatedError, or
/// ConsistencyError when a stored coarse layout disagrees with its entries.
Codebook decode_codebook(std::vector<char> bytes);

void save_codebook(const Codebook& codebook, const std::filesystem::path& path);
Codebook load_codebook(const std::filesystem::path& path);

}  // namespace ltn
