#include "ltn/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <spdlog/spdlog.h>
#include <fmt/format.h>

#include "ltn/io/binary.hpp"
#include "ltn/rng.hpp"

namespace ltn {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

FeatureMatrix plus_plus_seeds(const FeatureMatrix& x, int k, Rng& rng) {
  FeatureMatrix c(k, x.cols);
  std::vector<double> d2(static_cast<std::size_t>(x.rows), std::numeric_limits<double>::infinity());
  std::vector<char> chosen(static_cast<std::size_t>(x.rows), 0);
  int pick = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(x.rows)));
  for (int j = 0; j < k; ++j) {
    chosen[static_cast<std::size_t>(pick)] = 1;
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
    if (j + 1 == k) break;
    double total = 0.0;
    for (int i = 0; i < x.rows; ++i) {
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], squared_distance(x.row(i), c.row(j)));
      total += d2[static_cast<std::size_t>(i)];
    }
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      pick = -1;
      for (int i = 0; i < x.rows; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (acc > target && d2[static_cast<std::size_t>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {
        for (int i = x.rows - 1; i >= 0; --i) {
          if (d2[static_cast<std::size_t>(i)] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // All remaining points coincide with a centroid; take the first unused one.
      pick = static_cast<int>(std::find(chosen.begin(), chosen.end(), 0) - chosen.begin());
    }
  }
  return c;
}

int nearest(const FeatureMatrix& c, std::span<const double> p, double* best_d2 = nullptr) {
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (int j = 0; j < c.rows; ++j) {
    const double d = squared_distance(p, c.row(j));
    if (d < bd) {
      bd = d;
      best = j;
    }
  }
  if (best_d2 != nullptr) *best_d2 = bd;
  return best;
}

KMeansResult lloyd(const FeatureMatrix& x, FeatureMatrix centroids, const KMeansOptions& opt) {
  const int k = centroids.rows;
  KMeansResult r;
  r.membership.assign(static_cast<std::size_t>(x.rows), 0);
  std::vector<double> d2(static_cast<std::size_t>(x.rows));
  for (int it = 0; it < opt.max_iterations; ++it) {
    for (int i = 0; i < x.rows; ++i) r.membership[static_cast<std::size_t>(i)] = nearest(centroids, x.row(i), &d2[static_cast<std::size_t>(i)]);

    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int m : r.membership) ++counts[static_cast<std::size_t>(m)];
    for (int j = 0; j < k; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) continue;
      // Reseed with the point farthest from its centroid, provided its cluster keeps a member.
      int far = -1;
      for (int i = 0; i < x.rows; ++i) {
        if (counts[static_cast<std::size_t>(r.membership[static_cast<std::size_t>(i)])] < 2) continue;
        if (far < 0 || d2[static_cast<std::size_t>(i)] > d2[static_cast<std::size_t>(far)]) far = i;
      }
      if (far < 0) continue;
      --counts[static_cast<std::size_t>(r.membership[static_cast<std::size_t>(far)])];
      r.membership[static_cast<std::size_t>(far)] = j;
      d2[static_cast<std::size_t>(far)] = 0.0;
      counts[static_cast<std::size_t>(j)] = 1;
    }

    FeatureMatrix next(k, x.cols);
    for (int i = 0; i < x.rows; ++i) {
      auto dst = next.row(r.membership[static_cast<std::size_t>(i)]);
      const auto src = x.row(i);
      for (int d = 0; d < x.cols; ++d) dst[static_cast<std::size_t>(d)] += src[static_cast<std::size_t>(d)];
    }
    double shift = 0.0;
    for (int j = 0; j < k; ++j) {
      auto row = next.row(j);
      if (counts[static_cast<std::size_t>(j)] == 0) {
        std::copy(centroids.row(j).begin(), centroids.row(j).end(), row.begin());
        continue;
      }
      for (auto& v : row) v /= counts[static_cast<std::size_t>(j)];
      shift = std::max(shift, std::sqrt(squared_distance(row, centroids.row(j))));
    }
    centroids = std::move(next);

    double sse = 0.0;
    for (int i = 0; i < x.rows; ++i) sse += squared_distance(x.row(i), centroids.row(r.membership[static_cast<std::size_t>(i)]));
    r.sse_history.push_back(sse);
    r.iterations = it + 1;
    if (shift < opt.tolerance) break;
  }
  r.sse = r.sse_history.empty() ? 0.0 : r.sse_history.back();
  r.centroids = std::move(centroids);
  return r;
}

}  // namespace

KMeansResult kmeans(const FeatureMatrix& features, int clusters, std::uint64_t seed, const KMeansOptions& options) {
  if (clusters < 1) throw ContractViolation("kmeans needs at least one cluster");
  if (features.rows < clusters) {
    throw ContractViolation("kmeans: " + std::to_string(features.rows) + " points cannot fill " +
                            std::to_string(clusters) + " clusters");
  }
  for (double v : features.data) {
    if (!std::isfinite(v)) throw ContractViolation("kmeans: features must be finite");
  }
  const Rng root(seed);
  KMeansResult best;
  for (int run = 0; run < std::max(1, options.restarts); ++run) {
    Rng rng = root.fork(static_cast<std::uint64_t>(run));
    auto result = lloyd(features, plus_plus_seeds(features, clusters, rng), options);
    if (run == 0 || result.sse < best.sse) best = std::move(result);
  }
  return best;
}

Standardizer Standardizer::fit(const FeatureMatrix& x) {
  Standardizer s;
  s.mean.assign(static_cast<std::size_t>(x.cols), 0.0);
  s.scale.assign(static_cast<std::size_t>(x.cols), 1.0);
  if (x.rows == 0) return s;
  for (int i = 0; i < x.rows; ++i)
    for (int d = 0; d < x.cols; ++d) s.mean[static_cast<std::size_t>(d)] += x.row(i)[static_cast<std::size_t>(d)];
  for (auto& m : s.mean) m /= x.rows;
  std::vector<double> var(static_cast<std::size_t>(x.cols), 0.0);
  for (int i = 0; i < x.rows; ++i)
    for (int d = 0; d < x.cols; ++d) {
      const double e = x.row(i)[static_cast<std::size_t>(d)] - s.mean[static_cast<std::size_t>(d)];
      var[static_cast<std::size_t>(d)] += e * e;
    }
  for (int d = 0; d < x.cols; ++d) {
    const double sd = std::sqrt(var[static_cast<std::size_t>(d)] / x.rows);
    s.scale[static_cast<std::size_t>(d)] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

std::vector<double> Standardizer::apply(std::span<const double> f) const {
  if (f.size() != mean.size()) {
    throw ContractViolation("feature has " + std::to_string(f.size()) + " dims, standardizer expects " +
                            std::to_string(mean.size()));
  }
  std::vector<double> out(f.size());
  for (std::size_t d = 0; d < f.size(); ++d) out[d] = (f[d] - mean[d]) / scale[d];
  return out;
}

FeatureMatrix Standardizer::apply(const FeatureMatrix& x) const {
  FeatureMatrix out(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    const auto v = apply(x.row(i));
    std::copy(v.begin(), v.end(), out.row(i).begin());
  }
  return out;
}

LayoutGrid accumulate_coarse_layout(std::span<const CodebookEntry> entries, int cluster, const MixtureSpec& spec,
                                    const VoteKernel& kernel, const GridGeometry& grid) {
  spec.validate();
  kernel.validate();
  LayoutGrid out(grid, spec.num_channels());
  bool any = false;
  for (const auto& e : entries) {
    if (e.cluster != cluster) continue;
    any = true;
    accumulate_votes(out, e.annotations, spec, kernel);
  }
  if (!any) spdlog::warn("codebook cluster {} has no images; its coarse layout is zero", cluster);
  return out;
}

Codebook Codebook::build(const FeatureMatrix& features, const std::vector<std::vector<BoxSpec>>& annotations,
                         int clusters, std::uint64_t seed, const MixtureSpec& spec, const VoteKernel& kernel,
                         const GridGeometry& grid, const KMeansOptions& options) {
  if (annotations.size() != static_cast<std::size_t>(features.rows)) {
    throw ContractViolation("codebook: " + std::to_string(features.rows) + " feature rows but " +
                            std::to_string(annotations.size()) + " annotation lists");
  }
  spec.validate();
  kernel.validate();
  Codebook cb;
  cb.spec_ = spec;
  cb.kernel_.sigma = round_f32(kernel.sigma);
  cb.kernel_.z = round_f32(kernel.z);
  cb.grid_ = grid;
  cb.grid_.stride_px = round_f32(grid.stride_px);
  for (auto& e : cb.spec_.scale_edges) e = round_f32(e);
  for (auto& e : cb.spec_.aspect_edges) e = round_f32(e);

  Standardizer st = Standardizer::fit(features);
  for (auto& v : st.mean) v = round_f32(v);
  for (auto& v : st.scale) v = round_f32(v);
  const auto result = kmeans(st.apply(features), clusters, seed, options);
  cb.standardizer_ = std::move(st);
  cb.centroids_ = result.centroids;
  for (auto& v : cb.centroids_.data) v = round_f32(v);

  cb.entries_.reserve(annotations.size());
  for (std::size_t m = 0; m < annotations.size(); ++m) {
    CodebookEntry e{result.membership[m], {}};
    for (const auto& b : annotations[m]) e.annotations.push_back(to_float_precision(b));
    cb.entries_.push_back(std::move(e));
  }
  for (int i = 0; i < clusters; ++i) {
    cb.coarse_.push_back(accumulate_coarse_layout(cb.entries_, i, cb.spec_, cb.kernel_, cb.grid_));
  }
  return cb;
}

std::vector<int> Codebook::cluster_sizes() const {
  std::vector<int> n(static_cast<std::size_t>(size()), 0);
  for (const auto& e : entries_) ++n[static_cast<std::size_t>(e.cluster)];
  return n;
}

int Codebook::nearest_cluster(std::span<const double> feature) const {
  const auto z = standardizer_.apply(feature);
  return nearest(centroids_, z);
}

const LayoutGrid& Codebook::coarse_layout(int cluster) const {
  if (cluster < 0 || cluster >= size()) {
    throw ContractViolation("cluster " + std::to_string(cluster) + " outside [0, " + std::to_string(size()) + ")");
  }
  return coarse_[static_cast<std::size_t>(cluster)];
}

bool Codebook::operator==(const Codebook& o) const {
  if (!(spec_ == o.spec_ && kernel_ == o.kernel_ && grid_ == o.grid_ && centroids_ == o.centroids_ &&
        standardizer_ == o.standardizer_ && entries_ == o.entries_ && coarse_.size() == o.coarse_.size())) {
    return false;
  }
  for (std::size_t i = 0; i < coarse_.size(); ++i) {
    if (!(coarse_[i].geometry == o.coarse_[i].geometry && coarse_[i].values == o.coarse_[i].values)) return false;
  }
  return true;
}

const LayoutGrid& retrieve(const Codebook& codebook, int cluster) { return codebook.coarse_layout(cluster); }

std::vector<char> encode_codebook(const Codebook& cb) {
  io::BinaryWriter w;
  w.bytes("LTNC");
  w.u32(Codebook::kFormatVersion);
  const int n = cb.size(), d = cb.centroids_.cols;
  w.u32(static_cast<std::uint32_t>(n));
  w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(cb.entries_.size()));
  w.u32(static_cast<std::uint32_t>(cb.spec_.num_categories));
  w.u32(static_cast<std::uint32_t>(cb.spec_.scale_edges.size()));
  for (double e : cb.spec_.scale_edges) w.f32(static_cast<float>(e));
  w.u32(static_cast<std::uint32_t>(cb.spec_.aspect_edges.size()));
  for (double e : cb.spec_.aspect_edges) w.f32(static_cast<float>(e));
  w.f32(static_cast<float>(cb.kernel_.sigma));
  w.f32(static_cast<float>(cb.kernel_.z));
  w.u32(static_cast<std::uint32_t>(cb.grid_.width));
  w.u32(static_cast<std::uint32_t>(cb.grid_.height));
  w.f32(static_cast<float>(cb.grid_.stride_px));

  for (double v : cb.centroids_.data) w.f32(static_cast<float>(v));
  for (double v : cb.standardizer_.mean) w.f32(static_cast<float>(v));
  for (double v : cb.standardizer_.scale) w.f32(static_cast<float>(v));

  for (const auto& e : cb.entries_) {
    w.u32(static_cast<std::uint32_t>(e.cluster));
    w.u32(static_cast<std::uint32_t>(e.annotations.size()));
    for (const auto& b : e.annotations) {
      w.f32(static_cast<float>(b.cx));
      w.f32(static_cast<float>(b.cy));
      w.f32(static_cast<float>(b.scale));
      w.f32(static_cast<float>(b.aspect));
      w.u32(static_cast<std::uint32_t>(b.category));
    }
  }
  for (const auto& g : cb.coarse_) {
    for (double v : g.values.data()) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

Codebook decode_codebook(std::vector<char> bytes) {
  io::BinaryReader r(std::move(bytes));
  if (r.remaining() < 4 || r.bytes(4) != "LTNC") throw FormatError("not an LTNC codebook file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != Codebook::kFormatVersion) {
    throw VersionError("LTNC version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(Codebook::kFormatVersion) + ")");
  }
  constexpr std::uint32_t kLimit = 1u << 24;
  auto bounded = [&](const char* what, std::uint32_t lo = 0) {
    const std::uint32_t v = r.u32();
    if (v < lo || v > kLimit) throw FormatError(std::string("codebook ") + what + " out of range: " + std::to_string(v));
    return static_cast<int>(v);
  };
  Codebook cb;
  const int n = bounded("cluster count", 1);
  const int d = bounded("feature dimension", 1);
  const int m = bounded("entry count");
  cb.spec_.num_categories = bounded("category count", 1);
  cb.spec_.scale_edges.assign(static_cast<std::size_t>(bounded("scale edge count")), 0.0);
  for (auto& e : cb.spec_.scale_edges) e = r.f32();
  cb.spec_.aspect_edges.assign(static_cast<std::size_t>(bounded("aspect edge count")), 0.0);
  for (auto& e : cb.spec_.aspect_edges) e = r.f32();
  cb.kernel_.sigma = r.f32();
  cb.kernel_.z = r.f32();
  cb.grid_.width = bounded("grid width", 1);
  cb.grid_.height = bounded("grid height", 1);
  cb.grid_.stride_px = r.f32();
  try {
    cb.spec_.validate();
    cb.kernel_.validate();
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("codebook header invalid: ") + e.what());
  }
  if (!(cb.grid_.stride_px > 0.0)) throw FormatError("codebook grid stride must be positive");

  const std::size_t need = (static_cast<std::size_t>(n) * d + 2u * d) * 4u;
  if (r.remaining() < need) throw TruncatedError("codebook centroids truncated");
  cb.centroids_ = FeatureMatrix(n, d);
  for (auto& v : cb.centroids_.data) v = r.f32();
  cb.standardizer_.mean.resize(static_cast<std::size_t>(d));
  cb.standardizer_.scale.resize(static_cast<std::size_t>(d));
  for (auto& v : cb.standardizer_.mean) v = r.f32();
  for (auto& v : cb.standardizer_.scale) v = r.f32();

  cb.entries_.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    CodebookEntry e;
    e.cluster = static_cast<int>(r.u32());
    if (e.cluster < 0 || e.cluster >= n) throw FormatError("codebook entry " + std::to_string(i) + " has invalid cluster id");
    const std::uint32_t count = r.u32();
    if (static_cast<std::size_t>(count) * 20u > r.remaining()) throw TruncatedError("codebook entry annotations truncated");
    for (std::uint32_t a = 0; a < count; ++a) {
      BoxSpec b;
      b.cx = r.f32();
      b.cy = r.f32();
      b.scale = r.f32();
      b.aspect = r.f32();
      b.category = static_cast<int>(r.u32());
      if (b.category < 0 || b.category >= cb.spec_.num_categories || !(b.scale > 0.0) || !(b.aspect > 0.0)) {
        throw FormatError("codebook entry " + std::to_string(i) + " holds an invalid annotation");
      }
      e.annotations.push_back(b);
    }
    cb.entries_.push_back(std::move(e));
  }

  const std::size_t cells =
      static_cast<std::size_t>(cb.grid_.width) * cb.grid_.height * static_cast<std::size_t>(cb.spec_.num_channels());
  if (r.remaining() < cells * n * 4u) throw TruncatedError("codebook coarse layouts truncated");
  for (int i = 0; i < n; ++i) {
    LayoutGrid expected = accumulate_coarse_layout(cb.entries_, i, cb.spec_, cb.kernel_, cb.grid_);
    for (std::size_t c = 0; c < cells; ++c) {
      const float stored = r.f32();
      if (stored != static_cast<float>(expected.values[c])) {
        throw ConsistencyError("coarse layout of cluster " + std::to_string(i) + " disagrees with its entries at cell " +
                               std::to_string(c) + " " + fmt::format("{:a} vs {:a}", stored, static_cast<float>(expected.values[c])));
      }
    }
    cb.coarse_.push_back(std::move(expected));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after LTNC payload");
  return cb;
}

void save_codebook(const Codebook& codebook, const std::filesystem::path& path) {
  io::BinaryWriter w;
  const auto bytes = encode_codebook(codebook);
  w.bytes(std::string_view(bytes.data(), bytes.size()));
  w.save(path);
}

Codebook load_codebook(const std::filesystem::path& path) { return decode_codebook(io::read_file(path)); }

}  // namespace ltn
