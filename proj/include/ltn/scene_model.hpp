#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ltn/errors.hpp"
#include "ltn/numerics/tensor.hpp"

namespace ltn {

/// Object hypothesis or annotation: centre (pixels), scale = sqrt(box area),
/// aspect = width / height, and a category index.
struct BoxSpec {
  double cx = 0.0;
  double cy = 0.0;
  double scale = 1.0;
  double aspect = 1.0;
  int category = 0;

  double width() const { return scale * std::sqrt(aspect); }
  double height() const { return scale / std::sqrt(aspect); }
  double left() const { return cx - 0.5 * width(); }
  double top() const { return cy - 0.5 * height(); }

  bool operator==(const BoxSpec&) const = default;
};

/// Box rounded to what the binary containers store (32-bit floats).
BoxSpec to_float_precision(const BoxSpec& box);

/// Mixture components: categories x scale bins x aspect bins. Edges are the
/// interior bin boundaries, so N_s = scale_edges.size() + 1; the outer bins are
/// open-ended.
struct MixtureSpec {
  int num_categories = 2;
  std::vector<double> scale_edges{16.0, 32.0, 64.0};
  std::vector<double> aspect_edges{};

  int num_scale_bins() const { return static_cast<int>(scale_edges.size()) + 1; }
  int num_aspect_bins() const { return static_cast<int>(aspect_edges.size()) + 1; }
  int num_channels() const { return num_categories * num_scale_bins() * num_aspect_bins(); }

  int channel(int category, int scale_bin, int aspect_bin) const {
    return category * (num_scale_bins() * num_aspect_bins()) + scale_bin * num_aspect_bins() + aspect_bin;
  }

  struct Components {
    int category, scale_bin, aspect_bin;
    bool operator==(const Components&) const = default;
  };
  Components components(int channel) const;

  /// Throws ContractViolation unless the mixture is usable.
  void validate() const;

  bool operator==(const MixtureSpec&) const = default;
};

/// Gaussian vote kernel exp(-d^2 / (2 sigma^2)) / (z sigma^2), d in grid cells.
struct VoteKernel {
  double sigma = 2.0;
  double z = 2.0 * std::numbers::pi;

  void validate() const;
  double weight(double squared_distance) const {
    return std::exp(-squared_distance / (2.0 * sigma * sigma)) / (z * sigma * sigma);
  }
  bool operator==(const VoteKernel&) const = default;
};

/// Extents of a layout grid and its cell size in image pixels.
struct GridGeometry {
  int width = 24;
  int height = 16;
  double stride_px = 8.0;

  /// Grid coordinates (in cells) of an image point; cell (0, 0) has its centre at (0, 0).
  double to_grid_x(double px) const { return px / stride_px - 0.5; }
  double to_grid_y(double py) const { return py / stride_px - 0.5; }
  bool operator==(const GridGeometry&) const = default;
};

/// W x H x K stack of heatmaps, stored H x W x K.
struct LayoutGrid {
  GridGeometry geometry;
  Tensor<double> values;

  LayoutGrid() = default;
  LayoutGrid(GridGeometry g, int channels) : geometry(g), values({g.height, g.width, channels}) {}

  int width() const { return geometry.width; }
  int height() const { return geometry.height; }
  int channels() const { return values.dim(2); }
};

/// Channel index of the mixture component a box belongs to; x ~ y iff equal.
/// A scale or aspect lying exactly on an edge goes to the higher bin.
int assign_group(const BoxSpec& box, const MixtureSpec& spec);

/// Sum over annotations of the vote kernel centred on each annotation, in the
/// annotation's own channel. An empty list gives an all-zero grid.
LayoutGrid rasterize_target_layout(std::span<const BoxSpec> annotations, const MixtureSpec& spec,
                                   const GridGeometry& grid, const VoteKernel& kernel);

/// Add the votes of `annotations` into an existing grid.
void accumulate_votes(LayoutGrid& grid, std::span<const BoxSpec> annotations, const MixtureSpec& spec,
                      const VoteKernel& kernel);

/// Bilinear read of the box's channel at its centre (grid coordinates clamped to the grid).
double layout_value_at(const LayoutGrid& grid, const BoxSpec& box, const MixtureSpec& spec);

/// One annotation row: {"image_id", "cx", "cy", "scale", "aspect", "category"}.
struct AnnotationRecord {
  int image_id = 0;
  BoxSpec box;
  bool operator==(const AnnotationRecord&) const = default;
};

std::string to_json_line(const AnnotationRecord& record);
AnnotationRecord annotation_from_json_line(const std::string& line);

std::string write_annotation_lines(std::span<const AnnotationRecord> records);
std::vector<AnnotationRecord> read_annotation_lines(const std::string& text);

}  // namespace ltn
