#include "ltn/scene_model.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

namespace ltn {

BoxSpec to_float_precision(const BoxSpec& box) {
  auto f = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  return {f(box.cx), f(box.cy), f(box.scale), f(box.aspect), box.category};
}

MixtureSpec::Components MixtureSpec::components(int channel) const {
  if (channel < 0 || channel >= num_channels()) {
    throw ContractViolation("channel " + std::to_string(channel) + " outside [0, " + std::to_string(num_channels()) + ")");
  }
  const int per_category = num_scale_bins() * num_aspect_bins();
  return {channel / per_category, (channel % per_category) / num_aspect_bins(), channel % num_aspect_bins()};
}

void MixtureSpec::validate() const {
  if (num_categories < 1) throw ContractViolation("mixture spec needs at least one category");
  auto ascending = [](const std::vector<double>& e) {
    for (std::size_t i = 1; i < e.size(); ++i) {
      if (!(e[i] > e[i - 1])) return false;
    }
    return true;
  };
  if (!ascending(scale_edges)) throw ContractViolation("scale bin edges must be strictly ascending");
  if (!ascending(aspect_edges)) throw ContractViolation("aspect bin edges must be strictly ascending");
}

void VoteKernel::validate() const {
  if (!(sigma > 0.0)) throw ContractViolation("vote kernel sigma must be positive");
  if (!(z > 0.0)) throw ContractViolation("vote kernel normalizer must be positive");
}

namespace {

int bin_of(double v, const std::vector<double>& edges) {
  return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin());
}

}  // namespace

int assign_group(const BoxSpec& box, const MixtureSpec& spec) {
  if (box.category < 0 || box.category >= spec.num_categories) {
    throw ContractViolation("box category " + std::to_string(box.category) + " outside [0, " +
                            std::to_string(spec.num_categories) + ")");
  }
  if (!(box.scale > 0.0) || !(box.aspect > 0.0)) {
    throw ContractViolation("box scale and aspect must be positive");
  }
  return spec.channel(box.category, bin_of(box.scale, spec.scale_edges), bin_of(box.aspect, spec.aspect_edges));
}

void accumulate_votes(LayoutGrid& grid, std::span<const BoxSpec> annotations, const MixtureSpec& spec,
                      const VoteKernel& kernel) {
  const GridGeometry& g = grid.geometry;
  const int K = grid.channels();
  for (const BoxSpec& y : annotations) {
    const int k = assign_group(y, spec);
    const double gx = g.to_grid_x(y.cx);
    const double gy = g.to_grid_y(y.cy);
    for (int i = 0; i < g.height; ++i) {
      const double dy = static_cast<double>(i) - gy;
      for (int j = 0; j < g.width; ++j) {
        const double dx = static_cast<double>(j) - gx;
        grid.values[(static_cast<std::size_t>(i) * g.width + j) * K + k] += kernel.weight(dx * dx + dy * dy);
      }
    }
  }
}

LayoutGrid rasterize_target_layout(std::span<const BoxSpec> annotations, const MixtureSpec& spec,
                                   const GridGeometry& grid, const VoteKernel& kernel) {
  spec.validate();
  kernel.validate();
  LayoutGrid out(grid, spec.num_channels());
  accumulate_votes(out, annotations, spec, kernel);
  return out;
}

double layout_value_at(const LayoutGrid& grid, const BoxSpec& box, const MixtureSpec& spec) {
  const int k = assign_group(box, spec);
  if (k >= grid.channels()) throw ContractViolation("layout grid has fewer channels than the mixture spec");
  const double x = std::clamp(grid.geometry.to_grid_x(box.cx), 0.0, static_cast<double>(grid.width() - 1));
  const double y = std::clamp(grid.geometry.to_grid_y(box.cy), 0.0, static_cast<double>(grid.height() - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, grid.width() - 1), y1 = std::min(y0 + 1, grid.height() - 1);
  const double wx = x - x0, wy = y - y0;
  const auto& v = grid.values;
  const double top = v.at(y0, x0, k) + wx * (v.at(y0, x1, k) - v.at(y0, x0, k));
  const double bottom = v.at(y1, x0, k) + wx * (v.at(y1, x1, k) - v.at(y1, x0, k));
  return top + wy * (bottom - top);
}

std::string to_json_line(const AnnotationRecord& r) {
  nlohmann::json j{{"image_id", r.image_id}, {"cx", r.box.cx},         {"cy", r.box.cy},
                   {"scale", r.box.scale},   {"aspect", r.box.aspect}, {"category", r.box.category}};
  return j.dump();
}

AnnotationRecord annotation_from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed annotation line: ") + e.what());
  }
  AnnotationRecord r;
  try {
    r.image_id = j.at("image_id").get<int>();
    r.box.cx = j.at("cx").get<double>();
    r.box.cy = j.at("cy").get<double>();
    r.box.scale = j.at("scale").get<double>();
    r.box.aspect = j.at("aspect").get<double>();
    r.box.category = j.at("category").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("annotation line missing field: ") + e.what());
  }
  return r;
}

std::string write_annotation_lines(std::span<const AnnotationRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json_line(r);
    out += '\n';
  }
  return out;
}

std::vector<AnnotationRecord> read_annotation_lines(const std::string& text) {
  std::vector<AnnotationRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(annotation_from_json_line(line));
  }
  return out;
}

}  // namespace ltn
