#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ltn/numerics/tape.hpp"

namespace ltn {

struct GradCheckReport {
  double max_relative_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Builds a single-element loss on `tape` from one tape leaf per point.
using LossBuilder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

/// Compare reverse-mode gradients with central differences over every element
/// of every point. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckReport grad_check(const LossBuilder& build, std::vector<Tensor<double>> points, double h = 1e-6,
                                  double floor = 1e-6) {
  auto evaluate = [&](const std::vector<Tensor<double>>& at) {
    Tape<double> tape;
    std::vector<Var> leaves;
    leaves.reserve(at.size());
    for (const auto& p : at) leaves.push_back(tape.input(p));
    return tape.value(build(tape, leaves))[0];
  };

  Tape<double> tape;
  std::vector<Var> leaves;
  for (const auto& p : points) leaves.push_back(tape.input(p));
  tape.backward(build(tape, leaves));

  GradCheckReport report;
  for (std::size_t k = 0; k < points.size(); ++k) {
    const Tensor<double> analytic = tape.grad(leaves[k]);
    for (std::size_t i = 0; i < points[k].size(); ++i) {
      const double saved = points[k][i];
      points[k][i] = saved + h;
      const double up = evaluate(points);
      points[k][i] = saved - h;
      const double down = evaluate(points);
      points[k][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.checked;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace ltn
