#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "ltn/numerics/grad_check.hpp"
#include "ltn/rng.hpp"

namespace ltn::testing {

/// Central-difference check of the gradients a loss leaves in `params`.
/// `loss` records a single-element loss on a fresh tape.
inline GradCheckReport param_grad_check(const ParameterList<double>& params,
                                        const std::function<Var(Tape<double>&)>& loss, double h = 1e-6,
                                        double floor = 1e-6, std::size_t max_per_param = 40) {
  auto evaluate = [&] {
    Tape<double> tape;
    return tape.value(loss(tape))[0];
  };
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  GradCheckReport report;
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    const std::size_t step = std::max<std::size_t>(1, n / max_per_param);
    for (std::size_t i = 0; i < n; i += step) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = evaluate();
      p->value[i] = saved - h;
      const double down = evaluate();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = p->grad[i];
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

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Give zero-initialized layers small random values so every path carries gradient.
inline void perturb(const ParameterList<double>& params, Rng& rng, double scale = 0.2) {
  for (auto* p : params) {
    for (auto& v : p->value.data()) v += rng.uniform(-scale, scale);
  }
}

}  // namespace ltn::testing
