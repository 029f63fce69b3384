#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "condistfl/tensor.hpp"

namespace condistfl {

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> error;  // relative, or absolute where both values are tiny
  std::vector<std::size_t> coordinates;
  double max_error = 0.0;
  std::size_t worst = 0;  // index into coordinates
  bool passed = false;
};

/// Compares the taped gradient of scalar `f` at `point` with central
/// differences (f(x+h) - f(x-h)) / 2h on the given coordinates (all when empty).
template <typename T, typename F>
GradCheckReport grad_check(F&& f, const Tensor<T>& point, double h, double tol,
                           std::vector<std::size_t> coordinates = {}) {
  if (!(h >= 1e-5 && h <= 1e-2)) throw ValueError("grad_check: step must lie in [1e-5, 1e-2]");
  if (coordinates.empty()) {
    coordinates.resize(point.numel());
    std::iota(coordinates.begin(), coordinates.end(), std::size_t{0});
  }

  Tensor<T> x = point.clone();
  x.set_requires_grad(true);
  Tensor<T> y;
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    y = f(x);
    if (y.numel() != 1) throw ValueError("grad_check: function is not scalar-valued, shape " + to_string(y.shape()));
    tape.backward(y);
  }

  GradCheckReport report;
  report.coordinates = coordinates;
  NoGradScope<T> no_grad;
  for (auto idx : coordinates) {
    const double a = x.has_grad() ? static_cast<double>(x.grad()[idx]) : 0.0;
    Tensor<T> probe = point.clone();
    probe.set_requires_grad(false);
    const T original = probe[idx];
    probe[idx] = static_cast<T>(static_cast<double>(original) + h);
    const double up = static_cast<double>(f(probe).item());
    probe[idx] = static_cast<T>(static_cast<double>(original) - h);
    const double down = static_cast<double>(f(probe).item());
    const double n = (up - down) / (2.0 * h);
    const double scale = std::max(std::abs(a), std::abs(n));
    const double err = scale < 1e-8 ? std::abs(a - n) : std::abs(a - n) / scale;
    report.analytic.push_back(a);
    report.numeric.push_back(n);
    report.error.push_back(err);
  }
  if (!report.error.empty()) {
    auto it = std::max_element(report.error.begin(), report.error.end());
    report.max_error = *it;
    report.worst = static_cast<std::size_t>(it - report.error.begin());
  }
  report.passed = report.max_error < tol;
  return report;
}

}  // namespace condistfl
