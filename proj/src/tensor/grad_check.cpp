// SPDX-License-Identifier: Apache-2.0

#include "ltt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ltt/rng.hpp"

namespace ltt {

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& options) {
  Tensor leaf = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  Tensor y = f(leaf);
  if (y.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued, got " + shape_str(y.shape()));
  backward(y);
  std::vector<double> analytic = leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                                                 : std::vector<double>(leaf.numel(), 0.0);

  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), 0);
  if (options.max_coords > 0 && options.max_coords < coords.size()) {
    Rng rng(options.seed);
    for (std::size_t i = 0; i < options.max_coords; ++i) {
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    }
    coords.resize(options.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  NoGradGuard no_grad;
  std::vector<double> probe(x.data().begin(), x.data().end());
  GradCheckReport report;
  for (auto idx : coords) {
    const double orig = probe[idx];
    probe[idx] = orig + options.step;
    const double fp = f(Tensor::from(x.shape(), probe)).item();
    probe[idx] = orig - options.step;
    const double fm = f(Tensor::from(x.shape(), probe)).item();
    probe[idx] = orig;
    const double numeric = (fp - fm) / (2.0 * options.step);
    const double abs_err = std::abs(analytic[idx] - numeric);
    const double denom = std::max({std::abs(analytic[idx]), std::abs(numeric), options.abs_floor});
    const double rel = abs_err / denom;
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = idx;
    }
    ++report.checked;
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, double step, double tol) {
  GradCheckOptions options;
  options.step = step;
  options.tol = tol;
  return grad_check(f, x, options);
}

}  // namespace ltt
