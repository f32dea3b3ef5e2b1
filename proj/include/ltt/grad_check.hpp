// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>

#include "ltt/tensor.hpp"

namespace ltt {

struct GradCheckOptions {
  double step = 1e-4;
  double tol = 1e-4;
  // Denominator floor for the relative error of near-zero gradient entries.
  double abs_floor = 1e-8;
  // Number of randomly chosen coordinates to probe; 0 checks all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares the analytic gradient of scalar f at x with central differences.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, abs_floor).
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& options);
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, double step, double tol);

}  // namespace ltt
