// SPDX-License-Identifier: Apache-2.0
//
// Symmetric InfoNCE over paired unit embeddings with a learnable
// log-temperature. The scale is exp(t) and is never clamped.

#pragma once

#include <cmath>

#include "ltt/tensor.hpp"

namespace ltt {

class NotNormalizedError : public TensorError {
 public:
  using TensorError::TensorError;
};

/// Initial temperature 0.07, i.e. t0 = ln(1/0.07).
inline constexpr double kInitialTemperature = 0.07;

struct LogitScale {
  // Scalar leaf holding t; exp(t) multiplies the cosine logits.
  Tensor t;

  static LogitScale from_temperature(double temperature = kInitialTemperature, bool trainable = true);
  static LogitScale from_log(double t, bool trainable = true);
  double log_value() const { return t.item(); }
  double scale() const { return std::exp(t.item()); }
};

/// Row norms must be within this distance of 1.
inline constexpr double kUnitNormTolerance = 1e-6;

/// Throws NotNormalizedError naming `what` if any row of x[N, D] is not unit norm.
void require_unit_rows(const Tensor& x, const char* what, double tolerance = kUnitNormTolerance);

/// logits[i, j] = exp(t) · ⟨img_i, txt_j⟩.
Tensor similarity_logits(const Tensor& image_embeddings, const Tensor& text_embeddings, const LogitScale& scale);

/// 0.5 · (mean row cross-entropy + mean column cross-entropy), targets on the diagonal.
Tensor info_nce(const Tensor& logits);

Tensor contrastive_step_loss(const Tensor& image_embeddings, const Tensor& text_embeddings,
                             const LogitScale& scale);

}  // namespace ltt
