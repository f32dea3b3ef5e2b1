// SPDX-License-Identifier: Apache-2.0

#include "ltt/contrastive.hpp"

namespace ltt {

LogitScale LogitScale::from_temperature(double temperature, bool trainable) {
  if (!(temperature > 0.0)) throw TensorError("temperature must be positive");
  return from_log(std::log(1.0 / temperature), trainable);
}

LogitScale LogitScale::from_log(double t, bool trainable) { return LogitScale{Tensor::scalar(t, trainable)}; }

void require_unit_rows(const Tensor& x, const char* what, double tolerance) {
  if (x.rank() != 2) throw ShapeError(std::string(what) + " must be [N, D], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto v = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += v[i * d + j] * v[i * d + j];
    const double norm = std::sqrt(s);
    if (std::abs(norm - 1.0) > tolerance) {
      throw NotNormalizedError(std::string(what) + " row " + std::to_string(i) + " has norm " +
                               std::to_string(norm) + ", expected unit norm");
    }
  }
}

Tensor similarity_logits(const Tensor& img, const Tensor& txt, const LogitScale& scale) {
  if (img.rank() != 2 || txt.rank() != 2 || img.shape() != txt.shape()) {
    throw ShapeError("similarity_logits: image " + shape_str(img.shape()) + " and text " + shape_str(txt.shape()) +
                     " embeddings must both be [B, D]");
  }
  require_unit_rows(img, "image embedding");
  require_unit_rows(txt, "text embedding");
  return mul(matmul(img, transpose(txt)), exp(scale.t));
}

Tensor info_nce(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(0) != logits.dim(1)) {
    throw ShapeError("info_nce expects a square logit matrix, got " + shape_str(logits.shape()));
  }
  if (logits.dim(0) < 2) throw ShapeError("info_nce needs a batch of at least 2 pairs for negatives");
  Tensor rows = mean(diagonal(log_softmax(logits, 1)));
  Tensor cols = mean(diagonal(log_softmax(logits, 0)));
  return scale(add(rows, cols), -0.5);
}

Tensor contrastive_step_loss(const Tensor& img, const Tensor& txt, const LogitScale& scale) {
  return info_nce(similarity_logits(img, txt, scale));
}

}  // namespace ltt
