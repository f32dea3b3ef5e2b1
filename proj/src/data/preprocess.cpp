// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>

#include "ltt/data.hpp"

namespace ltt {

namespace {

double cubic(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

struct Taps {
  int first = 0;
  std::vector<double> weights;
};

// Per-output-pixel filter taps; the kernel widens by the downscale factor so
// that shrinking averages rather than aliases.
std::vector<Taps> resample_taps(int in_size, int out_size) {
  const double scale = static_cast<double>(in_size) / out_size;
  const double filter_scale = std::max(scale, 1.0);
  const double support = 2.0 * filter_scale;
  std::vector<Taps> taps(static_cast<std::size_t>(out_size));
  for (int i = 0; i < out_size; ++i) {
    const double center = (i + 0.5) * scale;
    const int lo = std::max(static_cast<int>(std::floor(center - support + 0.5)), 0);
    const int hi = std::min(static_cast<int>(std::floor(center + support + 0.5)), in_size);
    Taps& t = taps[static_cast<std::size_t>(i)];
    t.first = lo;
    double total = 0.0;
    for (int j = lo; j < hi; ++j) {
      const double w = cubic((j - center + 0.5) / filter_scale);
      t.weights.push_back(w);
      total += w;
    }
    for (auto& w : t.weights) w /= total;
  }
  return taps;
}

Raster crop(const Raster& img, int x0, int y0, int w, int h) {
  Raster out{w, h, std::vector<double>(3 * static_cast<std::size_t>(w) * h)};
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        out.pixels[(static_cast<std::size_t>(c) * h + y) * w + x] = img.at(c, y0 + y, x0 + x);
      }
    }
  }
  return out;
}

Raster resize_shorter_side(const Raster& img, int target) {
  if (img.width <= img.height) {
    const int h = static_cast<int>(std::lround(static_cast<double>(img.height) * target / img.width));
    return resize_bicubic(img, target, h);
  }
  const int w = static_cast<int>(std::lround(static_cast<double>(img.width) * target / img.height));
  return resize_bicubic(img, w, target);
}

Raster center_crop(const Raster& img, int size) {
  return crop(img, (img.width - size) / 2, (img.height - size) / 2, size, size);
}

}  // namespace

Raster resize_bicubic(const Raster& img, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw DataError("resize target must be positive");
  if (out_w == img.width && out_h == img.height) return img;
  const auto hx = resample_taps(img.width, out_w);
  const auto hy = resample_taps(img.height, out_h);
  // Horizontal pass [3, H, out_w], then vertical pass [3, out_h, out_w].
  std::vector<double> mid(3 * static_cast<std::size_t>(img.height) * out_w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < out_w; ++x) {
        const Taps& t = hx[static_cast<std::size_t>(x)];
        double acc = 0.0;
        for (std::size_t k = 0; k < t.weights.size(); ++k) acc += t.weights[k] * img.at(c, y, t.first + static_cast<int>(k));
        mid[(static_cast<std::size_t>(c) * img.height + y) * out_w + x] = acc;
      }
    }
  }
  Raster out{out_w, out_h, std::vector<double>(3 * static_cast<std::size_t>(out_h) * out_w)};
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const Taps& t = hy[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < t.weights.size(); ++k) {
          acc += t.weights[k] * mid[(static_cast<std::size_t>(c) * img.height + t.first + k) * out_w + x];
        }
        // Clip like an 8-bit resampler would; bicubic overshoots at edges.
        out.pixels[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] = std::clamp(acc, 0.0, 1.0);
      }
    }
  }
  return out;
}

Tensor preprocess(const Raster& image, const PreprocessConfig& config, bool train_mode, Rng* rng) {
  const int s = config.size;
  if (s <= 0) throw DataError("preprocess target size must be positive");
  if (image.width * 2 < s || image.height * 2 < s ||
      image.pixels.size() != 3 * static_cast<std::size_t>(image.width) * image.height) {
    throw DataError("degenerate raster " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                    " for target size " + std::to_string(s));
  }
  Raster out;
  if (!train_mode) {
    out = center_crop(resize_shorter_side(image, s), s);
  } else {
    if (rng == nullptr) throw DataError("train-mode preprocessing needs an Rng");
    if (!(config.min_scale > 0.0 && config.min_scale <= config.max_scale && config.max_scale <= 1.0)) {
      throw DataError("crop scale range must satisfy 0 < min <= max <= 1");
    }
    const double area = config.min_scale == config.max_scale ? config.min_scale
                                                                : rng->uniform(config.min_scale, config.max_scale);
    const int r = static_cast<int>(std::ceil(s / std::sqrt(area) - 1e-9));
    Raster square = center_crop(resize_shorter_side(image, r), r);
    const int x0 = static_cast<int>(rng->below(static_cast<std::uint64_t>(r - s + 1)));
    const int y0 = static_cast<int>(rng->below(static_cast<std::uint64_t>(r - s + 1)));
    out = crop(square, x0, y0, s, s);
  }
  std::vector<double> v(out.pixels.size());
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < plane; ++p) v[c * plane + p] = (out.pixels[c * plane + p] - kClipMean[c]) / kClipStd[c];
  }
  return Tensor::from({3, static_cast<std::size_t>(s), static_cast<std::size_t>(s)}, std::move(v));
}

}  // namespace ltt
