// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kernels.hpp"
#include "ltt/tensor.hpp"

namespace ltt {

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

Tensor make_result(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward_fn) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs_grad = false;
  if (GradMode::enabled()) {
    for (const auto& t : inputs) needs_grad = needs_grad || (t.defined() && t.requires_grad());
  }
  if (needs_grad) {
    auto node = std::make_shared<detail::Node>();
    node->op = op;
    for (const auto& t : inputs) {
      if (t.defined()) node->inputs.push_back(t.impl_ptr());
    }
    node->backward = std::move(backward_fn);
    impl->requires_grad = true;
    impl->grad_fn = std::move(node);
  }
  return Tensor(std::move(impl));
}

// Gradient sink for an input: null when the input does not take gradients.
double* grad_of(const ImplPtr& impl) {
  if (!impl || !impl->requires_grad) return nullptr;
  return impl->grad_buffer().data();
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw TensorError(std::string(op) + ": undefined tensor");
}

enum class Broadcast { same, scalar, suffix };

Broadcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::scalar;
  if (sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size()))) {
    return Broadcast::suffix;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
}

// Index into b for flat index i of a.
inline std::size_t bcast_index(Broadcast mode, std::size_t i, std::size_t nb) {
  switch (mode) {
    case Broadcast::same:
      return i;
    case Broadcast::scalar:
      return 0;
    case Broadcast::suffix:
      return i % nb;
  }
  return 0;
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
  }
  AxisSplit out;
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  out.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  auto mode = broadcast_mode(a, b, "add");
  const auto& da = a.data();
  const auto& db = b.data();
  const std::size_t nb = db.size();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[bcast_index(mode, i, nb)];
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  return make_result("add", a.shape(), std::move(out), {a, b}, [ia, ib, mode, nb](const TensorImpl& o) {
    const auto& g = *o.grad;
    if (auto* ga = grad_of(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (auto* gb = grad_of(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[bcast_index(mode, i, nb)] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  auto mode = broadcast_mode(a, b, "sub");
  const auto& da = a.data();
  const auto& db = b.data();
  const std::size_t nb = db.size();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[bcast_index(mode, i, nb)];
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  return make_result("sub", a.shape(), std::move(out), {a, b}, [ia, ib, mode, nb](const TensorImpl& o) {
    const auto& g = *o.grad;
    if (auto* ga = grad_of(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (auto* gb = grad_of(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[bcast_index(mode, i, nb)] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  auto mode = broadcast_mode(a, b, "mul");
  const auto& da = a.data();
  const auto& db = b.data();
  const std::size_t nb = db.size();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[bcast_index(mode, i, nb)];
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  return make_result("mul", a.shape(), std::move(out), {a, b}, [ia, ib, mode, nb](const TensorImpl& o) {
    const auto& g = *o.grad;
    if (auto* ga = grad_of(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ib->data[bcast_index(mode, i, nb)];
    }
    if (auto* gb = grad_of(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[bcast_index(mode, i, nb)] += g[i] * ia->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto ia = a.impl_ptr();
  return make_result("scale", a.shape(), std::move(out), {a}, [ia, factor](const TensorImpl& o) {
    const auto& g = *o.grad;
    if (auto* ga = grad_of(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    }
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  require_defined(a, "add_scalar");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  auto ia = a.impl_ptr();
  return make_result("add_scalar", a.shape(), std::move(out), {a}, [ia](const TensorImpl& o) {
    const auto& g = *o.grad;
    if (auto* ga = grad_of(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Tensor exp(const Tensor& a) {
  require_defined(a, "exp");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  auto ia = a.impl_ptr();
  return make_result("exp", a.shape(), std::move(out), {a}, [ia](const TensorImpl& o) {
    const auto& g = *o.grad;
    if (auto* ga = grad_of(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * o.data[i];
    }
  });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
  auto ia = a.impl_ptr();
  return make_result("log", a.shape(), std::move(out), {a}, [ia](const TensorImpl& o) {
    const auto& g = *o.grad;
    if (auto* ga = grad_of(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / ia->data[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  require_defined(a, "gelu");
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  auto ia = a.impl_ptr();
  return make_result("gelu", a.shape(), std::move(out), {a}, [ia](const TensorImpl& o) {
    const auto& g = *o.grad;
    if (auto* ga = grad_of(ia)) {
      const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
      for (std::size_t i = 0; i < g.size(); ++i) {
        double x = ia->data[i];
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        ga[i] += g[i] * (cdf + x * pdf);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto ia = a.impl_ptr();
  return make_result("sum", {1}, {s}, {a}, [ia](const TensorImpl& o) {
    if (auto* ga = grad_of(ia)) {
      const double g = (*o.grad)[0];
      for (std::size_t i = 0; i < ia->data.size(); ++i) ga[i] += g;
    }
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) throw DegenerateInputError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  require_defined(a, "mean_axis");
  auto sp = split_axis(a.shape(), axis, "mean_axis");
  if (sp.n == 0) throw DegenerateInputError("mean_axis over empty axis");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto& d = a.data();
  const double inv = 1.0 / static_cast<double>(sp.n);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.n; ++k) {
      const double* src = &d[(o * sp.n + k) * sp.inner];
      double* dst = &out[o * sp.inner];
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  for (auto& v : out) v *= inv;
  auto ia = a.impl_ptr();
  return make_result("mean_axis", std::move(out_shape), std::move(out), {a}, [ia, sp, inv](const TensorImpl& o) {
    if (auto* ga = grad_of(ia)) {
      const auto& g = *o.grad;
      for (std::size_t oo = 0; oo < sp.outer; ++oo) {
        for (std::size_t k = 0; k < sp.n; ++k) {
          double* dst = ga + (oo * sp.n + k) * sp.inner;
          const double* src = &g[oo * sp.inner];
          for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i] * inv;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalizers
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  auto sp = split_axis(x.shape(), axis, "softmax");
  const auto& d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = d[base];
      for (std::size_t k = 1; k < sp.n; ++k) mx = std::max(mx, d[base + k * sp.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        double e = std::exp(d[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] *= inv;
    }
  }
  auto ix = x.impl_ptr();
  return make_result("softmax", x.shape(), std::move(out), {x}, [ix, sp](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      const auto& g = *o.grad;
      const auto& y = o.data;
      for (std::size_t oo = 0; oo < sp.outer; ++oo) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = oo * sp.n * sp.inner + i;
          double dot = 0.0;
          for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
          for (std::size_t k = 0; k < sp.n; ++k) {
            const std::size_t j = base + k * sp.inner;
            gx[j] += y[j] * (g[j] - dot);
          }
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "log_softmax");
  auto sp = split_axis(x.shape(), axis, "log_softmax");
  const auto& d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = d[base];
      for (std::size_t k = 1; k < sp.n; ++k) mx = std::max(mx, d[base + k * sp.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) total += std::exp(d[base + k * sp.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = d[base + k * sp.inner] - lse;
    }
  }
  auto ix = x.impl_ptr();
  return make_result("log_softmax", x.shape(), std::move(out), {x}, [ix, sp](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      const auto& g = *o.grad;
      const auto& y = o.data;
      for (std::size_t oo = 0; oo < sp.outer; ++oo) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = oo * sp.n * sp.inner + i;
          double gsum = 0.0;
          for (std::size_t k = 0; k < sp.n; ++k) gsum += g[base + k * sp.inner];
          for (std::size_t k = 0; k < sp.n; ++k) {
            const std::size_t j = base + k * sp.inner;
            gx[j] += g[j] - std::exp(y[j]) * gsum;
          }
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined(x, "layer_norm");
  if (x.rank() == 0) throw ShapeError("layer_norm on rank-0 tensor");
  const std::size_t n = x.shape().back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match last axis of " + shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw TensorError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / n;
  const auto& d = x.data();
  const auto& gm = gamma.data();
  const auto& bt = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(d.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(d.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &d[r * n];
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < n; ++i) {
      const double h = (row[i] - mu) * rs;
      (*xhat)[r * n + i] = h;
      out[r * n + i] = h * gm[i] + bt[i];
    }
  }
  auto ix = x.impl_ptr(), ig = gamma.impl_ptr(), ib = beta.impl_ptr();
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [ix, ig, ib, xhat, rstd, n, rows](const TensorImpl& o) {
                       const auto& g = *o.grad;
                       auto* gx = grad_of(ix);
                       auto* gg = grad_of(ig);
                       auto* gb = grad_of(ib);
                       std::vector<double> gh(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* grow = &g[r * n];
                         const double* hrow = &(*xhat)[r * n];
                         if (gg) {
                           for (std::size_t i = 0; i < n; ++i) gg[i] += grow[i] * hrow[i];
                         }
                         if (gb) {
                           for (std::size_t i = 0; i < n; ++i) gb[i] += grow[i];
                         }
                         if (gx) {
                           double mean_gh = 0.0, mean_ghh = 0.0;
                           for (std::size_t i = 0; i < n; ++i) {
                             gh[i] = grow[i] * ig->data[i];
                             mean_gh += gh[i];
                             mean_ghh += gh[i] * hrow[i];
                           }
                           mean_gh /= static_cast<double>(n);
                           mean_ghh /= static_cast<double>(n);
                           const double rs = (*rstd)[r];
                           for (std::size_t i = 0; i < n; ++i) {
                             gx[r * n + i] += rs * (gh[i] - mean_gh - hrow[i] * mean_ghh);
                           }
                         }
                       }
                     });
}

Tensor l2_normalize(const Tensor& x) {
  require_defined(x, "l2_normalize");
  if (x.rank() == 0) throw ShapeError("l2_normalize on rank-0 tensor");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n == 0 ? 0 : x.numel() / n;
  const auto& d = x.data();
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(d.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += d[r * n + i] * d[r * n + i];
    const double nrm = std::sqrt(ss);
    if (nrm == 0.0) throw DegenerateInputError("l2_normalize: row " + std::to_string(r) + " is all zeros");
    (*norms)[r] = nrm;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = d[r * n + i] / nrm;
  }
  auto ix = x.impl_ptr();
  return make_result("l2_normalize", x.shape(), std::move(out), {x}, [ix, norms, n, rows](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      const auto& g = *o.grad;
      const auto& y = o.data;
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += g[r * n + i] * y[r * n + i];
        const double inv = 1.0 / (*norms)[r];
        for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += (g[r * n + i] - y[r * n + i] * dot) * inv;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Products
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](const TensorImpl& o) {
    const double* g = o.grad->data();
    if (auto* ga = grad_of(ia)) kernels::gemm_nt(m, n, k, g, ib->data.data(), ga);
    if (auto* gb = grad_of(ib)) kernels::gemm_tn(k, m, n, ia->data.data(), g, gb);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0), n = w.dim(1);
  const std::size_t m = x.numel() / k;
  if (bias.defined() && bias.shape() != Shape{n}) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match output width " + std::to_string(n));
  }
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n, 0.0);
  if (bias.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * n);
  }
  kernels::gemm_nn(m, k, n, x.data().data(), w.data().data(), out.data());
  auto ix = x.impl_ptr(), iw = w.impl_ptr();
  auto ib = bias.defined() ? bias.impl_ptr() : nullptr;
  return make_result("linear", std::move(out_shape), std::move(out), {x, w, bias},
                     [ix, iw, ib, m, k, n](const TensorImpl& o) {
                       const double* g = o.grad->data();
                       if (auto* gx = grad_of(ix)) kernels::gemm_nt(m, n, k, g, iw->data.data(), gx);
                       if (auto* gw = grad_of(iw)) kernels::gemm_tn(k, m, n, ix->data.data(), g, gw);
                       if (auto* gb = grad_of(ib)) {
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                         }
                       }
                     });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(transpose_b ? 2 : 1)) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<double> out(batch * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t t = 0; t < batch; ++t) {
    if (transpose_b) {
      kernels::gemm_nt(m, k, n, pa + t * m * k, pb + t * n * k, out.data() + t * m * n);
    } else {
      kernels::gemm_nn(m, k, n, pa + t * m * k, pb + t * k * n, out.data() + t * m * n);
    }
  }
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  return make_result("bmm", {batch, m, n}, std::move(out), {a, b},
                     [ia, ib, batch, m, k, n, transpose_b](const TensorImpl& o) {
                       const double* g = o.grad->data();
                       auto* ga = grad_of(ia);
                       auto* gb = grad_of(ib);
                       for (std::size_t t = 0; t < batch; ++t) {
                         const double* gt = g + t * m * n;
                         const double* at = ia->data.data() + t * m * k;
                         const double* bt = ib->data.data() + t * k * n;
                         if (transpose_b) {
                           // C = A·Bᵀ, B is [n, k]
                           if (ga) kernels::gemm_nn(m, n, k, gt, bt, ga + t * m * k);
                           if (gb) kernels::gemm_tn(n, m, k, gt, at, gb + t * n * k);
                         } else {
                           if (ga) kernels::gemm_nt(m, n, k, gt, bt, ga + t * m * k);
                           if (gb) kernels::gemm_tn(k, m, n, at, gt, gb + t * k * n);
                         }
                       }
                     });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  kernels::transpose(r, c, x.data().data(), out.data());
  auto ix = x.impl_ptr();
  return make_result("transpose", {c, r}, std::move(out), {x}, [ix, r, c](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      const auto& g = *o.grad;
      for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < r; ++j) gx[j * c + i] += g[i * r + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto ix = x.impl_ptr();
  return make_result("reshape", std::move(shape), std::move(out), {x}, [ix](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      const auto& g = *o.grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  require_defined(x, "permute");
  const auto& s = x.shape();
  const std::size_t rank = s.size();
  if (order.size() != rank) throw ShapeError("permute: order rank mismatch for " + shape_str(s));
  std::vector<bool> seen(rank, false);
  for (auto ax : order) {
    if (ax >= rank || seen[ax]) throw ShapeError("permute: invalid axis order for " + shape_str(s));
    seen[ax] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[order[i]];
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  // Stride into the input for each output axis.
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) src_stride[i] = in_stride[order[i]];

  const std::size_t total = x.numel();
  auto mapping = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    (*mapping)[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += src_stride[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= src_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  std::vector<double> out(total);
  const auto& d = x.data();
  for (std::size_t i = 0; i < total; ++i) out[i] = d[(*mapping)[i]];
  auto ix = x.impl_ptr();
  return make_result("permute", std::move(out_shape), std::move(out), {x}, [ix, mapping](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      const auto& g = *o.grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*mapping)[i]] += g[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool compatible = s.size() == first.size();
    for (std::size_t i = 0; compatible && i < s.size(); ++i) compatible = (i == axis) || s[i] == first[i];
    if (!compatible) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  auto sp = split_axis(out_shape, axis, "concat");
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * sp.inner);
  const std::size_t row = sp.n * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::size_t offset = o * row;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const double* src = parts[pi].data().data() + o * widths[pi];
      std::copy(src, src + widths[pi], out.begin() + static_cast<long>(offset));
      offset += widths[pi];
    }
  }
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl_ptr());
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [impls, widths, sp, row](const TensorImpl& o) {
                       const auto& g = *o.grad;
                       std::size_t start = 0;
                       for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                         if (auto* gp = grad_of(impls[pi])) {
                           for (std::size_t oo = 0; oo < sp.outer; ++oo) {
                             const double* src = &g[oo * row + start];
                             double* dst = gp + oo * widths[pi];
                             for (std::size_t i = 0; i < widths[pi]; ++i) dst[i] += src[i];
                           }
                         }
                         start += widths[pi];
                       }
                     });
}

Tensor repeat_batch(const Tensor& x, std::size_t n) {
  require_defined(x, "repeat_batch");
  if (x.rank() == 0 || x.dim(0) != 1) throw ShapeError("repeat_batch expects leading dim 1, got " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[0] = n;
  const std::size_t w = x.numel();
  std::vector<double> out(w * n);
  for (std::size_t i = 0; i < n; ++i) std::copy(x.data().begin(), x.data().end(), out.begin() + i * w);
  auto ix = x.impl_ptr();
  return make_result("repeat_batch", std::move(out_shape), std::move(out), {x}, [ix, n, w](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      const auto& g = *o.grad;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < w; ++j) gx[j] += g[i * w + j];
      }
    }
  });
}

Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  require_defined(x, "select");
  auto sp = split_axis(x.shape(), axis, "select");
  if (index >= sp.n) throw ShapeError("select: index " + std::to_string(index) + " out of range for " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  std::vector<double> out(sp.outer * sp.inner);
  const auto& d = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const double* src = &d[(o * sp.n + index) * sp.inner];
    std::copy(src, src + sp.inner, out.begin() + static_cast<long>(o * sp.inner));
  }
  auto ix = x.impl_ptr();
  return make_result("select", std::move(out_shape), std::move(out), {x}, [ix, sp, index](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      const auto& g = *o.grad;
      for (std::size_t oo = 0; oo < sp.outer; ++oo) {
        double* dst = gx + (oo * sp.n + index) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[oo * sp.inner + i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing
// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  std::vector<double> out(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for vocab " + std::to_string(vocab));
    }
    const double* src = table.data().data() + static_cast<std::size_t>(ids[i]) * width;
    std::copy(src, src + width, out.begin() + static_cast<long>(i * width));
  }
  auto it = table.impl_ptr();
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result("embedding", {ids.size(), width}, std::move(out), {table},
                     [it, saved = std::move(saved), width](const TensorImpl& o) {
                       if (auto* gt = grad_of(it)) {
                         const auto& g = *o.grad;
                         for (std::size_t i = 0; i < saved.size(); ++i) {
                           double* dst = gt + static_cast<std::size_t>(saved[i]) * width;
                           for (std::size_t j = 0; j < width; ++j) dst[j] += g[i * width + j];
                         }
                       }
                     });
}

Tensor masked_mean(const Tensor& x, std::span<const double> mask) {
  require_defined(x, "masked_mean");
  if (x.rank() != 3) throw ShapeError("masked_mean expects [B, T, D], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), len = x.dim(1), width = x.dim(2);
  if (mask.size() != batch * len) throw ShapeError("masked_mean: mask size does not match " + shape_str(x.shape()));
  auto weights = std::make_shared<std::vector<double>>(batch * len, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    double count = 0.0;
    for (std::size_t t = 0; t < len; ++t) count += mask[b * len + t] != 0.0 ? 1.0 : 0.0;
    if (count == 0.0) throw DegenerateInputError("masked_mean: row " + std::to_string(b) + " has no valid positions");
    for (std::size_t t = 0; t < len; ++t) (*weights)[b * len + t] = mask[b * len + t] != 0.0 ? 1.0 / count : 0.0;
  }
  std::vector<double> out(batch * width, 0.0);
  const auto& d = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    double* dst = &out[b * width];
    for (std::size_t t = 0; t < len; ++t) {
      const double wt = (*weights)[b * len + t];
      if (wt == 0.0) continue;
      const double* src = &d[(b * len + t) * width];
      for (std::size_t j = 0; j < width; ++j) dst[j] += wt * src[j];
    }
  }
  auto ix = x.impl_ptr();
  return make_result("masked_mean", {batch, width}, std::move(out), {x},
                     [ix, weights, batch, len, width](const TensorImpl& o) {
                       if (auto* gx = grad_of(ix)) {
                         const auto& g = *o.grad;
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (std::size_t t = 0; t < len; ++t) {
                             const double wt = (*weights)[b * len + t];
                             if (wt == 0.0) continue;
                             double* dst = gx + (b * len + t) * width;
                             for (std::size_t j = 0; j < width; ++j) dst[j] += wt * g[b * width + j];
                           }
                         }
                       }
                     });
}

Tensor diagonal(const Tensor& x) {
  require_defined(x, "diagonal");
  if (x.rank() != 2 || x.dim(0) != x.dim(1)) throw ShapeError("diagonal expects a square matrix, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i * n + i];
  auto ix = x.impl_ptr();
  return make_result("diagonal", {n}, std::move(out), {x}, [ix, n](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      for (std::size_t i = 0; i < n; ++i) gx[i * n + i] += (*o.grad)[i];
    }
  });
}

Tensor pick(const Tensor& x, std::span<const int> targets) {
  require_defined(x, "pick");
  if (x.rank() != 2 || targets.size() != x.dim(0)) {
    throw ShapeError("pick: " + std::to_string(targets.size()) + " targets for " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= cols) {
      throw ShapeError("pick: target " + std::to_string(targets[i]) + " out of range for " + shape_str(x.shape()));
    }
    out[i] = x.data()[i * cols + static_cast<std::size_t>(targets[i])];
  }
  auto ix = x.impl_ptr();
  std::vector<int> saved(targets.begin(), targets.end());
  return make_result("pick", {rows}, std::move(out), {x}, [ix, saved = std::move(saved), cols](const TensorImpl& o) {
    if (auto* gx = grad_of(ix)) {
      for (std::size_t i = 0; i < saved.size(); ++i) gx[i * cols + static_cast<std::size_t>(saved[i])] += (*o.grad)[i];
    }
  });
}

}  // namespace ltt
