#pragma once

// Elementwise, structural and reduction ops with analytic adjoints.

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>

#include "octamamba/tensor.hpp"

namespace octamamba {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
  }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got " + shape_str(s));
  }
}

// Fixed 8-lane dot product: deterministic and vectorizable.
template <typename T>
T lane_dot(const T* a, const T* b, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

// y = f(x) elementwise; dydx(x, y) gives the local derivative.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D dydx) {
  const auto& xs = x.vec();
  std::vector<T> y(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = f(xs[i]);
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(y), {x},
                        [xi, dydx](const TensorImpl<T>& out) {
                          T* gx = xi->grad_sink();
                          if (!gx) return;
                          for (std::size_t i = 0; i < out.grad.size(); ++i) {
                            gx[i] += out.grad[i] * dydx(xi->data[i], out.data[i]);
                          }
                        });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(y), {a, b},
                        [ai, bi](const TensorImpl<T>& out) {
                          for (auto* g : {ai->grad_sink(), bi->grad_sink()}) {
                            if (!g) continue;
                            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(y), {a, b},
                        [ai, bi](const TensorImpl<T>& out) {
                          if (T* g = ai->grad_sink())
                            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
                          if (T* g = bi->grad_sink())
                            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] -= out.grad[i];
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(y), {a, b},
                        [ai, bi](const TensorImpl<T>& out) {
                          if (T* g = ai->grad_sink())
                            for (std::size_t i = 0; i < out.grad.size(); ++i)
                              g[i] += out.grad[i] * bi->data[i];
                          if (T* g = bi->grad_sink())
                            for (std::size_t i = 0; i < out.grad.size(); ++i)
                              g[i] += out.grad[i] * ai->data[i];
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary(
      x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.vec()) s += v;
  auto xi = x.impl();
  return make_result<T>(Shape{1}, std::vector<T>{s}, {x},
                        [xi](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          const T go = out.grad[0];
                          for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += go;
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Same data under a new shape with equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto xi = x.impl();
  return make_result<T>(std::move(shape), x.vec(), {x},
                        [xi](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
                        });
}

/// out[i] = x[index[i]]; the adjoint scatters back. Used for permutations.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape shape,
                 std::shared_ptr<const std::vector<std::size_t>> index) {
  if (numel_of(shape) != index->size()) throw ShapeError("gather: index/shape size mismatch");
  std::vector<T> y(index->size());
  const auto& xs = x.vec();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[(*index)[i]];
  auto xi = x.impl();
  return make_result<T>(std::move(shape), std::move(y), {x},
                        [xi, index](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          for (std::size_t i = 0; i < out.grad.size(); ++i)
                            g[(*index)[i]] += out.grad[i];
                        });
}

template <typename T>
Tensor<T> nchw_to_nhwc(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "nchw_to_nhwc");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto idx = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::size_t k = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < h * w; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) (*idx)[k++] = (b * c + ch) * h * w + i;
  return gather(x, Shape{n, h, w, c}, std::move(idx));
}

template <typename T>
Tensor<T> nhwc_to_nchw(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "nhwc_to_nchw");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  auto idx = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::size_t k = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h * w; ++i) (*idx)[k++] = (b * h * w + i) * c + ch;
  return gather(x, Shape{n, c, h, w}, std::move(idx));
}

/// Concatenates NCHW tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = xs.front().shape();
  detail::require_rank(s0, 4, "concat_channels");
  std::size_t c_total = 0;
  for (const auto& x : xs) {
    detail::require_rank(x.shape(), 4, "concat_channels");
    if (x.dim(0) != s0[0] || x.dim(2) != s0[2] || x.dim(3) != s0[3])
      throw ShapeError("concat_channels: incompatible " + shape_str(x.shape()));
    c_total += x.dim(1);
  }
  const std::size_t n = s0[0], hw = s0[2] * s0[3];
  std::vector<T> y(n * c_total * hw);
  std::size_t c_off = 0;
  for (const auto& x : xs) {
    const std::size_t c = x.dim(1);
    for (std::size_t b = 0; b < n; ++b)
      std::copy_n(x.vec().data() + b * c * hw, c * hw, y.data() + (b * c_total + c_off) * hw);
    c_off += c;
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  for (const auto& x : xs) impls.push_back(x.impl());
  return make_result<T>(Shape{n, c_total, s0[2], s0[3]}, std::move(y), xs,
                        [impls, n, c_total, hw](const TensorImpl<T>& out) {
                          std::size_t off = 0;
                          for (const auto& xi : impls) {
                            const std::size_t c = xi->shape[1];
                            if (T* g = xi->grad_sink()) {
                              for (std::size_t b = 0; b < n; ++b) {
                                const T* src = out.grad.data() + (b * c_total + off) * hw;
                                T* dst = g + b * c * hw;
                                for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
                              }
                            }
                            off += c;
                          }
                        });
}

/// x[..., begin:end] along the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t d = x.shape().back();
  if (begin >= end || end > d) throw ShapeError("slice_last: bad range");
  const std::size_t rows = x.numel() / d, w = end - begin;
  std::vector<T> y(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.vec().data() + r * d + begin, w, y.data() + r * w);
  Shape shape = x.shape();
  shape.back() = w;
  auto xi = x.impl();
  return make_result<T>(std::move(shape), std::move(y), {x},
                        [xi, rows, d, w, begin](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < w; ++j)
                              g[r * d + begin + j] += out.grad[r * w + j];
                        });
}

/// y[..., j] = x[..., j] + b[j].
template <typename T>
Tensor<T> add_bias_last(const Tensor<T>& x, const Tensor<T>& b) {
  const std::size_t d = x.shape().back();
  if (b.numel() != d) throw ShapeError("add_bias_last: bias length mismatch");
  std::vector<T> y(x.vec());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i % d];
  auto xi = x.impl(), bi = b.impl();
  return make_result<T>(x.shape(), std::move(y), {x, b},
                        [xi, bi, d](const TensorImpl<T>& out) {
                          if (T* g = xi->grad_sink())
                            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
                          if (T* g = bi->grad_sink())
                            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i % d] += out.grad[i];
                        });
}

/// Broadcasts a trailing axis of size 1 to size d.
template <typename T>
Tensor<T> expand_last(const Tensor<T>& x, std::size_t d) {
  if (x.shape().back() != 1) throw ShapeError("expand_last: last dim must be 1");
  const std::size_t rows = x.numel();
  std::vector<T> y(rows * d);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(y.data() + r * d, d, x[r]);
  Shape shape = x.shape();
  shape.back() = d;
  auto xi = x.impl();
  return make_result<T>(std::move(shape), std::move(y), {x},
                        [xi, rows, d](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            T acc = 0;
                            for (std::size_t j = 0; j < d; ++j) acc += out.grad[r * d + j];
                            g[r] += acc;
                          }
                        });
}

namespace detail {

// y[o] = sum_i x[i] * wt[i][o], accumulated in i order for every o.
template <typename T>
inline void row_times_wt(const T* __restrict x, const T* __restrict wt, T* __restrict y,
                         std::size_t din, std::size_t dout) {
  for (std::size_t o = 0; o < dout; ++o) y[o] = T(0);
  for (std::size_t i = 0; i < din; ++i) {
    const T xv = x[i];
    const T* wr = wt + i * dout;
    for (std::size_t o = 0; o < dout; ++o) y[o] += xv * wr[o];
  }
}

// Column-major copy: out[j][r] = in[r][j].
template <typename T>
std::vector<T> transpose2d(const T* in, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + r] = in[r * cols + j];
  return out;
}

}  // namespace detail

/// y = x W^T + b over the last axis. W is [Dout, Din]; b may be empty.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w,
                 const std::type_identity_t<Tensor<T>>* b = nullptr) {
  detail::require_rank(w.shape(), 2, "linear");
  const std::size_t din = w.dim(1), dout = w.dim(0);
  if (x.rank() == 0 || x.shape().back() != din) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  if (b && b->numel() != dout) throw ShapeError("linear: bias length mismatch");
  const std::size_t rows = x.numel() / din;
  std::vector<T> y(rows * dout);
  const T* xs = x.vec().data();
  const auto wt = detail::transpose2d(w.vec().data(), dout, din);
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = y.data() + r * dout;
    detail::row_times_wt(xs + r * din, wt.data(), yr, din, dout);
    if (b)
      for (std::size_t o = 0; o < dout; ++o) yr[o] += (*b)[o];
  }
  Shape shape = x.shape();
  shape.back() = dout;
  auto xi = x.impl(), wi = w.impl();
  auto bi = b ? b->impl() : nullptr;
  auto fn = [xi, wi, bi, rows, din, dout](const TensorImpl<T>& out) {
    const T* go = out.grad.data();
    if (T* gx = xi->grad_sink()) {
      // gx[r] += go[r] W, i.e. row_times_wt with W as the [dout, din] table.
      std::vector<T> tmp(din);
      for (std::size_t r = 0; r < rows; ++r) {
        detail::row_times_wt(go + r * dout, wi->data.data(), tmp.data(), dout, din);
        T* gxr = gx + r * din;
        for (std::size_t i = 0; i < din; ++i) gxr[i] += tmp[i];
      }
    }
    const bool need_w = wi->requires_grad, need_b = bi && bi->requires_grad;
    if (need_w || need_b) {
      const auto got = detail::transpose2d(go, rows, dout);
      if (T* gw = wi->grad_sink()) {
        const auto xt = detail::transpose2d(xi->data.data(), rows, din);
        for (std::size_t o = 0; o < dout; ++o)
          for (std::size_t i = 0; i < din; ++i)
            gw[o * din + i] += detail::lane_dot(got.data() + o * rows, xt.data() + i * rows, rows);
      }
      if (need_b) {
        T* gb = bi->grad_sink();
        for (std::size_t o = 0; o < dout; ++o) {
          T acc = 0;
          for (std::size_t r = 0; r < rows; ++r) acc += got[o * rows + r];
          gb[o] += acc;
        }
      }
    }
  };
  if (b) return make_result<T>(std::move(shape), std::move(y), {x, w, *b}, fn);
  return make_result<T>(std::move(shape), std::move(y), {x, w}, fn);
}

/// x[N,C,H,W] * s, with s either [N,C] or [C] broadcast over pixels.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_rank(x.shape(), 4, "scale_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const bool per_sample = s.numel() == n * c && s.rank() == 2;
  if (!per_sample && s.numel() != c) throw ShapeError("scale_channels: scale shape " + shape_str(s.shape()));
  std::vector<T> y(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T sv = s[per_sample ? b * c + ch : ch];
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) y[off + i] = x[off + i] * sv;
    }
  auto xi = x.impl(), si = s.impl();
  return make_result<T>(x.shape(), std::move(y), {x, s},
                        [xi, si, n, c, hw, per_sample](const TensorImpl<T>& out) {
                          T* gx = xi->grad_sink();
                          T* gs = si->grad_sink();
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              const std::size_t si_idx = per_sample ? b * c + ch : ch;
                              const std::size_t off = (b * c + ch) * hw;
                              const T sv = si->data[si_idx];
                              T acc = 0;
                              for (std::size_t i = 0; i < hw; ++i) {
                                if (gx) gx[off + i] += out.grad[off + i] * sv;
                                acc += out.grad[off + i] * xi->data[off + i];
                              }
                              if (gs) gs[si_idx] += acc;
                            }
                        });
}

/// x[N,C,H,W] * m[N,1,H,W] broadcast over channels.
template <typename T>
Tensor<T> scale_pixels(const Tensor<T>& x, const Tensor<T>& m) {
  detail::require_rank(x.shape(), 4, "scale_pixels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (m.shape() != Shape{n, 1, x.dim(2), x.dim(3)})
    throw ShapeError("scale_pixels: map shape " + shape_str(m.shape()));
  std::vector<T> y(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i)
        y[(b * c + ch) * hw + i] = x[(b * c + ch) * hw + i] * m[b * hw + i];
  auto xi = x.impl(), mi = m.impl();
  return make_result<T>(x.shape(), std::move(y), {x, m},
                        [xi, mi, n, c, hw](const TensorImpl<T>& out) {
                          T* gx = xi->grad_sink();
                          T* gm = mi->grad_sink();
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t i = 0; i < hw; ++i) {
                                const std::size_t k = (b * c + ch) * hw + i;
                                if (gx) gx[k] += out.grad[k] * mi->data[b * hw + i];
                                if (gm) gm[b * hw + i] += out.grad[k] * xi->data[k];
                              }
                        });
}

/// Mean over H,W: [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(nc);
  for (std::size_t k = 0; k < nc; ++k) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += x[k * hw + i];
    y[k] = acc / static_cast<T>(hw);
  }
  auto xi = x.impl();
  return make_result<T>(Shape{x.dim(0), x.dim(1)}, std::move(y), {x},
                        [xi, nc, hw](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          for (std::size_t k = 0; k < nc; ++k) {
                            const T gv = out.grad[k] / static_cast<T>(hw);
                            for (std::size_t i = 0; i < hw; ++i) g[k * hw + i] += gv;
                          }
                        });
}

/// Max over H,W: [N,C,H,W] -> [N,C]. Ties route to the first maximum.
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_max_pool");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(nc);
  auto arg = std::make_shared<std::vector<std::size_t>>(nc);
  for (std::size_t k = 0; k < nc; ++k) {
    std::size_t best = k * hw;
    for (std::size_t i = 1; i < hw; ++i)
      if (x[k * hw + i] > x[best]) best = k * hw + i;
    (*arg)[k] = best;
    y[k] = x[best];
  }
  if (auto* rec = BranchRecorder::active())
    for (std::size_t a : *arg) rec->mix(a);
  auto xi = x.impl();
  return make_result<T>(Shape{x.dim(0), x.dim(1)}, std::move(y), {x},
                        [xi, arg](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          for (std::size_t k = 0; k < arg->size(); ++k) g[(*arg)[k]] += out.grad[k];
                        });
}

/// Mean over channels: [N,C,H,W] -> [N,1,H,W].
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "channel_mean");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(n * hw, T(0));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) y[b * hw + i] += x[(b * c + ch) * hw + i];
    for (std::size_t i = 0; i < hw; ++i) y[b * hw + i] /= static_cast<T>(c);
  }
  auto xi = x.impl();
  return make_result<T>(Shape{n, 1, x.dim(2), x.dim(3)}, std::move(y), {x},
                        [xi, n, c, hw](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t ch = 0; ch < c; ++ch)
                              for (std::size_t i = 0; i < hw; ++i)
                                g[(b * c + ch) * hw + i] += out.grad[b * hw + i] / static_cast<T>(c);
                        });
}

/// Max over channels: [N,C,H,W] -> [N,1,H,W].
template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "channel_max");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(n * hw);
  auto arg = std::make_shared<std::vector<std::size_t>>(n * hw);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      std::size_t best = b * c * hw + i;
      for (std::size_t ch = 1; ch < c; ++ch) {
        const std::size_t k = (b * c + ch) * hw + i;
        if (x[k] > x[best]) best = k;
      }
      (*arg)[b * hw + i] = best;
      y[b * hw + i] = x[best];
    }
  if (auto* rec = BranchRecorder::active())
    for (std::size_t a : *arg) rec->mix(a);
  auto xi = x.impl();
  return make_result<T>(Shape{n, 1, x.dim(2), x.dim(3)}, std::move(y), {x},
                        [xi, arg](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          for (std::size_t k = 0; k < arg->size(); ++k) g[(*arg)[k]] += out.grad[k];
                        });
}

}  // namespace octamamba
