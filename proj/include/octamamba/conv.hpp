#pragma once

// Convolution, pooling and bilinear resampling over NCHW tensors.
//
// Every output element of conv2d accumulates in a fixed order: input channel
// outermost, then kernel row, then kernel column, starting from +0, with the
// bias added last. Padded taps are skipped. Backward passes follow the same
// ownership rule (one writer per gradient element), so results are
// bit-reproducible.

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>

#include "octamamba/conv_kernels.hpp"
#include "octamamba/ops.hpp"

namespace octamamba {

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  /// Stride-1 spec whose padding preserves H and W. Kernels must be odd.
  static ConvSpec same(std::size_t cin, std::size_t cout, std::size_t kh,
                       std::size_t kw, std::size_t dilation = 1,
                       std::size_t groups = 1) {
    if (kh % 2 == 0 || kw % 2 == 0) {
      throw ShapeError("same padding requires odd kernel, got " +
                       std::to_string(kh) + "x" + std::to_string(kw));
    }
    ConvSpec s;
    s.in_channels = cin;
    s.out_channels = cout;
    s.kernel_h = kh;
    s.kernel_w = kw;
    s.dilation = dilation;
    s.groups = groups;
    s.pad_h = dilation * (kh - 1) / 2;
    s.pad_w = dilation * (kw - 1) / 2;
    return s;
  }

  static ConvSpec depthwise(std::size_t c, std::size_t kh, std::size_t kw,
                            std::size_t dilation = 1) {
    return same(c, c, kh, kw, dilation, c);
  }

  static ConvSpec pointwise(std::size_t cin, std::size_t cout) {
    return same(cin, cout, 1, 1);
  }

  bool is_depthwise() const {
    return groups == in_channels && groups == out_channels;
  }

  Shape weight_shape() const {
    return {out_channels, in_channels / groups, kernel_h, kernel_w};
  }

  std::size_t out_size(std::size_t in, std::size_t k, std::size_t pad) const {
    const std::size_t span = dilation * (k - 1) + 1;
    if (in + 2 * pad < span) throw ShapeError("conv2d: kernel larger than padded input");
    return (in + 2 * pad - span) / stride + 1;
  }

  void validate() const {
    if (!in_channels || !out_channels || !kernel_h || !kernel_w || !stride ||
        !dilation || !groups) {
      throw ShapeError("conv spec fields must be positive");
    }
    if (in_channels % groups || out_channels % groups) {
      throw ShapeError("conv spec: groups must divide in and out channels");
    }
  }
};

namespace detail {

// Range of output positions o with 0 <= o*stride - pad + offset < in.
inline void valid_range(std::size_t out, std::size_t in, std::size_t stride,
                        std::ptrdiff_t shift, std::size_t& lo, std::size_t& hi) {
  // shift = offset - pad
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t l = shift >= 0 ? 0 : (-shift + s - 1) / s;
  std::ptrdiff_t h = static_cast<std::ptrdiff_t>(in) - shift;  // need o*s < h
  h = h <= 0 ? 0 : (h + s - 1) / s;
  h = std::min<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(out));
  lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(l, 0));
  hi = static_cast<std::size_t>(std::max<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(lo)));
}

}  // namespace detail

namespace detail {
inline void check_conv_operands(const Shape& x, const Shape& weight, const void* bias,
                                std::size_t bias_len, const ConvSpec& spec) {
  spec.validate();
  require_rank(x, 4, "conv2d");
  if (x[1] != spec.in_channels) {
    throw ShapeError("conv2d: input channels " + std::to_string(x[1]) + " != spec " +
                     std::to_string(spec.in_channels));
  }
  if (weight != spec.weight_shape()) {
    throw ShapeError("conv2d: weight shape " + shape_str(weight) + " expected " +
                     shape_str(spec.weight_shape()));
  }
  if (bias && bias_len != spec.out_channels) throw ShapeError("conv2d: bias length");
}
}  // namespace detail

/// Direct loop nest for any stride. conv2d dispatches here for stride > 1.
template <typename T>
Tensor<T> conv2d_direct(const Tensor<T>& x, const Tensor<T>& weight,
                        const std::type_identity_t<Tensor<T>>* bias,
                        const ConvSpec& spec) {
  spec.validate();
  detail::require_rank(x.shape(), 4, "conv2d");
  if (x.dim(1) != spec.in_channels) {
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                     " != spec " + std::to_string(spec.in_channels));
  }
  if (weight.shape() != spec.weight_shape()) {
    throw ShapeError("conv2d: weight shape " + shape_str(weight.shape()) +
                     " expected " + shape_str(spec.weight_shape()));
  }
  if (bias && bias->numel() != spec.out_channels) throw ShapeError("conv2d: bias length");

  const std::size_t n = x.dim(0), cin = spec.in_channels, cout = spec.out_channels;
  const std::size_t h = x.dim(2), w = x.dim(3);
  const std::size_t kh = spec.kernel_h, kw = spec.kernel_w;
  const std::size_t ho = spec.out_size(h, kh, spec.pad_h);
  const std::size_t wo = spec.out_size(w, kw, spec.pad_w);
  const std::size_t cin_g = cin / spec.groups, cout_g = cout / spec.groups;
  const std::size_t st = spec.stride, dil = spec.dilation;
  const auto ph = static_cast<std::ptrdiff_t>(spec.pad_h);
  const auto pw = static_cast<std::ptrdiff_t>(spec.pad_w);

  std::vector<T> y(n * cout * ho * wo, T(0));
  const T* xs = x.vec().data();
  const T* ws = weight.vec().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t co = 0; co < cout; ++co) {
      const std::size_t g = co / cout_g;
      T* yp = y.data() + (b * cout + co) * ho * wo;
      for (std::size_t cl = 0; cl < cin_g; ++cl) {
        const T* xp = xs + (b * cin + g * cin_g + cl) * h * w;
        const T* wk = ws + (co * cin_g + cl) * kh * kw;
        for (std::size_t i = 0; i < kh; ++i) {
          const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(i * dil) - ph;
          std::size_t oh0, oh1;
          detail::valid_range(ho, h, st, sh, oh0, oh1);
          for (std::size_t j = 0; j < kw; ++j) {
            const T wv = wk[i * kw + j];
            const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(j * dil) - pw;
            std::size_t ow0, ow1;
            detail::valid_range(wo, w, st, sw, ow0, ow1);
            for (std::size_t oh = oh0; oh < oh1; ++oh) {
              const T* xr = xp + static_cast<std::ptrdiff_t>(oh * st + i * dil - ph) * static_cast<std::ptrdiff_t>(w);
              T* yr = yp + oh * wo;
              if (st == 1) {
                const T* xo = xr + sw;
                for (std::size_t ow = ow0; ow < ow1; ++ow) yr[ow] += wv * xo[ow];
              } else {
                for (std::size_t ow = ow0; ow < ow1; ++ow)
                  yr[ow] += wv * xr[static_cast<std::ptrdiff_t>(ow * st) + sw];
              }
            }
          }
        }
      }
      if (bias) {
        const T bv = (*bias)[co];
        for (std::size_t k = 0; k < ho * wo; ++k) yp[k] += bv;
      }
    }
  }

  auto xi = x.impl(), wi = weight.impl();
  auto bi = bias ? bias->impl() : nullptr;
  auto fn = [=](const TensorImpl<T>& out) {
    const T* go = out.grad.data();
    if (T* gx = xi->grad_sink()) {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const std::size_t g = ci / cin_g, cl = ci % cin_g;
          T* gxp = gx + (b * cin + ci) * h * w;
          for (std::size_t col = 0; col < cout_g; ++col) {
            const std::size_t co = g * cout_g + col;
            const T* gp = go + (b * cout + co) * ho * wo;
            const T* wk = wi->data.data() + (co * cin_g + cl) * kh * kw;
            for (std::size_t i = 0; i < kh; ++i) {
              const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(i * dil) - ph;
              std::size_t oh0, oh1;
              detail::valid_range(ho, h, st, sh, oh0, oh1);
              for (std::size_t j = 0; j < kw; ++j) {
                const T wv = wk[i * kw + j];
                const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(j * dil) - pw;
                std::size_t ow0, ow1;
                detail::valid_range(wo, w, st, sw, ow0, ow1);
                for (std::size_t oh = oh0; oh < oh1; ++oh) {
                  T* gr = gxp + static_cast<std::ptrdiff_t>(oh * st + i * dil - ph) * static_cast<std::ptrdiff_t>(w);
                  const T* gor = gp + oh * wo;
                  if (st == 1) {
                    T* go_ = gr + sw;
                    for (std::size_t ow = ow0; ow < ow1; ++ow) go_[ow] += wv * gor[ow];
                  } else {
                    for (std::size_t ow = ow0; ow < ow1; ++ow)
                      gr[static_cast<std::ptrdiff_t>(ow * st) + sw] += wv * gor[ow];
                  }
                }
              }
            }
          }
        }
    }
    if (T* gw = wi->grad_sink()) {
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t g = co / cout_g;
        for (std::size_t cl = 0; cl < cin_g; ++cl)
          for (std::size_t i = 0; i < kh; ++i) {
            const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(i * dil) - ph;
            std::size_t oh0, oh1;
            detail::valid_range(ho, h, st, sh, oh0, oh1);
            for (std::size_t j = 0; j < kw; ++j) {
              const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(j * dil) - pw;
              std::size_t ow0, ow1;
              detail::valid_range(wo, w, st, sw, ow0, ow1);
              T acc = 0;
              for (std::size_t b = 0; b < n; ++b) {
                const T* xp = xi->data.data() + (b * cin + g * cin_g + cl) * h * w;
                const T* gp = go + (b * cout + co) * ho * wo;
                for (std::size_t oh = oh0; oh < oh1; ++oh) {
                  const T* xr = xp + static_cast<std::ptrdiff_t>(oh * st + i * dil - ph) * static_cast<std::ptrdiff_t>(w);
                  if (st == 1) {
                    acc += detail::lane_dot(gp + oh * wo + ow0, xr + sw + static_cast<std::ptrdiff_t>(ow0), ow1 - ow0);
                  } else {
                    for (std::size_t ow = ow0; ow < ow1; ++ow)
                      acc += gp[oh * wo + ow] * xr[static_cast<std::ptrdiff_t>(ow * st) + sw];
                  }
                }
              }
              gw[((co * cin_g + cl) * kh + i) * kw + j] += acc;
            }
          }
      }
    }
    if (bi) {
      if (T* gb = bi->grad_sink())
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t co = 0; co < cout; ++co) {
            const T* gp = go + (b * cout + co) * ho * wo;
            T acc = 0;
            for (std::size_t k = 0; k < ho * wo; ++k) acc += gp[k];
            gb[co] += acc;
          }
    }
  };
  Shape shape{n, cout, ho, wo};
  if (bias) return make_result<T>(std::move(shape), std::move(y), {x, weight, *bias}, fn);
  return make_result<T>(std::move(shape), std::move(y), {x, weight}, fn);
}

/// Cross-correlation with dilation, groups and per-side zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const std::type_identity_t<Tensor<T>>* bias, const ConvSpec& spec) {
  detail::check_conv_operands(x.shape(), weight.shape(), bias, bias ? bias->numel() : 0, spec);
  if (spec.stride != 1 || spec.pad_h > spec.dilation * (spec.kernel_h - 1) ||
      spec.pad_w > spec.dilation * (spec.kernel_w - 1)) {
    return conv2d_direct(x, weight, bias, spec);
  }

  constexpr std::size_t L = detail::Vec<T>::lanes;
  const std::size_t n = x.dim(0), cin = spec.in_channels, cout = spec.out_channels;
  const std::size_t groups = spec.groups, kh = spec.kernel_h, kw = spec.kernel_w;
  const std::size_t dil = spec.dilation;
  const detail::Grid g(x.dim(2), x.dim(3), kh, kw, dil, spec.pad_h, spec.pad_w, L);
  if (g.hp < dil * (kh - 1) + 1 || g.wp < dil * (kw - 1) + 1) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }

  auto xpad = std::make_shared<std::vector<T>>();
  detail::pad_planes(x.vec().data(), n * cin, g, *xpad);
  std::vector<T> y(n * cout * g.ho * g.wo);
  detail::conv_forward_padded(*xpad, weight.vec().data(), n, cin, cout, groups, g, y.data());
  if (bias) {
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t co = 0; co < cout; ++co) {
        const T bv = (*bias)[co];
        T* yp = y.data() + (b * cout + co) * plane;
        for (std::size_t k = 0; k < plane; ++k) yp[k] += bv;
      }
  }

  auto xi = x.impl(), wi = weight.impl();
  auto bi = bias ? bias->impl() : nullptr;
  auto fn = [=](const TensorImpl<T>& out) {
    const T* go = out.grad.data();
    const std::size_t cin_g = cin / groups, cout_g = cout / groups, taps = kh * kw;
    if (T* gx = xi->grad_sink()) {
      // Input adjoint = correlation of the output grad with the flipped,
      // in/out-transposed kernel under complementary padding.
      std::vector<T> wt(cin * cout_g * taps);
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t grp = co / cout_g, col = co % cout_g;
        for (std::size_t cl = 0; cl < cin_g; ++cl)
          for (std::size_t t = 0; t < taps; ++t)
            wt[((grp * cin_g + cl) * cout_g + col) * taps + (taps - 1 - t)] =
                wi->data[(co * cin_g + cl) * taps + t];
      }
      const detail::Grid gb(g.ho, g.wo, kh, kw, dil, dil * (kh - 1) - spec.pad_h,
                            dil * (kw - 1) - spec.pad_w, L);
      std::vector<T> gpad;
      detail::pad_planes(go, n * cout, gb, gpad);
      std::vector<T> dx(n * cin * gb.ho * gb.wo);
      detail::conv_forward_padded(gpad, wt.data(), n, cout, cin, groups, gb, dx.data());
      for (std::size_t i = 0; i < dx.size(); ++i) gx[i] += dx[i];
    }
    if (T* gw = wi->grad_sink()) {
      std::vector<T> grid(n * cout * g.span, T(0));
      for (std::size_t k = 0; k < n * cout; ++k)
        for (std::size_t r = 0; r < g.ho; ++r)
          std::copy_n(go + (k * g.ho + r) * g.wo, g.wo, grid.data() + k * g.span + r * g.wp);
      detail::conv_weight_grad(*xpad, grid, n, cin, cout, groups, g, gw);
    }
    if (bi) {
      if (T* gb = bi->grad_sink()) {
        const std::size_t plane = g.ho * g.wo;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t co = 0; co < cout; ++co) {
            const T* gp = go + (b * cout + co) * plane;
            T acc = 0;
            for (std::size_t k = 0; k < plane; ++k) acc += gp[k];
            gb[co] += acc;
          }
      }
    }
  };
  Shape shape{n, cout, g.ho, g.wo};
  if (bias) return make_result<T>(std::move(shape), std::move(y), {x, weight, *bias}, fn);
  return make_result<T>(std::move(shape), std::move(y), {x, weight}, fn);
}

enum class PoolKind { Max, Avg };

/// Square-window pooling. Avg divides by the number of in-bounds taps; max
/// ignores padding.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, std::size_t k, std::size_t stride,
                 std::size_t pad) {
  detail::require_rank(x.shape(), 4, "pool2d");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || stride == 0) throw ShapeError("pool2d: window and stride must be positive");
  if (k > h + 2 * pad || k > w + 2 * pad) throw ShapeError("pool2d: window larger than padded input");
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (w + 2 * pad - k) / stride + 1;
  std::vector<T> y(nc * ho * wo);
  // For max: argmax index; for avg: unused.
  auto arg = std::make_shared<std::vector<std::size_t>>(kind == PoolKind::Max ? y.size() : 0);
  const auto p = static_cast<std::ptrdiff_t>(pad);
  auto window = [stride, p, k](std::size_t o, std::size_t in, std::size_t& lo, std::size_t& hi) {
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(o * stride) - p;
    lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(start, 0));
    hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(start + static_cast<std::ptrdiff_t>(k),
                                                           static_cast<std::ptrdiff_t>(in)));
  };
  for (std::size_t c = 0; c < nc; ++c) {
    const T* xp = x.vec().data() + c * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      std::size_t h0, h1;
      window(oh, h, h0, h1);
      for (std::size_t ow = 0; ow < wo; ++ow) {
        std::size_t w0, w1;
        window(ow, w, w0, w1);
        const std::size_t o = (c * ho + oh) * wo + ow;
        if (h0 >= h1 || w0 >= w1) throw ShapeError("pool2d: window covers only padding");
        if (kind == PoolKind::Max) {
          std::size_t best = h0 * w + w0;
          for (std::size_t i = h0; i < h1; ++i)
            for (std::size_t j = w0; j < w1; ++j)
              if (xp[i * w + j] > xp[best]) best = i * w + j;
          y[o] = xp[best];
          (*arg)[o] = c * h * w + best;
        } else {
          T acc = 0;
          for (std::size_t i = h0; i < h1; ++i)
            for (std::size_t j = w0; j < w1; ++j) acc += xp[i * w + j];
          y[o] = acc / static_cast<T>((h1 - h0) * (w1 - w0));
        }
      }
    }
  }
  if (auto* rec = BranchRecorder::active())
    for (std::size_t a : *arg) rec->mix(a);
  auto xi = x.impl();
  return make_result<T>(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(y), {x},
                        [=](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          if (kind == PoolKind::Max) {
                            for (std::size_t o = 0; o < arg->size(); ++o) g[(*arg)[o]] += out.grad[o];
                            return;
                          }
                          for (std::size_t c = 0; c < nc; ++c)
                            for (std::size_t oh = 0; oh < ho; ++oh) {
                              std::size_t h0, h1;
                              window(oh, h, h0, h1);
                              for (std::size_t ow = 0; ow < wo; ++ow) {
                                std::size_t w0, w1;
                                window(ow, w, w0, w1);
                                const T gv = out.grad[(c * ho + oh) * wo + ow] /
                                             static_cast<T>((h1 - h0) * (w1 - w0));
                                for (std::size_t i = h0; i < h1; ++i)
                                  for (std::size_t j = w0; j < w1; ++j) g[c * h * w + i * w + j] += gv;
                              }
                            }
                        });
}

namespace detail {

// Half-pixel source coordinate with clamping; returns (i0, i1, frac).
struct Tap {
  std::size_t i0, i1;
  double frac;
};

inline Tap source_tap(std::size_t out_idx, std::size_t in_size, std::size_t out_size) {
  const double ratio = static_cast<double>(in_size) / static_cast<double>(out_size);
  double src = (static_cast<double>(out_idx) + 0.5) * ratio - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
  const auto i0 = static_cast<std::size_t>(std::floor(src));
  const std::size_t i1 = std::min(i0 + 1, in_size - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace detail

/// Bilinear resampling to (out_h, out_w), half-pixel centers, clamped source.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x.shape(), 4, "resize_bilinear");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (!out_h || !out_w) throw ShapeError("resize_bilinear: empty output");
  std::vector<detail::Tap> rows(out_h), cols(out_w);
  for (std::size_t i = 0; i < out_h; ++i) rows[i] = detail::source_tap(i, h, out_h);
  for (std::size_t j = 0; j < out_w; ++j) cols[j] = detail::source_tap(j, w, out_w);
  std::vector<T> y(nc * out_h * out_w);
  for (std::size_t c = 0; c < nc; ++c) {
    const T* xp = x.vec().data() + c * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& r = rows[i];
      const T fy = static_cast<T>(r.frac);
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& q = cols[j];
        const T fx = static_cast<T>(q.frac);
        const T top = xp[r.i0 * w + q.i0] * (T(1) - fx) + xp[r.i0 * w + q.i1] * fx;
        const T bot = xp[r.i1 * w + q.i0] * (T(1) - fx) + xp[r.i1 * w + q.i1] * fx;
        y[(c * out_h + i) * out_w + j] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  auto xi = x.impl();
  return make_result<T>(Shape{x.dim(0), x.dim(1), out_h, out_w}, std::move(y), {x},
                        [=](const TensorImpl<T>& out) {
                          T* g = xi->grad_sink();
                          if (!g) return;
                          for (std::size_t c = 0; c < nc; ++c) {
                            T* gp = g + c * h * w;
                            for (std::size_t i = 0; i < out_h; ++i) {
                              const auto& r = rows[i];
                              const T fy = static_cast<T>(r.frac);
                              for (std::size_t j = 0; j < out_w; ++j) {
                                const auto& q = cols[j];
                                const T fx = static_cast<T>(q.frac);
                                const T go = out.grad[(c * out_h + i) * out_w + j];
                                gp[r.i0 * w + q.i0] += go * (T(1) - fy) * (T(1) - fx);
                                gp[r.i0 * w + q.i1] += go * (T(1) - fy) * fx;
                                gp[r.i1 * w + q.i0] += go * fy * (T(1) - fx);
                                gp[r.i1 * w + q.i1] += go * fy * fx;
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor = 2) {
  if (factor != 2) throw ShapeError("upsample_bilinear: only factor 2 is supported");
  detail::require_rank(x.shape(), 4, "upsample_bilinear");
  return resize_bilinear(x, x.dim(2) * factor, x.dim(3) * factor);
}

}  // namespace octamamba
