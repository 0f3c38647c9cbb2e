#pragma once

// One-level orthonormal 2D Haar transform and the wavelet-domain depthwise
// convolution built on it.
//
// For each 2x2 block {a b; c d}:
//   LL = (a + b + c + d) / 2     LH = (a + b - c - d) / 2
//   HL = (a - b + c - d) / 2     HH = (a - b - c + d) / 2
// Bands are stacked band-major along channels: channel k*C + c holds band k
// (LL, LH, HL, HH) of input channel c.

#include <array>

#include "octamamba/conv.hpp"

namespace octamamba {

namespace detail {

template <typename T>
void haar_analysis(const T* x, T* bands, std::size_t n, std::size_t c, std::size_t h,
                   std::size_t w) {
  const std::size_t h2 = h / 2, w2 = w / 2, plane = h2 * w2;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* xp = x + (b * c + ch) * h * w;
      T* ll = bands + ((b * 4 + 0) * c + ch) * plane;
      T* lh = bands + ((b * 4 + 1) * c + ch) * plane;
      T* hl = bands + ((b * 4 + 2) * c + ch) * plane;
      T* hh = bands + ((b * 4 + 3) * c + ch) * plane;
      for (std::size_t i = 0; i < h2; ++i)
        for (std::size_t j = 0; j < w2; ++j) {
          const T p = xp[2 * i * w + 2 * j], q = xp[2 * i * w + 2 * j + 1];
          const T r = xp[(2 * i + 1) * w + 2 * j], s = xp[(2 * i + 1) * w + 2 * j + 1];
          const std::size_t o = i * w2 + j;
          ll[o] = T(0.5) * ((p + q) + (r + s));
          lh[o] = T(0.5) * ((p + q) - (r + s));
          hl[o] = T(0.5) * ((p - q) + (r - s));
          hh[o] = T(0.5) * ((p - q) - (r - s));
        }
    }
}

// Transpose (= inverse) of haar_analysis; accumulates into x.
template <typename T>
void haar_synthesis_add(const T* bands, T* x, std::size_t n, std::size_t c, std::size_t h,
                        std::size_t w) {
  const std::size_t h2 = h / 2, w2 = w / 2, plane = h2 * w2;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* xp = x + (b * c + ch) * h * w;
      const T* ll = bands + ((b * 4 + 0) * c + ch) * plane;
      const T* lh = bands + ((b * 4 + 1) * c + ch) * plane;
      const T* hl = bands + ((b * 4 + 2) * c + ch) * plane;
      const T* hh = bands + ((b * 4 + 3) * c + ch) * plane;
      for (std::size_t i = 0; i < h2; ++i)
        for (std::size_t j = 0; j < w2; ++j) {
          const std::size_t o = i * w2 + j;
          const T s0 = ll[o] + lh[o], s1 = ll[o] - lh[o];
          const T d0 = hl[o] + hh[o], d1 = hl[o] - hh[o];
          xp[2 * i * w + 2 * j] += T(0.5) * (s0 + d0);
          xp[2 * i * w + 2 * j + 1] += T(0.5) * (s0 - d0);
          xp[(2 * i + 1) * w + 2 * j] += T(0.5) * (s1 + d1);
          xp[(2 * i + 1) * w + 2 * j + 1] += T(0.5) * (s1 - d1);
        }
    }
}

// Replicate-pad right/bottom (pad_h, pad_w in {0,1}) or crop back, as gathers.
template <typename T>
Tensor<T> replicate_pad_to(const Tensor<T>& x, std::size_t ho, std::size_t wo) {
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto idx = std::make_shared<std::vector<std::size_t>>(nc * ho * wo);
  for (std::size_t k = 0; k < nc; ++k)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        (*idx)[(k * ho + i) * wo + j] = k * h * w + std::min(i, h - 1) * w + std::min(j, w - 1);
  return gather(x, Shape{x.dim(0), x.dim(1), ho, wo}, std::move(idx));
}

}  // namespace detail

/// [N,C,H,W] -> [N,4C,H/2,W/2]. Odd sizes are replicate-padded first.
template <typename T>
Tensor<T> haar_dwt(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "haar_dwt");
  if (x.dim(2) % 2 || x.dim(3) % 2) {
    return haar_dwt(detail::replicate_pad_to(x, x.dim(2) + x.dim(2) % 2, x.dim(3) + x.dim(3) % 2));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> y(x.numel());
  detail::haar_analysis(x.vec().data(), y.data(), n, c, h, w);
  auto xi = x.impl();
  return make_result<T>(Shape{n, 4 * c, h / 2, w / 2}, std::move(y), {x},
                        [xi, n, c, h, w](const TensorImpl<T>& out) {
                          if (T* g = xi->grad_sink()) detail::haar_synthesis_add(out.grad.data(), g, n, c, h, w);
                        });
}

/// [N,4C,H2,W2] -> [N,C,2H2,2W2]; exact inverse of haar_dwt.
template <typename T>
Tensor<T> haar_idwt(const Tensor<T>& bands) {
  detail::require_rank(bands.shape(), 4, "haar_idwt");
  if (bands.dim(1) % 4) throw ShapeError("haar_idwt: channel count must be a multiple of 4");
  const std::size_t n = bands.dim(0), c = bands.dim(1) / 4, h = 2 * bands.dim(2),
                    w = 2 * bands.dim(3);
  std::vector<T> y(bands.numel(), T(0));
  detail::haar_synthesis_add(bands.vec().data(), y.data(), n, c, h, w);
  auto bi = bands.impl();
  return make_result<T>(Shape{n, c, h, w}, std::move(y), {bands},
                        [bi, n, c, h, w](const TensorImpl<T>& out) {
                          T* g = bi->grad_sink();
                          if (!g) return;
                          std::vector<T> tmp(out.grad.size());
                          detail::haar_analysis(out.grad.data(), tmp.data(), n, c, h, w);
                          for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
                        });
}

template <typename T>
struct HaarBands {
  Tensor<T> ll, lh, hl, hh;
};

/// Splits a stacked band tensor into its four [N,C,H2,W2] bands (no history).
template <typename T>
HaarBands<T> split_bands(const Tensor<T>& stacked) {
  const std::size_t n = stacked.dim(0), c = stacked.dim(1) / 4, plane = stacked.dim(2) * stacked.dim(3);
  std::array<Tensor<T>, 4> out;
  for (std::size_t k = 0; k < 4; ++k) {
    out[k] = Tensor<T>(Shape{n, c, stacked.dim(2), stacked.dim(3)});
    for (std::size_t b = 0; b < n; ++b)
      std::copy_n(stacked.vec().data() + (b * 4 + k) * c * plane, c * plane,
                  out[k].data().data() + b * c * plane);
  }
  return {out[0], out[1], out[2], out[3]};
}

template <typename T>
Tensor<T> haar_idwt(const Tensor<T>& ll, const Tensor<T>& lh, const Tensor<T>& hl,
                    const Tensor<T>& hh) {
  if (ll.shape() != lh.shape() || ll.shape() != hl.shape() || ll.shape() != hh.shape()) {
    throw ShapeError("haar_idwt: band shapes differ");
  }
  return haar_idwt(concat_channels<T>({ll, lh, hl, hh}));
}

template <typename T>
struct WtConvParams {
  Tensor<T> base_dw;     // [C,1,3,3]
  Tensor<T> subband_dw;  // [4C,1,3,3], band-major (LL, LH, HL, HH)
  std::size_t levels = 1;

  std::size_t channels() const { return base_dw.dim(0); }
};

/// y = DW3x3(x) + IDWT(DW3x3 per band (DWT(x))).
template <typename T>
Tensor<T> wtconv_forward(const Tensor<T>& x, const WtConvParams<T>& p) {
  detail::require_rank(x.shape(), 4, "wtconv_forward");
  if (p.levels != 1) throw ShapeError("wtconv_forward: only one decomposition level is supported");
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto base = conv2d(x, p.base_dw, nullptr, ConvSpec::depthwise(c, 3, 3));
  auto bands = haar_dwt(x);
  auto filtered = conv2d(bands, p.subband_dw, nullptr,
                         ConvSpec::depthwise(4 * c, 3, 3));
  auto recon = haar_idwt(filtered);
  if (recon.dim(2) != h || recon.dim(3) != w) {
    auto idx = std::make_shared<std::vector<std::size_t>>(x.numel());
    const std::size_t rh = recon.dim(2), rw = recon.dim(3);
    for (std::size_t k = 0; k < x.dim(0) * c; ++k)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) (*idx)[(k * h + i) * w + j] = (k * rh + i) * rw + j;
    recon = gather(recon, x.shape(), std::move(idx));
  }
  return add(base, recon);
}

}  // namespace octamamba
