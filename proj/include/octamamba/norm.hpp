#pragma once

// Layer and batch normalization. Both use the population (biased) variance.
// A zero-variance token normalizes to 0, so the output is beta.

#include <cmath>

#include "octamamba/ops.hpp"

namespace octamamba {

/// Normalizes each row of the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) throw ShapeError("layer_norm: affine length mismatch");
  const std::size_t rows = x.numel() / c;
  std::vector<T> y(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.vec().data() + r * c;
    T m = 0;
    for (std::size_t j = 0; j < c; ++j) m += xr[j];
    m /= static_cast<T>(c);
    T v = 0;
    for (std::size_t j = 0; j < c; ++j) v += (xr[j] - m) * (xr[j] - m);
    v /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(v + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (xr[j] - m) * is;
      (*xhat)[r * c + j] = xh;
      y[r * c + j] = xh * gamma[j] + beta[j];
    }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return make_result<T>(x.shape(), std::move(y), {x, gamma, beta},
                        [=](const TensorImpl<T>& out) {
                          const T* go = out.grad.data();
                          T* gx = xi->grad_sink();
                          T* gg = gi->grad_sink();
                          T* gb = bi->grad_sink();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* xh = xhat->data() + r * c;
                            const T* gr = go + r * c;
                            if (gg || gb)
                              for (std::size_t j = 0; j < c; ++j) {
                                if (gg) gg[j] += gr[j] * xh[j];
                                if (gb) gb[j] += gr[j];
                              }
                            if (!gx) continue;
                            T s1 = 0, s2 = 0;
                            for (std::size_t j = 0; j < c; ++j) {
                              const T d = gr[j] * gi->data[j];
                              s1 += d;
                              s2 += d * xh[j];
                            }
                            s1 /= static_cast<T>(c);
                            s2 /= static_cast<T>(c);
                            const T is = (*inv_std)[r];
                            for (std::size_t j = 0; j < c; ++j) {
                              const T d = gr[j] * gi->data[j];
                              gx[r * c + j] += is * (d - s1 - xh[j] * s2);
                            }
                          }
                        });
}

enum class NormMode { Train, Eval };

/// Per-channel normalization of NCHW input. In Train mode the batch statistics
/// are used and the running buffers are updated in place (momentum blend).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, NormMode mode,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 4, "batch_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c) {
    throw ShapeError("batch_norm: parameter length mismatch");
  }
  const std::size_t count = n * hw;
  if (mode == NormMode::Train && count < 2) {
    throw ShapeError("batch_norm: training needs at least 2 values per channel");
  }
  std::vector<T> y(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  const T* xs = x.vec().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T m, v;
    if (mode == NormMode::Train) {
      m = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) m += xs[(b * c + ch) * hw + i];
      m /= static_cast<T>(count);
      v = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = xs[(b * c + ch) * hw + i] - m;
          v += d * d;
        }
      v /= static_cast<T>(count);
      running_mean.data()[ch] = (T(1) - momentum) * running_mean[ch] + momentum * m;
      running_var.data()[ch] = (T(1) - momentum) * running_var[ch] + momentum * v;
    } else {
      m = running_mean[ch];
      v = running_var[ch];
    }
    const T is = T(1) / std::sqrt(v + eps);
    (*inv_std)[ch] = is;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t k = (b * c + ch) * hw + i;
        const T xh = (xs[k] - m) * is;
        (*xhat)[k] = xh;
        y[k] = xh * gamma[ch] + beta[ch];
      }
  }
  const bool train = mode == NormMode::Train;
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return make_result<T>(x.shape(), std::move(y), {x, gamma, beta},
                        [=](const TensorImpl<T>& out) {
                          const T* go = out.grad.data();
                          T* gx = xi->grad_sink();
                          T* gg = gi->grad_sink();
                          T* gb = bi->grad_sink();
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            T sg = 0, sgx = 0;
                            for (std::size_t b = 0; b < n; ++b)
                              for (std::size_t i = 0; i < hw; ++i) {
                                const std::size_t k = (b * c + ch) * hw + i;
                                sg += go[k];
                                sgx += go[k] * (*xhat)[k];
                              }
                            if (gg) gg[ch] += sgx;
                            if (gb) gb[ch] += sg;
                            if (!gx) continue;
                            const T scale = gi->data[ch] * (*inv_std)[ch];
                            const T mg = sg / static_cast<T>(count);
                            const T mgx = sgx / static_cast<T>(count);
                            for (std::size_t b = 0; b < n; ++b)
                              for (std::size_t i = 0; i < hw; ++i) {
                                const std::size_t k = (b * c + ch) * hw + i;
                                gx[k] += train ? scale * (go[k] - mg - (*xhat)[k] * mgx)
                                               : scale * go[k];
                              }
                          }
                        });
}

}  // namespace octamamba
