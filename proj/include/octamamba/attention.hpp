#pragma once

// Channel / spatial attention blocks: ECA, CAM, SAM, their FFRM composite and
// the additive attention gate used on skip connections.

#include <cmath>

#include "octamamba/activation.hpp"
#include "octamamba/conv.hpp"

namespace octamamba {

/// ECA's adaptive 1D kernel size (gamma = 2, b = 1), forced odd.
inline std::size_t eca_kernel_size(std::size_t channels) {
  const double v = std::abs((std::log2(static_cast<double>(channels)) + 1.0) / 2.0);
  const auto t = static_cast<std::size_t>(v);
  return t % 2 ? t : t + 1;
}

/// y = x * sigmoid(conv1d over channels of GAP(x)).
template <typename T>
Tensor<T> eca_forward(const Tensor<T>& x, const Tensor<T>& k1d) {
  detail::require_rank(x.shape(), 4, "eca_forward");
  const std::size_t n = x.dim(0), c = x.dim(1), k = k1d.numel();
  if (k % 2 == 0) throw ShapeError("eca_forward: kernel size must be odd");
  ConvSpec spec;
  spec.kernel_w = k;
  spec.pad_w = (k - 1) / 2;
  auto pooled = reshape(global_avg_pool(x), Shape{n, 1, 1, c});
  auto mixed = conv2d(pooled, reshape(k1d, Shape{1, 1, 1, k}), nullptr, spec);
  return scale_channels(x, sigmoid(reshape(mixed, Shape{n, c})));
}

template <typename T>
struct CamParams {
  Tensor<T> w1;  // [C/r, C]
  Tensor<T> w2;  // [C, C/r]
  std::size_t reduction = 4;
};

/// Shared-MLP channel attention over average- and max-pooled descriptors.
template <typename T>
Tensor<T> cam_attention(const Tensor<T>& x, const CamParams<T>& p) {
  auto mlp = [&](const Tensor<T>& v) { return linear(relu(linear(v, p.w1)), p.w2); };
  return sigmoid(add(mlp(global_avg_pool(x)), mlp(global_max_pool(x))));
}

template <typename T>
Tensor<T> cam_forward(const Tensor<T>& x, const CamParams<T>& p) {
  return scale_channels(x, cam_attention(x, p));
}

template <typename T>
struct SamParams {
  Tensor<T> conv7;  // [1,2,7,7]
};

/// Spatial attention map [N,1,H,W] from stacked channel mean/max maps.
template <typename T>
Tensor<T> sam_attention(const Tensor<T>& x, const SamParams<T>& p) {
  auto stacked = concat_channels<T>({channel_mean(x), channel_max(x)});
  return sigmoid(conv2d(stacked, p.conv7, nullptr,
                        ConvSpec::same(2, 1, 7, 7)));
}

template <typename T>
Tensor<T> sam_forward(const Tensor<T>& x, const SamParams<T>& p) {
  return scale_pixels(x, sam_attention(x, p));
}

/// r = CAM(x) + SAM(x); y = x * sigmoid(r) + x.
template <typename T>
Tensor<T> ffrm_forward(const Tensor<T>& x, const CamParams<T>& cam, const SamParams<T>& sam) {
  auto fused = add(cam_forward(x, cam), sam_forward(x, sam));
  return add(mul(x, sigmoid(fused)), x);
}

template <typename T>
struct AgParams {
  Tensor<T> wg;     // [Cint,Cg,1,1]
  Tensor<T> wx;     // [Cint,Cx,1,1]
  Tensor<T> b_int;  // [Cint]
  Tensor<T> psi;    // [1,Cint,1,1]
  Tensor<T> b_psi;  // [1]
};

/// alpha = sigmoid(psi * relu(Wg gate + Wx skip + b)); y = skip * alpha.
template <typename T>
Tensor<T> attention_gate(const Tensor<T>& skip, const Tensor<T>& gate, const AgParams<T>& p) {
  detail::require_rank(skip.shape(), 4, "attention_gate");
  detail::require_rank(gate.shape(), 4, "attention_gate");
  if (skip.dim(0) != gate.dim(0) || skip.dim(2) != gate.dim(2) || skip.dim(3) != gate.dim(3)) {
    throw ShapeError("attention_gate: skip " + shape_str(skip.shape()) + " and gate " +
                     shape_str(gate.shape()) + " differ spatially");
  }
  const std::size_t cint = p.wg.dim(0);
  auto g = conv2d(gate, p.wg, &p.b_int, ConvSpec::pointwise(gate.dim(1), cint));
  auto s = conv2d(skip, p.wx, nullptr, ConvSpec::pointwise(skip.dim(1), cint));
  auto alpha = sigmoid(conv2d(relu(add(g, s)), p.psi, &p.b_psi, ConvSpec::pointwise(cint, 1)));
  return scale_pixels(skip, alpha);
}

}  // namespace octamamba
