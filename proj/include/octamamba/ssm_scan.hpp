#pragma once

// Selective state-space (S6) recurrence and its four-direction 2D form.
//
// Per channel d with state size N:
//   h_t = exp(delta_t,d * A_d) * h_{t-1} + (delta_t,d * B_t) * x_t,d,  h_0 = 0
//   y_t,d = <C_t, h_t> + D_d * x_t,d
// B_t, C_t and a scalar dt_t come from one projection of the token;
// delta_t,d = softplus(dt_t + dt_bias_d), A = -exp(A_log).

#include <array>
#include <cmath>
#include <random>

#include "octamamba/activation.hpp"
#include "octamamba/fast_math.hpp"
#include "octamamba/ops.hpp"
#include "octamamba/rng.hpp"

namespace octamamba {

template <typename T>
struct SsmParams {
  Tensor<T> a_log;    // [D, N]
  Tensor<T> d_skip;   // [D]
  Tensor<T> proj;     // [2N + 1, D] -> (B, C, dt)
  Tensor<T> dt_bias;  // [D]

  std::size_t channels() const { return a_log.dim(0); }
  std::size_t state() const { return a_log.dim(1); }

  /// S4D-real A, unit skip, dt_bias so that softplus(dt_bias) is uniform in
  /// [0.001, 0.1], projection uniform(+-1/sqrt(D)).
  static SsmParams init(std::size_t channels, std::size_t state, Rng& rng) {
    SsmParams p;
    p.a_log = Tensor<T>(Shape{channels, state});
    for (std::size_t d = 0; d < channels; ++d)
      for (std::size_t n = 0; n < state; ++n)
        p.a_log.data()[d * state + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    p.d_skip = Tensor<T>::full(Shape{channels}, T(1));
    p.proj = Tensor<T>(Shape{2 * state + 1, channels});
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    for (auto& v : p.proj.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    p.dt_bias = Tensor<T>(Shape{channels});
    for (auto& v : p.dt_bias.data()) {
      const double dt = rng.uniform(0.001, 0.1);
      v = static_cast<T>(dt + std::log(-std::expm1(-dt)));  // softplus^-1
    }
    return p;
  }
};

namespace detail {

// Scan inputs: x/delta [Bt,L,D], a [D,N]; B_t and C_t are rows of length N
// found every bc_stride elements of b and c.
template <typename T>
struct ScanView {
  const T* x;
  const T* delta;
  const T* a;
  const T* b;
  const T* c;
  const T* d_skip;
  std::size_t bc_stride;
  std::size_t batch, len, dim, state;
};

// Sequential forward. When hs is non-null every state h_t is stored for the
// adjoint, layout [Bt,L,D,N].
template <typename T>
void scan_sequential(const ScanView<T>& v, T* y, T* hs) {
  const std::size_t D = v.dim, N = v.state, L = v.len, DN = D * N;
  std::vector<T> h(DN), dec(DN);
  for (std::size_t bt = 0; bt < v.batch; ++bt) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = bt * L + t;
      const T* bt_ = v.b + row * v.bc_stride;
      const T* ct = v.c + row * v.bc_stride;
      const T* xr = v.x + row * D;
      const T* dr = v.delta + row * D;
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t n = 0; n < N; ++n) dec[d * N + n] = dr[d] * v.a[d * N + n];
      for (std::size_t k = 0; k < DN; ++k) dec[k] = fast_exp(dec[k]);
      for (std::size_t d = 0; d < D; ++d) {
        const T xv = xr[d], dv = dr[d];
        T* hd = h.data() + d * N;
        const T* ed = dec.data() + d * N;
        for (std::size_t n = 0; n < N; ++n) hd[n] = ed[n] * hd[n] + (dv * bt_[n]) * xv;
        T acc = 0;
        for (std::size_t n = 0; n < N; ++n) acc += ct[n] * hd[n];
        y[row * D + d] = acc + v.d_skip[d] * xv;
      }
      if (hs) std::copy(h.begin(), h.end(), hs + row * DN);
    }
  }
}

// Output buffers of the adjoint sweep; every pointer must be valid and all
// are accumulated into. gb/gc rows use the view's bc_stride.
template <typename T>
struct ScanGrads {
  T* x;
  T* delta;
  T* a;
  T* b;
  T* c;
  T* d_skip;
};

// One (t, d) step of the adjoint over the N states. Per-state terms of the
// delta and x gradients land in td / tx for a fixed-order sum by the caller.
template <typename T>
inline void adjoint_step(std::size_t N, T gyv, T dv, T xv, T* __restrict gh,
                         const T* __restrict hc, const T* __restrict hp,
                         const T* __restrict a, const T* __restrict b,
                         const T* __restrict c, T* __restrict ga, T* __restrict gb,
                         T* __restrict gc, T* __restrict td, T* __restrict tx) {
  for (std::size_t n = 0; n < N; ++n) {
    const T ghn = gh[n] + gyv * c[n];
    const T dec = fast_exp(dv * a[n]);
    const T g_decay = ghn * hp[n] * dec;
    gc[n] += gyv * hc[n];
    ga[n] += g_decay * dv;
    gb[n] += ghn * dv * xv;
    td[n] = g_decay * a[n] + ghn * b[n] * xv;
    tx[n] = ghn * dv * b[n];
    gh[n] = ghn * dec;
  }
}

// Reverse sweep over t with the adjoint state gh = dLoss/dh_t. The decay
// factors are recomputed with the same fast_exp as the forward pass.
template <typename T>
void scan_adjoint(const ScanView<T>& v, const T* hs, const T* gy, const ScanGrads<T>& g) {
  const std::size_t D = v.dim, N = v.state, L = v.len, DN = D * N;
  std::vector<T> gh(DN), zeros(DN, T(0)), tdel(N), tx(N);
  for (std::size_t s = 0; s < v.batch; ++s) {
    std::fill(gh.begin(), gh.end(), T(0));
    for (std::size_t t = L; t-- > 0;) {
      const std::size_t row = s * L + t;
      const T* hcur = hs + row * DN;
      const T* hprev = t > 0 ? hcur - DN : zeros.data();
      const std::size_t bc = row * v.bc_stride;
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t xd = row * D + d;
        const T gyv = gy[xd], xv = v.x[xd], dv = v.delta[xd];
        adjoint_step(N, gyv, dv, xv, gh.data() + d * N, hcur + d * N, hprev + d * N,
                     v.a + d * N, v.b + bc, v.c + bc, g.a + d * N, g.b + bc, g.c + bc,
                     tdel.data(), tx.data());
        T gd_acc = 0, gx_acc = gyv * v.d_skip[d];
        for (std::size_t n = 0; n < N; ++n) {
          gd_acc += tdel[n];
          gx_acc += tx[n];
        }
        g.d_skip[d] += gyv * xv;
        g.x[xd] += gx_acc;
        g.delta[xd] += gd_acc;
      }
    }
  }
}

// Grad buffer of a tensor, or a zeroed scratch buffer when it takes none.
template <typename T>
T* grad_or_scratch(TensorImpl<T>& impl, std::vector<T>& scratch) {
  if (T* g = impl.grad_sink()) return g;
  scratch.assign(impl.data.size(), T(0));
  return scratch.data();
}

}  // namespace detail

/// Scan kernel over explicit delta [Bt,L,D], A [D,N], B/C [Bt,L,N].
template <typename T>
Tensor<T> selective_scan_core(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a,
                              const Tensor<T>& b, const Tensor<T>& c,
                              const Tensor<T>& d_skip) {
  detail::require_rank(x.shape(), 3, "selective_scan");
  const std::size_t bt = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (L == 0) throw ShapeError("selective_scan: empty sequence");
  detail::require_rank(a.shape(), 2, "selective_scan");
  const std::size_t N = a.dim(1);
  if (delta.shape() != x.shape() || a.dim(0) != D || b.shape() != Shape{bt, L, N} ||
      c.shape() != Shape{bt, L, N} || d_skip.numel() != D) {
    throw ShapeError("selective_scan: inconsistent operand shapes");
  }
  const detail::ScanView<T> view{x.vec().data(), delta.vec().data(), a.vec().data(),
                                 b.vec().data(), c.vec().data(), d_skip.vec().data(),
                                 N, bt, L, D, N};
  std::vector<T> y(bt * L * D);
  const bool record = grad_enabled() && (x.requires_grad() || delta.requires_grad() ||
                                         a.requires_grad() || b.requires_grad() ||
                                         c.requires_grad() || d_skip.requires_grad());
  auto hs = std::make_shared<std::vector<T>>(record ? bt * L * D * N : 0);
  detail::scan_sequential(view, y.data(), record ? hs->data() : nullptr);

  auto xi = x.impl(), di = delta.impl(), ai = a.impl(), bi = b.impl(), ci = c.impl(),
       si = d_skip.impl();
  return make_result<T>(x.shape(), std::move(y), {x, delta, a, b, c, d_skip},
                        [=](const TensorImpl<T>& out) {
                          std::vector<T> sx, sd, sa, sb, sc, ss;
                          const detail::ScanGrads<T> g{
                              detail::grad_or_scratch(*xi, sx), detail::grad_or_scratch(*di, sd),
                              detail::grad_or_scratch(*ai, sa), detail::grad_or_scratch(*bi, sb),
                              detail::grad_or_scratch(*ci, sc), detail::grad_or_scratch(*si, ss)};
                          const detail::ScanView<T> v{xi->data.data(), di->data.data(),
                                                      ai->data.data(), bi->data.data(),
                                                      ci->data.data(), si->data.data(),
                                                      N, bt, L, D, N};
                          detail::scan_adjoint(v, hs->data(), out.grad.data(), g);
                        });
}

namespace detail {

// delta [Bt*L, D] and A [D,N] derived from a projection [Bt*L, 2N+1].
template <typename T>
struct DerivedScanInputs {
  std::vector<T> delta, a;
};

template <typename T>
DerivedScanInputs<T> derive_scan_inputs(const T* proj, const T* a_log, const T* dt_bias,
                                        std::size_t rows, std::size_t D, std::size_t N) {
  DerivedScanInputs<T> out;
  out.delta.resize(rows * D);
  out.a.resize(D * N);
  const std::size_t stride = 2 * N + 1;
  for (std::size_t r = 0; r < rows; ++r) {
    const T dt = proj[r * stride + 2 * N];
    T* dr = out.delta.data() + r * D;
    for (std::size_t d = 0; d < D; ++d) dr[d] = fast_softplus(dt + dt_bias[d]);
  }
  for (std::size_t k = 0; k < D * N; ++k) out.a[k] = -std::exp(a_log[k]);
  return out;
}

template <typename T>
Tensor<T> as_batched(const Tensor<T>& x) {
  if (x.rank() == 2) return reshape(x, Shape{1, x.dim(0), x.dim(1)});
  require_rank(x.shape(), 3, "selective_scan");
  return x;
}

template <typename T>
void check_scan_input(const Tensor<T>& x, const SsmParams<T>& p) {
  if (x.rank() < 2 || x.dim(x.rank() - 2) == 0) throw ShapeError("selective_scan: empty sequence");
  if (x.shape().back() != p.channels()) throw ShapeError("selective_scan: channel mismatch");
}

}  // namespace detail

/// Scan over a token projection [Bt,L,2N+1] = (B, C, dt). Records one fused
/// adjoint for the softplus delta path, A = -exp(A_log) and the scan itself.
template <typename T>
Tensor<T> selective_scan_projected(const Tensor<T>& x, const Tensor<T>& proj,
                                   const Tensor<T>& a_log, const Tensor<T>& dt_bias,
                                   const Tensor<T>& d_skip) {
  detail::require_rank(x.shape(), 3, "selective_scan");
  const std::size_t bt = x.dim(0), L = x.dim(1), D = x.dim(2), N = a_log.dim(1);
  if (proj.shape() != Shape{bt, L, 2 * N + 1} || a_log.dim(0) != D || dt_bias.numel() != D ||
      d_skip.numel() != D) {
    throw ShapeError("selective_scan: inconsistent operand shapes");
  }
  const std::size_t rows = bt * L, stride = 2 * N + 1;
  auto derived = std::make_shared<detail::DerivedScanInputs<T>>(detail::derive_scan_inputs(
      proj.vec().data(), a_log.vec().data(), dt_bias.vec().data(), rows, D, N));
  const T* pr = proj.vec().data();
  const detail::ScanView<T> view{x.vec().data(), derived->delta.data(), derived->a.data(),
                                 pr, pr + N, d_skip.vec().data(), stride, bt, L, D, N};
  std::vector<T> y(rows * D);
  const bool record = grad_enabled() && (x.requires_grad() || proj.requires_grad() ||
                                         a_log.requires_grad() || dt_bias.requires_grad() ||
                                         d_skip.requires_grad());
  auto hs = std::make_shared<std::vector<T>>(record ? rows * D * N : 0);
  detail::scan_sequential(view, y.data(), record ? hs->data() : nullptr);

  auto xi = x.impl(), pi = proj.impl(), ai = a_log.impl(), bi = dt_bias.impl(),
       si = d_skip.impl();
  return make_result<T>(
      x.shape(), std::move(y), {x, proj, a_log, dt_bias, d_skip},
      [=](const TensorImpl<T>& out) {
        std::vector<T> sx, sp, ss, gdelta(rows * D, T(0)), ga(D * N, T(0));
        T* gproj = detail::grad_or_scratch(*pi, sp);
        const T* pv = pi->data.data();
        const detail::ScanGrads<T> g{detail::grad_or_scratch(*xi, sx), gdelta.data(), ga.data(),
                                     gproj, gproj + N, detail::grad_or_scratch(*si, ss)};
        const detail::ScanView<T> v{xi->data.data(), derived->delta.data(), derived->a.data(),
                                    pv, pv + N, si->data.data(), stride, bt, L, D, N};
        detail::scan_adjoint(v, hs->data(), out.grad.data(), g);
        // delta = softplus(dt + dt_bias): d/dz softplus = sigmoid.
        T* gbias = bi->grad_sink();
        const T* bias = bi->data.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const T dt = pv[r * stride + 2 * N];
          T acc = 0;
          for (std::size_t d = 0; d < D; ++d) {
            const T gz = gdelta[r * D + d] * fast_sigmoid(dt + bias[d]);
            acc += gz;
            if (gbias) gbias[d] += gz;
          }
          gproj[r * stride + 2 * N] += acc;
        }
        // A = -exp(A_log): dA/dA_log = A.
        if (T* gal = ai->grad_sink())
          for (std::size_t k = 0; k < D * N; ++k) gal[k] += ga[k] * derived->a[k];
      });
}

/// Full selective scan of tokens [L,D] or [Bt,L,D]; output has the input's shape.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const SsmParams<T>& p) {
  detail::check_scan_input(x, p);
  auto xb = detail::as_batched(x);
  auto y = selective_scan_projected(xb, linear(xb, p.proj), p.a_log, p.dt_bias, p.d_skip);
  return x.rank() == 2 ? reshape(y, x.shape()) : y;
}

/// Same result as selective_scan, evaluated chunk by chunk: each chunk is
/// scanned from a zero state while tracking the cumulative decay, chunk
/// boundary states are then carried sequentially, and each chunk is corrected
/// by cumulative_decay * carried_state. Forward only.
template <typename T>
Tensor<T> selective_scan_chunked(const Tensor<T>& x, const SsmParams<T>& p, std::size_t chunk) {
  if (chunk == 0) throw ShapeError("selective_scan_chunked: chunk must be >= 1");
  detail::check_scan_input(x, p);
  NoGradGuard no_grad;
  auto xb = detail::as_batched(x);
  auto proj = linear(xb, p.proj);
  const std::size_t bt = xb.dim(0), L = xb.dim(1), D = xb.dim(2), N = p.state();
  const std::size_t stride = 2 * N + 1;
  const auto derived = detail::derive_scan_inputs(proj.vec().data(), p.a_log.vec().data(),
                                                  p.dt_bias.vec().data(), bt * L, D, N);
  const T* xs = xb.vec().data();
  const T* ds = derived.delta.data();
  const T* as = derived.a.data();
  const T* bs = proj.vec().data();
  const T* cs = bs + N;
  const T* ss = p.d_skip.vec().data();
  const std::size_t n_chunks = (L + chunk - 1) / chunk;
  std::vector<T> y(bt * L * D);
  // Local states and cumulative decays, [L, D, N] per batch row.
  std::vector<T> local(L * D * N), cum(L * D * N), carry(n_chunks * D * N);
  for (std::size_t s = 0; s < bt; ++s) {
    // Phase 1: independent chunk scans from zero state.
    for (std::size_t k = 0; k < n_chunks; ++k) {
      const std::size_t t0 = k * chunk, t1 = std::min(L, t0 + chunk);
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t t = t0; t < t1; ++t) {
          const std::size_t row = s * L + t;
          const T xv = xs[row * D + d], dv = ds[row * D + d];
          for (std::size_t n = 0; n < N; ++n) {
            const T decay_v = fast_exp(dv * as[d * N + n]);
            const std::size_t o = (t * D + d) * N + n;
            const T prev = t == t0 ? T(0) : local[o - D * N];
            const T prev_cum = t == t0 ? T(1) : cum[o - D * N];
            local[o] = decay_v * prev + (dv * bs[row * stride + n]) * xv;
            cum[o] = t == t0 ? decay_v : prev_cum * decay_v;
          }
        }
    }
    // Phase 2: sequential carry of the state entering each chunk.
    std::fill(carry.begin(), carry.begin() + D * N, T(0));
    for (std::size_t k = 1; k < n_chunks; ++k) {
      const std::size_t last = k * chunk - 1;
      for (std::size_t dn = 0; dn < D * N; ++dn) {
        const std::size_t o = last * D * N + dn;
        carry[k * D * N + dn] = cum[o] * carry[(k - 1) * D * N + dn] + local[o];
      }
    }
    // Phase 3: correct each chunk and read out.
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t k = t / chunk, row = s * L + t;
      const T* ct = cs + row * stride;
      for (std::size_t d = 0; d < D; ++d) {
        T acc = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t o = (t * D + d) * N + n;
          const T h = local[o] + cum[o] * carry[k * D * N + d * N + n];
          acc += ct[n] * h;
        }
        y[row * D + d] = acc + ss[d] * xs[row * D + d];
      }
    }
  }
  return Tensor<T>(x.shape(), std::move(y));
}

enum class ScanDirection { RowForward, RowBackward, ColForward, ColBackward };

inline constexpr std::array<ScanDirection, 4> kScanDirections = {
    ScanDirection::RowForward, ScanDirection::RowBackward, ScanDirection::ColForward,
    ScanDirection::ColBackward};

/// Pixel (row-major index) visited at step t of a direction over an HxW grid.
inline std::size_t scan_pixel(ScanDirection dir, std::size_t t, std::size_t h, std::size_t w) {
  const std::size_t L = h * w;
  switch (dir) {
    case ScanDirection::RowForward: return t;
    case ScanDirection::RowBackward: return L - 1 - t;
    case ScanDirection::ColForward: return (t % h) * w + t / h;
    case ScanDirection::ColBackward: {
      const std::size_t u = L - 1 - t;
      return (u % h) * w + u / h;
    }
  }
  return t;
}

/// NCHW -> [N, L, C] tokens in the direction's traversal order.
template <typename T>
Tensor<T> to_scan_tokens(const Tensor<T>& x, ScanDirection dir) {
  detail::require_rank(x.shape(), 4, "to_scan_tokens");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), L = h * w;
  auto idx = std::make_shared<std::vector<std::size_t>>(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t p = scan_pixel(dir, t, h, w);
      for (std::size_t ch = 0; ch < c; ++ch) (*idx)[(b * L + t) * c + ch] = (b * c + ch) * L + p;
    }
  return gather(x, Shape{n, L, c}, std::move(idx));
}

/// Inverse of to_scan_tokens.
template <typename T>
Tensor<T> from_scan_tokens(const Tensor<T>& tokens, ScanDirection dir, std::size_t h, std::size_t w) {
  detail::require_rank(tokens.shape(), 3, "from_scan_tokens");
  const std::size_t n = tokens.dim(0), L = tokens.dim(1), c = tokens.dim(2);
  if (L != h * w) throw ShapeError("from_scan_tokens: length mismatch");
  auto idx = std::make_shared<std::vector<std::size_t>>(tokens.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t p = scan_pixel(dir, t, h, w);
      for (std::size_t ch = 0; ch < c; ++ch) (*idx)[(b * c + ch) * L + p] = (b * L + t) * c + ch;
    }
  return gather(tokens, Shape{n, c, h, w}, std::move(idx));
}

template <typename T>
using Ss2dParams = std::array<SsmParams<T>, 4>;

/// Four directional scans over an NCHW map, un-permuted and summed in the
/// fixed order RowForward, RowBackward, ColForward, ColBackward.
template <typename T>
Tensor<T> ss2d_forward(const Tensor<T>& x, const Ss2dParams<T>& params) {
  detail::require_rank(x.shape(), 4, "ss2d_forward");
  const std::size_t h = x.dim(2), w = x.dim(3);
  Tensor<T> acc;
  for (std::size_t k = 0; k < kScanDirections.size(); ++k) {
    const auto dir = kScanDirections[k];
    auto y = from_scan_tokens(selective_scan(to_scan_tokens(x, dir), params[k]), dir, h, w);
    acc = k == 0 ? y : add(acc, y);
  }
  return acc;
}

}  // namespace octamamba
