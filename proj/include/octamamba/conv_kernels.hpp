#pragma once

// Register-blocked stride-1 convolution kernels.
//
// Inputs are copied into zero-padded planes and outputs are computed on the
// padded-width grid, so every tap is a contiguous vector load. Columns that
// fall in the padding band are computed and discarded. Each output element
// still accumulates its taps in (input channel, kernel row, kernel column)
// order starting from +0; padded taps contribute an exact w*0, which leaves a
// sum that is never -0 unchanged, so results equal a tap-skipping loop bit for
// bit.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace octamamba::detail {

template <typename T>
struct Vec {
  typedef T type __attribute__((vector_size(64)));
  static constexpr std::size_t lanes = 64 / sizeof(T);
};

template <typename T>
inline typename Vec<T>::type loadu(const T* p) {
  typename Vec<T>::type v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T>
inline void storeu(T* p, typename Vec<T>::type v) {
  std::memcpy(p, &v, sizeof(v));
}

template <typename T>
inline T hsum(typename Vec<T>::type v) {
  // Pairwise tree, fixed order.
  T buf[Vec<T>::lanes];
  std::memcpy(buf, &v, sizeof(v));
  for (std::size_t width = Vec<T>::lanes / 2; width > 0; width /= 2)
    for (std::size_t i = 0; i < width; ++i) buf[i] = buf[i] + buf[i + width];
  return buf[0];
}

/// Geometry of one stride-1 convolution on the padded flat grid.
struct Grid {
  std::size_t h, w;          // input
  std::size_t kh, kw, dil;
  std::size_t ph, pw;
  std::size_t hp, wp;        // padded input
  std::size_t ho, wo;        // output
  std::size_t span;          // grid positions computed per plane (lane multiple)
  std::size_t plane;         // padded input plane length incl. tail

  Grid(std::size_t h_, std::size_t w_, std::size_t kh_, std::size_t kw_, std::size_t dil_,
       std::size_t ph_, std::size_t pw_, std::size_t lanes)
      : h(h_), w(w_), kh(kh_), kw(kw_), dil(dil_), ph(ph_), pw(pw_) {
    hp = h + 2 * ph;
    wp = w + 2 * pw;
    ho = hp - dil * (kh - 1);
    wo = wp - dil * (kw - 1);
    span = (ho * wp + lanes - 1) / lanes * lanes;
    plane = span + dil * (kh - 1) * wp + dil * (kw - 1);
  }

  std::size_t tap_offset(std::size_t i, std::size_t j) const { return i * dil * wp + j * dil; }
};

template <typename T>
void pad_planes(const T* x, std::size_t planes, const Grid& g, std::vector<T>& out) {
  out.assign(planes * g.plane, T(0));
  for (std::size_t k = 0; k < planes; ++k) {
    const T* src = x + k * g.h * g.w;
    T* dst = out.data() + k * g.plane;
    for (std::size_t i = 0; i < g.h; ++i)
      std::copy_n(src + i * g.w, g.w, dst + (i + g.ph) * g.wp + g.pw);
  }
}

// acc over NB output channels for one lane block at grid position p.
template <typename T, std::size_t NB>
void conv_block(const T* xpad, const T* wblk, std::size_t cin_g, const Grid& g,
                const std::size_t* offs, std::size_t p, T* const* outs) {
  using V = typename Vec<T>::type;
  V acc[NB];
  for (std::size_t j = 0; j < NB; ++j) acc[j] = V{} * T(0);
  const std::size_t taps = g.kh * g.kw;
  for (std::size_t cl = 0; cl < cin_g; ++cl) {
    const T* xp = xpad + cl * g.plane + p;
    const T* wc = wblk + cl * taps;
    for (std::size_t t = 0; t < taps; ++t) {
      const V xv = loadu(xp + offs[t]);
      for (std::size_t j = 0; j < NB; ++j) acc[j] += wc[j * cin_g * taps + t] * xv;
    }
  }
  for (std::size_t j = 0; j < NB; ++j) storeu(outs[j] + p, acc[j]);
}

/// y[n][co] (dense Ho x Wo) = sum over group inputs. xpad holds padded planes
/// for all n*cin channels.
template <typename T>
void conv_forward_padded(const std::vector<T>& xpad, const T* weight, std::size_t n,
                         std::size_t cin, std::size_t cout, std::size_t groups, const Grid& g,
                         T* y) {
  constexpr std::size_t L = Vec<T>::lanes;
  const std::size_t cin_g = cin / groups, cout_g = cout / groups, taps = g.kh * g.kw;
  std::vector<std::size_t> offs(taps);
  for (std::size_t i = 0; i < g.kh; ++i)
    for (std::size_t j = 0; j < g.kw; ++j) offs[i * g.kw + j] = g.tap_offset(i, j);
  std::vector<T> grid(8 * g.span);
  T* outs[8];
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t grp = 0; grp < groups; ++grp) {
      const T* xg = xpad.data() + (b * cin + grp * cin_g) * g.plane;
      std::size_t col = 0;
      while (col < cout_g) {
        const std::size_t nb = cout_g - col >= 8 ? 8 : cout_g - col >= 4 ? 4 : cout_g - col >= 2 ? 2 : 1;
        const std::size_t co0 = grp * cout_g + col;
        const T* wblk = weight + co0 * cin_g * taps;
        for (std::size_t j = 0; j < nb; ++j) outs[j] = grid.data() + j * g.span;
        for (std::size_t p = 0; p < g.span; p += L) {
          switch (nb) {
            case 8: conv_block<T, 8>(xg, wblk, cin_g, g, offs.data(), p, outs); break;
            case 4: conv_block<T, 4>(xg, wblk, cin_g, g, offs.data(), p, outs); break;
            case 2: conv_block<T, 2>(xg, wblk, cin_g, g, offs.data(), p, outs); break;
            default: conv_block<T, 1>(xg, wblk, cin_g, g, offs.data(), p, outs); break;
          }
        }
        for (std::size_t j = 0; j < nb; ++j) {
          T* yp = y + (b * cout + co0 + j) * g.ho * g.wo;
          for (std::size_t r = 0; r < g.ho; ++r) std::copy_n(outs[j] + r * g.wp, g.wo, yp + r * g.wo);
        }
        col += nb;
      }
    }
}

/// gw[co][cl][tap] += sum_b sum_p gout_grid[b][co][p] * xpad[b][ci][p + off].
/// gout_grid is laid out on the padded-width grid with zero discard columns.
template <typename T>
void conv_weight_grad(const std::vector<T>& xpad, const std::vector<T>& gout_grid,
                      std::size_t n, std::size_t cin, std::size_t cout, std::size_t groups,
                      const Grid& g, T* gw) {
  using V = typename Vec<T>::type;
  constexpr std::size_t L = Vec<T>::lanes;
  const std::size_t cin_g = cin / groups, cout_g = cout / groups, taps = g.kh * g.kw;
  std::vector<std::size_t> offs(taps);
  for (std::size_t i = 0; i < g.kh; ++i)
    for (std::size_t j = 0; j < g.kw; ++j) offs[i * g.kw + j] = g.tap_offset(i, j);
  for (std::size_t co = 0; co < cout; ++co) {
    const std::size_t grp = co / cout_g;
    for (std::size_t cl = 0; cl < cin_g; ++cl) {
      const std::size_t ci = grp * cin_g + cl;
      for (std::size_t t0 = 0; t0 < taps; t0 += 8) {
        const std::size_t nt = std::min<std::size_t>(8, taps - t0);
        V acc[8];
        for (auto& a : acc) a = V{} * T(0);
        for (std::size_t b = 0; b < n; ++b) {
          const T* gp = gout_grid.data() + (b * cout + co) * g.span;
          const T* xp = xpad.data() + (b * cin + ci) * g.plane;
          for (std::size_t p = 0; p < g.span; p += L) {
            const V gv = loadu(gp + p);
            for (std::size_t t = 0; t < nt; ++t) acc[t] += gv * loadu(xp + p + offs[t0 + t]);
          }
        }
        for (std::size_t t = 0; t < nt; ++t) gw[(co * cin_g + cl) * taps + t0 + t] += hsum<T>(acc[t]);
      }
    }
  }
}

}  // namespace octamamba::detail
