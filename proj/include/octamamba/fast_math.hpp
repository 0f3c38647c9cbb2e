#pragma once

// Branch-free exp that GCC can vectorize (std::exp cannot be vectorized
// without -ffast-math). Accurate to a few ulp in both float and double.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <type_traits>

namespace octamamba {

namespace detail {

template <typename T>
struct ExpTraits;

template <>
struct ExpTraits<double> {
  using Int = std::int64_t;
  static constexpr double lo = -708.0;  // below: flush to 0
  static constexpr double hi = 709.0;
  static constexpr int mantissa = 52;
  static constexpr Int bias = 1023;
};

template <>
struct ExpTraits<float> {
  using Int = std::int32_t;
  static constexpr float lo = -87.0f;
  static constexpr float hi = 88.0f;
  static constexpr int mantissa = 23;
  static constexpr Int bias = 127;
};

}  // namespace detail

template <typename T>
inline T fast_exp(T x) {
  using Tr = detail::ExpTraits<T>;
  using Int = typename Tr::Int;
  constexpr T log2e = T(1.4426950408889634);
  constexpr T ln2_hi = T(0.693145751953125);
  constexpr T ln2_lo = T(1.4286068203094172e-06);
  // Round-to-nearest via the 1.5 * 2^mantissa shifter.
  constexpr T shifter = T(1.5) * static_cast<T>(Int{1} << Tr::mantissa);
  const T xc = std::min(std::max(x, T(Tr::lo)), T(Tr::hi));
  const T k = (xc * log2e + shifter) - shifter;
  const T r = (xc - k * ln2_hi) - k * ln2_lo;
  T p;
  if constexpr (std::is_same_v<T, double>) {
    p = 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
  } else {
    p = 1.0f / 40320.0f;
    p = p * r + 1.0f / 5040.0f;
    p = p * r + 1.0f / 720.0f;
    p = p * r + 1.0f / 120.0f;
    p = p * r + 1.0f / 24.0f;
    p = p * r + 1.0f / 6.0f;
    p = p * r + 0.5f;
    p = p * r + 1.0f;
    p = p * r + 1.0f;
  }
  const Int bits = (static_cast<Int>(k) + Tr::bias) << Tr::mantissa;
  const T scale = std::bit_cast<T>(bits);
  const T keep = static_cast<T>(x >= Tr::lo);  // flush underflow to +0
  return (p * scale) * keep;
}

/// log(1 + u) for u in [0, 1], branch-free. log(w) on w = 1 + u uses the
/// atanh series in s = (m - 1) / (m + 1) after halving w above sqrt(2);
/// the u / (w - 1) factor restores the bits lost when forming w.
template <typename T>
inline T fast_log1p_unit(T u) {
  constexpr int terms = std::is_same_v<T, double> ? 12 : 6;
  constexpr T sqrt2 = T(1.4142135623730951);
  constexpr T ln2 = T(0.6931471805599453);
  const T w = T(1) + u;
  const bool high = w > sqrt2;
  const T m = high ? w * T(0.5) : w;
  const T s = (m - T(1)) / (m + T(1));
  const T s2 = s * s;
  T series = T(1) / T(2 * terms - 1);
  for (int k = terms - 2; k >= 0; --k) series = series * s2 + T(1) / T(2 * k + 1);
  const T log_w = T(2) * s * series + (high ? ln2 : T(0));
  const T dw = w - T(1);
  return dw == T(0) ? u : log_w * (u / dw);
}

/// softplus(z) = max(z, 0) + log(1 + exp(-|z|)).
template <typename T>
inline T fast_softplus(T z) {
  return std::max(z, T(0)) + fast_log1p_unit(fast_exp(-std::abs(z)));
}

/// 1 / (1 + exp(-z)), stable for either sign.
template <typename T>
inline T fast_sigmoid(T z) {
  const T e = fast_exp(-std::abs(z));
  const T pos = T(1) / (T(1) + e);
  return z >= T(0) ? pos : e * pos;
}

}  // namespace octamamba
