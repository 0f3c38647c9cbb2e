#pragma once

#include <algorithm>

#include <octamamba/octamamba.hpp>

namespace om_test {

namespace om = octamamba;

// Trainable scalar count from layer formulas.
inline std::size_t block_params(std::size_t c, const om::ModelConfig& cfg) {
  const std::size_t n = cfg.ssm_state, hid = std::max<std::size_t>(1, c / 4);
  std::size_t p = 2 * c + c;  // LN + residual scale
  if (cfg.use_msdam) {
    p += c * c + 27 * c * c + om::eca_kernel_size(c);
    for (std::size_t i : {3, 5, 7}) p += 2 * c * i + 9 * c;
  }
  p += 2 * c + 2 * c * c + 9 * c + 4 * (c * n + c + (2 * n + 1) * c + c) + 2 * c + c * c;
  if (cfg.use_ffrm) p += 2 * c * hid + 98;
  return p;
}

inline std::size_t param_oracle(const om::ModelConfig& cfg) {
  const std::size_t c0 = cfg.base_channels;
  std::size_t p = c0 + 1;  // head
  if (cfg.use_qseme) {
    p += c0 + c0 * c0 + 9 * c0 + 36 * c0 + c0 * c0 + 4 * c0 * c0 +
         2 * c0 * std::max<std::size_t>(1, c0 / 4);
  } else {
    p += c0;
  }
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::size_t c = c0 << i, ci = std::max<std::size_t>(1, c / 2);
    p += block_params(c, cfg) + 2 * c + 2 * c * c;                                     // encoder
    p += 2 * c * c + 2 * ci * c + 2 * ci + 1 + 2 * c * c + 2 * c + block_params(c, cfg);  // decoder
  }
  return p;
}

}  // namespace om_test
