#pragma once

// Finite-difference gradient checks in double precision.
//
// Each registered check builds a small random instance, reduces the output to
// a scalar with a fixed random projection and compares reverse-mode gradients
// against central differences, h = 1e-4 * max(1, |theta|).

#include <functional>
#include <map>

#include "octamamba/net.hpp"
#include "octamamba/train.hpp"

namespace octamamba {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  double threshold = 0;
  bool composite = false;
  std::size_t checked = 0;  // number of scalars compared
  std::size_t skipped = 0;  // probes straddling a relu/max switch

  bool passed() const { return checked > 0 && max_rel_error <= threshold; }
};

inline constexpr double kLeafTolerance = 1e-5;
inline constexpr double kCompositeTolerance = 1e-4;
// Denominator floor for tensors whose gradient is (near) zero everywhere.
inline constexpr double kRelErrorFloor = 1e-3;

/// Norm-wise relative error of one tensor's probed gradient entries:
/// max|a - n| / max(max|a|, max|n|, floor).
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0, scale = kRelErrorFloor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Distinct values spaced far apart relative to h, shuffled; keeps max
// selections away from ties.
inline Tensor<double> spaced_tensor(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  auto d = t.data();
  const double n = static_cast<double>(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = -1.0 + 2.0 * (static_cast<double>(i) + 0.5) / n;
  rng.shuffle(d.begin(), d.end());
  return t;
}

}  // namespace detail

/// Worst per-tensor relative error and probe counts of one comparison.
struct GradientComparison {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // stencil crossed a relu/max switch
};

/// Compares gradients of fn() w.r.t. each tensor in wrt. At most
/// max_per_tensor elements of each tensor are probed (chosen by rng). A probe
/// whose +-h evaluations take a different relu/max branch than the base point
/// is not differentiable there and is skipped.
inline GradientComparison compare_gradients(const std::function<Tensor<double>()>& fn,
                                            const std::vector<Tensor<double>>& wrt, Rng& rng,
                                            std::size_t max_per_tensor) {
  for (auto t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  BranchRecorder rec;
  auto loss = fn();
  const std::uint64_t base = rec.hash();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : wrt) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  NoGradGuard no_grad;
  auto eval = [&](bool& same) {
    rec.reset();
    const double v = fn().item();
    same = same && rec.hash() == base;
    return v;
  };
  GradientComparison out;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto handle = wrt[k];
    auto values = handle.data();
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > max_per_tensor) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(max_per_tensor);
    }
    std::vector<double> probed, numeric;
    for (std::size_t i : idx) {
      const double theta = values[i];
      const double h = 1e-4 * std::max(1.0, std::abs(theta));
      bool smooth = true;
      values[i] = theta + h;
      const double up = eval(smooth);
      values[i] = theta - h;
      const double down = eval(smooth);
      values[i] = theta;
      if (!smooth) {
        ++out.skipped;
        continue;
      }
      probed.push_back(analytic[k][i]);
      numeric.push_back((up - down) / (2 * h));
      ++out.checked;
    }
    out.max_rel_error = std::max(out.max_rel_error, relative_error(probed, numeric));
  }
  return out;
}

/// sum(y * R) with R fixed per call site.
inline Tensor<double> project(const Tensor<double>& y, const Tensor<double>& r) { return sum(mul(y, r)); }

namespace detail {

struct CheckSpec {
  bool composite;
  std::function<GradCheckResult(Rng&)> run;
};

inline GradCheckResult finish(std::string name, bool composite, const GradientComparison& c) {
  return {std::move(name), c.max_rel_error, composite ? kCompositeTolerance : kLeafTolerance,
          composite, c.checked, c.skipped};
}

// Checks y = f(x) w.r.t. the input x and every trainable tensor in store.
inline GradientComparison check_module(Rng& rng, const Tensor<double>& x, ParamStore<double>& store,
                                       const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                       std::size_t per_tensor) {
  Tensor<double> r;
  {
    NoGradGuard ng;
    r = random_tensor(rng, f(x).shape());
  }
  auto wrt = store.trainable();
  wrt.insert(wrt.begin(), x);
  return compare_gradients([&] { return project(f(x), r); }, wrt, rng, per_tensor);
}

inline std::map<std::string, CheckSpec> build_registry() {
  using D = double;
  using T = Tensor<D>;
  std::map<std::string, CheckSpec> reg;
  // Leaf operation over explicit inputs; all listed tensors are checked.
  auto leaf = [&](const std::string& name, std::function<std::pair<std::vector<T>, std::function<T()>>(Rng&)> make) {
    reg[name] = {false, [name, make](Rng& rng) {
                   auto [wrt, fn] = make(rng);
                   T r;
                   {
                     NoGradGuard ng;
                     r = random_tensor(rng, fn().shape());
                   }
                   return finish(name, false, compare_gradients([&] { return project(fn(), r); }, wrt, rng, 64));
                 }};
  };
  // Module built from a ParamScope; checked w.r.t. input and parameters.
  auto module = [&](const std::string& name, bool composite, Shape xshape,
                    std::function<std::function<T(const T&)>(ParamScope<D>)> make,
                    std::size_t per_tensor = 24) {
    reg[name] = {composite, [=](Rng& rng) {
                   ParamStore<D> store;
                   ParamScope<D> scope(store, rng);
                   auto f = make(scope);
                   auto x = random_tensor(rng, xshape);
                   return finish(name, composite, check_module(rng, x, store, f, per_tensor));
                 }};
  };

  leaf("conv2d", [](Rng& rng) {
    auto x = random_tensor(rng, {2, 3, 6, 5});
    auto w = random_tensor(rng, {4, 3, 3, 3});
    auto b = random_tensor(rng, {4});
    return std::pair{std::vector<T>{x, w, b},
                     std::function<T()>([=] { return conv2d(x, w, &b, ConvSpec::same(3, 4, 3, 3)); })};
  });
  leaf("conv2d_dilated", [](Rng& rng) {
    auto x = random_tensor(rng, {1, 2, 9, 8});
    auto w = random_tensor(rng, {2, 2, 3, 3});
    return std::pair{std::vector<T>{x, w},
                     std::function<T()>([=] { return conv2d(x, w, nullptr, ConvSpec::same(2, 2, 3, 3, 3)); })};
  });
  leaf("conv2d_depthwise", [](Rng& rng) {
    auto x = random_tensor(rng, {2, 3, 7, 7});
    auto w = random_tensor(rng, {3, 1, 1, 5});
    return std::pair{std::vector<T>{x, w},
                     std::function<T()>([=] { return conv2d(x, w, nullptr, ConvSpec::depthwise(3, 1, 5)); })};
  });
  leaf("conv2d_grouped_strided", [](Rng& rng) {
    auto x = random_tensor(rng, {1, 4, 7, 6});
    auto w = random_tensor(rng, {4, 2, 3, 3});
    ConvSpec s = ConvSpec::same(4, 4, 3, 3, 1, 2);
    s.stride = 2;
    return std::pair{std::vector<T>{x, w},
                     std::function<T()>([=] { return conv2d(x, w, nullptr, s); })};
  });
  leaf("pool_max", [](Rng& rng) {
    auto x = spaced_tensor(rng, {2, 2, 6, 6});
    return std::pair{std::vector<T>{x},
                     std::function<T()>([=] { return pool2d(x, PoolKind::Max, 3, 2, 1); })};
  });
  leaf("pool_avg", [](Rng& rng) {
    auto x = random_tensor(rng, {2, 2, 6, 6});
    return std::pair{std::vector<T>{x},
                     std::function<T()>([=] { return pool2d(x, PoolKind::Avg, 3, 1, 1); })};
  });
  leaf("upsample_bilinear", [](Rng& rng) {
    auto x = random_tensor(rng, {2, 2, 4, 3});
    return std::pair{std::vector<T>{x}, std::function<T()>([=] { return upsample_bilinear(x, 2); })};
  });
  leaf("resize_bilinear", [](Rng& rng) {
    auto x = random_tensor(rng, {1, 2, 5, 4});
    return std::pair{std::vector<T>{x}, std::function<T()>([=] { return resize_bilinear(x, 7, 3); })};
  });
  reg["linear"] = {false, [](Rng& rng) {
                     auto x = random_tensor(rng, {3, 4, 5});
                     auto w = random_tensor(rng, {6, 5});
                     auto b = random_tensor(rng, {6});
                     T r = random_tensor(rng, {3, 4, 6});
                     GradCheckResult res = finish(
                         "linear", false,
                         compare_gradients([&] { return project(linear(x, w, &b), r); }, {x, w, b}, rng, 64));
                     res.threshold = 1e-9;
                     return res;
                   }};
  leaf("layer_norm", [](Rng& rng) {
    auto x = random_tensor(rng, {3, 4, 6});
    auto g = random_tensor(rng, {6}, 0.5, 1.5);
    auto b = random_tensor(rng, {6});
    return std::pair{std::vector<T>{x, g, b}, std::function<T()>([=] { return layer_norm(x, g, b); })};
  });
  leaf("batch_norm", [](Rng& rng) {
    auto x = random_tensor(rng, {3, 2, 3, 4});
    auto g = random_tensor(rng, {2}, 0.5, 1.5);
    auto b = random_tensor(rng, {2});
    return std::pair{std::vector<T>{x, g, b}, std::function<T()>([=] {
                       T rm = T::zeros({2}), rv = T::full({2}, 1.0);
                       return batch_norm(x, g, b, rm, rv, NormMode::Train);
                     })};
  });
  const std::pair<const char*, Activation> acts[] = {{"relu", Activation::Relu},
                                                     {"gelu", Activation::Gelu},
                                                     {"silu", Activation::Silu},
                                                     {"sigmoid", Activation::Sigmoid},
                                                     {"softplus", Activation::Softplus}};
  for (const auto& [name, kind] : acts) {
    leaf(name, [kind](Rng& rng) {
      // Values at least 0.05 away from 0 keep relu off its kink.
      auto x = random_tensor(rng, {4, 16}, 0.05, 3.0);
      for (auto& v : x.data())
        if (rng.uniform() < 0.5) v = -v;
      return std::pair{std::vector<T>{x}, std::function<T()>([=] { return activation(x, kind); })};
    });
  }
  leaf("selective_scan", [](Rng& rng) {
    auto x = random_tensor(rng, {2, 12, 4});
    auto p = SsmParams<D>::init(4, 5, rng);
    for (auto& v : p.dt_bias.data()) v += rng.uniform(0.0, 1.0);
    for (auto& v : p.d_skip.data()) v = rng.uniform(-1, 1);
    return std::pair{std::vector<T>{x, p.a_log, p.d_skip, p.proj, p.dt_bias},
                     std::function<T()>([=] { return selective_scan(x, p); })};
  });
  leaf("selective_scan_core", [](Rng& rng) {
    auto x = random_tensor(rng, {2, 10, 3});
    auto delta = random_tensor(rng, {2, 10, 3}, 0.05, 0.8);
    auto a = random_tensor(rng, {3, 4}, -2.0, -0.2);
    auto b = random_tensor(rng, {2, 10, 4});
    auto c = random_tensor(rng, {2, 10, 4});
    auto ds = random_tensor(rng, {3});
    return std::pair{std::vector<T>{x, delta, a, b, c, ds},
                     std::function<T()>([=] { return selective_scan_core(x, delta, a, b, c, ds); })};
  });
  leaf("haar_dwt", [](Rng& rng) {
    auto x = random_tensor(rng, {2, 2, 5, 6});
    return std::pair{std::vector<T>{x}, std::function<T()>([=] { return haar_dwt(x); })};
  });
  leaf("haar_idwt", [](Rng& rng) {
    auto x = random_tensor(rng, {2, 8, 3, 3});
    return std::pair{std::vector<T>{x}, std::function<T()>([=] { return haar_idwt(x); })};
  });
  leaf("dice_loss", [](Rng& rng) {
    auto p = random_tensor(rng, {2, 1, 4, 4}, 0.05, 0.95);
    T g = T::zeros({2, 1, 4, 4});
    for (auto& v : g.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    return std::pair{std::vector<T>{p}, std::function<T()>([=] { return dice_loss(p, g, 1e-5); })};
  });

  module("ss2d", true, {2, 3, 4, 5}, [](ParamScope<D> s) {
    Ss2dParams<D> p;
    for (std::size_t k = 0; k < 4; ++k) {
      auto sp = SsmParams<D>::init(3, 4, s.rng());
      auto d = s.sub("d" + std::to_string(k));
      p[k] = {d.adopt("a_log", sp.a_log), d.adopt("d_skip", sp.d_skip), d.adopt("proj", sp.proj),
              d.adopt("dt_bias", sp.dt_bias)};
    }
    return std::function<T(const T&)>([p](const T& x) { return ss2d_forward(x, p); });
  });
  module("wtconv", true, {2, 3, 6, 5}, [](ParamScope<D> s) {
    WtConvParams<D> p{s.weight("base_dw", {3, 1, 3, 3}), s.weight("subband_dw", {12, 1, 3, 3})};
    return std::function<T(const T&)>([p](const T& x) { return wtconv_forward(x, p); });
  });
  module("eca", true, {2, 6, 4, 4}, [](ParamScope<D> s) {
    auto k = s.uniform("k", {eca_kernel_size(6)}, 1.0);
    return std::function<T(const T&)>([k](const T& x) { return eca_forward(x, k); });
  });
  module("cam", true, {2, 8, 4, 4}, [](ParamScope<D> s) {
    auto p = make_cam(s, 8);
    return std::function<T(const T&)>([p](const T& x) { return cam_forward(x, p); });
  });
  module("sam", true, {2, 3, 6, 6}, [](ParamScope<D> s) {
    auto p = make_sam(s);
    return std::function<T(const T&)>([p](const T& x) { return sam_forward(x, p); });
  });
  module("ffrm", true, {2, 4, 5, 5}, [](ParamScope<D> s) {
    auto cam = make_cam(s.sub("cam"), 4);
    auto sam = make_sam(s.sub("sam"));
    return std::function<T(const T&)>([cam, sam](const T& x) { return ffrm_forward(x, cam, sam); });
  });
  reg["attention_gate"] = {true, [](Rng& rng) {
                             ParamStore<D> store;
                             ParamScope<D> s(store, rng);
                             AgParams<D> p{s.weight("wg", {2, 4, 1, 1}), s.weight("wx", {2, 3, 1, 1}),
                                           s.uniform("b_int", {2}, 0.5), s.weight("psi", {1, 2, 1, 1}),
                                           s.uniform("b_psi", {1}, 0.5)};
                             auto skip = random_tensor(rng, {2, 3, 4, 4});
                             auto gate = random_tensor(rng, {2, 4, 4, 4});
                             T r = random_tensor(rng, {2, 3, 4, 4});
                             auto wrt = store.trainable();
                             wrt.push_back(skip);
                             wrt.push_back(gate);
                             return finish("attention_gate", true,
                                           compare_gradients([&] { return project(attention_gate(skip, gate, p), r); },
                                                             wrt, rng, 32));
                           }};
  module("qseme", true, {2, 1, 8, 8}, [](ParamScope<D> s) {
    auto p = QsemeParams<D>::make(s, 4);
    return std::function<T(const T&)>([p](const T& x) { return qseme_forward(x, p); });
  });
  module("msdam", true, {1, 4, 8, 8}, [](ParamScope<D> s) {
    auto p = MsdamParams<D>::make(s, 4);
    return std::function<T(const T&)>([p](const T& x) { return msdam_forward(x, p); });
  });
  module("davssm", true, {2, 8, 4, 4}, [](ParamScope<D> s) {
    auto p = DavssmParams<D>::make(s, 8, 4, true);
    return std::function<T(const T&)>([p](const T& x) { return davssm_forward(x, p); });
  });
  module("octa_mamba_block", true, {1, 8, 6, 6}, [](ParamScope<D> s) {
    ModelConfig cfg;
    cfg.ssm_state = 4;
    auto p = BlockParams<D>::make(s, 8, cfg);
    return std::function<T(const T&)>([p](const T& x) { return octa_mamba_block(x, p); });
  });
  reg["network"] = {true, [](Rng& rng) {
                      ModelConfig cfg;
                      cfg.base_channels = 8;
                      cfg.depth = 2;
                      cfg.ssm_state = 4;
                      cfg.image_size = 16;
                      OctaMambaNet<D> net(cfg);
                      auto x = random_tensor(rng, {2, 1, 16, 16}, 0, 1);
                      T g = T::zeros({2, 1, 16, 16});
                      for (auto& v : g.data()) v = rng.uniform() < 0.2 ? 1.0 : 0.0;
                      auto wrt = net.params().trainable();
                      wrt.push_back(x);
                      return finish("network", true,
                                    compare_gradients(
                                        [&] { return dice_loss(net.forward(x, NormMode::Eval), g, 1e-5); },
                                        wrt, rng, 2));
                    }};
  return reg;
}

}  // namespace detail

inline const std::map<std::string, detail::CheckSpec>& gradcheck_registry() {
  static const auto reg = detail::build_registry();
  return reg;
}

inline std::vector<std::string> gradcheck_names() {
  std::vector<std::string> out;
  for (const auto& [name, _] : gradcheck_registry()) out.push_back(name);
  return out;
}

/// Runs one registered check; seeded from its name so results do not depend
/// on which other checks ran.
inline GradCheckResult gradcheck(const std::string& name, std::uint64_t seed = 0) {
  const auto& reg = gradcheck_registry();
  auto it = reg.find(name);
  if (it == reg.end()) throw ValidationError("gradcheck: unknown module '" + name + "'");
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : name) h = (h ^ ch) * 1099511628211ull;
  Rng rng(seed ^ h);
  return it->second.run(rng);
}

}  // namespace octamamba
