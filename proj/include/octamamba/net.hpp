#pragma once

// OCTAMamba: QSEME stem, OCTA-Mamba blocks (MSDAM + DAVSSM) and an
// attention-gated U-shaped encoder/decoder with a sigmoid head.

#include <optional>
#include <string>

#include "octamamba/activation.hpp"
#include "octamamba/attention.hpp"
#include "octamamba/conv.hpp"
#include "octamamba/norm.hpp"
#include "octamamba/param_store.hpp"
#include "octamamba/ssm_scan.hpp"
#include "octamamba/wavelet.hpp"

namespace octamamba {

struct ModelConfig {
  std::size_t base_channels = 32;
  std::size_t depth = 3;
  std::size_t ssm_state = 8;
  std::size_t image_size = 224;
  std::string gelu_kind = "tanh";
  bool use_qseme = true;
  bool use_msdam = true;
  bool use_ffrm = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (base_channels == 0 || depth == 0 || ssm_state == 0 || image_size == 0) {
      throw Error("model config: sizes must be positive");
    }
    if (image_size % (std::size_t{1} << depth) != 0) {
      throw ShapeError("model config: image_size " + std::to_string(image_size) +
                       " is not divisible by 2^depth");
    }
    if (gelu_kind != "tanh") throw Error("model config: only gelu_kind \"tanh\" is supported");
  }
};

template <typename T>
struct LnParams {
  Tensor<T> gamma, beta;

  static LnParams make(ParamScope<T> s, std::size_t c) {
    return {s.constant("gamma", {c}, T(1)), s.constant("beta", {c}, T(0))};
  }
};

template <typename T>
struct BnParams {
  Tensor<T> gamma, beta, running_mean, running_var;

  static BnParams make(ParamScope<T> s, std::size_t c) {
    return {s.constant("gamma", {c}, T(1)), s.constant("beta", {c}, T(0)),
            s.constant("running_mean", {c}, T(0), ParamKind::Buffer),
            s.constant("running_var", {c}, T(1), ParamKind::Buffer)};
  }
};

template <typename T>
Tensor<T> apply_bn(const Tensor<T>& x, const BnParams<T>& p, NormMode mode) {
  Tensor<T> rm = p.running_mean, rv = p.running_var;
  return batch_norm(x, p.gamma, p.beta, rm, rv, mode);
}

/// LayerNorm across channels of an NCHW map.
template <typename T>
Tensor<T> channel_layer_norm(const Tensor<T>& x, const LnParams<T>& p) {
  return nhwc_to_nchw(layer_norm(nchw_to_nhwc(x), p.gamma, p.beta));
}

template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, const Tensor<T>& w) {
  return conv2d(x, w, nullptr, ConvSpec::pointwise(w.dim(1), w.dim(0)));
}

template <typename T>
CamParams<T> make_cam(ParamScope<T> s, std::size_t c) {
  const std::size_t r = 4, hidden = std::max<std::size_t>(1, c / r);
  return {s.weight("fc1", {hidden, c}), s.weight("fc2", {c, hidden}), r};
}

template <typename T>
SamParams<T> make_sam(ParamScope<T> s) {
  return {s.weight("conv", {1, 2, 7, 7})};
}

// ---------------------------------------------------------------- QSEME

template <typename T>
struct QsemeParams {
  Tensor<T> pw_in;    // [C,1,1,1]
  Tensor<T> pw_pre;   // [C,C,1,1]
  WtConvParams<T> wt;
  Tensor<T> pw_post;  // [C,C,1,1]
  Tensor<T> pw_fuse;  // [C,4C,1,1]
  CamParams<T> cam;

  static QsemeParams make(ParamScope<T> s, std::size_t c) {
    QsemeParams p;
    p.pw_in = s.weight("pw_in", {c, 1, 1, 1});
    p.pw_pre = s.weight("wt_stream.pw_pre", {c, c, 1, 1});
    p.wt.base_dw = s.weight("wt_stream.wtconv.base_dw", {c, 1, 3, 3});
    p.wt.subband_dw = s.weight("wt_stream.wtconv.subband_dw", {4 * c, 1, 3, 3});
    p.pw_post = s.weight("wt_stream.pw_post", {c, c, 1, 1});
    p.pw_fuse = s.weight("pw_fuse", {c, 4 * c, 1, 1});
    p.cam = make_cam(s.sub("cam"), c);
    return p;
  }
};

template <typename T>
Tensor<T> qseme_forward(const Tensor<T>& x, const QsemeParams<T>& p) {
  detail::require_rank(x.shape(), 4, "qseme_forward");
  if (x.dim(1) != 1) throw ShapeError("qseme_forward: expects a single input channel");
  auto f = pointwise(x, p.pw_in);
  auto wtpf = pointwise(wtconv_forward(pointwise(f, p.pw_pre), p.wt), p.pw_post);
  auto mppf = pool2d(f, PoolKind::Max, 3, 1, 1);
  auto appf = pool2d(f, PoolKind::Avg, 3, 1, 1);
  auto fused = pointwise(concat_channels<T>({wtpf, mppf, appf, f}), p.pw_fuse);
  return cam_forward(fused, p.cam);
}

// ---------------------------------------------------------------- MSDAM

template <typename T>
struct MsdamBranch {
  std::size_t size;
  Tensor<T> row;  // [C,1,1,i]
  Tensor<T> col;  // [C,1,i,1]
  Tensor<T> dil;  // [C,1,3,3], dilation i
};

template <typename T>
struct MsdamParams {
  Tensor<T> entry;  // [C,C,1,1]
  std::array<MsdamBranch<T>, 3> branches;
  Tensor<T> eca;    // [k]
  Tensor<T> exit;   // [C,3C,3,3]

  static MsdamParams make(ParamScope<T> s, std::size_t c) {
    MsdamParams p;
    p.entry = s.weight("entry", {c, c, 1, 1});
    const std::size_t sizes[3] = {3, 5, 7};
    for (std::size_t b = 0; b < 3; ++b) {
      const std::size_t i = sizes[b];
      auto bs = s.sub("scale" + std::to_string(i));
      p.branches[b] = {i, bs.weight("dw_row", {c, 1, 1, i}), bs.weight("dw_col", {c, 1, i, 1}),
                       bs.weight("dw_dil", {c, 1, 3, 3})};
    }
    const std::size_t k = eca_kernel_size(c);
    p.eca = s.uniform("eca", {k}, 1.0 / std::sqrt(static_cast<double>(k)));
    p.exit = s.weight("exit", {c, 3 * c, 3, 3});
    return p;
  }
};

template <typename T>
Tensor<T> msdam_branch(const Tensor<T>& x, const MsdamBranch<T>& b) {
  const std::size_t c = x.dim(1), i = b.size;
  auto y = conv2d(x, b.row, nullptr, ConvSpec::depthwise(c, 1, i));
  y = conv2d(y, b.col, nullptr, ConvSpec::depthwise(c, i, 1));
  return conv2d(y, b.dil, nullptr, ConvSpec::depthwise(c, 3, 3, i));
}

template <typename T>
Tensor<T> msdam_forward(const Tensor<T>& x, const MsdamParams<T>& p) {
  detail::require_rank(x.shape(), 4, "msdam_forward");
  const std::size_t c = x.dim(1);
  auto xp = pointwise(x, p.entry);
  auto s3 = msdam_branch(xp, p.branches[0]);
  auto s5 = msdam_branch(xp, p.branches[1]);
  auto s7 = msdam_branch(xp, p.branches[2]);
  auto retention = eca_forward(xp, p.eca);
  auto g1 = mul(mul(s3, retention), s5);
  auto g2 = mul(mul(s5, retention), s7);
  return conv2d(concat_channels<T>({g1, g2, xp}), p.exit, nullptr, ConvSpec::same(3 * c, c, 3, 3));
}

// ---------------------------------------------------------------- DAVSSM

template <typename T>
struct DavssmParams {
  LnParams<T> ln_in;
  Tensor<T> in_proj;   // [2C,C]
  Tensor<T> dw;        // [C,1,3,3]
  Ss2dParams<T> ss2d;
  LnParams<T> ln_out;
  std::optional<CamParams<T>> cam;  // absent without FFRM
  std::optional<SamParams<T>> sam;
  Tensor<T> out_proj;  // [C,C]

  static DavssmParams make(ParamScope<T> s, std::size_t c, std::size_t state, bool use_ffrm) {
    DavssmParams p;
    p.ln_in = LnParams<T>::make(s.sub("ln_in"), c);
    p.in_proj = s.weight("in_proj", {2 * c, c});
    p.dw = s.weight("dw", {c, 1, 3, 3});
    static const char* dirs[4] = {"row_fwd", "row_bwd", "col_fwd", "col_bwd"};
    for (std::size_t k = 0; k < 4; ++k) {
      auto ds = s.sub(std::string("ss2d.") + dirs[k]);
      auto sp = SsmParams<T>::init(c, state, ds.rng());
      p.ss2d[k].a_log = ds.adopt("a_log", sp.a_log);
      p.ss2d[k].d_skip = ds.adopt("d_skip", sp.d_skip);
      p.ss2d[k].proj = ds.adopt("proj", sp.proj);
      p.ss2d[k].dt_bias = ds.adopt("dt_bias", sp.dt_bias);
    }
    p.ln_out = LnParams<T>::make(s.sub("ln_out"), c);
    if (use_ffrm) {
      p.cam = make_cam(s.sub("ffrm.cam"), c);
      p.sam = make_sam(s.sub("ffrm.sam"));
    }
    p.out_proj = s.weight("out_proj", {c, c});
    return p;
  }
};

template <typename T>
Tensor<T> davssm_forward(const Tensor<T>& x, const DavssmParams<T>& p) {
  detail::require_rank(x.shape(), 4, "davssm_forward");
  const std::size_t c = x.dim(1);
  auto tokens = layer_norm(nchw_to_nhwc(x), p.ln_in.gamma, p.ln_in.beta);
  auto proj = linear(tokens, p.in_proj);
  auto f1 = nhwc_to_nchw(slice_last(proj, 0, c));
  auto f2 = slice_last(proj, c, 2 * c);
  auto scanned = ss2d_forward(silu(conv2d(f1, p.dw, nullptr, ConvSpec::depthwise(c, 3, 3))), p.ss2d);
  auto extract = layer_norm(nchw_to_nhwc(scanned), p.ln_out.gamma, p.ln_out.beta);
  Tensor<T> select = p.cam ? nchw_to_nhwc(ffrm_forward(nhwc_to_nchw(f2), *p.cam, *p.sam))
                           : silu(f2);
  return add(nhwc_to_nchw(linear(mul(extract, select), p.out_proj)), x);
}

// ---------------------------------------------------------------- block

template <typename T>
struct BlockParams {
  LnParams<T> ln;
  std::optional<MsdamParams<T>> msdam;
  DavssmParams<T> davssm;
  Tensor<T> res_scale;  // [C]

  static BlockParams make(ParamScope<T> s, std::size_t c, const ModelConfig& cfg) {
    BlockParams p;
    p.ln = LnParams<T>::make(s.sub("ln"), c);
    if (cfg.use_msdam) p.msdam = MsdamParams<T>::make(s.sub("msdam"), c);
    p.davssm = DavssmParams<T>::make(s.sub("davssm"), c, cfg.ssm_state, cfg.use_ffrm);
    p.res_scale = s.constant("res_scale", {c}, T(1));
    return p;
  }
};

/// y = DAVSSM(MSDAM(GELU(LN(x)))) + s * x.
template <typename T>
Tensor<T> octa_mamba_block(const Tensor<T>& x, const BlockParams<T>& p) {
  auto h = gelu(channel_layer_norm(x, p.ln));
  if (p.msdam) h = msdam_forward(h, *p.msdam);
  return add(davssm_forward(h, p.davssm), scale_channels(x, p.res_scale));
}

// ---------------------------------------------------------------- network

template <typename T>
struct EncoderStage {
  BlockParams<T> block;
  BnParams<T> bn;
  Tensor<T> down;  // [2C,C,1,1]
};

template <typename T>
struct DecoderStage {
  Tensor<T> up;     // [C,2C,1,1]
  AgParams<T> gate;
  Tensor<T> merge;  // [C,2C,1,1]
  BnParams<T> bn;
  BlockParams<T> block;
};

/// Shapes recorded during a forward pass.
struct ForwardTrace {
  std::vector<Shape> encoder_outputs;  // after each stage's channel doubling
};

template <typename T>
class OctaMambaNet {
 public:
  explicit OctaMambaNet(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    ParamScope<T> root(store_, rng);
    const std::size_t c0 = cfg_.base_channels;
    input_mean_ = root.constant("input_norm.mean", {1}, T(0), ParamKind::Buffer);
    input_std_ = root.constant("input_norm.std", {1}, T(1), ParamKind::Buffer);
    if (cfg_.use_qseme) {
      qseme_ = QsemeParams<T>::make(root.sub("stem"), c0);
    } else {
      stem_pw_ = root.weight("stem.pw", {c0, 1, 1, 1});
    }
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      const std::size_t c = c0 << i;
      auto s = root.sub("enc" + std::to_string(i + 1));
      EncoderStage<T> e;
      e.block = BlockParams<T>::make(s.sub("block"), c, cfg_);
      e.bn = BnParams<T>::make(s.sub("bn"), c);
      e.down = s.weight("down", {2 * c, c, 1, 1});
      enc_.push_back(std::move(e));
    }
    for (std::size_t i = cfg_.depth; i-- > 0;) {
      const std::size_t c = c0 << i, cint = std::max<std::size_t>(1, c / 2);
      auto s = root.sub("dec" + std::to_string(i + 1));
      DecoderStage<T> d;
      d.up = s.weight("up", {c, 2 * c, 1, 1});
      auto g = s.sub("gate");
      d.gate.wg = g.weight("wg", {cint, c, 1, 1});
      d.gate.wx = g.weight("wx", {cint, c, 1, 1});
      d.gate.b_int = g.constant("b_int", {cint}, T(0));
      d.gate.psi = g.weight("psi", {1, cint, 1, 1});
      d.gate.b_psi = g.constant("b_psi", {1}, T(0));
      d.merge = s.weight("merge", {c, 2 * c, 1, 1});
      d.bn = BnParams<T>::make(s.sub("bn"), c);
      d.block = BlockParams<T>::make(s.sub("block"), c, cfg_);
      dec_.push_back(std::move(d));
    }
    head_w_ = root.weight("head.w", {1, c0, 1, 1});
    head_b_ = root.constant("head.b", {1}, T(0));
  }

  OctaMambaNet(const OctaMambaNet&) = delete;
  OctaMambaNet& operator=(const OctaMambaNet&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  void set_input_norm(T mean, T stddev) {
    input_mean_.data()[0] = mean;
    input_std_.data()[0] = stddev;
  }

  /// Probabilities [N,1,S,S] for input [N,1,S,S].
  Tensor<T> forward(const Tensor<T>& x, NormMode mode, ForwardTrace* trace = nullptr) const {
    return sigmoid(logits(x, mode, trace));
  }

  Tensor<T> logits(const Tensor<T>& x, NormMode mode, ForwardTrace* trace = nullptr) const {
    detail::require_rank(x.shape(), 4, "network_forward");
    if (x.dim(1) != 1) throw ShapeError("network_forward: expects one input channel");
    const std::size_t div = std::size_t{1} << cfg_.depth;
    if (x.dim(2) % div || x.dim(3) % div) {
      throw ShapeError("network_forward: spatial size " + shape_str(x.shape()) +
                       " not divisible by " + std::to_string(div));
    }
    const T mean = input_mean_[0], inv_std = T(1) / input_std_[0];
    auto h = detail::unary(
        x, [mean, inv_std](T v) { return (v - mean) * inv_std; },
        [inv_std](T, T) { return inv_std; });
    h = qseme_ ? qseme_forward(h, *qseme_) : pointwise(h, stem_pw_);
    std::vector<Tensor<T>> skips;
    for (const auto& e : enc_) {
      auto f = relu(apply_bn(octa_mamba_block(h, e.block), e.bn, mode));
      skips.push_back(f);
      h = pointwise(pool2d(f, PoolKind::Max, 2, 2, 0), e.down);
      if (trace) trace->encoder_outputs.push_back(h.shape());
    }
    for (std::size_t k = 0; k < dec_.size(); ++k) {
      const auto& d = dec_[k];
      const auto& skip = skips[skips.size() - 1 - k];
      auto up = pointwise(upsample_bilinear(h), d.up);
      auto gated = attention_gate(skip, up, d.gate);
      auto merged = pointwise(concat_channels<T>({gated, up}), d.merge);
      h = octa_mamba_block(relu(apply_bn(merged, d.bn, mode)), d.block);
    }
    return conv2d(h, head_w_, &head_b_, ConvSpec::pointwise(cfg_.base_channels, 1));
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  Tensor<T> input_mean_, input_std_;
  std::optional<QsemeParams<T>> qseme_;
  Tensor<T> stem_pw_;
  std::vector<EncoderStage<T>> enc_;
  std::vector<DecoderStage<T>> dec_;
  Tensor<T> head_w_, head_b_;
};

}  // namespace octamamba
