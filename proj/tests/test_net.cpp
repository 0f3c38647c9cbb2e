#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include <octamamba/octamamba.hpp>

#include "param_oracle.hpp"

namespace om = octamamba;
using om::Shape;
using TD = om::Tensor<double>;

namespace {

TD random_tensor(om::Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  TD t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

void fill(TD t, double v) {
  for (auto& x : t.data()) x = v;
}

TD dirac(std::size_t c, std::size_t kh, std::size_t kw) {
  TD w(Shape{c, 1, kh, kw});
  for (std::size_t k = 0; k < c; ++k) w.data()[k * kh * kw + (kh / 2) * kw + kw / 2] = 1;
  return w;
}

void max_diff_le(const TD& a, const TD& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  EXPECT_LE(m, tol);
}

om::ModelConfig small_config(std::size_t c = 4, std::size_t depth = 2, std::size_t size = 16) {
  om::ModelConfig cfg;
  cfg.base_channels = c;
  cfg.depth = depth;
  cfg.ssm_state = 4;
  cfg.image_size = size;
  return cfg;
}

}  // namespace

TEST(ParamCount, SmallExamples) {
  om::ParamStore<double> store;
  om::Rng rng(0);
  om::ParamScope<double> s(store, rng);
  s.weight("dw", {8, 1, 3, 3});
  EXPECT_EQ(om::param_count(store), 72u);

  om::ParamStore<double> lin;
  om::ParamScope<double> l(lin, rng);
  l.weight("w", {8, 4});
  l.constant("b", {8}, 0.0);
  l.constant("running", {8}, 0.0, om::ParamKind::Buffer);
  EXPECT_EQ(om::param_count(lin), 40u);
  EXPECT_THROW(l.constant("b", {8}, 0.0), om::Error);
}

TEST(ParamCount, MatchesLayerFormulas) {
  for (bool q : {true, false})
    for (bool m : {true, false})
      for (bool f : {true, false}) {
        auto cfg = small_config(8, 3, 32);
        cfg.use_qseme = q;
        cfg.use_msdam = m;
        cfg.use_ffrm = f;
        om::OctaMambaNet<float> net(cfg);
        EXPECT_EQ(om::param_count(net.params()), om_test::param_oracle(cfg)) << q << m << f;
      }
  om::ModelConfig def;
  om::OctaMambaNet<float> net(def);
  EXPECT_EQ(om::param_count(net.params()), om_test::param_oracle(def));
}

TEST(ParamCount, EachAblationReduces) {
  om::ModelConfig full;
  full.base_channels = 16;
  const std::size_t base = om::param_count(om::OctaMambaNet<float>(full).params());
  for (int flag = 0; flag < 3; ++flag) {
    auto cfg = full;
    (flag == 0 ? cfg.use_qseme : flag == 1 ? cfg.use_msdam : cfg.use_ffrm) = false;
    EXPECT_LT(om::param_count(om::OctaMambaNet<float>(cfg).params()), base) << flag;
  }
  auto none = full;
  none.use_qseme = none.use_msdam = none.use_ffrm = false;
  EXPECT_LT(om::param_count(om::OctaMambaNet<float>(none).params()), base);
}

TEST(ParamStore, HierarchicalUniqueNamesInOrder) {
  om::OctaMambaNet<float> net(small_config());
  const auto& e = net.params().entries();
  ASSERT_FALSE(e.empty());
  EXPECT_EQ(e.front().name, "input_norm.mean");
  EXPECT_NE(net.params().find("enc1.block.msdam.scale3.dw_row"), nullptr);
  EXPECT_NE(net.params().find("dec1.gate.wg"), nullptr);
  EXPECT_EQ(net.params().find("enc1.bn.running_var")->kind, om::ParamKind::Buffer);
  std::set<std::string> names;
  for (const auto& x : e) EXPECT_TRUE(names.insert(x.name).second) << x.name;
}

TEST(Qseme, ShapeZeroAndErrors) {
  om::ParamStore<double> store;
  om::Rng rng(1);
  auto p = om::QsemeParams<double>::make(om::ParamScope<double>(store, rng), 6);
  EXPECT_EQ(om::qseme_forward(random_tensor(rng, {1, 1, 32, 32}), p).shape(), (Shape{1, 6, 32, 32}));
  auto z = om::qseme_forward(TD(Shape{1, 1, 8, 8}), p);
  for (double v : z.vec()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(om::qseme_forward(TD(Shape{1, 2, 8, 8}), p), om::ShapeError);
}

TEST(Qseme, MatchesCompositionOracle) {
  om::ParamStore<double> store;
  om::Rng rng(2);
  const std::size_t c = 4;
  auto p = om::QsemeParams<double>::make(om::ParamScope<double>(store, rng), c);
  auto x = random_tensor(rng, {2, 1, 8, 8});
  auto pw = [](const TD& t, const TD& w) {
    return om::conv2d(t, w, nullptr, om::ConvSpec::pointwise(w.dim(1), w.dim(0)));
  };
  auto f = pw(x, p.pw_in);
  auto streams = om::concat_channels<double>(
      {pw(om::wtconv_forward(pw(f, p.pw_pre), p.wt), p.pw_post), om::pool2d(f, om::PoolKind::Max, 3, 1, 1),
       om::pool2d(f, om::PoolKind::Avg, 3, 1, 1), f});
  EXPECT_EQ(streams.dim(1), 4 * c);
  max_diff_le(om::qseme_forward(x, p), om::cam_forward(pw(streams, p.pw_fuse), p.cam), 0.0);
}

TEST(Msdam, ShapeAndZero) {
  om::ParamStore<double> store;
  om::Rng rng(3);
  auto p = om::MsdamParams<double>::make(om::ParamScope<double>(store, rng), 8);
  EXPECT_EQ(om::msdam_forward(random_tensor(rng, {1, 8, 16, 16}), p).shape(), (Shape{1, 8, 16, 16}));
  auto z = om::msdam_forward(TD(Shape{1, 8, 6, 6}), p);
  for (double v : z.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Msdam, DiracKernelsZeroEca) {
  // Dirac branches and identity entry make every scale equal x; a zero ECA
  // kernel halves it, so G1 = G2 = x^3 / 2. The exit conv is checked against
  // a direct convolution of [x^3/2, x^3/2, x].
  om::ParamStore<double> store;
  om::Rng rng(4);
  const std::size_t c = 3;
  auto p = om::MsdamParams<double>::make(om::ParamScope<double>(store, rng), c);
  fill(p.entry, 0);
  for (std::size_t k = 0; k < c; ++k) p.entry.data()[k * c + k] = 1;
  for (auto& b : p.branches) {
    auto r = dirac(c, 1, b.size), q = dirac(c, b.size, 1), d = dirac(c, 3, 3);
    std::copy(r.vec().begin(), r.vec().end(), b.row.data().begin());
    std::copy(q.vec().begin(), q.vec().end(), b.col.data().begin());
    std::copy(d.vec().begin(), d.vec().end(), b.dil.data().begin());
  }
  fill(p.eca, 0);
  auto x = random_tensor(rng, {1, c, 7, 7});
  TD cube(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) cube.data()[i] = x[i] * x[i] * x[i] / 2;
  auto stacked = om::concat_channels<double>({cube, cube, x});
  auto expect = om::conv2d(stacked, p.exit, nullptr, om::ConvSpec::same(3 * c, c, 3, 3));
  max_diff_le(om::msdam_forward(x, p), expect, 1e-14);
}

TEST(Msdam, MatchesCompositionOracle) {
  om::ParamStore<double> store;
  om::Rng rng(5);
  const std::size_t c = 4;
  auto p = om::MsdamParams<double>::make(om::ParamScope<double>(store, rng), c);
  auto x = random_tensor(rng, {2, c, 9, 9});
  auto xp = om::conv2d(x, p.entry, nullptr, om::ConvSpec::pointwise(c, c));
  std::vector<TD> scales;
  for (const auto& b : p.branches) {
    auto y = om::conv2d(xp, b.row, nullptr, om::ConvSpec::depthwise(c, 1, b.size));
    y = om::conv2d(y, b.col, nullptr, om::ConvSpec::depthwise(c, b.size, 1));
    scales.push_back(om::conv2d(y, b.dil, nullptr, om::ConvSpec::depthwise(c, 3, 3, b.size)));
  }
  auto ret = om::eca_forward(xp, p.eca);
  auto g1 = om::mul(om::mul(scales[0], ret), scales[1]);
  auto g2 = om::mul(om::mul(scales[1], ret), scales[2]);
  auto expect = om::conv2d(om::concat_channels<double>({g1, g2, xp}), p.exit, nullptr,
                           om::ConvSpec::same(3 * c, c, 3, 3));
  max_diff_le(om::msdam_forward(x, p), expect, 0.0);
}

TEST(Davssm, ZeroWeightsGiveResidual) {
  om::ParamStore<double> store;
  om::Rng rng(6);
  auto p = om::DavssmParams<double>::make(om::ParamScope<double>(store, rng), 4, 4, true);
  for (const auto& e : store.entries()) fill(e.tensor, 0);
  auto x = random_tensor(rng, {2, 4, 5, 5});
  auto y = om::davssm_forward(x, p);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.vec(), x.vec());
}

TEST(Davssm, MatchesCompositionOracle) {
  for (bool ffrm : {true, false}) {
    om::ParamStore<double> store;
    om::Rng rng(7);
    const std::size_t c = 4;
    auto p = om::DavssmParams<double>::make(om::ParamScope<double>(store, rng), c, 3, ffrm);
    for (auto* t : {&p.ln_in.gamma, &p.ln_in.beta, &p.ln_out.gamma, &p.ln_out.beta})
      for (auto& v : t->data()) v = rng.uniform(0.5, 1.5);
    auto x = random_tensor(rng, {1, c, 4, 6});
    auto tokens = om::layer_norm(om::nchw_to_nhwc(x), p.ln_in.gamma, p.ln_in.beta);
    TD w1(Shape{c, c}), w2(Shape{c, c});
    std::copy_n(p.in_proj.vec().begin(), c * c, w1.data().begin());
    std::copy_n(p.in_proj.vec().begin() + c * c, c * c, w2.data().begin());
    auto f1 = om::nhwc_to_nchw(om::linear(tokens, w1));
    auto f2 = om::nhwc_to_nchw(om::linear(tokens, w2));
    auto dw = om::silu(om::conv2d(f1, p.dw, nullptr, om::ConvSpec::depthwise(c, 3, 3)));
    auto extract = om::channel_layer_norm(om::ss2d_forward(dw, p.ss2d), p.ln_out);
    auto select = ffrm ? om::ffrm_forward(f2, *p.cam, *p.sam) : om::silu(f2);
    auto mixed = om::nhwc_to_nchw(om::linear(om::nchw_to_nhwc(om::mul(extract, select)), p.out_proj));
    max_diff_le(om::davssm_forward(x, p), om::add(mixed, x), 1e-13);
  }
}

TEST(Block, ResidualAndScaleCases) {
  om::ParamStore<double> store;
  om::Rng rng(8);
  auto cfg = small_config();
  auto p = om::BlockParams<double>::make(om::ParamScope<double>(store, rng), 4, cfg);
  auto x = random_tensor(rng, {1, 4, 6, 6});
  EXPECT_EQ(om::octa_mamba_block(x, p).shape(), x.shape());

  auto inner = [&] {
    return om::davssm_forward(om::msdam_forward(om::gelu(om::channel_layer_norm(x, p.ln)), *p.msdam),
                              p.davssm);
  };
  fill(p.res_scale, 0);
  max_diff_le(om::octa_mamba_block(x, p), inner(), 0.0);

  // Unit scale with the MSDAM exit and DAVSSM output projection zeroed: the
  // inner chain is MSDAM -> 0, DAVSSM(0) -> 0, leaving y = x.
  fill(p.res_scale, 1);
  fill(p.msdam->exit, 0);
  fill(p.davssm.out_proj, 0);
  const auto zeroed = inner();
  for (double v : zeroed.vec()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(om::octa_mamba_block(x, p).vec(), x.vec());
}

TEST(Block, AblationWithoutMsdam) {
  om::ParamStore<double> store;
  om::Rng rng(9);
  auto cfg = small_config();
  cfg.use_msdam = false;
  cfg.use_ffrm = false;
  auto p = om::BlockParams<double>::make(om::ParamScope<double>(store, rng), 4, cfg);
  EXPECT_FALSE(p.msdam.has_value());
  EXPECT_FALSE(p.davssm.cam.has_value());
  auto x = random_tensor(rng, {1, 4, 4, 4});
  auto expect = om::add(om::davssm_forward(om::gelu(om::channel_layer_norm(x, p.ln)), p.davssm), x);
  max_diff_le(om::octa_mamba_block(x, p), expect, 0.0);
}

TEST(Network, ToyShapeRangeAndTrace) {
  auto cfg = small_config(8, 3, 64);
  om::OctaMambaNet<float> net(cfg);
  om::Rng rng(10);
  om::Tensor<float> x(Shape{1, 1, 64, 64});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
  om::ForwardTrace trace;
  om::NoGradGuard ng;
  auto y = net.forward(x, om::NormMode::Eval, &trace);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 64, 64}));
  for (float v : y.vec()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  ASSERT_EQ(trace.encoder_outputs.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(trace.encoder_outputs[i], (Shape{1, 8u << (i + 1), 64u >> (i + 1), 64u >> (i + 1)}));
}

TEST(Network, FullSizeWithReducedWidth) {
  auto cfg = small_config(4, 3, 224);
  om::OctaMambaNet<float> net(cfg);
  om::Tensor<float> x(Shape{1, 1, 224, 224}, 0.3f);
  om::NoGradGuard ng;
  om::ForwardTrace trace;
  auto y = net.forward(x, om::NormMode::Eval, &trace);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 224, 224}));
  EXPECT_EQ(trace.encoder_outputs.back(), (Shape{1, 32, 28, 28}));
}

TEST(Network, Deterministic) {
  auto cfg = small_config(4, 2, 16);
  om::OctaMambaNet<double> a(cfg), b(cfg);
  EXPECT_EQ(a.params().snapshot(), b.params().snapshot());
  om::Rng rng(11);
  auto x = random_tensor(rng, {2, 1, 16, 16}, 0, 1);
  EXPECT_EQ(a.forward(x, om::NormMode::Eval).vec(), b.forward(x, om::NormMode::Eval).vec());
  EXPECT_EQ(a.forward(x, om::NormMode::Train).vec(), a.forward(x, om::NormMode::Train).vec());
  cfg.seed = 1;
  om::OctaMambaNet<double> c(cfg);
  EXPECT_NE(a.params().snapshot(), c.params().snapshot());
}

TEST(Network, SizeErrors) {
  om::ModelConfig cfg;
  cfg.image_size = 100;
  EXPECT_THROW(cfg.validate(), om::ShapeError);
  om::OctaMambaNet<float> net(small_config(4, 3, 64));
  EXPECT_THROW(net.forward(om::Tensor<float>(Shape{1, 1, 60, 60}), om::NormMode::Eval), om::ShapeError);
  EXPECT_THROW(net.forward(om::Tensor<float>(Shape{1, 2, 64, 64}), om::NormMode::Eval), om::ShapeError);
}

class NetGradcheck : public ::testing::TestWithParam<const char*> {};

TEST_P(NetGradcheck, WithinTolerance) {
  auto r = om::gradcheck(GetParam(), 0);
  EXPECT_TRUE(r.passed()) << r.name << " err " << r.max_rel_error;
  EXPECT_LE(r.threshold, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Net, NetGradcheck,
                         ::testing::Values("qseme", "msdam", "davssm", "octa_mamba_block", "network"));
