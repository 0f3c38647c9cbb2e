#include <gtest/gtest.h>

#include <cmath>

#include <octamamba/octamamba.hpp>

namespace om = octamamba;
using om::Shape;
using TD = om::Tensor<double>;

namespace {

TD random_tensor(om::Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  TD t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Plain loop nest, accumulation over input channel, kernel row, kernel column.
TD conv_oracle(const TD& x, const TD& w, const om::ConvSpec& s) {
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const std::size_t ho = s.out_size(h, s.kernel_h, s.pad_h), wo = s.out_size(wd, s.kernel_w, s.pad_w);
  const std::size_t cin_g = s.in_channels / s.groups, cout_g = s.out_channels / s.groups;
  TD y(Shape{n, s.out_channels, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < s.out_channels; ++co)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          double acc = 0;
          for (std::size_t cl = 0; cl < cin_g; ++cl) {
            const std::size_t ci = co / cout_g * cin_g + cl;
            for (std::size_t i = 0; i < s.kernel_h; ++i)
              for (std::size_t j = 0; j < s.kernel_w; ++j) {
                const auto r = static_cast<std::ptrdiff_t>(oh * s.stride + i * s.dilation) -
                               static_cast<std::ptrdiff_t>(s.pad_h);
                const auto c = static_cast<std::ptrdiff_t>(ow * s.stride + j * s.dilation) -
                               static_cast<std::ptrdiff_t>(s.pad_w);
                if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(h) ||
                    c >= static_cast<std::ptrdiff_t>(wd))
                  continue;
                acc += w[((co * cin_g + cl) * s.kernel_h + i) * s.kernel_w + j] *
                       x[((b * s.in_channels + ci) * h + r) * wd + c];
              }
          }
          y.data()[((b * s.out_channels + co) * ho + oh) * wo + ow] = acc;
        }
  return y;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(TD(Shape{2, 2}, std::vector<double>{1, 2, 3}), om::ShapeError);
  TD t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(t.item(), om::ShapeError);
}

TEST(Conv2d, OverlapCounts) {
  TD x(Shape{1, 1, 3, 3}, 1.0), w(Shape{1, 1, 3, 3}, 1.0);
  auto y = om::conv2d(x, w, nullptr, om::ConvSpec::same(1, 1, 3, 3));
  const std::vector<double> expect{4, 6, 4, 6, 9, 6, 4, 6, 4};
  EXPECT_EQ(y.vec(), expect);
}

TEST(Conv2d, DepthwiseDiracIsIdentity) {
  om::Rng rng(3);
  auto x = random_tensor(rng, {2, 5, 7, 6});
  TD w(Shape{5, 1, 3, 3});
  for (std::size_t c = 0; c < 5; ++c) w.data()[c * 9 + 4] = 1;
  auto y = om::conv2d(x, w, nullptr, om::ConvSpec::depthwise(5, 3, 3));
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.vec(), x.vec());
}

TEST(Conv2d, DilatedOneHot) {
  TD x(Shape{1, 1, 5, 5});
  x.data()[12] = 1;
  TD w(Shape{1, 1, 3, 3}, 1.0);
  auto y = om::conv2d(x, w, nullptr, om::ConvSpec::same(1, 1, 3, 3, 2));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c)
      EXPECT_EQ(y[r * 5 + c], (r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0) << r << "," << c;
}

TEST(Conv2d, MatchesLoopOracleExactly) {
  om::Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(2), cin = 1 + rng.below(3), cout = 1 + rng.below(3);
    const std::size_t h = 3 + rng.below(6), w = 3 + rng.below(6);
    const std::size_t k = rng.below(2) ? 3 : 1, dil = 1 + rng.below(2);
    auto spec = om::ConvSpec::same(cin, cout, k, k, dil);
    auto x = random_tensor(rng, {n, cin, h, w});
    auto wt = random_tensor(rng, spec.weight_shape());
    auto y = om::conv2d(x, wt, nullptr, spec);
    EXPECT_EQ(y.vec(), conv_oracle(x, wt, spec).vec()) << "trial " << trial;
  }
}

TEST(Conv2d, StridedAndGroupedMatchOracle) {
  om::Rng rng(5);
  om::ConvSpec s;
  s.in_channels = 4;
  s.out_channels = 6;
  s.groups = 2;
  s.kernel_h = s.kernel_w = 3;
  s.stride = 2;
  s.pad_h = s.pad_w = 1;
  auto x = random_tensor(rng, {2, 4, 7, 8});
  auto w = random_tensor(rng, s.weight_shape());
  auto y = om::conv2d(x, w, nullptr, s);
  EXPECT_EQ(y.shape(), (Shape{2, 6, 4, 4}));
  auto ref = conv_oracle(x, w, s);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);
}

TEST(Conv2d, Errors) {
  EXPECT_THROW(om::ConvSpec::same(1, 1, 2, 2), om::ShapeError);
  TD x(Shape{1, 2, 4, 4}), w(Shape{1, 1, 3, 3});
  EXPECT_THROW(om::conv2d(x, w, nullptr, om::ConvSpec::same(1, 1, 3, 3)), om::ShapeError);
  om::ConvSpec bad = om::ConvSpec::same(3, 2, 1, 1, 1, 2);
  EXPECT_THROW(bad.validate(), om::ShapeError);
}

TEST(Pool2d, AvgOfConstantIsConstant) {
  TD x(Shape{1, 2, 5, 4}, 0.375);
  auto y = om::pool2d(x, om::PoolKind::Avg, 3, 1, 1);
  EXPECT_EQ(y.shape(), x.shape());
  for (double v : y.vec()) EXPECT_DOUBLE_EQ(v, 0.375);
}

TEST(Pool2d, MaxOfOneHot) {
  TD x(Shape{1, 1, 5, 5});
  x.data()[2 * 5 + 1] = 1;
  auto y = om::pool2d(x, om::PoolKind::Max, 3, 1, 1);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c)
      EXPECT_EQ(y[r * 5 + c], (r >= 1 && r <= 3 && c <= 2) ? 1.0 : 0.0);
}

TEST(Pool2d, MaxRamp) {
  TD x(Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x.data()[i] = static_cast<double>(i);
  auto y = om::pool2d(x, om::PoolKind::Max, 2, 2, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.vec(), (std::vector<double>{5, 7, 13, 15}));
}

TEST(Pool2d, MaxIgnoresPadding) {
  TD x(Shape{1, 1, 2, 2}, -3.0);
  auto y = om::pool2d(x, om::PoolKind::Max, 3, 1, 1);
  for (double v : y.vec()) EXPECT_EQ(v, -3.0);
}

TEST(Pool2d, WindowTooLarge) {
  TD x(Shape{1, 1, 2, 2});
  EXPECT_THROW(om::pool2d(x, om::PoolKind::Max, 5, 1, 1), om::ShapeError);
}

TEST(Upsample, ConstantStaysConstant) {
  TD x(Shape{1, 4, 7, 7}, 2.5);
  auto y = om::upsample_bilinear(x);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 14, 14}));
  for (double v : y.vec()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Upsample, EdgeClampedRow) {
  TD x(Shape{1, 1, 1, 2}, std::vector<double>{0, 1});
  auto y = om::upsample_bilinear(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  const std::vector<double> row{0, 0.25, 0.75, 1};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y[r * 4 + c], row[c]);
}

TEST(Linear, HandExamples) {
  TD x(Shape{2}, std::vector<double>{1, 2});
  TD w(Shape{2, 2}, std::vector<double>{1, 1, 0, 1});
  TD b(Shape{2}, std::vector<double>{0, 1});
  EXPECT_EQ(om::linear(x, w, &b).vec(), (std::vector<double>{3, 3}));

  om::Rng rng(1);
  auto xb = random_tensor(rng, {2, 5, 3});
  TD eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.data()[i * 4] = 1;
  EXPECT_EQ(om::linear(xb, eye).vec(), xb.vec());
  auto w7 = random_tensor(rng, {7, 3});
  EXPECT_EQ(om::linear(xb, w7).shape(), (Shape{2, 5, 7}));
  EXPECT_THROW(om::linear(xb, random_tensor(rng, {7, 4})), om::ShapeError);
}

TEST(LayerNorm, Examples) {
  TD g(Shape{2}, 1.0), b(Shape{2}, 0.0);
  auto y = om::layer_norm(TD(Shape{2}, std::vector<double>{1, 3}), g, b);
  EXPECT_NEAR(y[0], -1, 1e-5);
  EXPECT_NEAR(y[1], 1, 1e-5);

  TD g3(Shape{3}, 1.0), b3(Shape{3}, std::vector<double>{0.5, -2, 7});
  auto c = om::layer_norm(TD(Shape{2, 3}, 4.0), g3, TD(Shape{3}, 0.0));
  for (double v : c.vec()) EXPECT_EQ(v, 0.0);
  auto z = om::layer_norm(TD(Shape{2, 3}, 4.0), g3, b3);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(z[i], b3[i % 3]);

  om::Rng rng(2);
  auto beta_only = om::layer_norm(random_tensor(rng, {4, 3}), TD(Shape{3}, 0.0), b3);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(beta_only[i], b3[i % 3]);
}

TEST(BatchNorm, Examples) {
  TD g(Shape{1}, 1.0), b(Shape{1}, 0.0), rm(Shape{1}, 0.0), rv(Shape{1}, 1.0);
  auto y = om::batch_norm(TD(Shape{1, 1, 1, 2}, std::vector<double>{0, 2}), g, b, rm, rv,
                          om::NormMode::Train);
  EXPECT_NEAR(y[0], -1, 1e-5);
  EXPECT_NEAR(y[1], 1, 1e-5);
  EXPECT_DOUBLE_EQ(rm[0], 0.1);
  EXPECT_DOUBLE_EQ(rv[0], 0.9 + 0.1 * 1.0);

  TD g2(Shape{2}, 1.0), b2(Shape{2}, 0.0), rm2(Shape{2}, 0.0), rv2(Shape{2}, 1.0);
  TD x(Shape{2, 2, 2, 2});
  for (std::size_t i = 0; i < 16; ++i) x.data()[i] = (i / 4) % 2 ? 3.0 : -1.0;
  auto yc = om::batch_norm(x, g2, b2, rm2, rv2, om::NormMode::Train);
  for (double v : yc.vec()) EXPECT_EQ(v, 0.0);

  TD e_rm(Shape{2}, 0.0), e_rv(Shape{2}, 1.0);
  om::Rng rng(4);
  auto xr = random_tensor(rng, {1, 2, 3, 3});
  auto ye = om::batch_norm(xr, g2, b2, e_rm, e_rv, om::NormMode::Eval);
  for (std::size_t i = 0; i < xr.numel(); ++i) EXPECT_NEAR(ye[i], xr[i], 1e-5);
  EXPECT_EQ(e_rm[0], 0.0);

  TD one(Shape{1, 1, 1, 1});
  EXPECT_THROW(om::batch_norm(one, g, b, rm, rv, om::NormMode::Train), om::ShapeError);
}

TEST(Activation, ClosedForms) {
  TD zero(Shape{1}, 0.0), minus(Shape{1}, -1.0), one(Shape{1}, 1.0);
  EXPECT_EQ(om::silu(zero)[0], 0.0);
  EXPECT_EQ(om::sigmoid(zero)[0], 0.5);
  EXPECT_EQ(om::relu(minus)[0], 0.0);
  EXPECT_NEAR(om::softplus(zero)[0], std::log(2.0), 1e-15);
  const double tanh_gelu = 0.5 * (1 + std::tanh(0.7978845608028654 * (1 + 0.044715)));
  EXPECT_NEAR(om::gelu(one)[0], tanh_gelu, 1e-15);
  EXPECT_NEAR(om::gelu(one)[0], 0.8412, 1e-4);
}

TEST(Backward, SumAndSigmoid) {
  TD x(Shape{2, 3}, 0.0);
  x.set_requires_grad();
  om::backward(om::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  TD z(Shape{4}, 0.0);
  z.set_requires_grad();
  om::backward(om::sum(om::sigmoid(z)));
  for (double g : z.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Backward, AccumulatesAndRejectsNonScalar) {
  TD x(Shape{3}, 1.0);
  x.set_requires_grad();
  om::backward(om::sum(x));
  om::backward(om::sum(om::scale(x, 2.0)));
  for (double g : x.grad()) EXPECT_EQ(g, 3.0);
  x.zero_grad();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_THROW(om::backward(om::scale(x, 2.0)), om::Error);
}

TEST(Ops, InputsAreNotMutated) {
  om::Rng rng(9);
  auto x = random_tensor(rng, {1, 2, 4, 4});
  const auto before = x.vec();
  auto w = random_tensor(rng, {2, 1, 3, 3});
  om::conv2d(x, w, nullptr, om::ConvSpec::depthwise(2, 3, 3));
  om::pool2d(x, om::PoolKind::Avg, 3, 1, 1);
  om::relu(x);
  om::upsample_bilinear(x);
  EXPECT_EQ(x.vec(), before);
}

class LeafGradcheck : public ::testing::TestWithParam<const char*> {};

TEST_P(LeafGradcheck, WithinTolerance) {
  for (std::uint64_t seed : {0u, 1u}) {
    auto r = om::gradcheck(GetParam(), seed);
    EXPECT_TRUE(r.passed()) << r.name << " seed " << seed << " err " << r.max_rel_error;
    EXPECT_LE(r.threshold, 1e-5);
  }
}

INSTANTIATE_TEST_SUITE_P(TensorCore, LeafGradcheck,
                         ::testing::Values("conv2d", "conv2d_dilated", "conv2d_depthwise",
                                           "conv2d_grouped_strided", "pool_max", "pool_avg",
                                           "upsample_bilinear", "resize_bilinear", "linear",
                                           "layer_norm", "batch_norm", "relu", "gelu", "silu",
                                           "sigmoid", "softplus"));

TEST(Gradcheck, LinearIsNearlyExact) {
  EXPECT_LE(om::gradcheck("linear").max_rel_error, 1e-9);
}

TEST(Gradcheck, UnknownModule) {
  EXPECT_THROW(om::gradcheck("no_such_op"), om::ValidationError);
}
