#include <gtest/gtest.h>

#include <cmath>

#include <octamamba/octamamba.hpp>

namespace om = octamamba;
using om::Shape;
using TD = om::Tensor<double>;

namespace {

struct Counts {
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

Counts count_pixels(const std::vector<double>& pred, const std::vector<double>& mask) {
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    c.tp += pred[i] >= 0.5 && mask[i] == 1;
    c.fp += pred[i] >= 0.5 && mask[i] == 0;
    c.fn += pred[i] < 0.5 && mask[i] == 1;
  }
  return c;
}

om::ModelConfig tiny_model() {
  om::ModelConfig m;
  m.base_channels = 4;
  m.depth = 2;
  m.ssm_state = 2;
  m.image_size = 16;
  return m;
}

}  // namespace

TEST(DiceLoss, Examples) {
  const double eps = 1e-5;
  TD t(Shape{4}, std::vector<double>{1, 0, 1, 1});
  EXPECT_NEAR(om::dice_loss(t, t, eps).item(), 0.0, 1e-15);
  EXPECT_NEAR(om::dice_loss(TD(Shape{4}), t, eps).item(), 1 - eps / (3 + eps), 1e-15);
  auto half = om::dice_loss(TD(Shape{4}, 0.5), TD(Shape{4}, std::vector<double>{1, 1, 0, 0}), eps);
  EXPECT_NEAR(half.item(), 1 - (2 + eps) / (4 + eps), 1e-15);
  EXPECT_NEAR(half.item(), 0.5, 1e-5);
  EXPECT_THROW(om::dice_loss(TD(Shape{3}), t, eps), om::ShapeError);
}

TEST(DiceLoss, RangeOnRandomInputs) {
  om::Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    TD p(Shape{2, 1, 4, 4}), g(Shape{2, 1, 4, 4});
    for (std::size_t i = 0; i < p.numel(); ++i) {
      p.data()[i] = rng.uniform();
      g.data()[i] = rng.below(2);
    }
    const double l = om::dice_loss(p, g, 1e-5).item();
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 1.0 + 1e-5);
  }
}

TEST(DiceLoss, Gradcheck) {
  for (std::uint64_t seed : {0u, 1u, 2u}) EXPECT_TRUE(om::gradcheck("dice_loss", seed).passed());
}

TEST(Metrics, HandCases) {
  TD target(Shape{1, 6}, std::vector<double>{1, 1, 1, 0, 0, 0});
  TD pred(Shape{1, 6}, std::vector<double>{0.9, 0.5, 0.1, 0.7, 0.2, 0.0});
  auto r = om::metrics(pred, target);
  EXPECT_EQ(r.total.tp, 2u);
  EXPECT_EQ(r.total.fp, 1u);
  EXPECT_EQ(r.total.fn, 1u);
  EXPECT_NEAR(r.dice, 4.0 / 6.0, 1e-12);
  EXPECT_NEAR(r.iou, 0.5, 1e-12);
  EXPECT_NEAR(r.sen, 2.0 / 3.0, 1e-12);  // TP / (TP + FN)

  auto same = om::metrics(target, target);
  EXPECT_EQ(same.dice, 1.0);
  EXPECT_EQ(same.iou, 1.0);
  EXPECT_EQ(same.sen, 1.0);

  auto none = om::metrics(TD(Shape{1, 6}), target);
  EXPECT_EQ(none.dice, 0.0);
  EXPECT_EQ(none.iou, 0.0);
  EXPECT_EQ(none.sen, 0.0);
}

TEST(Metrics, EmptyTruthConventions) {
  TD empty(Shape{1, 4});
  auto both = om::metrics(empty, empty);
  EXPECT_EQ(both.dice, 1.0);
  EXPECT_EQ(both.iou, 1.0);
  EXPECT_EQ(both.sen, 1.0);
  auto fp = om::metrics(TD(Shape{1, 4}, 0.9), empty);
  EXPECT_EQ(fp.sen, 1.0);
  EXPECT_EQ(fp.dice, 0.0);
  EXPECT_EQ(fp.iou, 0.0);
}

TEST(Metrics, RejectsNonBinaryTarget) {
  EXPECT_THROW(om::metrics(TD(Shape{1, 2}), TD(Shape{1, 2}, 0.5)), om::ValidationError);
  EXPECT_THROW(om::metrics(TD(Shape{1, 2}), TD(Shape{1, 3})), om::ShapeError);
}

TEST(Metrics, BruteForceOracle) {
  om::Rng rng(2);
  om::MetricsAccumulator acc(0.5);
  Counts total;
  for (int k = 0; k < 200; ++k) {
    std::vector<double> pred(256), mask(256);
    const double density = rng.uniform(0, 0.5);
    for (std::size_t i = 0; i < 256; ++i) {
      mask[i] = rng.uniform() < density;
      pred[i] = rng.uniform() < 0.7 ? mask[i] * rng.uniform(0.5, 1) : rng.uniform();
    }
    const Counts c = count_pixels(pred, mask);
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
    TD p(Shape{1, 1, 16, 16}, pred), m(Shape{1, 1, 16, 16}, mask);
    auto r = om::metrics(p, m);
    ASSERT_EQ(r.total.tp, c.tp);
    ASSERT_EQ(r.total.fp, c.fp);
    ASSERT_EQ(r.total.fn, c.fn);
    const double tp = c.tp, fp = c.fp, fn = c.fn;
    if (c.tp + c.fp + c.fn > 0) {
      EXPECT_EQ(r.dice, 2 * tp / (2 * tp + fp + fn));
      EXPECT_EQ(r.iou, tp / (tp + fp + fn));
    }
    if (c.tp + c.fn > 0) EXPECT_EQ(r.sen, tp / (tp + fn));
    EXPECT_LE(r.iou, r.dice);
    EXPECT_LE(r.dice, 1.0);
    acc.add<double>(p.data(), m.data());
  }
  auto pooled = acc.report(7);
  EXPECT_EQ(pooled.n_samples, 200u);
  EXPECT_EQ(pooled.params, 7u);
  EXPECT_EQ(pooled.total.tp, total.tp);
  const double tp = total.tp, fp = total.fp, fn = total.fn;
  EXPECT_EQ(pooled.dice, 2 * tp / (2 * tp + fp + fn));
  for (const auto& s : pooled.per_sample) EXPECT_LE(s.iou, s.dice);
}

TEST(AdamW, FirstStep) {
  TD th(Shape{1}, 0.0);
  th.set_requires_grad();
  om::AdamW<double> opt({th}, {1e-4, 1e-3, 0.9, 0.999, 1e-8});
  om::backward(om::sum(th));
  opt.step();
  EXPECT_NEAR(th[0], -1e-4 / (1 + 1e-8), 1e-18);
}

TEST(AdamW, PureDecay) {
  TD th(Shape{3}, 1.0);
  th.set_requires_grad();
  om::AdamW<double> opt({th}, {1e-4, 1e-3, 0.9, 0.999, 1e-8});
  for (int t = 0; t < 1000; ++t) {
    th.zero_grad();
    opt.step();
  }
  for (double v : th.vec()) EXPECT_NEAR(v, std::pow(1 - 1e-7, 1000), 1e-12);
}

TEST(AdamW, ZeroDecayIsAdamOnQuadratic) {
  const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  TD th(Shape{1}, 1.0);
  th.set_requires_grad();
  om::AdamW<double> opt({th}, {lr, 0.0, b1, b2, eps});
  double ref = 1, m = 0, v = 0;
  int reached = -1;
  for (int t = 1; t <= 5000; ++t) {
    th.zero_grad();
    om::backward(om::scale(om::mul(th, th), 0.5));
    opt.step();
    m = b1 * m + (1 - b1) * ref;
    v = b2 * v + (1 - b2) * ref * ref;
    ref -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    ASSERT_NEAR(th[0], ref, 1e-12) << "step " << t;
    if (reached < 0 && std::abs(th[0]) < 1e-3) reached = t;
  }
  EXPECT_GT(reached, 0);
  EXPECT_LT(std::abs(th[0]), 1e-3);
}

TEST(TrainConfig, Validation) {
  om::TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.threshold = 1.0;
  EXPECT_THROW(c.validate(), om::ValidationError);
  c = {};
  c.lr = 0;
  EXPECT_THROW(c.validate(), om::ValidationError);
  c = {};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), om::ValidationError);
}

TEST(Synth, DeterministicBinaryNonEmpty) {
  auto a = om::synth_dataset<float>(20, 32, 5);
  auto b = om::synth_dataset<float>(20, 32, 5);
  auto c = om::synth_dataset<float>(20, 32, 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.vec(), b[i].image.vec());
    EXPECT_EQ(a[i].mask.vec(), b[i].mask.vec());
    differs |= a[i].mask.vec() != c[i].mask.vec();
    EXPECT_EQ(a[i].image.shape(), (Shape{1, 32, 32}));
    std::size_t fg = 0;
    for (float v : a[i].mask.vec()) {
      EXPECT_TRUE(v == 0.0f || v == 1.0f);
      fg += v == 1.0f;
    }
    EXPECT_GT(fg, 0u);
    for (float v : a[i].image.vec()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Synth, ForegroundFraction) {
  auto data = om::synth_dataset<float>(100, 64, 0);
  double fg = 0;
  for (const auto& s : data)
    for (float v : s.mask.vec()) fg += v;
  const double frac = fg / (100.0 * 64 * 64);
  EXPECT_GE(frac, 0.02);
  EXPECT_LE(frac, 0.25);
  EXPECT_NEAR(frac, 0.05769, 1e-4);
}

TEST(Train, DeterministicHistories) {
  auto data = om::synth_dataset<double>(6, 16, 3);
  std::vector<om::SegmentationSample<double>> tr(data.begin(), data.begin() + 4), val(data.begin() + 4, data.end());
  om::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 1e-3;
  auto run = [&] {
    om::OctaMambaNet<double> net(tiny_model());
    auto h = om::train(net, tr, val, cfg);
    return std::pair{h.step_losses, net.params().snapshot()};
  };
  auto [l1, p1] = run();
  auto [l2, p2] = run();
  EXPECT_EQ(l1.size(), 4u);
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(p1, p2);
}

TEST(Train, PatienceStopsOnFlatValidation) {
  // A threshold no probability reaches keeps validation Dice at 0.
  auto data = om::synth_dataset<float>(3, 16, 4);
  std::vector<om::SegmentationSample<float>> tr(data.begin(), data.begin() + 2), val(data.begin() + 2, data.end());
  om::TrainConfig cfg;
  cfg.epochs = 10;
  cfg.patience = 1;
  cfg.threshold = 0.999999;
  om::OctaMambaNet<float> net(tiny_model());
  std::vector<std::size_t> seen;
  auto h = om::train(net, tr, val, cfg, [&](const om::EpochRecord& r) { seen.push_back(r.epoch); });
  ASSERT_EQ(h.epochs.size(), 2u);
  EXPECT_EQ(h.epochs[0].val_dice, h.epochs[1].val_dice);
  EXPECT_TRUE(h.stopped_early);
  EXPECT_EQ(h.best_epoch, 1u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2}));
}

TEST(Train, RestoresBestParameters) {
  auto data = om::synth_dataset<float>(3, 16, 4);
  std::vector<om::SegmentationSample<float>> tr(data.begin(), data.begin() + 2), val(data.begin() + 2, data.end());
  om::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.patience = 1;
  cfg.threshold = 0.999999;
  om::OctaMambaNet<float> net(tiny_model()), ref(tiny_model());
  auto h = om::train(net, tr, val, cfg);
  // Epoch 1 is best; the returned weights are the ones after epoch 1.
  om::TrainConfig one = cfg;
  one.epochs = 1;
  om::train(ref, tr, val, one);
  EXPECT_EQ(net.params().snapshot(), ref.params().snapshot());
  EXPECT_EQ(h.best_epoch, 1u);
}

TEST(Train, EmptyDatasetRejected) {
  om::OctaMambaNet<float> net(tiny_model());
  EXPECT_THROW(om::train(net, {}, {}, om::TrainConfig{}), om::ValidationError);
}

TEST(Train, OverfitSingleSampleMonotone) {
  om::ModelConfig m;
  m.base_channels = 8;
  m.image_size = 32;
  om::OctaMambaNet<float> net(m);
  auto data = om::synth_dataset<float>(1, 32, 0);
  auto [mean, sd] = om::image_stats(data);
  net.set_input_norm(static_cast<float>(mean), static_cast<float>(sd));
  om::AdamW<float> opt(net.params().trainable(), {5e-4, 1e-3, 0.9, 0.999, 1e-8});
  const std::vector<std::size_t> idx{0, 0};
  auto [im, mk] = om::stack_samples(data, std::span<const std::size_t>(idx));
  float prev = 2;
  for (int s = 0; s < 20; ++s) {
    const float l = om::train_step(net, opt, im, mk, 1e-5f);
    EXPECT_LT(l, prev) << "step " << s + 1;
    prev = l;
  }
}

TEST(Evaluate, ReportsParamsAndSamples) {
  om::OctaMambaNet<float> net(tiny_model());
  auto data = om::synth_dataset<float>(3, 16, 9);
  auto r = om::evaluate(net, data, 0.5, 2);
  EXPECT_EQ(r.n_samples, 3u);
  EXPECT_EQ(r.params, om::param_count(net.params()));
  EXPECT_EQ(r.per_sample.size(), 3u);
  EXPECT_EQ(r.total.tp + r.total.fp + r.total.fn + r.total.tn, 3u * 256);
}
