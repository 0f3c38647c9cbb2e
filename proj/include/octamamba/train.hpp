#pragma once

// Dice loss, segmentation metrics, AdamW, synthetic vessel data and the
// epoch loop with early stopping on validation Dice.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>

#include "octamamba/net.hpp"

namespace octamamba {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  std::size_t batch = 2;
  std::size_t epochs = 30;
  std::size_t patience = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double dice_eps = 1e-5;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  std::size_t val_count = 20;

  void validate() const {
    if (!(lr > 0) || !(weight_decay >= 0) || batch == 0 || epochs == 0 || patience == 0 ||
        !(eps > 0) || !(dice_eps > 0)) {
      throw ValidationError("train config: lr, batch, epochs, patience, eps and dice_eps must be positive");
    }
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw ValidationError("train config: betas must lie in [0, 1)");
    }
    if (!(threshold > 0 && threshold < 1)) throw ValidationError("train config: threshold must lie in (0, 1)");
  }
};

// ---------------------------------------------------------------- loss

/// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps) over all elements jointly.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, T eps = T(1e-5)) {
  detail::require_same_shape(pred.shape(), target.shape(), "dice_loss");
  const auto& p = pred.vec();
  const auto& g = target.vec();
  double inter = 0, ps = 0, gs = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * g[i];
    ps += p[i];
    gs += g[i];
  }
  const double num = 2 * inter + eps, den = ps + gs + eps;
  auto pi = pred.impl(), gi = target.impl();
  return make_result<T>(Shape{1}, {static_cast<T>(1 - num / den)}, {pred, target},
                        [pi, gi, num, den](const TensorImpl<T>& out) {
                          const double go = out.grad[0], den2 = den * den;
                          if (T* gp = pi->grad_sink())
                            for (std::size_t i = 0; i < pi->data.size(); ++i)
                              gp[i] += static_cast<T>(-go * (2 * gi->data[i] * den - num) / den2);
                          if (T* gg = gi->grad_sink())
                            for (std::size_t i = 0; i < gi->data.size(); ++i)
                              gg[i] += static_cast<T>(-go * (2 * pi->data[i] * den - num) / den2);
                        });
}

// ---------------------------------------------------------------- metrics

struct Confusion {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

struct Scores {
  double dice = 0, iou = 0, sen = 0;
};

/// Dice, IoU and sensitivity. Empty prediction and empty truth score 1 on
/// all three; with no positives in the truth, sensitivity is 1.
inline Scores scores_from(const Confusion& c) {
  Scores s;
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp),
               fn = static_cast<double>(c.fn);
  if (c.tp + c.fp + c.fn == 0) return {1, 1, 1};
  s.dice = 2 * tp / (2 * tp + fp + fn);
  s.iou = tp / (tp + fp + fn);
  s.sen = c.tp + c.fn == 0 ? 1.0 : tp / (tp + fn);
  return s;
}

/// Pixel counts after binarizing pred at pred >= threshold.
template <typename T>
Confusion confusion(std::span<const T> pred, std::span<const T> target, double threshold) {
  if (pred.size() != target.size()) throw ShapeError("metrics: prediction and target sizes differ");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T g = target[i];
    if (g != T(0) && g != T(1)) throw ValidationError("metrics: target is not binary");
    const bool p = pred[i] >= threshold;
    if (p && g == T(1)) ++c.tp;
    else if (p) ++c.fp;
    else if (g == T(1)) ++c.fn;
    else ++c.tn;
  }
  return c;
}

struct MetricsReport {
  double dice = 0, iou = 0, sen = 0;  // pooled over every pixel
  std::size_t n_samples = 0;
  std::size_t params = 0;
  Confusion total;
  std::vector<Scores> per_sample;
};

class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(double threshold = 0.5) : threshold_(threshold) {}

  template <typename T>
  void add(std::span<const T> pred, std::span<const T> target) {
    const Confusion c = confusion<T>(pred, target, threshold_);
    total_ += c;
    per_sample_.push_back(scores_from(c));
  }

  MetricsReport report(std::size_t params = 0) const {
    MetricsReport r;
    const Scores s = scores_from(total_);
    r.dice = s.dice;
    r.iou = s.iou;
    r.sen = s.sen;
    r.n_samples = per_sample_.size();
    r.params = params;
    r.total = total_;
    r.per_sample = per_sample_;
    return r;
  }

 private:
  double threshold_;
  Confusion total_;
  std::vector<Scores> per_sample_;
};

/// Metrics over a batch [N,...]: each leading index is one sample.
template <typename T>
MetricsReport metrics(const Tensor<T>& pred, const Tensor<T>& target, double threshold = 0.5) {
  detail::require_same_shape(pred.shape(), target.shape(), "metrics");
  if (pred.rank() == 0 || pred.numel() == 0) throw ShapeError("metrics: empty input");
  const std::size_t n = pred.dim(0), per = pred.numel() / n;
  MetricsAccumulator acc(threshold);
  for (std::size_t i = 0; i < n; ++i)
    acc.add<T>(pred.data().subspan(i * per, per), target.data().subspan(i * per, per));
  return acc.report();
}

// ---------------------------------------------------------------- AdamW

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamWConfig from(const TrainConfig& c) {
    return {c.lr, c.weight_decay, c.beta1, c.beta2, c.eps};
  }
};

/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps)) - lr * wd * theta.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto theta = params_[k].data();
      auto grad = params_[k].grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad[i], th = theta[i];
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g * g;
        const double mh = m[i] / c1, vh = v[i] / c2;
        theta[i] = static_cast<T>(th - cfg_.lr * (mh / (std::sqrt(vh) + cfg_.eps)) -
                                  cfg_.lr * cfg_.weight_decay * th);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------- data

template <typename T>
struct SegmentationSample {
  Tensor<T> image;  // [1,S,S] in [0,1]
  Tensor<T> mask;   // [1,S,S] in {0,1}
};

namespace detail {

// Marks pixels whose centre lies within half_width of segment (x0,y0)-(x1,y1).
inline void draw_segment(std::vector<std::uint8_t>& mask, std::size_t size, double x0, double y0,
                         double x1, double y1, double half_width) {
  const double s = static_cast<double>(size);
  const double lo_x = std::max(0.0, std::floor(std::min(x0, x1) - half_width - 1));
  const double hi_x = std::min(s - 1, std::ceil(std::max(x0, x1) + half_width + 1));
  const double lo_y = std::max(0.0, std::floor(std::min(y0, y1) - half_width - 1));
  const double hi_y = std::min(s - 1, std::ceil(std::max(y0, y1) + half_width + 1));
  if (lo_x > hi_x || lo_y > hi_y) return;
  const double dx = x1 - x0, dy = y1 - y0, len2 = dx * dx + dy * dy;
  for (auto py = static_cast<std::size_t>(lo_y); py <= static_cast<std::size_t>(hi_y); ++py)
    for (auto px = static_cast<std::size_t>(lo_x); px <= static_cast<std::size_t>(hi_x); ++px) {
      const double cx = static_cast<double>(px) + 0.5, cy = static_cast<double>(py) + 0.5;
      double u = len2 > 0 ? ((cx - x0) * dx + (cy - y0) * dy) / len2 : 0.0;
      u = std::clamp(u, 0.0, 1.0);
      const double ex = x0 + u * dx - cx, ey = y0 + u * dy - cy;
      if (ex * ex + ey * ey <= half_width * half_width) mask[py * size + px] = 1;
    }
}

// Random walk polyline; returns its vertices.
inline std::vector<std::pair<double, double>> draw_polyline(
    std::vector<std::uint8_t>& mask, std::size_t size, Rng& rng, double x, double y,
    double angle, std::size_t segments, double width) {
  const double s = static_cast<double>(size);
  std::vector<std::pair<double, double>> pts{{x, y}};
  for (std::size_t k = 0; k < segments; ++k) {
    const double len = rng.uniform(0.08, 0.22) * s;
    angle += 0.45 * rng.normal();
    const double nx = x + len * std::cos(angle), ny = y + len * std::sin(angle);
    draw_segment(mask, size, x, y, nx, ny, width / 2);
    x = nx;
    y = ny;
    pts.emplace_back(x, y);
  }
  return pts;
}

}  // namespace detail

/// One synthetic en-face image: 2-5 branching vessels of width 1-3 px,
/// vessel intensity 0.7 on 0.2 background plus N(0, 0.1) noise, clamped.
template <typename T>
SegmentationSample<T> synth_sample(std::size_t size, Rng& rng) {
  const double s = static_cast<double>(size);
  std::vector<std::uint8_t> mask(size * size, 0);
  while (std::find(mask.begin(), mask.end(), 1) == mask.end()) {
    const std::size_t vessels = 2 + rng.below(4);
    for (std::size_t v = 0; v < vessels; ++v) {
      const double width = static_cast<double>(1 + rng.below(3));
      const double x = rng.uniform(0.1, 0.9) * s, y = rng.uniform(0.1, 0.9) * s;
      const double angle = rng.uniform(0, 2 * M_PI);
      auto pts = detail::draw_polyline(mask, size, rng, x, y, angle, 3 + rng.below(4), width);
      if (rng.uniform() < 0.7) {
        const auto& [bx, by] = pts[1 + rng.below(pts.size() - 1)];
        const double turn = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.6, 1.2);
        detail::draw_polyline(mask, size, rng, bx, by, angle + turn, 2 + rng.below(2),
                              std::max(1.0, width - 1));
      }
    }
  }
  SegmentationSample<T> out{Tensor<T>(Shape{1, size, size}), Tensor<T>(Shape{1, size, size})};
  auto img = out.image.data();
  auto msk = out.mask.data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double base = mask[i] ? 0.7 : 0.2;
    img[i] = static_cast<T>(std::clamp(base + 0.1 * rng.normal(), 0.0, 1.0));
    msk[i] = static_cast<T>(mask[i]);
  }
  return out;
}

template <typename T>
std::vector<SegmentationSample<T>> synth_dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
  if (size == 0) throw ValidationError("synth_dataset: size must be positive");
  Rng rng(seed);
  std::vector<SegmentationSample<T>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_sample<T>(size, rng));
  return out;
}

/// Stacks the chosen samples into image and mask batches [B,1,S,S].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> stack_samples(const std::vector<SegmentationSample<T>>& data,
                                              std::span<const std::size_t> idx) {
  if (idx.empty()) throw ShapeError("stack_samples: empty batch");
  const Shape& s = data[idx[0]].image.shape();
  const std::size_t per = numel_of(s);
  Shape shape{idx.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor<T> images(shape), masks(shape);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& smp = data[idx[k]];
    if (smp.image.shape() != s || smp.mask.shape() != s) throw ShapeError("stack_samples: ragged samples");
    std::copy(smp.image.vec().begin(), smp.image.vec().end(), images.data().begin() + k * per);
    std::copy(smp.mask.vec().begin(), smp.mask.vec().end(), masks.data().begin() + k * per);
  }
  return {images, masks};
}

/// Mean and population standard deviation of every image pixel.
template <typename T>
std::pair<double, double> image_stats(const std::vector<SegmentationSample<T>>& data) {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& s : data)
    for (T v : s.image.vec()) {
      sum += v;
      sq += static_cast<double>(v) * v;
      ++n;
    }
  if (n == 0) return {0.0, 1.0};
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
  return {mean, var > 0 ? std::sqrt(var) : 1.0};
}

// ---------------------------------------------------------------- training

template <typename T>
T train_step(OctaMambaNet<T>& net, AdamW<T>& opt, const Tensor<T>& images, const Tensor<T>& masks,
             T dice_eps) {
  net.params().zero_grad();
  auto loss = dice_loss(net.forward(images, NormMode::Train), masks, dice_eps);
  backward(loss);
  opt.step();
  return loss.item();
}

template <typename T>
MetricsReport evaluate(const OctaMambaNet<T>& net, const std::vector<SegmentationSample<T>>& data,
                       double threshold, std::size_t batch = 2) {
  NoGradGuard no_grad;
  MetricsAccumulator acc(threshold);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t b = 0; b < idx.size(); b += batch) {
    const std::size_t e = std::min(idx.size(), b + batch);
    auto [images, masks] = stack_samples(data, std::span<const std::size_t>(idx).subspan(b, e - b));
    auto pred = net.forward(images, NormMode::Eval);
    const std::size_t per = pred.numel() / (e - b);
    for (std::size_t k = 0; k < e - b; ++k)
      acc.add<T>(pred.data().subspan(k * per, per), masks.data().subspan(k * per, per));
  }
  return acc.report(param_count(net.params()));
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;  // mean over the epoch's steps
  double val_dice = 0;
  bool improved = false;
};

struct TrainHistory {
  std::vector<double> step_losses;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_dice = -1;
  bool stopped_early = false;
};

/// Epoch loop: seeded shuffle, AdamW on Dice loss, validation Dice after each
/// epoch, early stop after `patience` epochs without strict improvement. The
/// best-validation parameters are restored before returning. An empty
/// validation set falls back to the training set.
template <typename T>
TrainHistory train(OctaMambaNet<T>& net, const std::vector<SegmentationSample<T>>& train_set,
                   const std::vector<SegmentationSample<T>>& val_set, const TrainConfig& cfg,
                   const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw ValidationError("train: empty training set");
  const auto& val = val_set.empty() ? train_set : val_set;
  const auto [mean, stddev] = image_stats(train_set);
  net.set_input_norm(static_cast<T>(mean), static_cast<T>(stddev));

  AdamW<T> opt(net.params().trainable(), AdamWConfig::from(cfg));
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainHistory hist;
  auto best = net.params().snapshot();
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t e = std::min(order.size(), b + cfg.batch);
      auto [images, masks] = stack_samples(train_set, std::span<const std::size_t>(order).subspan(b, e - b));
      const T loss = train_step(net, opt, images, masks, static_cast<T>(cfg.dice_eps));
      hist.step_losses.push_back(loss);
      loss_sum += loss;
      ++steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(steps);
    rec.val_dice = evaluate(net, val, cfg.threshold, cfg.batch).dice;
    rec.improved = rec.val_dice > hist.best_val_dice;
    if (rec.improved) {
      hist.best_val_dice = rec.val_dice;
      hist.best_epoch = epoch;
      best = net.params().snapshot();
      stale = 0;
    } else {
      ++stale;
    }
    hist.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stale >= cfg.patience) {
      hist.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  net.params().restore(best);
  net.params().zero_grad();
  return hist;
}

}  // namespace octamamba
