// octamamba command line: synth, train, infer, eval, gradcheck, params, bench-scan.
//
// Exit codes: 0 ok, 1 usage, 2 I/O, 3 validation or oracle failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "octamamba/octamamba.hpp"

namespace om = octamamba;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kValidation = 3 };

om::RunConfig config_or_default(const std::string& path) {
  return path.empty() ? om::RunConfig{} : om::load_run_config(path);
}

/// Seeded permutation; the first val_count samples validate, the rest train.
void split(const std::vector<om::SegmentationSample<float>>& data, std::size_t val_count,
           std::uint64_t seed, std::vector<om::SegmentationSample<float>>& train_set,
           std::vector<om::SegmentationSample<float>>& val_set) {
  if (data.empty()) throw om::ValidationError("dataset is empty");
  if (val_count >= data.size()) {
    throw om::ValidationError("val_count " + std::to_string(val_count) + " leaves no training samples out of " +
                              std::to_string(data.size()));
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  om::Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  for (std::size_t i = 0; i < order.size(); ++i) (i < val_count ? val_set : train_set).push_back(data[order[i]]);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_synth(std::size_t n, std::size_t size, std::uint64_t seed, const std::string& out_dir) {
  if (n == 0) throw om::ValidationError("--n must be positive");
  om::write_dataset(om::synth_dataset<float>(n, size, seed), out_dir);
  std::cout << "wrote " << n << " samples of " << size << "x" << size << " to " << out_dir << "\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out,
              std::string history_path) {
  const auto cfg = config_or_default(config_path);
  if (history_path.empty()) history_path = out + ".history.json";
  const auto data = om::load_dataset(data_dir, cfg.model.image_size);
  std::vector<om::SegmentationSample<float>> train_set, val_set;
  split(data, cfg.train.val_count, cfg.train.seed, train_set, val_set);
  om::OctaMambaNet<float> net(cfg.model);
  std::cout << "train " << train_set.size() << " / val " << val_set.size() << ", "
            << om::param_count(net.params()) << " parameters\n";
  const auto t0 = std::chrono::steady_clock::now();
  const auto hist = om::train(net, train_set, val_set, cfg.train, [&](const om::EpochRecord& r) {
    std::printf("epoch %3zu  loss %.4f  val dice %.4f%s\n", r.epoch, r.train_loss, r.val_dice,
                r.improved ? "  *" : "");
    std::fprintf(stderr, "  %.1fs elapsed\n", seconds_since(t0));
    std::fflush(stdout);
  });
  om::save_checkpoint(net, out);
  om::write_text_file(history_path, om::to_json(hist).dump(2) + "\n");
  std::printf("best epoch %zu, val dice %.4f%s\n", hist.best_epoch, hist.best_val_dice,
              hist.stopped_early ? " (early stop)" : "");
  return kOk;
}

int cmd_infer(const std::string& checkpoint, const std::string& image, const std::string& out,
              const std::string& prob_out, double threshold) {
  if (!(threshold > 0 && threshold < 1)) throw om::ValidationError("--threshold must lie in (0, 1)");
  auto net = om::load_checkpoint(checkpoint);
  const auto img = om::read_pgm<float>(image);
  const std::size_t h = img.dim(1), w = img.dim(2), s = net->config().image_size;
  om::Tensor<float> prob;
  {
    om::NoGradGuard no_grad;
    auto x = om::reshape(om::resize_to(img, s), om::Shape{1, 1, s, s});
    prob = om::reshape(net->forward(x, om::NormMode::Eval), om::Shape{1, 1, s, s});
    if (h != s || w != s) prob = om::resize_bilinear(prob, h, w);
    prob = om::reshape(prob, om::Shape{1, h, w});
  }
  om::Tensor<float> mask(prob.shape());
  for (std::size_t i = 0; i < prob.numel(); ++i) mask.data()[i] = prob.vec()[i] >= threshold ? 1.0f : 0.0f;
  om::write_pgm(mask, out);
  if (!prob_out.empty()) om::write_pgm(prob, prob_out);
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& report_path,
             bool debug_identity, double threshold) {
  if (!(threshold > 0 && threshold < 1)) throw om::ValidationError("--threshold must lie in (0, 1)");
  om::MetricsReport report;
  if (debug_identity) {
    // Predictions are the input images themselves.
    const auto files = om::list_dataset(data_dir);
    if (files.images.empty()) throw om::ValidationError("dataset is empty");
    om::MetricsAccumulator acc(threshold);
    for (std::size_t i = 0; i < files.images.size(); ++i) {
      const auto img = om::read_pgm<float>(files.images[i]);
      const auto mask = om::read_pgm<float>(files.masks[i]);
      if (img.shape() != mask.shape()) throw om::ValidationError(files.images[i] + ": image and mask sizes differ");
      acc.add<float>(img.data(), mask.data());
    }
    report = acc.report(0);
  } else {
    if (checkpoint.empty()) throw CLI::RequiredError("--checkpoint");
    auto net = om::load_checkpoint(checkpoint);
    const auto data = om::load_dataset(data_dir, net->config().image_size);
    if (data.empty()) throw om::ValidationError("dataset is empty");
    report = om::evaluate(*net, data, threshold, 2);
  }
  if (!report_path.empty()) om::write_text_file(report_path, om::to_json(report).dump(2) + "\n");
  std::cout << om::format_report(report);
  return kOk;
}

int cmd_gradcheck(const std::string& module, std::uint64_t seed) {
  std::vector<std::string> names = om::gradcheck_names();
  if (!module.empty()) {
    if (std::find(names.begin(), names.end(), module) == names.end()) {
      std::cerr << "unknown module '" << module << "'; known:";
      for (const auto& n : names) std::cerr << ' ' << n;
      std::cerr << "\n";
      return kUsage;
    }
    names = {module};
  }
  bool ok = true;
  std::printf("%-24s %12s %10s %8s %8s\n", "module", "max_rel_err", "threshold", "checked", "skipped");
  for (const auto& n : names) {
    const auto r = om::gradcheck(n, seed);
    ok = ok && r.passed();
    std::printf("%-24s %12.3e %10.0e %8zu %8zu  %s\n", n.c_str(), r.max_rel_error, r.threshold, r.checked,
                r.skipped, r.passed() ? "ok" : "FAIL");
  }
  return ok ? kOk : kValidation;
}

int cmd_params(const std::string& config_path) {
  const auto cfg = config_or_default(config_path);
  om::OctaMambaNet<float> net(cfg.model);
  std::cout << om::param_count(net.params()) << "\n";
  return kOk;
}

int cmd_bench_scan(std::size_t len, std::size_t dim, std::size_t chunk, std::size_t state, std::size_t reps) {
  if (len == 0 || dim == 0 || chunk == 0 || state == 0 || reps == 0) {
    throw om::ValidationError("bench-scan: all sizes must be positive");
  }
  om::Rng rng(0);
  const auto p = om::SsmParams<float>::init(dim, state, rng);
  om::Tensor<float> x(om::Shape{1, len, dim});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
  om::NoGradGuard no_grad;
  auto time = [&](auto&& fn) {
    om::Tensor<float> y = fn();
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < reps; ++r) y = fn();
    return std::pair{y, seconds_since(t0) / static_cast<double>(reps)};
  };
  const auto [ys, ts] = time([&] { return om::selective_scan(x, p); });
  const auto [yc, tc] = time([&] { return om::selective_scan_chunked(x, p, chunk); });
  double diff = 0;
  for (std::size_t i = 0; i < ys.numel(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(ys.vec()[i]) - yc.vec()[i]));
  const double tokens = static_cast<double>(len);
  std::printf("len %zu dim %zu state %zu chunk %zu\n", len, dim, state, chunk);
  std::printf("sequential  %12.0f tokens/s\n", tokens / ts);
  std::printf("chunked     %12.0f tokens/s\n", tokens / tc);
  std::printf("max abs diff %.3e\n", diff);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OCTAMamba retinal vessel segmentation"};
  app.require_subcommand(1);

  std::size_t n = 0, size = 64, len = 1024, dim = 16, chunk = 64, state = 8, reps = 5;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  bool debug_identity = false;
  std::string out_dir, config, data_dir, out, history, checkpoint, image, prob_out, report, module;

  auto* synth = app.add_subcommand("synth", "Write a synthetic vessel dataset as PGM pairs");
  synth->add_option("--n", n, "Number of samples")->required();
  synth->add_option("--size", size, "Image side length")->capture_default_str();
  synth->add_option("--seed", seed, "Random seed")->capture_default_str();
  synth->add_option("--out-dir", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  train->add_option("--config", config, "Run config JSON (defaults when omitted)");
  train->add_option("--data-dir", data_dir, "Directory of image_XXXX.pgm / mask_XXXX.pgm")->required();
  train->add_option("--out", out, "Checkpoint path")->required();
  train->add_option("--history", history, "History JSON path (default: <out>.history.json)");

  auto* infer = app.add_subcommand("infer", "Segment one image");
  infer->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
  infer->add_option("--image", image, "Input PGM")->required();
  infer->add_option("--out", out, "Binary mask PGM")->required();
  infer->add_option("--prob-out", prob_out, "Probability map PGM");
  infer->add_option("--threshold", threshold, "Binarization threshold")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint path");
  eval->add_option("--data-dir", data_dir, "Dataset directory")->required();
  eval->add_option("--report", report, "Report JSON path");
  eval->add_option("--threshold", threshold, "Binarization threshold")->capture_default_str();
  eval->add_flag("--debug-identity", debug_identity, "Use the images themselves as predictions");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--module", module, "Run a single registered check");
  gc->add_option("--seed", seed, "Random seed")->capture_default_str();

  auto* params = app.add_subcommand("params", "Print the trainable parameter count");
  params->add_option("--config", config, "Run config JSON (defaults when omitted)");

  auto* bench = app.add_subcommand("bench-scan", "Sequential vs chunked selective scan throughput");
  bench->add_option("--len", len, "Sequence length")->capture_default_str();
  bench->add_option("--dim", dim, "Channels")->capture_default_str();
  bench->add_option("--chunk", chunk, "Chunk length")->capture_default_str();
  bench->add_option("--state", state, "State size")->capture_default_str();
  bench->add_option("--reps", reps, "Timed repetitions")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(n, size, seed, out_dir);
    if (*train) return cmd_train(config, data_dir, out, history);
    if (*infer) return cmd_infer(checkpoint, image, out, prob_out, threshold);
    if (*eval) return cmd_eval(checkpoint, data_dir, report, debug_identity, threshold);
    if (*gc) return cmd_gradcheck(module, seed);
    if (*params) return cmd_params(config);
    if (*bench) return cmd_bench_scan(len, dim, chunk, state, reps);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const om::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kUsage;
}
