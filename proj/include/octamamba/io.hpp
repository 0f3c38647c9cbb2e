#pragma once

// PGM images, the OCTM checkpoint container, JSON run configs and reports.
//
// Checkpoint layout (little-endian):
//   "OCTM" | u32 version = 1 | u64 header length | header JSON |
//   f32 payload in manifest order | u32 CRC-32 of the payload
// The header lists {name, dtype, shape} per tensor and the model config.

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>

#include <json.hpp>

#include "octamamba/train.hpp"

namespace octamamba {

// ---------------------------------------------------------------- PGM

enum class PgmErrorKind { Open, BadMagic, BadHeader, BadMaxval, Truncated };

class PgmError : public IoError {
 public:
  PgmError(PgmErrorKind kind, const std::string& msg) : IoError(msg), kind_(kind) {}
  PgmErrorKind kind() const { return kind_; }

 private:
  PgmErrorKind kind_;
};

namespace detail {

// Next header token, skipping whitespace and '#' comment lines.
inline std::string pgm_token(std::istream& in, const std::string& path) {
  std::string tok;
  while (true) {
    const int ch = in.peek();
    if (ch == EOF) break;
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      in.get();
      continue;
    }
    tok.push_back(static_cast<char>(in.get()));
  }
  if (tok.empty()) throw PgmError(PgmErrorKind::BadHeader, path + ": incomplete PGM header");
  return tok;
}

inline std::size_t pgm_number(std::istream& in, const std::string& path) {
  const std::string tok = pgm_token(in, path);
  if (tok.find_first_not_of("0123456789") != std::string::npos || tok.size() > 9) {
    throw PgmError(PgmErrorKind::BadHeader, path + ": bad PGM header field '" + tok + "'");
  }
  return std::stoul(tok);
}

}  // namespace detail

/// Binary P5, maxval 255 -> [1,H,W] scaled to [0,1].
template <typename T = float>
Tensor<T> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PgmError(PgmErrorKind::Open, "cannot open " + path);
  char magic[2] = {};
  in.read(magic, 2);
  if (in.gcount() != 2 || magic[0] != 'P' || magic[1] != '5') {
    throw PgmError(PgmErrorKind::BadMagic, path + ": not a binary PGM (P5)");
  }
  const std::size_t w = detail::pgm_number(in, path);
  const std::size_t h = detail::pgm_number(in, path);
  const std::size_t maxval = detail::pgm_number(in, path);
  if (maxval != 255) {
    throw PgmError(PgmErrorKind::BadMaxval, path + ": maxval " + std::to_string(maxval) + " is not 255");
  }
  if (w == 0 || h == 0) throw PgmError(PgmErrorKind::BadHeader, path + ": empty image");
  if (!std::isspace(in.get())) throw PgmError(PgmErrorKind::BadHeader, path + ": missing header terminator");
  std::vector<unsigned char> bytes(w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw PgmError(PgmErrorKind::Truncated, path + ": payload truncated");
  }
  Tensor<T> out(Shape{1, h, w});
  auto d = out.data();
  for (std::size_t i = 0; i < bytes.size(); ++i) d[i] = static_cast<T>(bytes[i]) / T(255);
  return out;
}

/// Clamp to [0,1], quantize round-half-up to 0..255.
template <typename T>
std::vector<unsigned char> quantize_u8(std::span<const T> values) {
  std::vector<unsigned char> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::clamp(static_cast<double>(values[i]), 0.0, 1.0);
    out[i] = static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
  }
  return out;
}

/// Writes [H,W] or [1,H,W] as binary P5.
template <typename T>
void write_pgm(const Tensor<T>& img, const std::string& path) {
  const auto& s = img.shape();
  if (!(s.size() == 2 || (s.size() == 3 && s[0] == 1))) {
    throw ShapeError("write_pgm: expected [H,W] or [1,H,W], got " + shape_str(s));
  }
  const std::size_t h = s[s.size() - 2], w = s.back();
  const auto bytes = quantize_u8<T>(img.data());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------- resize

/// Bilinear resize of [1,H,W] to [1,S,S]; identity when already S x S.
template <typename T>
Tensor<T> resize_to(const Tensor<T>& img, std::size_t size) {
  if (size == 0) throw ShapeError("resize_to: size must be >= 1");
  detail::require_rank(img.shape(), 3, "resize_to");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == size && w == size) return img;
  NoGradGuard no_grad;
  auto out = resize_bilinear(reshape(img, Shape{1, c, h, w}), size, size);
  return reshape(out, Shape{c, size, size});
}

/// Nearest-neighbour resize of a mask, re-binarized at 0.5.
template <typename T>
Tensor<T> resize_mask_to(const Tensor<T>& mask, std::size_t size) {
  if (size == 0) throw ShapeError("resize_mask_to: size must be >= 1");
  detail::require_rank(mask.shape(), 3, "resize_mask_to");
  const std::size_t c = mask.dim(0), h = mask.dim(1), w = mask.dim(2);
  Tensor<T> out(Shape{c, size, size});
  auto src = mask.data();
  auto dst = out.data();
  auto pick = [](std::size_t o, std::size_t in, std::size_t n) {
    return std::min(in - 1, (2 * o + 1) * in / (2 * n));
  };
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const T v = src[(k * h + pick(i, h, size)) * w + pick(j, w, size)];
        dst[(k * size + i) * size + j] = v >= T(0.5) ? T(1) : T(0);
      }
  return out;
}

// ---------------------------------------------------------------- configs

using Json = nlohmann::ordered_json;

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

template <typename V>
void read_key(const Json& j, const char* key, V& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("config: key '") + key + "' has the wrong type");
  }
}

inline void read_count(const Json& j, const char* key, std::size_t& dst) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ValidationError(std::string("config: key '") + key + "' must be a non-negative integer");
  }
  dst = v.get<std::size_t>();
}

}  // namespace detail

inline Json to_json(const ModelConfig& m) {
  return Json{{"base_channels", m.base_channels}, {"depth", m.depth},
              {"ssm_state", m.ssm_state},         {"image_size", m.image_size},
              {"gelu_kind", m.gelu_kind},         {"use_qseme", m.use_qseme},
              {"use_msdam", m.use_msdam},         {"use_ffrm", m.use_ffrm},
              {"seed", m.seed}};
}

inline Json to_json(const RunConfig& c) {
  Json j = to_json(c.model);
  const auto& t = c.train;
  j["lr"] = t.lr;
  j["weight_decay"] = t.weight_decay;
  j["batch"] = t.batch;
  j["epochs"] = t.epochs;
  j["patience"] = t.patience;
  j["betas"] = {t.beta1, t.beta2};
  j["eps"] = t.eps;
  j["dice_eps"] = t.dice_eps;
  j["threshold"] = t.threshold;
  j["val_count"] = t.val_count;
  return j;
}

/// Flat snake_case document; unknown keys are rejected, missing keys keep
/// their defaults. "seed" drives both initialization and shuffling.
inline RunConfig run_config_from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("config: top level must be a JSON object");
  static const char* known[] = {"base_channels", "depth", "ssm_state", "image_size", "gelu_kind",
                                "use_qseme", "use_msdam", "use_ffrm", "seed", "lr",
                                "weight_decay", "batch", "epochs", "patience", "betas", "eps",
                                "dice_eps", "threshold", "val_count"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ValidationError("config: unknown key '" + key + "'");
    }
  }
  RunConfig c;
  detail::read_count(j, "base_channels", c.model.base_channels);
  detail::read_count(j, "depth", c.model.depth);
  detail::read_count(j, "ssm_state", c.model.ssm_state);
  detail::read_count(j, "image_size", c.model.image_size);
  detail::read_key(j, "gelu_kind", c.model.gelu_kind);
  detail::read_key(j, "use_qseme", c.model.use_qseme);
  detail::read_key(j, "use_msdam", c.model.use_msdam);
  detail::read_key(j, "use_ffrm", c.model.use_ffrm);
  std::size_t seed = c.model.seed;
  detail::read_count(j, "seed", seed);
  c.model.seed = c.train.seed = seed;
  detail::read_key(j, "lr", c.train.lr);
  detail::read_key(j, "weight_decay", c.train.weight_decay);
  detail::read_count(j, "batch", c.train.batch);
  detail::read_count(j, "epochs", c.train.epochs);
  detail::read_count(j, "patience", c.train.patience);
  if (j.contains("betas")) {
    std::vector<double> b;
    detail::read_key(j, "betas", b);
    if (b.size() != 2) throw ValidationError("config: 'betas' must hold two numbers");
    c.train.beta1 = b[0];
    c.train.beta2 = b[1];
  }
  detail::read_key(j, "eps", c.train.eps);
  detail::read_key(j, "dice_eps", c.train.dice_eps);
  detail::read_key(j, "threshold", c.train.threshold);
  detail::read_count(j, "val_count", c.train.val_count);
  try {
    c.model.validate();
  } catch (const Error& e) {
    throw ValidationError(e.what());
  }
  c.train.validate();
  return c;
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(read_json_file(path));
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------- checkpoint

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(const std::string& s, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
  return v;
}

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline ModelConfig model_config_from_json(const Json& j) {
  RunConfig rc = run_config_from_json(j);
  return rc.model;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'O', 'C', 'T', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named f32 tensors in order, plus the model config they belong to.
struct CheckpointData {
  ModelConfig model;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

inline std::string encode_checkpoint(const CheckpointData& ck) {
  Json header;
  header["model_config"] = to_json(ck.model);
  Json list = Json::array();
  std::string payload;
  for (const auto& [name, t] : ck.tensors) {
    list.push_back(Json{{"name", name}, {"dtype", "f32"}, {"shape", t.shape()}});
    for (float v : t.vec()) detail::put_u32(payload, std::bit_cast<std::uint32_t>(v));
  }
  header["tensors"] = list;
  const std::string hs = header.dump(2);
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, hs.size());
  out += hs;
  out += payload;
  detail::put_u32(out, detail::crc32_of(payload.data(), payload.size()));
  return out;
}

/// Parses and verifies a checkpoint image. Structural damage and checksum
/// mismatches raise ValidationError.
inline CheckpointData decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, kCheckpointMagic, 4) != 0) {
    throw ValidationError("checkpoint: bad magic");
  }
  const auto version = detail::get_le(bytes, 4, 4);
  if (version != kCheckpointVersion) {
    throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto hlen = detail::get_le(bytes, 8, 8);
  if (hlen > bytes.size() - 16) throw ValidationError("checkpoint: header length out of range");
  Json header;
  try {
    header = Json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: bad header: ") + e.what());
  }
  CheckpointData ck;
  std::size_t payload_len = 0;
  std::vector<std::pair<std::string, Shape>> manifest;
  try {
    ck.model = detail::model_config_from_json(header.at("model_config"));
    for (const auto& e : header.at("tensors")) {
      if (e.at("dtype").get<std::string>() != "f32") throw ValidationError("checkpoint: unsupported dtype");
      Shape shape = e.at("shape").get<Shape>();
      payload_len += 4 * numel_of(shape);
      manifest.emplace_back(e.at("name").get<std::string>(), std::move(shape));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  const std::size_t start = 16 + hlen;
  if (bytes.size() != start + payload_len + 4) {
    throw ValidationError("checkpoint: payload length does not match manifest");
  }
  const auto stored_crc = static_cast<std::uint32_t>(detail::get_le(bytes, start + payload_len, 4));
  if (detail::crc32_of(bytes.data() + start, payload_len) != stored_crc) {
    throw ValidationError("checkpoint: CRC mismatch, file is corrupted");
  }
  std::size_t pos = start;
  for (auto& [name, shape] : manifest) {
    std::vector<float> values(numel_of(shape));
    for (auto& v : values) {
      v = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, pos, 4)));
      pos += 4;
    }
    ck.tensors.emplace_back(name, Tensor<float>(shape, std::move(values)));
  }
  return ck;
}

inline std::string read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const OctaMambaNet<float>& net, const std::string& path) {
  CheckpointData ck;
  ck.model = net.config();
  for (const auto& e : net.params().entries()) ck.tensors.emplace_back(e.name, e.tensor);
  write_text_file(path, encode_checkpoint(ck));
}

/// Copies checkpoint tensors into an existing network; names and shapes must
/// match the network's store exactly.
inline void load_into(OctaMambaNet<float>& net, const CheckpointData& ck) {
  const auto& entries = net.params().entries();
  if (entries.size() != ck.tensors.size()) throw ValidationError("checkpoint: tensor count does not match model");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = ck.tensors[i];
    if (entries[i].name != name || entries[i].tensor.shape() != t.shape()) {
      throw ValidationError("checkpoint: tensor '" + name + "' does not match model entry '" +
                            entries[i].name + "'");
    }
    auto dst = entries[i].tensor;
    std::copy(t.vec().begin(), t.vec().end(), dst.data().begin());
  }
}

inline std::unique_ptr<OctaMambaNet<float>> load_checkpoint(const std::string& path) {
  const auto ck = decode_checkpoint(read_binary_file(path));
  auto net = std::make_unique<OctaMambaNet<float>>(ck.model);
  load_into(*net, ck);
  return net;
}

// ---------------------------------------------------------------- datasets

/// image_XXXX.pgm / mask_XXXX.pgm pairs in index order.
struct DatasetFiles {
  std::vector<std::string> images, masks;
};

inline std::string sample_name(const char* prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu.pgm", prefix, i);
  return buf;
}

inline DatasetFiles list_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::map<std::string, std::string> images, masks;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.path().extension() != ".pgm") continue;
    if (name.rfind("image_", 0) == 0) images[name.substr(6)] = entry.path().string();
    if (name.rfind("mask_", 0) == 0) masks[name.substr(5)] = entry.path().string();
  }
  DatasetFiles files;
  for (const auto& [key, path] : images) {
    auto it = masks.find(key);
    if (it == masks.end()) throw IoError("missing mask for " + path);
    files.images.push_back(path);
    files.masks.push_back(it->second);
  }
  if (files.images.size() != masks.size()) throw IoError(dir + ": masks without images");
  return files;
}

/// Reads every pair, resized to size x size (masks by nearest neighbour).
inline std::vector<SegmentationSample<float>> load_dataset(const std::string& dir, std::size_t size) {
  const auto files = list_dataset(dir);
  std::vector<SegmentationSample<float>> out;
  for (std::size_t i = 0; i < files.images.size(); ++i) {
    out.push_back({resize_to(read_pgm<float>(files.images[i]), size),
                   resize_mask_to(read_pgm<float>(files.masks[i]), size)});
  }
  return out;
}

inline void write_dataset(const std::vector<SegmentationSample<float>>& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < data.size(); ++i) {
    write_pgm(data[i].image, (std::filesystem::path(dir) / sample_name("image", i)).string());
    write_pgm(data[i].mask, (std::filesystem::path(dir) / sample_name("mask", i)).string());
  }
}

// ---------------------------------------------------------------- reports

inline Json to_json(const MetricsReport& r) {
  Json per = Json::array();
  for (const auto& s : r.per_sample) per.push_back(Json{{"dice", s.dice}, {"iou", s.iou}, {"sen", s.sen}});
  return Json{{"dice", r.dice},
              {"iou", r.iou},
              {"sen", r.sen},
              {"n_samples", r.n_samples},
              {"params", r.params},
              {"confusion", {{"tp", r.total.tp}, {"fp", r.total.fp}, {"fn", r.total.fn}, {"tn", r.total.tn}}},
              {"per_sample", per}};
}

/// Aligned plain-text summary of a report.
inline std::string format_report(const MetricsReport& r) {
  char buf[256];
  std::string out = "metric       value\n";
  std::snprintf(buf, sizeof buf, "dice      %8.4f\niou       %8.4f\nsen       %8.4f\n", r.dice, r.iou, r.sen);
  out += buf;
  std::snprintf(buf, sizeof buf, "samples   %8zu\nparams    %8zu\n", r.n_samples, r.params);
  return out + buf;
}

inline Json to_json(const TrainHistory& h) {
  Json epochs = Json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back(Json{{"epoch", e.epoch}, {"train_loss", e.train_loss},
                          {"val_dice", e.val_dice}, {"improved", e.improved}});
  }
  return Json{{"best_epoch", h.best_epoch},
              {"best_val_dice", h.best_val_dice},
              {"stopped_early", h.stopped_early},
              {"epochs", epochs},
              {"step_losses", h.step_losses}};
}

}  // namespace octamamba
