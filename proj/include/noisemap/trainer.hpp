#pragma once

// Training and tiled inference.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisemap/dataset.hpp"
#include "noisemap/fusion.hpp"
#include "noisemap/loss.hpp"
#include "noisemap/model.hpp"
#include "noisemap/raster.hpp"

namespace noisemap {

enum class LossKind { Dmi, Bce };

inline std::string to_string(LossKind k) { return k == LossKind::Dmi ? "dmi" : "bce"; }

inline LossKind parse_loss(const std::string& s) {
  if (s == "dmi" || s == "DMI") return LossKind::Dmi;
  if (s == "bce" || s == "BCE") return LossKind::Bce;
  throw Error(ErrorKind::Config, "unknown loss '" + s + "' (expected dmi or bce)");
}

struct TrainConfig {
  double lr = 0.001;
  double momentum = 0.9;
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  LossKind loss = LossKind::Dmi;
  std::uint64_t seed = 0;

  void validate() const {
    require(lr > 0.0, ErrorKind::Config, "lr must be positive");
    require(momentum >= 0.0 && momentum < 1.0, ErrorKind::Config, "momentum must lie in [0,1)");
    require(epochs >= 1, ErrorKind::Config, "epochs must be >= 1");
    require(batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<EpochRecord> history;
  // DMI only sees |det U|, so a network can converge to the inverted labelling.
  // After training the head is permuted if needed so that det U > 0 on the
  // training labels; this flag records whether that happened.
  bool classes_swapped = false;
};

using PatchIndex = std::map<std::string, PatchPair>;

namespace detail {

template <class T>
struct Batch {
  ad::Tensor<T> images;
  std::vector<std::uint8_t> labels;
};

template <class T>
Batch<T> make_batch(const PatchIndex& patches, const std::vector<std::string>& ids, std::size_t begin, std::size_t end) {
  const PatchPair& first = patches.at(ids[begin]);
  const std::size_t C = first.image.bands(), H = first.image.height(), W = first.image.width();
  const std::size_t B = end - begin;
  std::vector<T> x(B * C * H * W);
  std::vector<std::uint8_t> y;
  y.reserve(B * H * W);
  for (std::size_t i = begin; i < end; ++i) {
    const auto it = patches.find(ids[i]);
    if (it == patches.end()) throw Error(ErrorKind::Incomplete, "manifest references unknown patch '" + ids[i] + "'");
    const PatchPair& p = it->second;
    require(p.image.bands() == C && p.image.height() == H && p.image.width() == W, ErrorKind::Shape,
            "patches in a batch must share dimensions");
    const Raster z = zscore_normalize(p.image);
    const auto v = z.f32();
    std::copy(v.begin(), v.end(), x.begin() + static_cast<std::ptrdiff_t>((i - begin) * C * H * W));
    const auto l = p.label.u8();
    y.insert(y.end(), l.begin(), l.end());
  }
  return {ad::Tensor<T>({B, C, H, W}, std::move(x)), std::move(y)};
}

template <class T>
ad::Tensor<T> batch_loss(UNet<T>& model, const Batch<T>& batch, LossKind kind, ad::Mode mode) {
  const auto probs = ad::softmax(model.forward(batch.images, mode));
  return kind == LossKind::Dmi ? dense_dmi_loss(probs, std::span<const std::uint8_t>(batch.labels))
                               : dense_bce_loss(probs, std::span<const std::uint8_t>(batch.labels));
}

}  // namespace detail

/// Mean loss over the given patches in eval mode; NaN for an empty list.
template <class T>
double evaluate_loss(UNet<T>& model, const PatchIndex& patches, const std::vector<std::string>& ids, LossKind kind,
                     std::size_t batch_size) {
  if (ids.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  std::size_t batches = 0;
  for (std::size_t b = 0; b < ids.size(); b += batch_size, ++batches) {
    const auto batch = detail::make_batch<T>(patches, ids, b, std::min(ids.size(), b + batch_size));
    total += static_cast<double>(detail::batch_loss(model, batch, kind, ad::Mode::Eval).item());
  }
  return total / static_cast<double>(batches);
}

/// Sign of det U (rows = predicted class, columns = label class) accumulated
/// over the given patches in eval mode.
template <class T>
double joint_determinant(UNet<T>& model, const PatchIndex& patches, const std::vector<std::string>& ids,
                         std::size_t batch_size) {
  double u[4] = {0, 0, 0, 0};
  std::size_t n = 0;
  for (std::size_t b = 0; b < ids.size(); b += batch_size) {
    const auto batch = detail::make_batch<T>(patches, ids, b, std::min(ids.size(), b + batch_size));
    const auto probs = ad::flatten_pixels(ad::softmax(model.forward(batch.images.detach(), ad::Mode::Eval)));
    const auto p = probs.values();
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      const std::size_t y = batch.labels[i];
      u[0 * 2 + y] += p[i * 2 + 0];
      u[1 * 2 + y] += p[i * 2 + 1];
    }
    n += batch.labels.size();
  }
  if (n == 0) return 0.0;
  for (auto& v : u) v /= static_cast<double>(n);
  return u[0] * u[3] - u[1] * u[2];
}

/// Minibatch SGD with momentum. Each epoch reshuffles the training ids with a
/// seed derived from (config.seed, epoch); every batch is z-scored per patch.
template <class T>
TrainResult train(const TrainConfig& config, UNet<T>& model, const SplitManifest& manifest, const PatchIndex& patches) {
  config.validate();
  if (manifest.train.empty()) throw Error(ErrorKind::DegenerateCorpus, "training split is empty");
  if (model.config().classes != 2) throw Error(ErrorKind::Config, "training supports two classes");
  for (const auto* ids : {&manifest.train, &manifest.val})
    for (const auto& id : *ids)
      if (!patches.count(id)) throw Error(ErrorKind::Incomplete, "manifest references unknown patch '" + id + "'");
  {
    const auto& p = patches.at(manifest.train.front());
    require(p.image.bands() == model.config().in_bands, ErrorKind::Config,
            "patch band count " + std::to_string(p.image.bands()) + " does not match model in_bands");
    model.config().validate_tile(p.image.height());
    model.config().validate_tile(p.image.width());
  }

  auto params = model.parameters();
  const std::span<ad::Parameter<T>* const> pspan(params);
  TrainResult result;
  std::vector<std::string> order = manifest.train;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order = manifest.train;
    Engine engine(derive_seed(config.seed, epoch));
    std::shuffle(order.begin(), order.end(), engine);

    double total = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size, ++batches) {
      const auto batch = detail::make_batch<T>(patches, order, b, std::min(order.size(), b + config.batch_size));
      ad::zero_grad(pspan);
      const auto loss = detail::batch_loss(model, batch, config.loss, ad::Mode::Train);
      ad::backward(loss);
      ad::sgd_step(pspan, static_cast<T>(config.lr), static_cast<T>(config.momentum));
      total += static_cast<double>(loss.item());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(batches);
    rec.val_loss = evaluate_loss(model, patches, manifest.val, config.loss, config.batch_size);
    result.history.push_back(rec);
  }

  if (config.loss == LossKind::Dmi && joint_determinant(model, patches, manifest.train, config.batch_size) < 0.0) {
    model.swap_output_classes(0, 1);
    result.classes_swapped = true;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline std::filesystem::path config_sidecar(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".json");
}

template <class T>
void save_model(const UNet<T>& model, const std::filesystem::path& path) {
  ad::write_checkpoint(model.state(), path);
  detail::write_file(config_sidecar(path), nlohmann::json(model.config()).dump(2) + "\n");
}

template <class T = float>
UNet<T> load_model(const std::filesystem::path& path) {
  const auto sidecar = config_sidecar(path);
  if (!std::filesystem::exists(sidecar)) throw Error(ErrorKind::Io, "missing model config sidecar", sidecar.string());
  UNetConfig cfg;
  try {
    cfg = nlohmann::json::parse(detail::read_file(sidecar)).get<UNetConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("bad model config: ") + e.what(), sidecar.string());
  }
  UNet<T> model(cfg);
  model.load_state(ad::read_checkpoint(path));
  return model;
}

inline void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::string out = "epoch,train_loss,val_loss\n";
  for (const auto& r : history)
    out += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," +
           (std::isnan(r.val_loss) ? std::string() : format_double(r.val_loss)) + "\n";
  detail::write_file(path, out);
}

// ---------------------------------------------------------------------------
// Tiled inference
// ---------------------------------------------------------------------------

enum class TileNormalization { PerTile, None };

struct PredictOptions {
  std::size_t tile = 64;
  std::size_t overlap = 8;
  TileNormalization normalization = TileNormalization::PerTile;
  std::size_t threads = 1;
};

struct Prediction {
  Raster prob;  // F32, positive-class probability
  Raster hard;  // U8, prob >= 0.5
};

/// Thread cap from NOISEMAP_THREADS (default 1).
inline std::size_t threads_from_env() {
  if (const char* v = std::getenv("NOISEMAP_THREADS")) {
    try {
      const long n = std::stol(v);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::logic_error&) {
    }
  }
  return 1;
}

/// Positive-class probability for one tile anchored at `a`. The valid part of
/// the window is z-scored per band and the remainder of the tile is zero.
template <class T>
Raster predict_tile(UNet<T>& model, const Raster& image, Anchor a, std::size_t tile, TileNormalization norm) {
  const std::size_t h = std::min(tile, image.height() - a.row), w = std::min(tile, image.width() - a.col);
  Raster window = crop(image, a.row, a.col, h, w);
  if (norm == TileNormalization::PerTile) window = zscore_normalize(window);
  const Raster padded = crop(window, 0, 0, tile, tile);
  const auto v = padded.f32();
  const std::size_t C = image.bands();
  ad::Tensor<T> x({1, C, tile, tile}, std::vector<T>(v.begin(), v.end()));
  const auto probs = ad::softmax(model.forward(x, ad::Mode::Eval));
  Raster out(DType::F32, 1, tile, tile, padded.geo());
  auto dst = out.f32();
  const auto p = probs.values();
  for (std::size_t i = 0; i < tile * tile; ++i) dst[i] = static_cast<float>(p[tile * tile + i]);
  return out;
}

template <class T>
Prediction predict_map(UNet<T>& model, const Raster& image, const PredictOptions& opt) {
  require(image.dtype() == DType::F32, ErrorKind::Argument, "image must be an F32 raster");
  if (image.bands() != model.config().in_bands)
    throw Error(ErrorKind::Config, "image has " + std::to_string(image.bands()) + " bands, model expects " +
                                       std::to_string(model.config().in_bands));
  model.config().validate_tile(opt.tile);
  const TileGrid grid = plan_tiles(image.height(), image.width(), opt.tile, opt.overlap);
  const auto anchors = grid.origins();

  TileSet tiles(anchors.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.threads, anchors.size()));
  auto run = [&](std::size_t worker) {
    for (std::size_t i = worker; i < anchors.size(); i += workers)
      tiles[i] = {anchors[i], predict_tile(model, image, anchors[i], opt.tile, opt.normalization)};
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }

  Prediction out;
  out.prob = mosaic(tiles, grid);
  out.prob.set_geo(image.geo());
  out.hard = threshold(out.prob);
  out.hard.set_classes({{0, "other"}, {1, "oil_palm"}});
  return out;
}

}  // namespace noisemap
