#pragma once

// Patch extraction, class balancing, train/validation splitting and per-band
// z-score normalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisemap/raster.hpp"
#include "noisemap/rng.hpp"

namespace noisemap {

struct PatchPair {
  Raster image;  // F32, bands x tile x tile
  Raster label;  // U8, 1 x tile x tile, values in {0,1}
  Anchor anchor;
  bool positive = false;

  std::string id() const { return std::to_string(anchor.row) + "_" + std::to_string(anchor.col); }
};

struct SplitManifest {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::uint64_t seed = 0;
  double ratio = 0.7;
};

inline void to_json(nlohmann::json& j, const SplitManifest& m) {
  j = {{"seed", m.seed}, {"ratio", m.ratio}, {"train", m.train}, {"val", m.val}};
}

inline void from_json(const nlohmann::json& j, SplitManifest& m) {
  j.at("seed").get_to(m.seed);
  j.at("ratio").get_to(m.ratio);
  j.at("train").get_to(m.train);
  j.at("val").get_to(m.val);
}

/// Non-overlapping tile x tile patches over the shared extent. Partial edge
/// tiles are dropped.
inline std::vector<PatchPair> extract_patches(const Raster& image, const Raster& labels, std::size_t tile) {
  require(tile >= 1, ErrorKind::Argument, "tile must be >= 1");
  if (!same_grid(image, labels))
    throw Error(ErrorKind::Alignment, "image and label rasters do not share dimensions and geotransform");
  require(image.dtype() == DType::F32, ErrorKind::Argument, "image raster must be F32");
  require(labels.dtype() == DType::U8 && labels.bands() == 1, ErrorKind::Argument, "label raster must be 1-band U8");

  std::vector<PatchPair> out;
  for (std::size_t r = 0; r + tile <= image.height(); r += tile)
    for (std::size_t c = 0; c + tile <= image.width(); c += tile) {
      PatchPair p{crop(image, r, c, tile, tile), crop(labels, r, c, tile, tile), {r, c}, false};
      const auto l = p.label.u8();
      for (auto v : l) require(v <= 1, ErrorKind::Domain, "label values must be 0 or 1");
      p.positive = std::any_of(l.begin(), l.end(), [](std::uint8_t v) { return v == 1; });
      out.push_back(std::move(p));
    }
  return out;
}

/// Indices retained by random undersampling of the majority class: every
/// minority index plus an equal-sized seeded sample of the majority, in
/// ascending order.
inline std::vector<std::size_t> undersample_indices(const std::vector<bool>& positive, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < positive.size(); ++i) (positive[i] ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty())
    throw Error(ErrorKind::DegenerateCorpus, "undersampling needs both positive and negative patches (have " +
                                                 std::to_string(pos.size()) + " positive, " +
                                                 std::to_string(neg.size()) + " negative)");
  auto& majority = pos.size() > neg.size() ? pos : neg;
  const std::size_t keep = std::min(pos.size(), neg.size());
  Engine engine(seed);
  std::shuffle(majority.begin(), majority.end(), engine);
  majority.resize(keep);

  std::vector<std::size_t> kept;
  kept.reserve(2 * keep);
  kept.insert(kept.end(), pos.begin(), pos.end());
  kept.insert(kept.end(), neg.begin(), neg.end());
  std::sort(kept.begin(), kept.end());
  return kept;
}

inline std::vector<PatchPair> balance_undersample(const std::vector<PatchPair>& patches, std::uint64_t seed) {
  std::vector<bool> flags(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) flags[i] = patches[i].positive;
  std::vector<PatchPair> out;
  for (auto i : undersample_indices(flags, seed)) out.push_back(patches[i]);
  return out;
}

/// Seeded shuffle followed by a prefix split: floor(ratio * n) ids go to train.
inline SplitManifest split(std::vector<std::string> ids, double ratio, std::uint64_t seed) {
  require(ratio > 0.0 && ratio < 1.0, ErrorKind::Argument, "split ratio must lie in (0,1)");
  if (ids.empty()) throw Error(ErrorKind::DegenerateCorpus, "cannot split an empty corpus");
  Engine engine(seed);
  std::shuffle(ids.begin(), ids.end(), engine);
  // The nudge keeps products such as 0.7 * 10 = 7.000000000000001 or 0.29 * 100 from
  // landing on the wrong side of an integer.
  const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(ids.size()) + 1e-9));
  SplitManifest m;
  m.seed = seed;
  m.ratio = ratio;
  m.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  m.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return m;
}

inline SplitManifest split(const std::vector<PatchPair>& patches, double ratio, std::uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(patches.size());
  for (const auto& p : patches) ids.push_back(p.id());
  return split(std::move(ids), ratio, seed);
}

/// (x - mean) / std per band, population statistics; constant bands become zero.
inline void zscore_inplace(std::span<float> band) {
  if (band.empty()) return;
  double s = 0;
  for (float v : band) s += v;
  const double mu = s / static_cast<double>(band.size());
  double ss = 0;
  for (float v : band) ss += (v - mu) * (v - mu);
  const double sigma = std::sqrt(ss / static_cast<double>(band.size()));
  if (sigma == 0.0) {
    std::fill(band.begin(), band.end(), 0.0f);
    return;
  }
  for (float& v : band) v = static_cast<float>((v - mu) / sigma);
}

inline Raster zscore_normalize(const Raster& image) {
  Raster out = image;
  for (std::size_t b = 0; b < out.bands(); ++b) zscore_inplace(out.band_f32(b));
  return out;
}

// On-disk corpus: <dir>/images/<id>.rst, <dir>/labels/<id>.rst, <dir>/manifest.json

inline void write_patches(const std::vector<PatchPair>& patches, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");
  for (const auto& p : patches) {
    write_raster(p.image, dir / "images" / (p.id() + ".rst"));
    write_raster(p.label, dir / "labels" / (p.id() + ".rst"));
  }
}

inline PatchPair read_patch(const std::filesystem::path& dir, const std::string& id) {
  const auto sep = id.find('_');
  require(sep != std::string::npos, ErrorKind::Format, "bad patch id '" + id + "'");
  PatchPair p;
  p.anchor = {std::stoul(id.substr(0, sep)), std::stoul(id.substr(sep + 1))};
  const auto ip = dir / "images" / (id + ".rst");
  const auto lp = dir / "labels" / (id + ".rst");
  if (!std::filesystem::exists(ip)) throw Error(ErrorKind::Io, "missing patch image", ip.string());
  if (!std::filesystem::exists(lp)) throw Error(ErrorKind::Io, "missing patch label", lp.string());
  p.image = read_raster(ip);
  p.label = read_raster(lp);
  const auto l = p.label.u8();
  p.positive = std::any_of(l.begin(), l.end(), [](std::uint8_t v) { return v == 1; });
  return p;
}

inline void write_manifest(const SplitManifest& m, const std::filesystem::path& path) {
  detail::write_file(path, nlohmann::json(m).dump(2) + "\n");
}

inline SplitManifest read_manifest(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(detail::read_file(path)).get<SplitManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("bad manifest: ") + e.what(), path.string());
  }
}

}  // namespace noisemap
