#pragma once

// Land-cover transition accounting between two co-registered categorical maps.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisemap/eval.hpp"
#include "noisemap/raster.hpp"

namespace noisemap {

struct LandClass {
  int code = 0;
  std::string name;
  friend bool operator==(const LandClass&, const LandClass&) = default;
};

/// K x K pixel counts, from-class rows and to-class columns. The last class is
/// always the "unknown" bucket collecting codes missing from the class table.
struct TransitionMatrix {
  std::vector<LandClass> classes;
  std::vector<std::uint64_t> counts;

  std::size_t size() const { return classes.size(); }
  std::uint64_t at(std::size_t from, std::size_t to) const { return counts[from * size() + to]; }

  std::uint64_t row_sum(std::size_t from) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < size(); ++j) s += at(from, j);
    return s;
  }
  std::uint64_t col_sum(std::size_t to) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < size(); ++i) s += at(i, to);
    return s;
  }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }

  TransitionMatrix transposed() const {
    TransitionMatrix t{classes, std::vector<std::uint64_t>(counts.size())};
    for (std::size_t i = 0; i < size(); ++i)
      for (std::size_t j = 0; j < size(); ++j) t.counts[j * size() + i] = at(i, j);
    return t;
  }

  friend bool operator==(const TransitionMatrix&, const TransitionMatrix&) = default;
};

inline constexpr const char* kUnknownClass = "unknown";

namespace detail {

inline std::array<std::size_t, 256> class_lookup(const std::vector<LandClass>& classes) {
  std::array<std::size_t, 256> lut;
  lut.fill(classes.size());
  for (std::size_t k = 0; k < classes.size(); ++k) {
    require(classes[k].code >= 0 && classes[k].code < 256, ErrorKind::Argument, "class code outside 0..255");
    require(lut[static_cast<std::size_t>(classes[k].code)] == classes.size(), ErrorKind::Argument,
            "duplicate class code " + std::to_string(classes[k].code));
    lut[static_cast<std::size_t>(classes[k].code)] = k;
  }
  return lut;
}

inline bool is_nodata(const Raster& r, std::uint8_t v) { return r.nodata() && static_cast<double>(v) == *r.nodata(); }

}  // namespace detail

/// Joint histogram of (class in A, class in B) over pixels valid in both maps.
inline TransitionMatrix transition_matrix(const Raster& a, const Raster& b, const std::vector<LandClass>& classes) {
  if (!same_grid(a, b)) throw Error(ErrorKind::Alignment, "transition maps are not aligned");
  require(a.dtype() == DType::U8 && a.bands() == 1 && b.dtype() == DType::U8 && b.bands() == 1, ErrorKind::Argument,
          "transition maps must be 1-band U8 rasters");
  const auto lut = detail::class_lookup(classes);
  TransitionMatrix tm;
  tm.classes = classes;
  tm.classes.push_back({-1, kUnknownClass});
  const std::size_t k = tm.size();
  tm.counts.assign(k * k, 0);
  const auto va = a.u8(), vb = b.u8();
  for (std::size_t i = 0; i < va.size(); ++i) {
    if (detail::is_nodata(a, va[i]) || detail::is_nodata(b, vb[i])) continue;
    ++tm.counts[lut[va[i]] * k + lut[vb[i]]];
  }
  return tm;
}

/// Per-class pixel histogram of one map, using the same class indexing as
/// transition_matrix. Nodata pixels of `map` (and of `other`, if given) are skipped.
inline std::vector<std::uint64_t> class_histogram(const Raster& map, const std::vector<LandClass>& classes,
                                                  const Raster* other = nullptr) {
  const auto lut = detail::class_lookup(classes);
  std::vector<std::uint64_t> h(classes.size() + 1, 0);
  const auto v = map.u8();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (detail::is_nodata(map, v[i])) continue;
    if (other && detail::is_nodata(*other, other->u8()[i])) continue;
    ++h[lut[v[i]]];
  }
  return h;
}

/// Burns a binary palm map into a land-cover map: wherever palm == 1 the pixel
/// takes `palm_code`, whatever the land-cover class claims.
inline Raster overlay_palm(const Raster& landcover, const Raster& palm, std::uint8_t palm_code) {
  if (!same_grid(landcover, palm)) throw Error(ErrorKind::Alignment, "palm map not aligned with land cover");
  Raster out = landcover;
  auto dst = out.u8();
  const auto p = palm.u8();
  for (std::size_t i = 0; i < dst.size(); ++i)
    if (p[i] == 1 && !detail::is_nodata(palm, p[i])) dst[i] = palm_code;
  return out;
}

/// CSV of non-zero flows "from,to,pixels" in class order. With a pixel area
/// (square metres) a hectares column is appended.
inline void export_flows(const TransitionMatrix& tm, const std::filesystem::path& path,
                         std::optional<double> pixel_area_m2 = std::nullopt) {
  std::string out = pixel_area_m2 ? "from,to,pixels,hectares\n" : "from,to,pixels\n";
  for (std::size_t i = 0; i < tm.size(); ++i)
    for (std::size_t j = 0; j < tm.size(); ++j) {
      const auto n = tm.at(i, j);
      if (n == 0) continue;
      out += tm.classes[i].name + "," + tm.classes[j].name + "," + std::to_string(n);
      if (pixel_area_m2) out += "," + format_double(static_cast<double>(n) * *pixel_area_m2 / 10000.0);
      out += "\n";
    }
  detail::write_file(path, out);
}

inline nlohmann::json to_json(const TransitionMatrix& tm) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : tm.classes) classes.push_back({{"code", c.code}, {"name", c.name}});
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < tm.size(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < tm.size(); ++j) row.push_back(tm.at(i, j));
    rows.push_back(row);
  }
  return {{"classes", classes}, {"counts", rows}, {"total", tm.total()}};
}

inline void write_matrix_json(const TransitionMatrix& tm, const std::filesystem::path& path) {
  detail::write_file(path, to_json(tm).dump(2) + "\n");
}

}  // namespace noisemap
