#pragma once

// Geo-referenced raster container, the RSTv1 file format, nearest-neighbour
// resampling, overlapped tiling and nearest-centre mosaicking.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisemap/error.hpp"

namespace noisemap {

enum class DType : std::uint8_t { U8 = 0, F32 = 1 };

/// Six-parameter affine transform, pixel-corner origin:
///   x = origin_x + col * pixel_width  + row * row_rotation
///   y = origin_y + col * col_rotation + row * pixel_height
struct GeoTransform {
  double origin_x = 0.0;
  double pixel_width = 1.0;
  double row_rotation = 0.0;
  double origin_y = 0.0;
  double col_rotation = 0.0;
  double pixel_height = -1.0;

  std::array<double, 6> as_array() const {
    return {origin_x, pixel_width, row_rotation, origin_y, col_rotation, pixel_height};
  }
  static GeoTransform from_array(const std::array<double, 6>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5]};
  }

  std::pair<double, double> to_world(double col, double row) const {
    return {origin_x + col * pixel_width + row * row_rotation,
            origin_y + col * col_rotation + row * pixel_height};
  }

  /// Fractional (col, row) of a world coordinate; nullopt if the transform is singular.
  std::optional<std::pair<double, double>> to_pixel(double x, double y) const {
    const double det = pixel_width * pixel_height - row_rotation * col_rotation;
    if (det == 0.0) return std::nullopt;
    const double dx = x - origin_x;
    const double dy = y - origin_y;
    return std::pair{(pixel_height * dx - row_rotation * dy) / det,
                     (-col_rotation * dx + pixel_width * dy) / det};
  }

  /// Transform of a window whose top-left pixel is (row, col) of this grid.
  GeoTransform shifted(std::int64_t row, std::int64_t col) const {
    GeoTransform g = *this;
    auto [x, y] = to_world(static_cast<double>(col), static_cast<double>(row));
    g.origin_x = x;
    g.origin_y = y;
    return g;
  }

  /// Ground area of one pixel in map units squared.
  double pixel_area() const { return std::abs(pixel_width * pixel_height - row_rotation * col_rotation); }

  friend bool operator==(const GeoTransform&, const GeoTransform&) = default;
};

using ClassTable = std::map<int, std::string>;

class Raster {
 public:
  using Storage = std::variant<std::vector<std::uint8_t>, std::vector<float>>;

  Raster() = default;

  Raster(DType dtype, std::size_t bands, std::size_t height, std::size_t width, GeoTransform geo = {})
      : bands_(bands), height_(height), width_(width), geo_(geo) {
    const std::size_t n = bands * height * width;
    if (dtype == DType::U8)
      data_ = std::vector<std::uint8_t>(n, 0);
    else
      data_ = std::vector<float>(n, 0.0f);
  }

  DType dtype() const { return data_.index() == 0 ? DType::U8 : DType::F32; }
  std::size_t bands() const { return bands_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t plane_size() const { return height_ * width_; }
  std::size_t size() const { return bands_ * height_ * width_; }

  const GeoTransform& geo() const { return geo_; }
  void set_geo(const GeoTransform& g) { geo_ = g; }

  const std::optional<double>& nodata() const { return nodata_; }
  void set_nodata(std::optional<double> v) { nodata_ = v; }

  const ClassTable& classes() const { return classes_; }
  void set_classes(ClassTable t) { classes_ = std::move(t); }

  std::size_t index(std::size_t band, std::size_t row, std::size_t col) const {
    return (band * height_ + row) * width_ + col;
  }

  template <class T>
  std::span<T> values() {
    return std::span<T>(std::get<std::vector<T>>(data_));
  }
  template <class T>
  std::span<const T> values() const {
    return std::span<const T>(std::get<std::vector<T>>(data_));
  }

  std::span<std::uint8_t> u8() { return checked<std::uint8_t>(); }
  std::span<const std::uint8_t> u8() const { return checked<std::uint8_t>(); }
  std::span<float> f32() { return checked<float>(); }
  std::span<const float> f32() const { return checked<float>(); }

  std::span<const float> band_f32(std::size_t band) const { return f32().subspan(band * plane_size(), plane_size()); }
  std::span<float> band_f32(std::size_t band) { return f32().subspan(band * plane_size(), plane_size()); }

  double value(std::size_t band, std::size_t row, std::size_t col) const {
    return std::visit([&](const auto& v) { return static_cast<double>(v[index(band, row, col)]); }, data_);
  }

  void set(std::size_t band, std::size_t row, std::size_t col, double v) {
    std::visit(
        [&](auto& d) {
          using T = typename std::decay_t<decltype(d)>::value_type;
          d[index(band, row, col)] = static_cast<T>(v);
        },
        data_);
  }

  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  /// Throws Validation on any broken invariant.
  void validate() const {
    require(bands_ >= 1, ErrorKind::Validation, "raster must have at least one band");
    require(height_ >= 1 && width_ >= 1, ErrorKind::Validation, "raster must have non-zero extent");
    const std::size_t n = std::visit([](const auto& v) { return v.size(); }, data_);
    require(n == size(), ErrorKind::Validation, "raster data length does not match width*height*bands");
    require(geo_.pixel_width > 0.0, ErrorKind::Validation, "pixel width must be positive");
    require(geo_.pixel_height != 0.0, ErrorKind::Validation, "pixel height must be non-zero");
    if (dtype() == DType::U8 && !classes_.empty()) {
      std::array<bool, 256> allowed{};
      for (const auto& [code, name] : classes_)
        if (code >= 0 && code < 256) allowed[static_cast<std::size_t>(code)] = true;
      if (nodata_ && *nodata_ >= 0 && *nodata_ < 256) allowed[static_cast<std::size_t>(*nodata_)] = true;
      for (auto v : u8())
        require(allowed[v], ErrorKind::Validation, "categorical value " + std::to_string(v) + " not in class table");
    }
  }

  friend bool operator==(const Raster& a, const Raster& b) {
    if (a.bands_ != b.bands_ || a.height_ != b.height_ || a.width_ != b.width_) return false;
    if (a.data_.index() != b.data_.index()) return false;
    if (!(a.geo_ == b.geo_) || a.classes_ != b.classes_) return false;
    if (a.nodata_.has_value() != b.nodata_.has_value()) return false;
    if (a.nodata_ && std::bit_cast<std::uint64_t>(*a.nodata_) != std::bit_cast<std::uint64_t>(*b.nodata_)) return false;
    // Bytewise so that NaN payloads compare equal to themselves.
    return std::visit(
        [&](const auto& va) {
          using V = std::decay_t<decltype(va)>;
          const auto& vb = std::get<V>(b.data_);
          return va.size() == vb.size() &&
                 (va.empty() || std::memcmp(va.data(), vb.data(), va.size() * sizeof(typename V::value_type)) == 0);
        },
        a.data_);
  }

 private:
  template <class T>
  std::span<T> checked() {
    require(std::holds_alternative<std::vector<T>>(data_), ErrorKind::Argument, "raster dtype mismatch");
    return values<T>();
  }
  template <class T>
  std::span<const T> checked() const {
    require(std::holds_alternative<std::vector<T>>(data_), ErrorKind::Argument, "raster dtype mismatch");
    return values<T>();
  }

  std::size_t bands_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  GeoTransform geo_{};
  std::optional<double> nodata_;
  ClassTable classes_;
  Storage data_ = std::vector<std::uint8_t>{};
};

inline bool same_grid(const Raster& a, const Raster& b) {
  return a.height() == b.height() && a.width() == b.width() && a.geo() == b.geo();
}

// ---------------------------------------------------------------------------
// RSTv1 file format (little-endian)
//   magic "RST1" | version u32 | dtype u8 | bands u32 | height u64 | width u64
//   | nodata-present u8 | nodata f64 | geotransform 6 x f64 | payload
// ---------------------------------------------------------------------------

inline constexpr std::size_t kRasterHeaderSize = 4 + 4 + 1 + 4 + 8 + 8 + 1 + 8 + 6 * 8;
inline constexpr std::uint32_t kRasterVersion = 1;

namespace detail {

template <class U>
void put_le(std::string& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
 public:
  ByteReader(std::span<const char> bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::span<const char> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& path() const { return path_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorKind::Corruption, "unexpected end of file", path_);
  }
  std::span<const char> bytes_;
  std::size_t pos_ = 0;
  std::string path_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open file for reading", path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open file for writing", path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed", path.string());
}

}  // namespace detail

inline std::string encode_raster(const Raster& r) {
  r.validate();
  std::string out;
  out.reserve(kRasterHeaderSize + r.size() * (r.dtype() == DType::U8 ? 1 : 4));
  out.append("RST1", 4);
  detail::put_le<std::uint32_t>(out, kRasterVersion);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.bands()));
  detail::put_le<std::uint64_t>(out, r.height());
  detail::put_le<std::uint64_t>(out, r.width());
  detail::put_le<std::uint8_t>(out, r.nodata() ? 1 : 0);
  detail::put_f64(out, r.nodata().value_or(0.0));
  for (double g : r.geo().as_array()) detail::put_f64(out, g);
  if (r.dtype() == DType::U8) {
    auto v = r.u8();
    out.append(reinterpret_cast<const char*>(v.data()), v.size());
  } else {
    for (float f : r.f32()) detail::put_le(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline Raster decode_raster(std::span<const char> bytes, const std::string& path = {}) {
  detail::ByteReader in(bytes, path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "RST1", 4) != 0)
    throw Error(ErrorKind::Format, "bad magic, expected RST1", path);
  in.take(4);
  const auto version = in.get<std::uint32_t>();
  if (version != kRasterVersion)
    throw Error(ErrorKind::Unsupported, "unsupported RST version " + std::to_string(version), path);
  const auto dtype_code = in.get<std::uint8_t>();
  if (dtype_code > 1) throw Error(ErrorKind::Unsupported, "unknown dtype code " + std::to_string(dtype_code), path);
  const auto bands = in.get<std::uint32_t>();
  const auto height = in.get<std::uint64_t>();
  const auto width = in.get<std::uint64_t>();
  const auto has_nodata = in.get<std::uint8_t>();
  const double nodata = in.get_f64();
  std::array<double, 6> gt{};
  for (auto& g : gt) g = in.get_f64();

  const std::size_t elem = dtype_code == 0 ? 1 : 4;
  // Guard against overflow before allocating.
  const auto max_elems = static_cast<unsigned __int128>(bands) * height * width;
  if (max_elems * elem != in.remaining())
    throw Error(ErrorKind::Corruption, "payload length does not match header dimensions", path);

  Raster r(static_cast<DType>(dtype_code), bands, height, width, GeoTransform::from_array(gt));
  if (has_nodata) r.set_nodata(nodata);
  if (r.dtype() == DType::U8) {
    auto src = in.take(r.size());
    std::memcpy(r.u8().data(), src.data(), src.size());
  } else {
    for (auto& f : r.f32()) f = in.get_f32();
  }
  return r;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

inline void write_raster(const Raster& r, const std::filesystem::path& path) {
  const std::string bytes = encode_raster(r);
  detail::write_file(path, bytes);
  const auto meta = sidecar_path(path);
  if (!r.classes().empty()) {
    nlohmann::json j;
    for (const auto& [code, name] : r.classes()) j["classes"][std::to_string(code)] = name;
    detail::write_file(meta, j.dump(2) + "\n");
  } else if (std::filesystem::exists(meta)) {
    std::filesystem::remove(meta);
  }
}

inline Raster read_raster(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  Raster r = decode_raster(std::span<const char>(bytes.data(), bytes.size()), path.string());
  const auto meta = sidecar_path(path);
  if (std::filesystem::exists(meta)) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(detail::read_file(meta));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, std::string("bad sidecar: ") + e.what(), meta.string());
    }
    ClassTable table;
    if (j.contains("classes"))
      for (auto& [code, name] : j["classes"].items()) table[std::stoi(code)] = name.get<std::string>();
    r.set_classes(std::move(table));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Nearest-neighbour upsampling by an integer factor; values are copied, never blended.
inline Raster resample_nearest(const Raster& r, std::size_t factor) {
  require(factor >= 1, ErrorKind::Argument, "resample factor must be >= 1");
  GeoTransform g = r.geo();
  const double f = static_cast<double>(factor);
  g.pixel_width /= f;
  g.pixel_height /= f;
  g.row_rotation /= f;
  g.col_rotation /= f;
  Raster out(r.dtype(), r.bands(), r.height() * factor, r.width() * factor, g);
  out.set_nodata(r.nodata());
  out.set_classes(r.classes());
  std::visit(
      [&](const auto& src) {
        using T = typename std::decay_t<decltype(src)>::value_type;
        auto dst = out.values<T>();
        for (std::size_t b = 0; b < r.bands(); ++b)
          for (std::size_t i = 0; i < out.height(); ++i)
            for (std::size_t j = 0; j < out.width(); ++j)
              dst[out.index(b, i, j)] = src[r.index(b, i / factor, j / factor)];
      },
      r.storage());
  return out;
}

// ---------------------------------------------------------------------------
// Tiling and mosaicking
// ---------------------------------------------------------------------------

struct Anchor {
  std::size_t row = 0;
  std::size_t col = 0;
  friend auto operator<=>(const Anchor&, const Anchor&) = default;
};

struct TileGrid {
  std::size_t tile = 0;
  std::size_t overlap = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::size_t> row_anchors;
  std::vector<std::size_t> col_anchors;

  /// Row-major list of tile anchors.
  std::vector<Anchor> origins() const {
    std::vector<Anchor> out;
    out.reserve(row_anchors.size() * col_anchors.size());
    for (auto r : row_anchors)
      for (auto c : col_anchors) out.push_back({r, c});
    return out;
  }
  std::size_t count() const { return row_anchors.size() * col_anchors.size(); }
  /// True when the source is smaller than one tile along some axis.
  bool padded() const { return height < tile || width < tile; }
};

namespace detail {

inline std::vector<std::size_t> axis_anchors(std::size_t dim, std::size_t tile, std::size_t overlap) {
  const std::size_t stride = tile - overlap;
  std::vector<std::size_t> anchors{0};
  if (dim <= tile) return anchors;
  while (anchors.back() + tile < dim) anchors.push_back(std::min(anchors.back() + stride, dim - tile));
  return anchors;
}

// For every position along an axis, the index of the anchor whose tile centre
// is nearest the pixel centre; ties go to the earlier anchor.
inline std::vector<std::size_t> axis_owner(std::size_t dim, std::size_t tile, const std::vector<std::size_t>& anchors) {
  std::vector<std::size_t> owner(dim, 0);
  std::size_t k = 0;
  for (std::size_t p = 0; p < dim; ++p) {
    // Doubled coordinates keep the comparison exact.
    const auto pixel = static_cast<std::int64_t>(2 * p + 1);
    auto dist = [&](std::size_t i) {
      const auto centre = static_cast<std::int64_t>(2 * anchors[i] + tile);
      return centre > pixel ? centre - pixel : pixel - centre;
    };
    while (k + 1 < anchors.size() && dist(k + 1) < dist(k)) ++k;
    owner[p] = k;
  }
  return owner;
}

}  // namespace detail

inline TileGrid plan_tiles(std::size_t height, std::size_t width, std::size_t tile, std::size_t overlap) {
  require(tile > overlap, ErrorKind::Argument, "tile size must exceed overlap");
  require(height >= 1 && width >= 1, ErrorKind::Argument, "source dimensions must be positive");
  TileGrid g;
  g.tile = tile;
  g.overlap = overlap;
  g.height = height;
  g.width = width;
  g.row_anchors = detail::axis_anchors(height, tile, overlap);
  g.col_anchors = detail::axis_anchors(width, tile, overlap);
  return g;
}

/// Window of `rows x cols` starting at (row, col); positions outside the source are zero.
inline Raster crop(const Raster& r, std::size_t row, std::size_t col, std::size_t rows, std::size_t cols) {
  Raster out(r.dtype(), r.bands(), rows, cols,
             r.geo().shifted(static_cast<std::int64_t>(row), static_cast<std::int64_t>(col)));
  out.set_nodata(r.nodata());
  out.set_classes(r.classes());
  const std::size_t h = row < r.height() ? std::min(rows, r.height() - row) : 0;
  const std::size_t w = col < r.width() ? std::min(cols, r.width() - col) : 0;
  std::visit(
      [&](const auto& src) {
        using T = typename std::decay_t<decltype(src)>::value_type;
        auto dst = out.values<T>();
        for (std::size_t b = 0; b < r.bands(); ++b)
          for (std::size_t i = 0; i < h; ++i)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r.index(b, row + i, col)), w,
                        dst.begin() + static_cast<std::ptrdiff_t>(out.index(b, i, 0)));
      },
      r.storage());
  return out;
}

inline Raster crop_tile(const Raster& r, const TileGrid& grid, Anchor a) {
  return crop(r, a.row, a.col, grid.tile, grid.tile);
}

using TileSet = std::vector<std::pair<Anchor, Raster>>;

inline TileSet crop_all_tiles(const Raster& r, const TileGrid& grid) {
  TileSet tiles;
  for (const auto& a : grid.origins()) tiles.emplace_back(a, crop_tile(r, grid, a));
  return tiles;
}

/// Reassembles tiles into a raster of the grid's source dimensions. Each
/// output pixel is taken from the tile whose centre is nearest.
inline Raster mosaic(const TileSet& tiles, const TileGrid& grid) {
  require(!tiles.empty(), ErrorKind::Incomplete, "no tiles to mosaic");
  std::map<Anchor, const Raster*> by_anchor;
  for (const auto& [a, t] : tiles) by_anchor[a] = &t;

  const Raster& first = tiles.front().second;
  std::vector<std::vector<const Raster*>> lookup(grid.row_anchors.size(),
                                                 std::vector<const Raster*>(grid.col_anchors.size()));
  for (std::size_t i = 0; i < grid.row_anchors.size(); ++i)
    for (std::size_t j = 0; j < grid.col_anchors.size(); ++j) {
      const Anchor a{grid.row_anchors[i], grid.col_anchors[j]};
      auto it = by_anchor.find(a);
      if (it == by_anchor.end())
        throw Error(ErrorKind::Incomplete,
                    "missing tile for anchor (" + std::to_string(a.row) + "," + std::to_string(a.col) + ")");
      const Raster& t = *it->second;
      require(t.dtype() == first.dtype() && t.bands() == first.bands(), ErrorKind::Argument,
              "tiles must share dtype and band count");
      require(t.height() >= std::min(grid.tile, grid.height - a.row) &&
                  t.width() >= std::min(grid.tile, grid.width - a.col),
              ErrorKind::Shape, "tile smaller than its grid cell");
      lookup[i][j] = &t;
    }

  const auto row_owner = detail::axis_owner(grid.height, grid.tile, grid.row_anchors);
  const auto col_owner = detail::axis_owner(grid.width, grid.tile, grid.col_anchors);

  const Raster* origin_tile = lookup[0][0];
  Raster out(first.dtype(), first.bands(), grid.height, grid.width, origin_tile->geo());
  out.set_nodata(first.nodata());
  out.set_classes(first.classes());
  std::visit(
      [&](auto& dst) {
        using T = typename std::decay_t<decltype(dst)>::value_type;
        for (std::size_t b = 0; b < out.bands(); ++b)
          for (std::size_t r = 0; r < grid.height; ++r) {
            const std::size_t ti = row_owner[r];
            const std::size_t lr = r - grid.row_anchors[ti];
            for (std::size_t c = 0; c < grid.width; ++c) {
              const std::size_t tj = col_owner[c];
              const Raster& t = *lookup[ti][tj];
              dst[out.index(b, r, c)] = t.values<T>()[t.index(b, lr, c - grid.col_anchors[tj])];
            }
          }
      },
      out.storage());
  return out;
}

}  // namespace noisemap
