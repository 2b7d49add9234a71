#pragma once

// Synthetic landscapes with known ground truth, and label corruptions that
// imitate a coarse, noisy historical product.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisemap/eval.hpp"
#include "noisemap/raster.hpp"
#include "noisemap/rng.hpp"

namespace noisemap {

struct LandscapeSpec {
  std::size_t height = 512;
  std::size_t width = 512;
  std::size_t bands = 10;
  std::size_t blob_scale = 8;
  // [class][band] mean reflectance and Gaussian noise sigma; class 0 = other, 1 = palm.
  std::vector<std::vector<double>> class_means;
  std::vector<std::vector<double>> class_sigmas;
  double pixel_size = 10.0;
  std::uint64_t seed = 0;

  /// Ten-band defaults: palm is darker in the visible bands and brighter in
  /// the red-edge/NIR bands, with per-pixel noise of the same order as the
  /// class separation.
  static LandscapeSpec defaults(std::size_t bands = 10) {
    LandscapeSpec s;
    s.bands = bands;
    s.class_means.assign(2, std::vector<double>(bands));
    s.class_sigmas.assign(2, std::vector<double>(bands, 0.04));
    for (std::size_t b = 0; b < bands; ++b) {
      const double base = 0.08 + 0.02 * static_cast<double>(b);
      const double shift = (b % 2 == 0 ? -1.0 : 1.0) * 0.02;
      s.class_means[0][b] = base;
      s.class_means[1][b] = base + shift;
    }
    return s;
  }

  void validate() const {
    require(height >= 1 && width >= 1 && bands >= 1, ErrorKind::Config, "landscape dims must be positive");
    require(blob_scale >= 1, ErrorKind::Config, "blob_scale must be >= 1");
    require(class_means.size() == 2 && class_sigmas.size() == 2, ErrorKind::Config, "need spectra for two classes");
    for (std::size_t k = 0; k < 2; ++k)
      require(class_means[k].size() == bands && class_sigmas[k].size() == bands, ErrorKind::Config,
              "class spectra must have one entry per band");
    require(class_means[0] != class_means[1], ErrorKind::Config, "class spectra must differ");
    require(pixel_size > 0, ErrorKind::Config, "pixel_size must be positive");
  }

  GeoTransform geo() const {
    return {0.0, pixel_size, 0.0, static_cast<double>(height) * pixel_size, 0.0, -pixel_size};
  }
};

inline void to_json(nlohmann::json& j, const LandscapeSpec& s) {
  j = {{"height", s.height},           {"width", s.width},
       {"bands", s.bands},             {"blob_scale", s.blob_scale},
       {"class_means", s.class_means}, {"class_sigmas", s.class_sigmas},
       {"pixel_size", s.pixel_size},   {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, LandscapeSpec& s) {
  const std::size_t bands = j.value("bands", std::size_t{10});
  s = LandscapeSpec::defaults(bands);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.blob_scale = j.value("blob_scale", s.blob_scale);
  if (j.contains("class_means")) j.at("class_means").get_to(s.class_means);
  if (j.contains("class_sigmas")) j.at("class_sigmas").get_to(s.class_sigmas);
  s.pixel_size = j.value("pixel_size", s.pixel_size);
  s.seed = j.value("seed", s.seed);
}

struct Landscape {
  Raster image;  // F32, bands x H x W
  Raster truth;  // U8, values {0,1}
};

namespace detail {

// Box blur of radius r with edge clamping, separable, via running sums.
inline std::vector<double> box_blur(const std::vector<double>& src, std::size_t H, std::size_t W, std::size_t r) {
  auto pass = [r](const std::vector<double>& in, std::size_t rows, std::size_t cols, bool horizontal) {
    std::vector<double> out(in.size());
    const std::size_t len = horizontal ? cols : rows, lines = horizontal ? rows : cols;
    auto at = [&](std::size_t line, std::size_t k) -> std::size_t {
      return horizontal ? line * cols + k : k * cols + line;
    };
    std::vector<double> prefix(len + 1);
    for (std::size_t line = 0; line < lines; ++line) {
      prefix[0] = 0;
      for (std::size_t k = 0; k < len; ++k) prefix[k + 1] = prefix[k] + in[at(line, k)];
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t lo = k >= r ? k - r : 0;
        const std::size_t hi = std::min(len - 1, k + r);
        out[at(line, k)] = (prefix[hi + 1] - prefix[lo]) / static_cast<double>(hi - lo + 1);
      }
    }
    return out;
  };
  return pass(pass(src, H, W, true), H, W, false);
}

}  // namespace detail

/// Truth is a smoothed seeded noise field thresholded at its median; every
/// band is the class mean plus seeded Gaussian noise.
inline Landscape generate(const LandscapeSpec& spec) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width, N = H * W;
  std::normal_distribution<double> normal(0.0, 1.0);

  Engine field_rng(derive_seed(spec.seed, 1));
  std::vector<double> field(N);
  for (auto& v : field) v = normal(field_rng);
  field = detail::box_blur(field, H, W, spec.blob_scale);

  std::vector<double> sorted = field;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(N / 2), sorted.end());
  const double median = sorted[N / 2];

  Landscape out{Raster(DType::F32, spec.bands, H, W, spec.geo()), Raster(DType::U8, 1, H, W, spec.geo())};
  auto truth = out.truth.u8();
  for (std::size_t i = 0; i < N; ++i) truth[i] = field[i] >= median ? 1 : 0;
  out.truth.set_classes({{0, "other"}, {1, "oil_palm"}});

  Engine pixel_rng(derive_seed(spec.seed, 2));
  auto img = out.image.f32();
  for (std::size_t b = 0; b < spec.bands; ++b)
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t k = truth[i];
      img[b * N + i] = static_cast<float>(spec.class_means[k][b] + spec.class_sigmas[k][b] * normal(pixel_rng));
    }
  return out;
}

/// Majority vote over factor x factor blocks (ties go to class 0), re-expanded
/// to the original grid.
inline Raster coarsen_labels(const Raster& truth, std::size_t factor) {
  require(factor >= 1, ErrorKind::Argument, "coarsening factor must be >= 1");
  require(truth.dtype() == DType::U8 && truth.bands() == 1, ErrorKind::Argument, "labels must be a 1-band U8 raster");
  require(truth.height() % factor == 0 && truth.width() % factor == 0, ErrorKind::Argument,
          "raster dims not divisible by coarsening factor " + std::to_string(factor));
  Raster out = truth;
  const auto src = truth.u8();
  auto dst = out.u8();
  const std::size_t W = truth.width();
  for (std::size_t br = 0; br < truth.height(); br += factor)
    for (std::size_t bc = 0; bc < W; bc += factor) {
      std::size_t ones = 0;
      for (std::size_t r = br; r < br + factor; ++r)
        for (std::size_t c = bc; c < bc + factor; ++c) ones += src[r * W + c] == 1;
      // Strict majority; an exact half resolves to 0.
      const std::uint8_t v = 2 * ones > factor * factor ? 1 : 0;
      for (std::size_t r = br; r < br + factor; ++r)
        for (std::size_t c = bc; c < bc + factor; ++c) dst[r * W + c] = v;
    }
  return out;
}

/// Class-conditional flips: 0 -> 1 with probability r01, 1 -> 0 with r10.
inline Raster flip_noise(const Raster& labels, double r01, double r10, std::uint64_t seed) {
  require(r01 >= 0.0 && r01 < 0.5 && r10 >= 0.0 && r10 < 0.5, ErrorKind::Argument, "flip rates must lie in [0, 0.5)");
  require(labels.dtype() == DType::U8 && labels.bands() == 1, ErrorKind::Argument, "labels must be a 1-band U8 raster");
  Raster out = labels;
  auto v = out.u8();
  Engine engine(seed);
  for (auto& x : v) {
    const double u = uniform01(engine);
    if (x == 0 && u < r01)
      x = 1;
    else if (x == 1 && u < r10)
      x = 0;
  }
  return out;
}

/// Validation points at the centres of `count` distinct seeded pixels, with
/// the truth value recorded under each year.
inline std::vector<ValidationPoint> sample_points(const Raster& truth, std::size_t count, std::uint64_t seed,
                                                  const std::vector<std::string>& years) {
  const std::size_t N = truth.plane_size();
  require(count <= N, ErrorKind::Argument, "more points requested than pixels");
  std::vector<std::size_t> idx(N);
  for (std::size_t i = 0; i < N; ++i) idx[i] = i;
  Engine engine(seed);
  // Partial Fisher-Yates: the first `count` entries become a uniform sample.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, N - 1);
    std::swap(idx[i], idx[pick(engine)]);
  }
  std::vector<ValidationPoint> points;
  points.reserve(count);
  const auto t = truth.u8();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t row = idx[i] / truth.width(), col = idx[i] % truth.width();
    auto [x, y] = truth.geo().to_world(static_cast<double>(col) + 0.5, static_cast<double>(row) + 0.5);
    ValidationPoint p{x, y, {}};
    for (const auto& year : years) p.truth[year] = t[idx[i]];
    points.push_back(std::move(p));
  }
  return points;
}

}  // namespace noisemap
