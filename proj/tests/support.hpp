#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "noisemap/raster.hpp"
#include "noisemap/rng.hpp"

namespace noisemap::testutil {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("noisemap_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Raster random_f32(std::size_t bands, std::size_t h, std::size_t w, std::uint64_t seed) {
  Raster r(DType::F32, bands, h, w, GeoTransform{100.0, 10.0, 0.0, 500.0, 0.0, -10.0});
  Engine e(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : r.f32()) v = n(e);
  return r;
}

inline Raster random_u8(std::size_t h, std::size_t w, int classes, std::uint64_t seed) {
  Raster r(DType::U8, 1, h, w, GeoTransform{100.0, 10.0, 0.0, 500.0, 0.0, -10.0});
  Engine e(seed);
  std::uniform_int_distribution<int> d(0, classes - 1);
  for (auto& v : r.u8()) v = static_cast<std::uint8_t>(d(e));
  return r;
}

}  // namespace noisemap::testutil
