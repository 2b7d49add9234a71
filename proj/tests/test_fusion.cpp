#include <gtest/gtest.h>

#include <cmath>
#include <optional>
#include <random>

#include "noisemap/fusion.hpp"
#include "support.hpp"

using namespace noisemap;

namespace {

Raster prior_of(std::size_t h, std::size_t w, float p) {
  Raster r(DType::F32, 1, h, w, GeoTransform{100.0, 10.0, 0.0, 500.0, 0.0, -10.0});
  for (auto& v : r.f32()) v = p;
  return r;
}

Raster evidence_of(std::size_t h, std::size_t w, std::vector<std::uint8_t> v) {
  Raster r(DType::U8, 1, h, w, GeoTransform{100.0, 10.0, 0.0, 500.0, 0.0, -10.0});
  std::copy(v.begin(), v.end(), r.u8().begin());
  return r;
}

// Direct Bayes rule without logs.
double naive(double p, int ones, int zeros, double l1, double l0) {
  const double a = p * std::pow(l1, ones) * std::pow(1 - l1, zeros);
  const double b = (1 - p) * std::pow(l0, ones) * std::pow(1 - l0, zeros);
  return a / (a + b);
}

}  // namespace

TEST(FusePixel, HandExample) {
  EXPECT_NEAR(fuse_pixel(0.6, 1, 0, {0.9, 0.2}), 0.870968, 1e-6);
  EXPECT_NEAR(fuse_pixel(0.6, 0, 1, {0.9, 0.2}), 0.6 * 0.1 / (0.6 * 0.1 + 0.4 * 0.8), 1e-15);
}

TEST(FusePixel, UninformativeSensorReturnsPriorExactly) {
  Engine e(1);
  for (int i = 0; i < 100; ++i) {
    const double p = uniform01(e);
    EXPECT_EQ(fuse_pixel(p, 3, 2, {0.5, 0.5}), p);
    EXPECT_EQ(fuse_pixel(p, 0, 0, {0.9, 0.2}), p);
  }
  EXPECT_EQ(fuse_pixel(0.0, 5, 0, {0.9, 0.2}), 0.0);
  EXPECT_EQ(fuse_pixel(1.0, 0, 5, {0.9, 0.2}), 1.0);
}

TEST(FusePixel, SequentialUpdatesEqualJointUpdate) {
  Engine e(2);
  std::uniform_real_distribution<double> rate(0.05, 0.95);
  for (int trial = 0; trial < 200; ++trial) {
    const SensorModel s{rate(e), rate(e)};
    const double p = rate(e);
    std::vector<int> obs(1 + trial % 12);
    std::size_t ones = 0;
    for (auto& o : obs) ones += (o = uniform01(e) < 0.5);
    double seq = p;
    for (int o : obs) seq = fuse_pixel(seq, o, 1 - o, s);
    const double joint = fuse_pixel(p, ones, obs.size() - ones, s);
    EXPECT_NEAR(seq, joint, 1e-9);
    EXPECT_NEAR(joint, naive(p, static_cast<int>(ones), static_cast<int>(obs.size() - ones), s.p_obs1_given_palm,
                             s.p_obs1_given_not),
                1e-12);
  }
}

TEST(FusePixel, LargeCountsStayFinite) {
  const double v = fuse_pixel(0.5, 4000, 100, {0.9, 0.2});
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Fuse, SingleModeMatchesPixelKernel) {
  const Raster prior = prior_of(2, 2, 0.6f);
  const Raster e = evidence_of(2, 2, {1, 0, 1, 0});
  const Raster out = fuse(prior, e, {0.9, 0.2});
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_EQ(out.f32()[i], static_cast<float>(fuse_pixel(0.6f, i % 2 == 0, i % 2, {0.9, 0.2})));
}

TEST(Fuse, BlockModeCountsWholeCell) {
  // 4x4 grid, 2x2 cells; the top-left cell holds three ones and one zero.
  const Raster prior = prior_of(4, 4, 0.3f);
  const Raster e = evidence_of(4, 4, {1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1});
  const SensorModel s{0.8, 0.3};
  const Raster out = fuse(prior, e, s, Neighborhood::Block, 2);
  const float p = 0.3f;
  EXPECT_EQ(out.value(0, 0, 0), static_cast<float>(fuse_pixel(p, 3, 1, s)));
  EXPECT_EQ(out.value(0, 1, 1), static_cast<float>(fuse_pixel(p, 3, 1, s)));
  EXPECT_EQ(out.value(0, 0, 3), static_cast<float>(fuse_pixel(p, 0, 4, s)));
  EXPECT_EQ(out.value(0, 3, 3), static_cast<float>(fuse_pixel(p, 4, 0, s)));
}

TEST(Fuse, PartialEdgeBlocksAndMultipleLayers) {
  const Raster prior = prior_of(3, 3, 0.5f);
  const Raster a = evidence_of(3, 3, {1, 1, 1, 1, 1, 1, 1, 1, 1});
  const Raster b = evidence_of(3, 3, {0, 0, 0, 0, 0, 0, 0, 0, 0});
  const Raster* layers[] = {&a, &b};
  const SensorModel s{0.7, 0.4};
  const Raster out = fuse(prior, std::span<const Raster* const>(layers), s, Neighborhood::Block, 2);
  EXPECT_EQ(out.value(0, 0, 0), static_cast<float>(fuse_pixel(0.5, 4, 4, s)));
  EXPECT_EQ(out.value(0, 0, 2), static_cast<float>(fuse_pixel(0.5, 2, 2, s)));
  EXPECT_EQ(out.value(0, 2, 2), static_cast<float>(fuse_pixel(0.5, 1, 1, s)));
}

TEST(Fuse, NodataEvidenceIsIgnored) {
  Raster e = evidence_of(1, 3, {1, 255, 0});
  e.set_nodata(255.0);
  const Raster out = fuse(prior_of(1, 3, 0.4f), e, {0.9, 0.2});
  EXPECT_EQ(out.value(0, 0, 1), 0.4f);
  EXPECT_GT(out.value(0, 0, 0), 0.4f);
  EXPECT_LT(out.value(0, 0, 2), 0.4f);
}

TEST(Fuse, ErrorKinds) {
  const Raster prior = prior_of(2, 2, 0.5f);
  auto kind_of = [](auto&& f) -> std::optional<ErrorKind> {
    try {
      f();
    } catch (const Error& e) {
      return e.kind();
    }
    return std::nullopt;
  };
  Raster shifted = evidence_of(2, 2, {0, 0, 0, 0});
  shifted.set_geo(shifted.geo().shifted(1, 0));
  EXPECT_EQ(kind_of([&] { fuse(prior, shifted, {0.9, 0.2}); }), ErrorKind::Alignment);
  EXPECT_EQ(kind_of([&] { fuse(prior, evidence_of(2, 3, {0, 0, 0, 0, 0, 0}), {0.9, 0.2}); }), ErrorKind::Alignment);
  EXPECT_EQ(kind_of([&] { fuse(prior, evidence_of(2, 2, {0, 2, 0, 0}), {0.9, 0.2}); }), ErrorKind::Domain);
  EXPECT_EQ(kind_of([&] { fuse(prior_of(2, 2, 1.5f), evidence_of(2, 2, {0, 0, 0, 0}), {0.9, 0.2}); }),
            ErrorKind::Domain);
  EXPECT_EQ(kind_of([&] { fuse(prior, evidence_of(2, 2, {0, 0, 0, 0}), {1.0, 0.2}); }), ErrorKind::Domain);
}

TEST(Sensor, FromConfusion) {
  Confusion c;
  c.tp = 9;
  c.fn = 1;
  c.fp = 2;
  c.tn = 8;
  const SensorModel s = sensor_from_confusion(c);
  EXPECT_DOUBLE_EQ(s.p_obs1_given_palm, 0.9);
  EXPECT_DOUBLE_EQ(s.p_obs1_given_not, 0.2);
}

TEST(Threshold, HalfGoesToOne) {
  Raster p = prior_of(1, 3, 0.0f);
  p.f32()[0] = 0.49999f;
  p.f32()[1] = 0.5f;
  p.f32()[2] = 0.9f;
  const Raster h = threshold(p);
  EXPECT_EQ(h.u8()[0], 0);
  EXPECT_EQ(h.u8()[1], 1);
  EXPECT_EQ(h.u8()[2], 1);
}
