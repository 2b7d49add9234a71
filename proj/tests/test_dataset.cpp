#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "noisemap/dataset.hpp"
#include "support.hpp"

using namespace noisemap;
using noisemap::testutil::TempDir;

namespace {

Raster labels_all(std::size_t h, std::size_t w, std::uint8_t v) {
  Raster r(DType::U8, 1, h, w, GeoTransform{100.0, 10.0, 0.0, 500.0, 0.0, -10.0});
  for (auto& x : r.u8()) x = v;
  return r;
}

std::vector<PatchPair> fake_patches(std::size_t pos, std::size_t neg) {
  std::vector<PatchPair> out;
  for (std::size_t i = 0; i < pos + neg; ++i) {
    PatchPair p;
    p.anchor = {i, 0};
    p.positive = i < pos;
    out.push_back(p);
  }
  return out;
}

}  // namespace

TEST(ExtractPatches, ExactDivision) {
  const Raster img = testutil::random_f32(1, 1024, 1024, 1);
  EXPECT_EQ(extract_patches(img, labels_all(1024, 1024, 0), 512).size(), 4u);
}

TEST(ExtractPatches, EdgeRemaindersDropped) {
  const Raster img = testutil::random_f32(1, 1100, 1100, 1);
  const auto p = extract_patches(img, labels_all(1100, 1100, 1), 512);
  ASSERT_EQ(p.size(), 4u);
  std::set<std::string> ids;
  for (const auto& x : p) ids.insert(x.id());
  EXPECT_EQ(ids, (std::set<std::string>{"0_0", "0_512", "512_0", "512_512"}));
}

TEST(ExtractPatches, AllZeroLabelsNeverPositive) {
  const auto p = extract_patches(testutil::random_f32(2, 64, 64, 1), labels_all(64, 64, 0), 16);
  ASSERT_EQ(p.size(), 16u);
  for (const auto& x : p) EXPECT_FALSE(x.positive);
}

TEST(ExtractPatches, PatchContentMatchesSource) {
  const Raster img = testutil::random_f32(3, 32, 32, 7);
  const Raster lab = testutil::random_u8(32, 32, 2, 8);
  for (const auto& p : extract_patches(img, lab, 16)) {
    for (std::size_t b = 0; b < 3; ++b)
      EXPECT_EQ(p.image.value(b, 5, 9), img.value(b, p.anchor.row + 5, p.anchor.col + 9));
    EXPECT_EQ(p.label.value(0, 15, 0), lab.value(0, p.anchor.row + 15, p.anchor.col));
  }
}

TEST(ExtractPatches, MisalignedIsAlignmentError) {
  const Raster img = testutil::random_f32(1, 64, 64, 1);
  try {
    extract_patches(img, labels_all(64, 32, 0), 16);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Alignment);
  }
  Raster shifted = labels_all(64, 64, 0);
  shifted.set_geo(shifted.geo().shifted(1, 0));
  EXPECT_THROW(extract_patches(img, shifted, 16), Error);
}

TEST(Undersample, LargeCorpusArithmetic) {
  std::vector<bool> flags(29568 + 161668, false);
  std::fill(flags.begin(), flags.begin() + 29568, true);
  const auto kept = undersample_indices(flags, 2024);
  ASSERT_EQ(kept.size(), 59136u);
  std::size_t pos = 0;
  for (auto i : kept) pos += flags[i];
  EXPECT_EQ(pos, 29568u);
}

TEST(Undersample, FivePositivesNineNegatives) {
  const auto out = balance_undersample(fake_patches(5, 9), 42);
  ASSERT_EQ(out.size(), 10u);
  EXPECT_EQ(std::count_if(out.begin(), out.end(), [](const PatchPair& p) { return p.positive; }), 5);
}

TEST(Undersample, BalancedInputKeepsEverything) {
  const auto in = fake_patches(6, 6);
  const auto out = balance_undersample(in, 1);
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_EQ(out[i].id(), in[i].id());
}

TEST(Undersample, DeterministicPerSeed) {
  std::vector<bool> flags(100);
  for (std::size_t i = 0; i < 100; ++i) flags[i] = i % 7 == 0;
  EXPECT_EQ(undersample_indices(flags, 5), undersample_indices(flags, 5));
  EXPECT_NE(undersample_indices(flags, 5), undersample_indices(flags, 6));
}

TEST(Undersample, MissingClassIsDegenerate) {
  try {
    balance_undersample(fake_patches(0, 4), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateCorpus);
  }
}

TEST(Split, TenPatchesSevenThree) {
  const auto m = split(fake_patches(5, 5), 0.7, 3);
  EXPECT_EQ(m.train.size(), 7u);
  EXPECT_EQ(m.val.size(), 3u);
}

TEST(Split, LargeCorpusCounts) {
  std::vector<std::string> ids(59136);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::to_string(i);
  const auto m = split(ids, 0.7, 9);
  EXPECT_EQ(m.train.size(), 41395u);
  EXPECT_EQ(m.val.size(), 17741u);
}

TEST(Split, PartitionAndDeterminism) {
  std::vector<std::string> ids;
  for (int i = 0; i < 37; ++i) ids.push_back("p" + std::to_string(i));
  const auto a = split(ids, 0.6, 11), b = split(ids, 0.6, 11);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  std::multiset<std::string> all(a.train.begin(), a.train.end());
  all.insert(a.val.begin(), a.val.end());
  EXPECT_EQ(all, std::multiset<std::string>(ids.begin(), ids.end()));
}

TEST(Split, RejectsBadInput) {
  EXPECT_THROW(split(std::vector<std::string>{"a"}, 1.0, 0), Error);
  EXPECT_THROW(split(std::vector<std::string>{"a"}, 0.0, 0), Error);
  try {
    split(std::vector<std::string>{}, 0.5, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateCorpus);
  }
}

TEST(ZScore, HandExample) {
  std::vector<float> v{1, 2, 3, 4};
  zscore_inplace(v);
  const float expect[] = {-1.3416408f, -0.4472136f, 0.4472136f, 1.3416408f};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(v[i], expect[i], 1e-6);
}

TEST(ZScore, ConstantBandBecomesZero) {
  std::vector<float> v(9, 3.25f);
  zscore_inplace(v);
  for (float x : v) EXPECT_EQ(x, 0.0f);
}

TEST(ZScore, PerBandMomentsAndFixedPoint) {
  Raster img = testutil::random_f32(4, 16, 16, 3);
  for (auto& v : img.band_f32(2)) v = v * 50.0f + 1000.0f;
  const Raster z = zscore_normalize(img);
  for (std::size_t b = 0; b < 4; ++b) {
    const auto band = z.band_f32(b);
    double s = 0, ss = 0;
    for (float v : band) s += v;
    const double mu = s / band.size();
    for (float v : band) ss += (v - mu) * (v - mu);
    EXPECT_LT(std::abs(mu), 1e-5);
    EXPECT_LT(std::abs(std::sqrt(ss / band.size()) - 1.0), 1e-5);
  }
  const Raster again = zscore_normalize(z);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(again.f32()[i], z.f32()[i], 1e-6);
}

TEST(Corpus, PatchesAndManifestRoundTrip) {
  TempDir dir;
  const auto patches = extract_patches(testutil::random_f32(2, 32, 32, 1), testutil::random_u8(32, 32, 2, 2), 16);
  write_patches(patches, dir.path());
  const auto m = split(patches, 0.5, 4);
  write_manifest(m, dir / "manifest.json");
  const auto back = read_manifest(dir / "manifest.json");
  EXPECT_EQ(back.train, m.train);
  EXPECT_EQ(back.val, m.val);
  EXPECT_EQ(back.seed, 4u);
  for (const auto& p : patches) {
    const PatchPair q = read_patch(dir.path(), p.id());
    EXPECT_EQ(q.image, p.image);
    EXPECT_EQ(q.label, p.label);
    EXPECT_EQ(q.positive, p.positive);
    EXPECT_EQ(q.anchor, p.anchor);
  }
}

TEST(Corpus, MissingPatchNamesPath) {
  TempDir dir;
  try {
    read_patch(dir.path(), "0_0");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
    EXPECT_NE(e.path().find("0_0.rst"), std::string::npos);
  }
}
