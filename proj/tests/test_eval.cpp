#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "noisemap/eval.hpp"
#include "support.hpp"

using namespace noisemap;
using noisemap::testutil::TempDir;

namespace {

Confusion counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t tn, std::uint64_t fn) {
  Confusion c;
  c.tp = tp;
  c.fp = fp;
  c.tn = tn;
  c.fn = fn;
  return c;
}

ValidationPoint point(double x, double y, int truth, const std::string& year = "2020") {
  return {x, y, {{year, truth}}};
}

}  // namespace

TEST(Metrics, HandExample) {
  const EvalReport r = metrics(counts(3, 1, 5, 1));
  EXPECT_NEAR(r.f1, 0.75, 1e-12);
  EXPECT_NEAR(r.ua, 75.0, 1e-12);
  EXPECT_NEAR(r.pa, 75.0, 1e-12);
  EXPECT_NEAR(r.oa, 80.0, 1e-12);
  EXPECT_TRUE(r.f1_defined && r.ua_defined && r.pa_defined);
}

TEST(Metrics, UndefinedRatiosAreFlagged) {
  const EvalReport none_predicted = metrics(counts(0, 0, 4, 2));
  EXPECT_FALSE(none_predicted.ua_defined);
  EXPECT_TRUE(std::isnan(none_predicted.ua));
  EXPECT_FALSE(none_predicted.f1_defined);
  EXPECT_DOUBLE_EQ(none_predicted.pa, 0.0);
  EXPECT_NEAR(none_predicted.oa, 100.0 * 4 / 6, 1e-12);

  const EvalReport no_positives = metrics(counts(0, 3, 7, 0));
  EXPECT_FALSE(no_positives.pa_defined);
  EXPECT_TRUE(no_positives.ua_defined);
  const auto j = to_json(no_positives);
  EXPECT_TRUE(j["pa"].is_null());
  EXPECT_EQ(j["undefined"], nlohmann::json({"f1", "pa"}));

  try {
    metrics(Confusion{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyEvaluation);
  }
}

TEST(Metrics, RandomCountsAgainstFormulas) {
  Engine e(4);
  std::uniform_int_distribution<int> d(1, 50);
  for (int i = 0; i < 100; ++i) {
    const double tp = d(e), fp = d(e), tn = d(e), fn = d(e);
    const EvalReport r = metrics(counts(tp, fp, tn, fn));
    const double prec = tp / (tp + fp), rec = tp / (tp + fn);
    EXPECT_NEAR(r.f1, 2 * tp / (2 * tp + fp + fn), 1e-12);
    EXPECT_NEAR(r.f1, 2 * prec * rec / (prec + rec), 1e-12);
    EXPECT_NEAR(r.oa, 100 * (tp + tn) / (tp + fp + tn + fn), 1e-12);
  }
}

TEST(ConfusionAtPoints, MatchesBruteForce) {
  Engine e(8);
  for (int trial = 0; trial < 50; ++trial) {
    const Raster map = testutil::random_u8(13, 17, 2, 100 + trial);
    const GeoTransform g = map.geo();
    std::uniform_real_distribution<double> xs(g.origin_x - 30, g.origin_x + 17 * g.pixel_width + 30);
    std::uniform_real_distribution<double> ys(g.origin_y + 13 * g.pixel_height - 30, g.origin_y + 30);
    std::vector<ValidationPoint> pts;
    for (int i = 0; i < 60; ++i) pts.push_back(point(xs(e), ys(e), static_cast<int>(e() % 2)));

    Confusion expect;
    for (const auto& p : pts) {
      const double col = std::floor((p.lon - g.origin_x) / g.pixel_width), row = std::floor((p.lat - g.origin_y) / g.pixel_height);
      if (col < 0 || row < 0 || col >= 17 || row >= 13) {
        ++expect.skipped;
        continue;
      }
      const int m = map.u8()[static_cast<std::size_t>(row) * 17 + static_cast<std::size_t>(col)];
      const int t = p.truth.at("2020");
      if (m && t) ++expect.tp;
      if (m && !t) ++expect.fp;
      if (!m && t) ++expect.fn;
      if (!m && !t) ++expect.tn;
    }
    EXPECT_EQ(confusion_at_points(map, pts, "2020"), expect);
  }
}

TEST(ConfusionAtPoints, SkipRules) {
  Raster map = testutil::random_u8(4, 4, 2, 1);
  map.u8()[0] = 9;
  map.set_nodata(9.0);
  map.u8()[1] = 1;
  // Pixel (0,0) is nodata, (0,1) is 1; geo origin (100, 500), 10 m pixels.
  const std::vector<ValidationPoint> pts = {point(105, 495, 1), point(115, 495, 1), point(115, 495, 0, "2019"),
                                            point(50, 495, 1)};
  const Confusion c = confusion_at_points(map, pts, "2020");
  EXPECT_EQ(c.tp, 1u);
  EXPECT_EQ(c.total(), 1u);
  EXPECT_EQ(c.skipped, 3u);
  try {
    confusion_at_points(map, {point(50, 495, 1)}, "2020");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyEvaluation);
  }
}

TEST(ConfusionAtPoints, BoundaryPointGoesToFlooredPixel) {
  Raster map(DType::U8, 1, 1, 2, GeoTransform{100.0, 10.0, 0.0, 500.0, 0.0, -10.0});
  map.u8()[1] = 1;
  EXPECT_EQ(confusion_at_points(map, {point(110, 495, 1)}, "2020").tp, 1u);
}

TEST(Spearman, HandCases) {
  const std::vector<double> x = {1, 2, 3, 4};
  EXPECT_NEAR(*spearman(x, {10, 20, 30, 40}), 1.0, 1e-12);
  EXPECT_NEAR(*spearman(x, {4, 3, 2, 1}), -1.0, 1e-12);
  EXPECT_NEAR(*spearman(x, {1, 2, 2, 3}), 0.948683, 1e-6);
  EXPECT_FALSE(spearman(x, {5, 5, 5, 5}).has_value());
  EXPECT_THROW(spearman({1}, {1}), Error);
  EXPECT_THROW(spearman(x, {1, 2}), Error);
}

TEST(Spearman, AverageRanks) {
  EXPECT_EQ(average_ranks({3, 1, 3, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(Spearman, MonotoneSeriesIsSignificant) {
  std::vector<double> x(20), y(20);
  for (int i = 0; i < 20; ++i) x[i] = i, y[i] = std::exp(0.1 * i);
  const auto p = spearman_significance(x, y, 999, 3);
  ASSERT_TRUE(p.has_value());
  EXPECT_LE(*p, 0.001 + 1e-12);
  EXPECT_EQ(*p, *spearman_significance(x, y, 999, 3));
  EXPECT_THROW(spearman_significance(x, y, 10, 3), Error);
}

TEST(Spearman, UnrelatedSeriesIsNotSignificant) {
  const std::vector<double> x = {1, 2, 3, 4, 5, 6};
  const std::vector<double> y = {3, 6, 1, 5, 2, 4};
  const auto p = spearman_significance(x, y, 999, 5);
  EXPECT_GT(*p, 0.1);
}

TEST(PointsCsv, RoundTrip) {
  TempDir dir;
  std::vector<ValidationPoint> pts = {point(1.25, -3.5, 1), {7.0, 8.0, {{"2020", 0}, {"2021", 1}}}};
  write_points_csv(pts, {"2020", "2021"}, dir / "p.csv");
  EXPECT_EQ(detail::read_file(dir / "p.csv"), "lon,lat,truth_2020,truth_2021\n1.25,-3.5,1,\n7,8,0,1\n");
  const auto back = read_points_csv(dir / "p.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].lon, 1.25);
  EXPECT_EQ(back[0].truth, (std::map<std::string, int>{{"2020", 1}}));
  EXPECT_EQ(back[1].truth, (std::map<std::string, int>{{"2020", 0}, {"2021", 1}}));
}

TEST(PointsCsv, MalformedInput) {
  TempDir dir;
  detail::write_file(dir / "bad.csv", "lon,lat,truth_2020\n1,2,3\n");
  try {
    read_points_csv(dir / "bad.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
  detail::write_file(dir / "hdr.csv", "x,y\n");
  EXPECT_THROW(read_points_csv(dir / "hdr.csv"), Error);
  try {
    read_points_csv(dir / "missing.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(Report, TableLayout) {
  const std::string t = format_report_table({{"dmi", metrics(counts(3, 1, 5, 1))}, {"none", metrics(counts(0, 0, 4, 2))}});
  EXPECT_EQ(t,
            "label        F1      UA(%)    PA(%)    OA(%)\n"
            "dmi            0.75    75.00    75.00    80.00\n"
            "none            n/a      n/a     0.00    66.67\n");
}
