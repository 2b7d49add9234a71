#pragma once

// Point-based accuracy assessment and Spearman rank correlation with a
// permutation significance test.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisemap/raster.hpp"
#include "noisemap/rng.hpp"

namespace noisemap {

struct ValidationPoint {
  double lon = 0.0;
  double lat = 0.0;
  std::map<std::string, int> truth;  // year -> 0/1
};

struct Confusion {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;
  // Points that could not be evaluated (outside the map, nodata, or no truth
  // for the requested year). Not part of total().
  std::uint64_t skipped = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

/// Accuracy figures; UA/PA/OA are percentages, F1 a fraction. A metric whose
/// denominator is zero is NaN with its flag cleared.
struct EvalReport {
  Confusion confusion;
  double f1 = 0.0;
  double ua = 0.0;
  double pa = 0.0;
  double oa = 0.0;
  bool f1_defined = true;
  bool ua_defined = true;
  bool pa_defined = true;
};

/// Pixel (row, col) containing a world coordinate, by flooring the inverse
/// geotransform. A point on a pixel boundary belongs to the pixel whose index is the floor.
inline std::optional<std::pair<std::size_t, std::size_t>> locate(const Raster& map, double x, double y) {
  const auto px = map.geo().to_pixel(x, y);
  if (!px) return std::nullopt;
  const double col = std::floor(px->first), row = std::floor(px->second);
  if (!(col >= 0 && row >= 0 && col < static_cast<double>(map.width()) && row < static_cast<double>(map.height())))
    return std::nullopt;
  return std::pair{static_cast<std::size_t>(row), static_cast<std::size_t>(col)};
}

inline Confusion confusion_at_points(const Raster& map, const std::vector<ValidationPoint>& points,
                                     const std::string& year) {
  require(map.dtype() == DType::U8 && map.bands() == 1, ErrorKind::Argument, "map must be a 1-band U8 raster");
  Confusion c;
  const auto values = map.u8();
  for (const auto& p : points) {
    const auto truth = p.truth.find(year);
    const auto px = locate(map, p.lon, p.lat);
    if (truth == p.truth.end() || !px) {
      ++c.skipped;
      continue;
    }
    const std::uint8_t v = values[map.index(0, px->first, px->second)];
    if (map.nodata() && static_cast<double>(v) == *map.nodata()) {
      ++c.skipped;
      continue;
    }
    const bool predicted = v == 1;
    const bool actual = truth->second == 1;
    if (predicted && actual)
      ++c.tp;
    else if (predicted)
      ++c.fp;
    else if (actual)
      ++c.fn;
    else
      ++c.tn;
  }
  if (c.total() == 0) throw Error(ErrorKind::EmptyEvaluation, "no validation point fell on the map");
  return c;
}

inline EvalReport metrics(const Confusion& c) {
  if (c.total() == 0) throw Error(ErrorKind::EmptyEvaluation, "confusion matrix is empty");
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const auto tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);

  EvalReport r;
  r.confusion = c;
  const double precision = c.tp + c.fp > 0 ? tp / (tp + fp) : nan;
  const double recall = c.tp + c.fn > 0 ? tp / (tp + fn) : nan;
  r.ua_defined = c.tp + c.fp > 0;
  r.pa_defined = c.tp + c.fn > 0;
  r.ua = r.ua_defined ? 100.0 * tp / (tp + fp) : nan;
  r.pa = r.pa_defined ? 100.0 * tp / (tp + fn) : nan;
  r.f1_defined = r.ua_defined && r.pa_defined && precision + recall > 0;
  r.f1 = r.f1_defined ? 2.0 * precision * recall / (precision + recall) : nan;
  r.oa = 100.0 * (tp + tn) / (tp + tn + fp + fn);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  auto metric = [](bool defined, double v) { return defined ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"confusion",
           {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn},
            {"skipped", r.confusion.skipped}}},
          {"f1", metric(r.f1_defined, r.f1)},
          {"ua", metric(r.ua_defined, r.ua)},
          {"pa", metric(r.pa_defined, r.pa)},
          {"oa", r.oa},
          {"undefined", [&] {
             nlohmann::json u = nlohmann::json::array();
             if (!r.f1_defined) u.push_back("f1");
             if (!r.ua_defined) u.push_back("ua");
             if (!r.pa_defined) u.push_back("pa");
             return u;
           }()}};
}

/// Plain-text table with F1, UA, PA and OA columns.
inline std::string format_report_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  auto cell = [](bool defined, double v, int precision) {
    if (!defined) return std::string("n/a");
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(precision);
    os << v;
    return os.str();
  };
  std::ostringstream os;
  os << "label        F1      UA(%)    PA(%)    OA(%)\n";
  for (const auto& [label, r] : rows) {
    std::string name = label;
    name.resize(std::max<std::size_t>(name.size(), 10), ' ');
    auto pad = [](std::string s) {
      s.insert(0, s.size() < 8 ? 8 - s.size() : 0, ' ');
      return s;
    };
    os << name << " " << pad(cell(r.f1_defined, r.f1, 2)) << " " << pad(cell(r.ua_defined, r.ua, 2)) << " "
       << pad(cell(r.pa_defined, r.pa, 2)) << " " << pad(cell(true, r.oa, 2)) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Points CSV: lon,lat,truth_<year>,...
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_points_csv(const std::vector<ValidationPoint>& points, const std::vector<std::string>& years,
                             const std::filesystem::path& path) {
  std::string out = "lon,lat";
  for (const auto& y : years) out += ",truth_" + y;
  out += "\n";
  for (const auto& p : points) {
    out += format_double(p.lon) + "," + format_double(p.lat);
    for (const auto& y : years) {
      out += ",";
      if (auto it = p.truth.find(y); it != p.truth.end()) out += std::to_string(it->second);
    }
    out += "\n";
  }
  detail::write_file(path, out);
}

inline std::vector<ValidationPoint> read_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open points file", path.string());
  auto split_line = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::Format, "empty points file", path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_line(line);
  if (header.size() < 2 || header[0] != "lon" || header[1] != "lat")
    throw Error(ErrorKind::Format, "points header must start with lon,lat", path.string());
  std::vector<std::string> years;
  for (std::size_t i = 2; i < header.size(); ++i) {
    if (header[i].rfind("truth_", 0) != 0)
      throw Error(ErrorKind::Format, "unexpected column '" + header[i] + "'", path.string());
    years.push_back(header[i].substr(6));
  }

  std::vector<ValidationPoint> points;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size())
      throw Error(ErrorKind::Format, "wrong column count on line " + std::to_string(lineno), path.string());
    ValidationPoint p;
    try {
      p.lon = std::stod(cells[0]);
      p.lat = std::stod(cells[1]);
      for (std::size_t i = 0; i < years.size(); ++i) {
        if (cells[i + 2].empty()) continue;
        const int v = std::stoi(cells[i + 2]);
        if (v != 0 && v != 1) throw std::invalid_argument("truth");
        p.truth[years[i]] = v;
      }
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::Format, "bad value on line " + std::to_string(lineno), path.string());
    }
    points.push_back(std::move(p));
  }
  return points;
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// 1-based ranks; tied values share the average of the ranks they span.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace detail {

// Pearson correlation with 1/n moments; nullopt when either side is constant.
inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp((sab / n) / std::sqrt((saa / n) * (sbb / n)), -1.0, 1.0);
}

inline void check_pair(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), ErrorKind::Argument, "spearman: length mismatch");
  require(x.size() >= 2, ErrorKind::Argument, "spearman: need at least two observations");
}

}  // namespace detail

/// Spearman's rho as the Pearson correlation of average ranks. nullopt when
/// either input is constant.
inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  detail::check_pair(x, y);
  return detail::pearson(average_ranks(x), average_ranks(y));
}

/// Two-sided permutation p-value, (1 + #{|rho_perm| >= |rho_obs|}) / (1 + permutations).
/// Each permutation draws from its own derived seed, so the result does not
/// depend on evaluation order.
inline std::optional<double> spearman_significance(const std::vector<double>& x, const std::vector<double>& y,
                                                   std::size_t permutations, std::uint64_t seed) {
  detail::check_pair(x, y);
  require(permutations >= 100, ErrorKind::Argument, "permutation test needs at least 100 permutations");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const auto observed = detail::pearson(rx, ry);
  if (!observed) return std::nullopt;
  const double threshold = std::abs(*observed) - 1e-12;

  std::size_t extreme = 0;
  std::vector<double> perm;
  for (std::size_t i = 0; i < permutations; ++i) {
    perm = ry;
    Engine engine(derive_seed(seed, i));
    std::shuffle(perm.begin(), perm.end(), engine);
    if (std::abs(*detail::pearson(rx, perm)) >= threshold) ++extreme;
  }
  return static_cast<double>(1 + extreme) / static_cast<double>(1 + permutations);
}

}  // namespace noisemap
