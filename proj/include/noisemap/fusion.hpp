#pragma once

// Bayesian fusion of a model probability map (prior) with co-registered
// binary ancillary maps (evidence). Evidence observations are treated as
// conditionally independent given the true class, so their likelihoods
// multiply.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "noisemap/eval.hpp"
#include "noisemap/raster.hpp"

namespace noisemap {

/// Bernoulli observation model of an ancillary map.
struct SensorModel {
  double p_obs1_given_palm = 0.9;  // L1 = p(y = 1 | palm)
  double p_obs1_given_not = 0.2;   // L0 = p(y = 1 | not palm)

  void validate() const {
    auto ok = [](double v) { return v > 0.0 && v < 1.0; };
    require(ok(p_obs1_given_palm) && ok(p_obs1_given_not), ErrorKind::Domain, "sensor rates must lie in (0,1)");
  }
  /// Equal rates carry no information; fusion then returns the prior unchanged.
  bool informative() const { return p_obs1_given_palm != p_obs1_given_not; }
};

/// Sensor rates estimated from the ancillary map's confusion against reference
/// points: L1 is its producer's accuracy, L0 its false-positive rate.
inline SensorModel sensor_from_confusion(const Confusion& c) {
  require(c.tp + c.fn > 0 && c.fp + c.tn > 0, ErrorKind::Domain, "confusion lacks positives or negatives");
  return {static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn),
          static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn)};
}

enum class Neighborhood { Single, Block };

/// Posterior for one pixel having seen `ones` evidence observations equal to 1
/// and `zeros` equal to 0:
///   p * L1^ones (1-L1)^zeros / (p * L1^ones (1-L1)^zeros + (1-p) * L0^ones (1-L0)^zeros)
inline double fuse_pixel(double prior, std::size_t ones, std::size_t zeros, const SensorModel& s) {
  if (!s.informative() || prior == 0.0 || prior == 1.0 || (ones == 0 && zeros == 0)) return prior;
  const double n1 = static_cast<double>(ones), n0 = static_cast<double>(zeros);
  // Log-likelihoods, rescaled by their maximum before exponentiation.
  const double lp = n1 * std::log(s.p_obs1_given_palm) + n0 * std::log1p(-s.p_obs1_given_palm);
  const double ln = n1 * std::log(s.p_obs1_given_not) + n0 * std::log1p(-s.p_obs1_given_not);
  const double m = std::max(lp, ln);
  const double a = prior * std::exp(lp - m);
  const double b = (1.0 - prior) * std::exp(ln - m);
  return a / (a + b);
}

namespace detail {

inline void check_prior(const Raster& prior) {
  require(prior.dtype() == DType::F32 && prior.bands() == 1, ErrorKind::Argument, "prior must be a 1-band F32 raster");
  for (float p : prior.f32())
    require(p >= 0.0f && p <= 1.0f, ErrorKind::Domain, "prior probability outside [0,1]");
}

inline void check_evidence(const Raster& prior, const Raster& e) {
  if (!same_grid(prior, e)) throw Error(ErrorKind::Alignment, "evidence raster is not aligned with the prior");
  require(e.dtype() == DType::U8 && e.bands() == 1, ErrorKind::Argument, "evidence must be a 1-band U8 raster");
}

// 1 / 0 observation, or -1 for nodata.
inline int observation(const Raster& e, std::size_t i) {
  const std::uint8_t v = e.u8()[i];
  if (e.nodata() && static_cast<double>(v) == *e.nodata()) return -1;
  require(v <= 1, ErrorKind::Domain, "evidence values must be 0 or 1");
  return v;
}

}  // namespace detail

/// Fuses any number of evidence layers. In Single mode each pixel sees the
/// co-located evidence pixel of every layer; in Block mode it sees every
/// evidence pixel of the aligned block x block cell containing it.
inline Raster fuse(const Raster& prior, std::span<const Raster* const> evidence, const SensorModel& sensor,
                   Neighborhood mode = Neighborhood::Single, std::size_t block = 10) {
  sensor.validate();
  detail::check_prior(prior);
  for (const Raster* e : evidence) detail::check_evidence(prior, *e);
  require(mode == Neighborhood::Single || block >= 1, ErrorKind::Argument, "block size must be >= 1");

  const std::size_t H = prior.height(), W = prior.width();
  std::vector<std::uint32_t> ones(H * W, 0), zeros(H * W, 0);
  for (const Raster* e : evidence) {
    if (mode == Neighborhood::Single) {
      for (std::size_t i = 0; i < H * W; ++i) {
        const int o = detail::observation(*e, i);
        if (o == 1) ++ones[i];
        if (o == 0) ++zeros[i];
      }
      continue;
    }
    for (std::size_t br = 0; br < H; br += block)
      for (std::size_t bc = 0; bc < W; bc += block) {
        const std::size_t r1 = std::min(H, br + block), c1 = std::min(W, bc + block);
        std::uint32_t n1 = 0, n0 = 0;
        for (std::size_t r = br; r < r1; ++r)
          for (std::size_t c = bc; c < c1; ++c) {
            const int o = detail::observation(*e, r * W + c);
            n1 += o == 1;
            n0 += o == 0;
          }
        for (std::size_t r = br; r < r1; ++r)
          for (std::size_t c = bc; c < c1; ++c) {
            ones[r * W + c] += n1;
            zeros[r * W + c] += n0;
          }
      }
  }

  Raster out = prior;
  auto dst = out.f32();
  const auto src = prior.f32();
  for (std::size_t i = 0; i < H * W; ++i)
    dst[i] = static_cast<float>(fuse_pixel(src[i], ones[i], zeros[i], sensor));
  return out;
}

inline Raster fuse(const Raster& prior, const Raster& evidence, const SensorModel& sensor,
                   Neighborhood mode = Neighborhood::Single, std::size_t block = 10) {
  const Raster* layers[] = {&evidence};
  return fuse(prior, std::span<const Raster* const>(layers), sensor, mode, block);
}

/// Hard map from a probability raster: 1 where p >= 0.5.
inline Raster threshold(const Raster& prob, float cut = 0.5f) {
  require(prob.dtype() == DType::F32 && prob.bands() == 1, ErrorKind::Argument, "threshold expects a 1-band F32 raster");
  Raster out(DType::U8, 1, prob.height(), prob.width(), prob.geo());
  const auto p = prob.f32();
  auto h = out.u8();
  for (std::size_t i = 0; i < p.size(); ++i) h[i] = p[i] >= cut ? 1 : 0;
  return out;
}

}  // namespace noisemap
