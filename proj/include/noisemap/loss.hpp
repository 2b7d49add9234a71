#pragma once

// Determinant-based mutual information loss and the binary cross-entropy
// baseline.

#include <cstdint>
#include <span>
#include <vector>

#include "noisemap/ops.hpp"

namespace noisemap {

inline constexpr double kDmiEpsilon = 1e-8;
inline constexpr double kBceClamp = 1e-7;

/// Empirical joint distribution of predictions and labels: rows are predicted
/// classes, columns are label classes.
template <class T>
struct JointMatrix {
  ad::Tensor<T> u;  // [K, K]
  std::size_t n = 0;

  std::size_t classes() const { return u.dim(0); }
  T at(std::size_t pred, std::size_t label) const { return u.values()[pred * classes() + label]; }
};

/// u[a][b] = (1/N) sum_i probs_i[a] * labels_i[b], differentiable in probs.
template <class T>
JointMatrix<T> joint_matrix(const ad::Tensor<T>& probs, const ad::Tensor<T>& labels) {
  require(probs.rank() == 2 && labels.rank() == 2, ErrorKind::Shape, "joint_matrix expects [N,K] inputs");
  require(probs.shape() == labels.shape(), ErrorKind::Shape,
          "joint_matrix: probs " + ad::shape_string(probs.shape()) + " vs labels " + ad::shape_string(labels.shape()));
  const std::size_t n = probs.dim(0);
  if (n == 0) throw Error(ErrorKind::EmptyBatch, "joint_matrix on an empty batch");
  auto u = ad::scale(ad::matmul(ad::transpose(probs), labels), static_cast<T>(1.0 / static_cast<double>(n)));
  return {std::move(u), n};
}

/// -log(max(|det U|, eps)) for the two-class joint matrix.
template <class T>
ad::Tensor<T> dmi_loss(const ad::Tensor<T>& probs, const ad::Tensor<T>& labels) {
  require(probs.rank() == 2 && probs.dim(1) == 2, ErrorKind::Shape, "dmi_loss supports K = 2 only");
  const auto jm = joint_matrix(probs, labels);
  auto det = ad::abs(ad::det2x2(jm.u));
  return ad::scale(ad::log(ad::clamp_min(det, static_cast<T>(kDmiEpsilon))), T(-1));
}

/// Mean binary cross-entropy of positive-class probabilities [N] against 0/1 targets [N].
template <class T>
ad::Tensor<T> bce_loss(const ad::Tensor<T>& probs, const ad::Tensor<T>& labels) {
  require(probs.rank() == 1 && probs.shape() == labels.shape(), ErrorKind::Shape, "bce_loss expects matching [N] inputs");
  if (probs.numel() == 0) throw Error(ErrorKind::EmptyBatch, "bce_loss on an empty batch");
  const T lo = static_cast<T>(kBceClamp);
  const auto p = ad::clamp(probs, lo, T(1) - lo);
  const auto one_minus_y = ad::add_scalar(ad::scale(labels, T(-1)), T(1));
  const auto one_minus_p = ad::add_scalar(ad::scale(p, T(-1)), T(1));
  const auto ll = ad::add(ad::mul(labels, ad::log(p)), ad::mul(one_minus_y, ad::log(one_minus_p)));
  return ad::scale(ad::mean(ll), T(-1));
}

// Dense segmentation helpers: probabilities [B,K,H,W] against 0/1 label maps
// flattened in (b, row, col) order.

template <class T>
ad::Tensor<T> one_hot(std::span<const std::uint8_t> labels, std::size_t classes) {
  std::vector<T> v(labels.size() * classes, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < classes, ErrorKind::Domain, "label value outside class range");
    v[i * classes + labels[i]] = T(1);
  }
  return ad::Tensor<T>({labels.size(), classes}, std::move(v));
}

template <class T>
ad::Tensor<T> dense_dmi_loss(const ad::Tensor<T>& probs, std::span<const std::uint8_t> labels) {
  const auto flat = ad::flatten_pixels(probs);
  require(flat.dim(0) == labels.size(), ErrorKind::Shape, "label count does not match pixel count");
  return dmi_loss(flat, one_hot<T>(labels, flat.dim(1)));
}

template <class T>
ad::Tensor<T> dense_bce_loss(const ad::Tensor<T>& probs, std::span<const std::uint8_t> labels) {
  const auto flat = ad::flatten_pixels(probs);
  require(flat.dim(0) == labels.size(), ErrorKind::Shape, "label count does not match pixel count");
  const auto positive = ad::reshape(ad::slice(flat, 1, 1, 2), {flat.dim(0)});
  std::vector<T> y(labels.begin(), labels.end());
  return bce_loss(positive, ad::Tensor<T>({labels.size()}, std::move(y)));
}

}  // namespace noisemap
