#pragma once

// Differentiable primitives. No broadcasting: binary elementwise operations
// require identical shapes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "noisemap/tensor.hpp"

namespace noisemap::ad {

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::Shape,
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  require(a.rank() == rank, ErrorKind::Shape,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(a.shape()));
}

template <class T>
void accumulate(Node<T>& parent, const std::vector<T>& g) {
  if (!parent.requires_grad) return;
  auto& dst = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  return make_result<T>(a.shape(), std::move(v), {a.node(), b.node()}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], self.grad);
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  return make_result<T>(a.shape(), std::move(v), {a.node(), b.node()}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    auto& b = *self.parents[1];
    if (!b.requires_grad) return;
    auto& g = b.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  return make_result<T>(a.shape(), std::move(v), {a.node(), b.node()}, [](Node<T>& self) {
    auto& a = *self.parents[0];
    auto& b = *self.parents[1];
    if (a.requires_grad) {
      auto& g = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.value[i];
    }
    if (b.requires_grad) {
      auto& g = b.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * s;
  return make_result<T>(a.shape(), std::move(v), {a.node()}, [s](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + s;
  return make_result<T>(a.shape(), std::move(v), {a.node()},
                        [](Node<T>& self) { detail::accumulate(*self.parents[0], self.grad); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] > T(0) ? a.values()[i] : T(0);
  return make_result<T>(a.shape(), std::move(v), {a.node()}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(a.values()[i]);
  return make_result<T>(a.shape(), std::move(v), {a.node()}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / p.value[i];
  });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::abs(a.values()[i]);
  return make_result<T>(a.shape(), std::move(v), {a.node()}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += p.value[i] > T(0) ? self.grad[i] : (p.value[i] < T(0) ? -self.grad[i] : T(0));
  });
}

/// Clamp into [lo, hi]; the gradient is zero wherever the bound is active.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(a.values()[i], lo, hi);
  return make_result<T>(a.shape(), std::move(v), {a.node()}, [lo, hi](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value[i] >= lo && p.value[i] <= hi) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
  return clamp(a, lo, std::numeric_limits<T>::infinity());
}

// ---------------------------------------------------------------------------
// Reductions and reshaping
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.values()) s += x;
  return make_result<T>(Shape{}, {s}, {a.node()}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  require(a.numel() > 0, ErrorKind::Shape, "mean of empty tensor");
  double s = 0;
  for (T x : a.values()) s += static_cast<double>(x);
  const std::size_t n = a.numel();
  return make_result<T>(Shape{}, {static_cast<T>(s / static_cast<double>(n))}, {a.node()}, [n](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const T d = self.grad[0] / static_cast<T>(n);
    for (auto& x : g) x += d;
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(numel(shape) == a.numel(), ErrorKind::Shape,
          "reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  std::vector<T> v(a.values().begin(), a.values().end());
  return make_result<T>(std::move(shape), std::move(v), {a.node()},
                        [](Node<T>& self) { detail::accumulate(*self.parents[0], self.grad); });
}

/// Half-open slice [start, end) along one axis.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t end) {
  require(axis < a.rank(), ErrorKind::Shape, "slice: axis out of range");
  require(start < end && end <= a.dim(axis), ErrorKind::Shape, "slice: bad range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t len = a.dim(axis), k = end - start;
  Shape shape = a.shape();
  shape[axis] = k;
  std::vector<T> v(outer * k * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>((o * len + start) * inner), k * inner,
                v.begin() + static_cast<std::ptrdiff_t>(o * k * inner));
  return make_result<T>(std::move(shape), std::move(v), {a.node()}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < k * inner; ++i) g[(o * len + start) * inner + i] += self.grad[o * k * inner + i];
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> v(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j * m + i] = a.values()[i * n + j];
  return make_result<T>(Shape{n, m}, std::move(v), {a.node()}, [m, n](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

/// [N,C,H,W] -> [N*H*W, C]: one row per pixel, channels as columns.
template <class T>
Tensor<T> flatten_pixels(const Tensor<T>& a) {
  detail::require_rank(a, 4, "flatten_pixels");
  const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<T> v(a.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t p = 0; p < hw; ++p) v[(b * hw + p) * c + k] = a.values()[(b * c + k) * hw + p];
  return make_result<T>(Shape{n * hw, c}, std::move(v), {a.node()}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t p = 0; p < hw; ++p) g[(b * c + k) * hw + p] += self.grad[(b * hw + p) * c + k];
  });
}

/// Concatenation of two [N,C,H,W] tensors along the channel axis.
template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 4, "concat");
  detail::require_rank(b, 4, "concat");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3), ErrorKind::Shape,
          "concat: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1) * a.dim(2) * a.dim(3), cb = b.dim(1) * b.dim(2) * b.dim(3);
  std::vector<T> v(a.numel() + b.numel());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(i * ca), ca,
                v.begin() + static_cast<std::ptrdiff_t>(i * (ca + cb)));
    std::copy_n(b.values().begin() + static_cast<std::ptrdiff_t>(i * cb), cb,
                v.begin() + static_cast<std::ptrdiff_t>(i * (ca + cb) + ca));
  }
  return make_result<T>(Shape{n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)}, std::move(v), {a.node(), b.node()},
                        [=](Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          for (std::size_t i = 0; i < n; ++i) {
                            if (pa.requires_grad) {
                              auto& g = pa.ensure_grad();
                              for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += self.grad[i * (ca + cb) + j];
                            }
                            if (pb.requires_grad) {
                              auto& g = pb.ensure_grad();
                              for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += self.grad[i * (ca + cb) + ca + j];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  require(a.dim(1) == b.dim(0), ErrorKind::Shape,
          "matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> v(m * n, T(0));
  const auto A = a.values();
  const auto B = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) v[i * n + j] += aip * B[p * n + j];
    }
  return make_result<T>(Shape{m, n}, std::move(v), {a.node(), b.node()}, [=](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& G = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s = 0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * pb.value[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = pa.value[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

/// Determinant of a 2x2 matrix; d det / dA = [[d, -c], [-b, a]].
template <class T>
Tensor<T> det2x2(const Tensor<T>& a) {
  require(a.shape() == Shape{2, 2}, ErrorKind::Shape, "det2x2: expected (2,2), got " + shape_string(a.shape()));
  const auto m = a.values();
  const T d = m[0] * m[3] - m[1] * m[2];
  return make_result<T>(Shape{}, {d}, {a.node()}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    const T s = self.grad[0];
    g[0] += s * p.value[3];
    g[1] -= s * p.value[2];
    g[2] -= s * p.value[1];
    g[3] += s * p.value[0];
  });
}

// ---------------------------------------------------------------------------
// Image operations on [N,C,H,W]
// ---------------------------------------------------------------------------

/// Stride-1 convolution with "same" zero padding; kernel [O,C,k,k] with k odd.
/// `bias` may be an empty tensor.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d weight");
  require(w.dim(1) == x.dim(1), ErrorKind::Shape,
          "conv2d: input channels " + std::to_string(x.dim(1)) + " vs kernel " + shape_string(w.shape()));
  require(w.dim(2) == w.dim(3) && w.dim(2) % 2 == 1, ErrorKind::Shape, "conv2d: kernel must be square and odd");
  const bool has_bias = bias.numel() > 0;
  if (has_bias) require(bias.shape() == Shape{w.dim(0)}, ErrorKind::Shape, "conv2d: bias shape");

  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  const auto pad = static_cast<std::ptrdiff_t>(K / 2);
  const std::size_t HW = H * W;

  // Valid output range [lo, hi) for a kernel offset d along an axis of length L.
  auto range = [](std::ptrdiff_t d, std::size_t L) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -d);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(L), static_cast<std::ptrdiff_t>(L) - d);
    return std::pair{lo, hi};
  };

  std::vector<T> out(N * O * HW, T(0));
  const T* X = x.values().data();
  const T* Wt = w.values().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      T* dst = out.data() + (n * O + o) * HW;
      if (has_bias) std::fill_n(dst, HW, bias.values()[o]);
      for (std::size_t c = 0; c < C; ++c) {
        const T* src = X + (n * C + c) * HW;
        for (std::size_t ky = 0; ky < K; ++ky) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
          const auto [y0, y1] = range(dy, H);
          for (std::size_t kx = 0; kx < K; ++kx) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const auto [x0, x1] = range(dx, W);
            const T wv = Wt[((o * C + c) * K + ky) * K + kx];
            for (std::ptrdiff_t yy = y0; yy < y1; ++yy) {
              T* drow = dst + yy * static_cast<std::ptrdiff_t>(W);
              const T* srow = src + (yy + dy) * static_cast<std::ptrdiff_t>(W) + dx;
              for (std::ptrdiff_t xx = x0; xx < x1; ++xx) drow[xx] += wv * srow[xx];
            }
          }
        }
      }
    }

  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_result<T>(Shape{N, O, H, W}, std::move(out), std::move(parents), [=](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const T* G = self.grad.data();
    if (has_bias && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->ensure_grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          double s = 0;
          const T* g = G + (n * O + o) * HW;
          for (std::size_t i = 0; i < HW; ++i) s += g[i];
          gb[o] += static_cast<T>(s);
        }
    }
    if (pw.requires_grad) {
      auto& gw = pw.ensure_grad();
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < K; ++ky) {
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const auto [y0, y1] = range(dy, H);
            for (std::size_t kx = 0; kx < K; ++kx) {
              const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
              const auto [x0, x1] = range(dx, W);
              double acc = 0;
              for (std::size_t n = 0; n < N; ++n) {
                const T* g = G + (n * O + o) * HW;
                const T* src = px.value.data() + (n * C + c) * HW;
                for (std::ptrdiff_t yy = y0; yy < y1; ++yy) {
                  const T* grow = g + yy * static_cast<std::ptrdiff_t>(W);
                  const T* srow = src + (yy + dy) * static_cast<std::ptrdiff_t>(W) + dx;
                  T row = 0;
                  for (std::ptrdiff_t xx = x0; xx < x1; ++xx) row += grow[xx] * srow[xx];
                  acc += row;
                }
              }
              gw[((o * C + c) * K + ky) * K + kx] += static_cast<T>(acc);
            }
          }
    }
    if (px.requires_grad) {
      auto& gx = px.ensure_grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const T* g = G + (n * O + o) * HW;
          for (std::size_t c = 0; c < C; ++c) {
            T* dst = gx.data() + (n * C + c) * HW;
            for (std::size_t ky = 0; ky < K; ++ky) {
              const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
              const auto [y0, y1] = range(dy, H);
              for (std::size_t kx = 0; kx < K; ++kx) {
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                const auto [x0, x1] = range(dx, W);
                const T wv = pw.value[((o * C + c) * K + ky) * K + kx];
                for (std::ptrdiff_t yy = y0; yy < y1; ++yy) {
                  const T* grow = g + yy * static_cast<std::ptrdiff_t>(W);
                  T* drow = dst + (yy + dy) * static_cast<std::ptrdiff_t>(W) + dx;
                  for (std::ptrdiff_t xx = x0; xx < x1; ++xx) drow[xx] += wv * grow[xx];
                }
              }
            }
          }
        }
    }
  });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  return conv2d(x, w, Tensor<T>(Shape{0}, {}));
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in row-major order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  detail::require_rank(x, 4, "maxpool2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, ErrorKind::Shape, "maxpool2d: odd spatial dims " + shape_string(x.shape()));
  const std::size_t h = H / 2, w = W / 2;
  std::vector<T> v(N * C * h * w);
  std::vector<std::size_t> argmax(v.size());
  const auto X = x.values();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        std::size_t best = nc * H * W + (2 * i) * W + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = nc * H * W + (2 * i + di) * W + 2 * j + dj;
            if (X[idx] > X[best]) best = idx;
          }
        const std::size_t o = (nc * h + i) * w + j;
        v[o] = X[best];
        argmax[o] = best;
      }
  return make_result<T>(Shape{N, C, h, w}, std::move(v), {x.node()},
                        [argmax = std::move(argmax)](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                        });
}

/// Nearest-neighbour 2x upsampling.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x) {
  detail::require_rank(x, 4, "upsample_nearest");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t H2 = 2 * H, W2 = 2 * W;
  std::vector<T> v(N * C * H2 * W2);
  const auto X = x.values();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < H2; ++i)
      for (std::size_t j = 0; j < W2; ++j) v[(nc * H2 + i) * W2 + j] = X[(nc * H + i / 2) * W + j / 2];
  return make_result<T>(Shape{N, C, H2, W2}, std::move(v), {x.node()}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t i = 0; i < H2; ++i)
        for (std::size_t j = 0; j < W2; ++j) g[(nc * H + i / 2) * W + j / 2] += self.grad[(nc * H2 + i) * W2 + j];
  });
}

/// Softmax along axis 1 of a [N,K] or [N,C,H,W] tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  require(x.rank() == 2 || x.rank() == 4, ErrorKind::Shape, "softmax: expected rank 2 or 4");
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  std::vector<T> v(x.numel());
  const auto X = x.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < inner; ++p) {
      const std::size_t base = n * C * inner + p;
      T mx = X[base];
      for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, X[base + c * inner]);
      T s = 0;
      for (std::size_t c = 0; c < C; ++c) s += (v[base + c * inner] = std::exp(X[base + c * inner] - mx));
      for (std::size_t c = 0; c < C; ++c) v[base + c * inner] /= s;
    }
  return make_result<T>(x.shape(), std::move(v), {x.node()}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& y = self.value;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t base = n * C * inner + p;
        T dot = 0;
        for (std::size_t c = 0; c < C; ++c) dot += self.grad[base + c * inner] * y[base + c * inner];
        for (std::size_t c = 0; c < C; ++c)
          g[base + c * inner] += y[base + c * inner] * (self.grad[base + c * inner] - dot);
      }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class Mode { Train, Eval };

template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  explicit BatchNormState(std::size_t channels = 0) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel normalization of [N,C,H,W]. Train mode normalizes with batch
/// statistics (biased variance) and updates the running estimates with the
/// unbiased variance; eval mode applies the frozen running statistics.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      Mode mode) {
  detail::require_rank(x, 4, "batchnorm2d");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, ErrorKind::Shape, "batchnorm2d: affine shape");
  require(state.running_mean.size() == C, ErrorKind::Shape, "batchnorm2d: state channel count");
  const std::size_t M = N * HW;
  const auto X = x.values();

  std::vector<T> xhat(x.numel());
  std::vector<T> invstd(C);
  std::vector<T> out(x.numel());
  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (mode == Mode::Train) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) s += X[(n * C + c) * HW + p];
      mu = s / static_cast<double>(M);
      double ss = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) {
          const double d = X[(n * C + c) * HW + p] - mu;
          ss += d * d;
        }
      var = ss / static_cast<double>(M);
      const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
      state.running_mean[c] = static_cast<T>((1 - state.momentum) * state.running_mean[c] + state.momentum * mu);
      state.running_var[c] = static_cast<T>((1 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
    invstd[c] = is;
    const T g = gamma.values()[c], b = beta.values()[c];
    const T m = static_cast<T>(mu);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        const std::size_t i = (n * C + c) * HW + p;
        xhat[i] = (X[i] - m) * is;
        out[i] = g * xhat[i] + b;
      }
  }

  const bool train = mode == Mode::Train;
  return make_result<T>(x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
                        [=, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& self) {
                          auto& px = *self.parents[0];
                          auto& pg = *self.parents[1];
                          auto& pb = *self.parents[2];
                          const auto& G = self.grad;
                          for (std::size_t c = 0; c < C; ++c) {
                            double sum_g = 0, sum_gx = 0;
                            for (std::size_t n = 0; n < N; ++n)
                              for (std::size_t p = 0; p < HW; ++p) {
                                const std::size_t i = (n * C + c) * HW + p;
                                sum_g += G[i];
                                sum_gx += static_cast<double>(G[i]) * xhat[i];
                              }
                            if (pg.requires_grad) pg.ensure_grad()[c] += static_cast<T>(sum_gx);
                            if (pb.requires_grad) pb.ensure_grad()[c] += static_cast<T>(sum_g);
                            if (!px.requires_grad) continue;
                            auto& gx = px.ensure_grad();
                            const T gamma_c = pg.value[c];
                            const T k = gamma_c * invstd[c];
                            if (train) {
                              const T mg = static_cast<T>(sum_g / static_cast<double>(M));
                              const T mgx = static_cast<T>(sum_gx / static_cast<double>(M));
                              for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t p = 0; p < HW; ++p) {
                                  const std::size_t i = (n * C + c) * HW + p;
                                  gx[i] += k * (G[i] - mg - xhat[i] * mgx);
                                }
                            } else {
                              for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t p = 0; p < HW; ++p) {
                                  const std::size_t i = (n * C + c) * HW + p;
                                  gx[i] += k * G[i];
                                }
                            }
                          }
                        });
}

}  // namespace noisemap::ad
