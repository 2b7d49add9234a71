#pragma once

#include <span>
#include <string>
#include <vector>

#include "noisemap/tensor.hpp"

namespace noisemap::ad {

/// A trainable leaf tensor plus its momentum buffer.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::vector<T> velocity;

  Parameter(std::string n, Tensor<T> t) : name(std::move(n)), tensor(std::move(t)), velocity(tensor.numel(), T(0)) {}
};

/// Classic momentum: v <- momentum * v + grad; p <- p - lr * v.
/// Parameters that never received a gradient are treated as having zero gradient.
template <class T>
void sgd_step(std::span<Parameter<T>* const> params, T lr, T momentum) {
  for (Parameter<T>* p : params) {
    auto values = p->tensor.mutable_values();
    const auto grad = p->tensor.grad();
    const bool has = p->tensor.has_grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      p->velocity[i] = momentum * p->velocity[i] + (has ? grad[i] : T(0));
      values[i] -= lr * p->velocity[i];
    }
  }
}

template <class T>
void zero_grad(std::span<Parameter<T>* const> params) {
  for (Parameter<T>* p : params) p->tensor.zero_grad();
}

}  // namespace noisemap::ad
