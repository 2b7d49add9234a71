#pragma once

// Encoder-decoder segmentation network with skip connections. Every 3x3
// convolution is followed by batch normalization (optional) and ReLU;
// downsampling is 2x2 max pooling, upsampling is nearest-neighbour 2x, and a
// 1x1 convolution produces per-class logits.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisemap/checkpoint.hpp"
#include "noisemap/ops.hpp"
#include "noisemap/optim.hpp"
#include "noisemap/rng.hpp"

namespace noisemap {

struct UNetConfig {
  std::size_t in_bands = 10;
  std::size_t classes = 2;
  std::size_t depth = 2;
  std::size_t base_channels = 8;
  bool batchnorm = true;
  std::uint64_t seed = 0;

  /// Channel width at a given level; widths double per level.
  std::size_t width(std::size_t level) const { return base_channels << level; }

  void validate() const {
    require(in_bands >= 1, ErrorKind::Config, "in_bands must be >= 1");
    require(classes >= 2, ErrorKind::Config, "classes must be >= 2");
    require(base_channels >= 1, ErrorKind::Config, "base_channels must be >= 1");
    require(depth <= 16, ErrorKind::Config, "depth too large");
  }

  void validate_tile(std::size_t tile) const {
    require(tile % (std::size_t{1} << depth) == 0, ErrorKind::Config,
            "tile size " + std::to_string(tile) + " not divisible by 2^depth = " + std::to_string(1u << depth));
  }
};

inline void to_json(nlohmann::json& j, const UNetConfig& c) {
  j = {{"in_bands", c.in_bands}, {"classes", c.classes},       {"depth", c.depth},
       {"base_channels", c.base_channels}, {"batchnorm", c.batchnorm}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, UNetConfig& c) {
  c.in_bands = j.value("in_bands", c.in_bands);
  c.classes = j.value("classes", c.classes);
  c.depth = j.value("depth", c.depth);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.batchnorm = j.value("batchnorm", c.batchnorm);
  c.seed = j.value("seed", c.seed);
}

/// Closed-form trainable parameter count. With w_l = base * 2^l, a 3x3 conv
/// from a to b channels holds 9ab weights plus 2b batchnorm affine terms (or b
/// biases without batchnorm):
///   encoder l in [0, depth]:  conv(in_l -> w_l) + conv(w_l -> w_l), in_0 = bands, in_l = w_{l-1}
///   decoder l in [0, depth):  conv(w_l + w_{l+1} -> w_l) + conv(w_l -> w_l)
///   head:                     (w_0 + 1) * classes
inline std::size_t unet_parameter_count(const UNetConfig& c) {
  const std::size_t per_channel = c.batchnorm ? 2 : 1;
  auto conv = [&](std::size_t a, std::size_t b) { return 9 * a * b + per_channel * b; };
  std::size_t total = 0;
  for (std::size_t l = 0; l <= c.depth; ++l)
    total += conv(l == 0 ? c.in_bands : c.width(l - 1), c.width(l)) + conv(c.width(l), c.width(l));
  for (std::size_t l = 0; l < c.depth; ++l)
    total += conv(c.width(l) + c.width(l + 1), c.width(l)) + conv(c.width(l), c.width(l));
  return total + (c.width(0) + 1) * c.classes;
}

template <class T>
class UNet {
 public:
  using Tensor = ad::Tensor<T>;
  using Parameter = ad::Parameter<T>;

  explicit UNet(const UNetConfig& config) : config_(config) {
    config_.validate();
    Engine engine(config_.seed);
    for (std::size_t l = 0; l <= config_.depth; ++l) {
      const std::size_t in = l == 0 ? config_.in_bands : config_.width(l - 1);
      encoders_.push_back(make_block("enc" + std::to_string(l), in, config_.width(l), engine));
    }
    for (std::size_t l = 0; l < config_.depth; ++l)
      decoders_.push_back(
          make_block("dec" + std::to_string(l), config_.width(l) + config_.width(l + 1), config_.width(l), engine));
    head_weight_.emplace("head.weight", kaiming({config_.classes, config_.width(0), 1, 1}, config_.width(0), engine));
    head_bias_.emplace("head.bias", Tensor::zeros({config_.classes}, true));
  }

  // Parameters are shared tensor handles; copying would alias them.
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;
  UNet(UNet&&) noexcept = default;
  UNet& operator=(UNet&&) noexcept = default;

  const UNetConfig& config() const { return config_; }

  /// Logits [B, classes, H, W] for a batch [B, in_bands, H, W].
  Tensor forward(const Tensor& x, ad::Mode mode) {
    require(x.rank() == 4 && x.dim(1) == config_.in_bands, ErrorKind::Shape,
            "model expects [B," + std::to_string(config_.in_bands) + ",H,W], got " + ad::shape_string(x.shape()));
    const std::size_t m = std::size_t{1} << config_.depth;
    require(x.dim(2) % m == 0 && x.dim(3) % m == 0, ErrorKind::Shape,
            "spatial dims must be divisible by " + std::to_string(m));

    std::vector<Tensor> skips;
    Tensor h = x;
    for (std::size_t l = 0; l < config_.depth; ++l) {
      h = apply(encoders_[l], h, mode);
      skips.push_back(h);
      h = ad::maxpool2d(h);
    }
    h = apply(encoders_[config_.depth], h, mode);
    for (std::size_t l = config_.depth; l-- > 0;) {
      h = ad::concat(skips[l], ad::upsample_nearest(h));
      h = apply(decoders_[l], h, mode);
    }
    return ad::conv2d(h, head_weight_->tensor, head_bias_->tensor);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    auto add_layer = [&](ConvLayer& c) {
      out.push_back(&c.weight);
      if (c.bias) out.push_back(&*c.bias);
      if (c.gamma) {
        out.push_back(&*c.gamma);
        out.push_back(&*c.beta);
      }
    };
    for (auto& b : encoders_) add_layer(b.first), add_layer(b.second);
    for (auto& b : decoders_) add_layer(b.first), add_layer(b.second);
    out.push_back(&*head_weight_);
    out.push_back(&*head_bias_);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->tensor.numel();
    return n;
  }

  /// Swaps the logits of two output classes by permuting the head.
  void swap_output_classes(std::size_t a, std::size_t b) {
    const std::size_t in = config_.width(0);
    auto w = head_weight_->tensor.mutable_values();
    auto bias = head_bias_->tensor.mutable_values();
    for (std::size_t i = 0; i < in; ++i) std::swap(w[a * in + i], w[b * in + i]);
    std::swap(bias[a], bias[b]);
    for (std::size_t i = 0; i < in; ++i) std::swap(head_weight_->velocity[a * in + i], head_weight_->velocity[b * in + i]);
    std::swap(head_bias_->velocity[a], head_bias_->velocity[b]);
  }

  /// Parameters plus batchnorm running statistics, in a stable order.
  std::vector<ad::TensorRecord> state() const {
    std::vector<ad::TensorRecord> out;
    auto rec = [&](const std::string& name, const ad::Shape& shape, std::span<const T> v) {
      out.push_back({name, shape, std::vector<float>(v.begin(), v.end())});
    };
    auto add_layer = [&](const ConvLayer& c) {
      rec(c.weight.name, c.weight.tensor.shape(), c.weight.tensor.values());
      if (c.bias) rec(c.bias->name, c.bias->tensor.shape(), c.bias->tensor.values());
      if (c.gamma) {
        rec(c.gamma->name, c.gamma->tensor.shape(), c.gamma->tensor.values());
        rec(c.beta->name, c.beta->tensor.shape(), c.beta->tensor.values());
        const std::string prefix = c.weight.name.substr(0, c.weight.name.size() - std::string(".weight").size());
        rec(prefix + ".running_mean", {c.bn.running_mean.size()}, c.bn.running_mean);
        rec(prefix + ".running_var", {c.bn.running_var.size()}, c.bn.running_var);
      }
    };
    for (const auto& b : encoders_) add_layer(b.first), add_layer(b.second);
    for (const auto& b : decoders_) add_layer(b.first), add_layer(b.second);
    rec(head_weight_->name, head_weight_->tensor.shape(), head_weight_->tensor.values());
    rec(head_bias_->name, head_bias_->tensor.shape(), head_bias_->tensor.values());
    return out;
  }

  void load_state(const std::vector<ad::TensorRecord>& records) {
    std::map<std::string, const ad::TensorRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    auto fetch = [&](const std::string& name, const ad::Shape& shape) -> const ad::TensorRecord& {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw Error(ErrorKind::Validation, "checkpoint lacks tensor '" + name + "'");
      require(it->second->shape == shape, ErrorKind::Shape, "checkpoint tensor '" + name + "' has wrong shape");
      return *it->second;
    };
    auto load_param = [&](Parameter& p) {
      const auto& r = fetch(p.name, p.tensor.shape());
      auto v = p.tensor.mutable_values();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(r.values[i]);
      std::fill(p.velocity.begin(), p.velocity.end(), T(0));
    };
    auto load_layer = [&](ConvLayer& c) {
      load_param(c.weight);
      if (c.bias) load_param(*c.bias);
      if (c.gamma) {
        load_param(*c.gamma);
        load_param(*c.beta);
        const std::string prefix = c.weight.name.substr(0, c.weight.name.size() - std::string(".weight").size());
        const auto& rm = fetch(prefix + ".running_mean", {c.bn.running_mean.size()});
        const auto& rv = fetch(prefix + ".running_var", {c.bn.running_var.size()});
        for (std::size_t i = 0; i < rm.values.size(); ++i) {
          c.bn.running_mean[i] = static_cast<T>(rm.values[i]);
          c.bn.running_var[i] = static_cast<T>(rv.values[i]);
        }
      }
    };
    for (auto& b : encoders_) load_layer(b.first), load_layer(b.second);
    for (auto& b : decoders_) load_layer(b.first), load_layer(b.second);
    load_param(*head_weight_);
    load_param(*head_bias_);
  }

 private:
  struct ConvLayer {
    Parameter weight;
    std::optional<Parameter> bias;
    std::optional<Parameter> gamma;
    std::optional<Parameter> beta;
    ad::BatchNormState<T> bn;
  };
  using Block = std::pair<ConvLayer, ConvLayer>;

  // Kaiming-uniform for ReLU: U(-b, b) with b = sqrt(6 / fan_in).
  static Tensor kaiming(ad::Shape shape, std::size_t fan_in, Engine& engine) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = static_cast<T>((2.0 * uniform01(engine) - 1.0) * bound);
    return Tensor(std::move(shape), std::move(v), true);
  }

  ConvLayer make_layer(const std::string& name, std::size_t in, std::size_t out, Engine& engine) {
    ConvLayer c{Parameter(name + ".weight", kaiming({out, in, 3, 3}, in * 9, engine)), std::nullopt, std::nullopt,
                std::nullopt, ad::BatchNormState<T>(config_.batchnorm ? out : 0)};
    if (config_.batchnorm) {
      c.gamma.emplace(name + ".gamma", Tensor::full({out}, T(1), true));
      c.beta.emplace(name + ".beta", Tensor::zeros({out}, true));
    } else {
      c.bias.emplace(name + ".bias", Tensor::zeros({out}, true));
    }
    return c;
  }

  Block make_block(const std::string& name, std::size_t in, std::size_t out, Engine& engine) {
    ConvLayer first = make_layer(name + ".conv1", in, out, engine);
    ConvLayer second = make_layer(name + ".conv2", out, out, engine);
    return {std::move(first), std::move(second)};
  }

  Tensor apply(ConvLayer& c, const Tensor& x, ad::Mode mode) {
    Tensor h = c.bias ? ad::conv2d(x, c.weight.tensor, c.bias->tensor) : ad::conv2d(x, c.weight.tensor);
    if (c.gamma) h = ad::batchnorm2d(h, c.gamma->tensor, c.beta->tensor, c.bn, mode);
    return ad::relu(h);
  }

  Tensor apply(Block& b, const Tensor& x, ad::Mode mode) { return apply(b.second, apply(b.first, x, mode), mode); }

  UNetConfig config_;
  std::vector<Block> encoders_;
  std::vector<Block> decoders_;
  std::optional<Parameter> head_weight_;
  std::optional<Parameter> head_bias_;
};

}  // namespace noisemap
