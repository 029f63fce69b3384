#pragma once

// Small 2D encoder-decoder with optional deep-supervision heads.
//
// Level d runs at H/2^d with base_channels * 2^d features. The encoder
// downsamples with stride-2 convolutions; the decoder convolves at the
// coarser level, upsamples (nearest), adds the skip connection and refines.
// Head d is a 1x1 projection to num_classes logits at level d.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "condistfl/checkpoint.hpp"
#include "condistfl/conv.hpp"
#include "condistfl/losses.hpp"
#include "condistfl/ops.hpp"

namespace condistfl {

struct SegNetConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 8;
  std::size_t num_classes = 8;
  std::size_t in_channels = 1;
  bool deep_supervision = true;

  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  std::size_t head_count() const { return deep_supervision ? depth : 1; }

  void validate() const {
    if (depth < 1 || depth > 6) throw ValueError("model depth must lie in [1, 6]");
    if (base_channels < 1) throw ValueError("model base_channels must be positive");
    if (num_classes < 2) throw ValueError("model needs at least two classes");
    if (in_channels < 1) throw ValueError("model needs at least one input channel");
  }

  bool operator==(const SegNetConfig&) const = default;
};

/// Per-head supervision weights proportional to 2^-d, normalised to sum 1.
inline std::vector<double> deep_supervision_weights(std::size_t heads) {
  if (heads < 1) throw ValueError("deep supervision needs at least one head");
  std::vector<double> w(heads);
  double total = 0.0;
  for (std::size_t d = 0; d < heads; ++d) total += (w[d] = std::ldexp(1.0, -static_cast<int>(d)));
  for (auto& v : w) v /= total;
  return w;
}

/// Nearest-neighbour downsampling of [B,H,W] labels by 2^level (top-left sample of each cell).
inline IndexTensor downsample_labels(const IndexTensor& label, std::size_t level) {
  if (level == 0) return label;
  if (label.rank() != 3) throw ShapeError("downsample_labels: need [B,H,W], got " + to_string(label.shape()));
  const std::size_t f = std::size_t{1} << level;
  const std::size_t batch = label.dim(0), h = label.dim(1), w = label.dim(2);
  if (h % f || w % f) throw ShapeError("downsample_labels: extent not divisible by " + std::to_string(f));
  IndexTensor out(Shape{batch, h / f, w / f});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < h / f; ++y)
      for (std::size_t x = 0; x < w / f; ++x) out[(b * (h / f) + y) * (w / f) + x] = label[(b * h + y * f) * w + x * f];
  return out;
}

template <typename T>
class SegNet {
 public:
  using Parameter = std::pair<std::string, Tensor<T>>;

  explicit SegNet(SegNetConfig config, std::uint64_t seed = 0) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const auto& c = config_;
    add_conv("enc0.conv", c.in_channels, c.channels_at(0), 3, rng);
    for (std::size_t d = 1; d < c.depth; ++d) {
      add_conv("enc" + std::to_string(d) + ".down", c.channels_at(d - 1), c.channels_at(d), 3, rng);
      add_conv("enc" + std::to_string(d) + ".conv", c.channels_at(d), c.channels_at(d), 3, rng);
    }
    for (std::size_t d = c.depth - 1; d-- > 0;) {
      add_conv("dec" + std::to_string(d) + ".up", c.channels_at(d + 1), c.channels_at(d), 3, rng);
      add_conv("dec" + std::to_string(d) + ".conv", c.channels_at(d), c.channels_at(d), 3, rng);
    }
    for (std::size_t d = 0; d < c.head_count(); ++d) {
      add_conv("head" + std::to_string(d), c.channels_at(d), c.num_classes, 1, rng);
    }
  }

  const SegNetConfig& config() const { return config_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter>& parameters() { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  const Tensor<T>& parameter(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw UnknownParameterError("no parameter named " + name);
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : params_) t.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  /// Logits per head, full resolution first.
  std::vector<Tensor<T>> forward(const Tensor<T>& image) const {
    const auto& c = config_;
    if (image.rank() != 4 || image.dim(1) != c.in_channels) {
      throw ShapeError("SegNet::forward: expected [B," + std::to_string(c.in_channels) + ",H,W], got " +
                       to_string(image.shape()));
    }
    const std::size_t factor = std::size_t{1} << c.depth;
    if (image.dim(2) % factor || image.dim(3) % factor) {
      throw ShapeError("SegNet::forward: spatial extent " + to_string(image.shape()) + " not divisible by " +
                       std::to_string(factor));
    }
    std::vector<Tensor<T>> skips;
    skips.push_back(conv_block("enc0.conv", image, 1));
    for (std::size_t d = 1; d < c.depth; ++d) {
      auto down = conv_block("enc" + std::to_string(d) + ".down", skips.back(), 2);
      skips.push_back(conv_block("enc" + std::to_string(d) + ".conv", down, 1));
    }
    std::vector<Tensor<T>> levels(c.depth);
    levels[c.depth - 1] = skips.back();
    for (std::size_t d = c.depth - 1; d-- > 0;) {
      auto up = upsample2x(conv("dec" + std::to_string(d) + ".up", levels[d + 1], 1));
      auto merged = silu(up + skips[d]);
      levels[d] = conv_block("dec" + std::to_string(d) + ".conv", merged, 1);
    }
    std::vector<Tensor<T>> heads;
    for (std::size_t d = 0; d < c.head_count(); ++d) heads.push_back(conv("head" + std::to_string(d), levels[d], 1));
    return heads;
  }

  Checkpoint to_checkpoint(std::uint32_t round = 0, std::uint64_t step = 0) const {
    Checkpoint ckpt;
    ckpt.round = round;
    ckpt.step = step;
    for (const auto& [name, t] : params_) {
      CheckpointEntry e{name, t.shape(), std::vector<float>(t.numel())};
      for (std::size_t i = 0; i < t.numel(); ++i) e.data[i] = static_cast<float>(t[i]);
      ckpt.entries.push_back(std::move(e));
    }
    return ckpt;
  }

  /// Copies values in place; names must match exactly and every parameter must be present.
  void load(const Checkpoint& ckpt) {
    for (const auto& e : ckpt.entries) {
      auto* target = find(e.name);
      if (!target) throw UnknownParameterError("checkpoint parameter '" + e.name + "' does not exist in the model");
      if (target->shape() != e.shape) {
        throw ShapeError("checkpoint parameter '" + e.name + "' has shape " + to_string(e.shape) + ", model expects " +
                         to_string(target->shape()));
      }
    }
    for (auto& [name, t] : params_) {
      const auto* e = ckpt.find(name);
      if (!e) throw FormatError("checkpoint is missing parameter '" + name + "'");
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(e->data[i]);
    }
  }

 private:
  template <typename Rng>
  void add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> weight(Shape{out, in, k, k});
    for (auto& v : weight.data()) v = static_cast<T>(dist(rng));
    weight.set_requires_grad(true);
    Tensor<T> bias(Shape{out});
    bias.set_requires_grad(true);
    params_.emplace_back(name + ".weight", weight);
    params_.emplace_back(name + ".bias", bias);
  }

  Tensor<T>* find(const std::string& name) {
    for (auto& [n, t] : params_)
      if (n == name) return &t;
    return nullptr;
  }

  Tensor<T> conv(const std::string& name, const Tensor<T>& x, std::size_t stride) const {
    return bias_add(conv2d(x, parameter(name + ".weight"), stride, Padding::same), parameter(name + ".bias"));
  }

  Tensor<T> conv_block(const std::string& name, const Tensor<T>& x, std::size_t stride) const {
    return silu(conv(name, x, stride));
  }

  SegNetConfig config_;
  std::vector<Parameter> params_;
};

/// Deep-supervised loss over all heads: sum_d lambda_d * L_sup(head_d, labels downsampled to head d).
template <typename T>
Tensor<T> deep_supervised_loss(const std::vector<Tensor<T>>& heads, const IndexTensor& label, const ClassTopology& topo,
                               LossMode mode, double epsilon) {
  const auto weights = deep_supervision_weights(heads.size());
  Tensor<T> total;
  for (std::size_t d = 0; d < heads.size(); ++d) {
    auto term = supervised_loss(heads[d], downsample_labels(label, d), topo, mode, epsilon) * static_cast<T>(weights[d]);
    total = total.defined() ? total + term : term;
  }
  return total;
}

}  // namespace condistfl
